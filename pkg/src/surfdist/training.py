"""Joint contrastive training of the key and query models.

Per step and crop: pixels are drawn uniformly from the full object mask, their
ground-truth object coordinates give the positive keys, and coordinates drawn
uniformly from the surface give the negatives. The mask head is trained with
binary cross-entropy on pixels drawn uniformly from the whole crop.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from surfdist.errors import Diverged, EmptyMask, InvalidConfig, NonFinite
from surfdist.geometry.sampling import SurfaceSampleSet
from surfdist.siren import (AdamState, SirenMlp, adam_step, load_siren,
                            save_siren, siren_backward, siren_forward,
                            siren_init)

log = logging.getLogger(__name__)


# --- losses -------------------------------------------------------------------------

def infonce_loss(queries, positive_keys, negative_keys):
    """InfoNCE with the positive included in the denominator.

    Shapes: queries and positive_keys ``(..., N, E)``, negative_keys ``(..., K, E)``
    with matching leading dims. Returns ``(loss, d_queries, d_positive, d_negative)``
    where the loss is the mean over all queries.
    """
    q = np.asarray(queries, dtype=np.float64)
    kp = np.asarray(positive_keys, dtype=np.float64)
    kn = np.asarray(negative_keys, dtype=np.float64)
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(kp)) and np.all(np.isfinite(kn))):
        raise NonFinite("InfoNCE inputs must be finite")
    pos = np.sum(q * kp, axis=-1)                       # (..., N)
    neg = q @ np.swapaxes(kn, -1, -2)                   # (..., N, K)
    m = np.maximum(pos, neg.max(axis=-1))
    e_pos = np.exp(pos - m)
    e_neg = np.exp(neg - m[..., None])
    z = e_pos + e_neg.sum(axis=-1)
    lse = m + np.log(z)
    count = pos.size
    loss = float(np.sum(lse - pos) / count)
    p_pos = e_pos / z
    p_neg = e_neg / z[..., None]
    w_pos = ((p_pos - 1.0) / count)[..., None]
    w_neg = p_neg / count
    d_q = w_pos * kp + w_neg @ kn
    d_kp = w_pos * q
    d_kn = np.swapaxes(w_neg, -1, -2) @ q
    return loss, d_q, d_kp, d_kn


def mask_bce_loss(logits, labels):
    """Mean binary cross-entropy on logits. Returns ``(loss, d_logits)``."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))
    return loss, (sig - y) / z.size


# --- models ---------------------------------------------------------------------------

@dataclass(eq=False)
class EmbeddingModels:
    """Key model g (object coords → keys) and query model f (features → queries + mask logit).

    Object coordinates are divided by ``coord_scale`` before entering the key model.
    """

    key_model: SirenMlp
    query_model: SirenMlp
    coord_scale: float

    @property
    def embed_dim(self) -> int:
        return self.key_model.out_dim

    def keys(self, coords) -> np.ndarray:
        return self.key_model(np.asarray(coords, dtype=np.float64) / self.coord_scale)

    def query(self, features) -> np.ndarray:
        return self.query_model(np.asarray(features, dtype=np.float64))

    def copy(self) -> EmbeddingModels:
        return EmbeddingModels(self.key_model.copy(), self.query_model.copy(), self.coord_scale)

    def save(self, directory, prefix: str = "") -> None:
        os.makedirs(directory, exist_ok=True)
        save_siren(self.key_model, os.path.join(directory, f"{prefix}key.smlp"))
        save_siren(self.query_model, os.path.join(directory, f"{prefix}query.smlp"))
        with open(os.path.join(directory, f"{prefix}models.json"), "w") as fh:
            json.dump({"coord_scale": self.coord_scale}, fh)

    @classmethod
    def load(cls, directory, prefix: str = "") -> EmbeddingModels:
        with open(os.path.join(directory, f"{prefix}models.json")) as fh:
            meta = json.load(fh)
        return cls(load_siren(os.path.join(directory, f"{prefix}key.smlp")),
                   load_siren(os.path.join(directory, f"{prefix}query.smlp")),
                   float(meta["coord_scale"]))


def init_models(cfg: TrainConfig, feature_dim: int, coord_scale: float) -> EmbeddingModels:
    key = siren_init(3, cfg.key_hidden, cfg.embed_dim, cfg.omega0, rng_seed=cfg.rng_seed)
    query = siren_init(feature_dim, cfg.query_hidden, cfg.embed_dim + 1, cfg.omega0,
                       rng_seed=cfg.rng_seed + 1)
    return EmbeddingModels(key, query, float(coord_scale))


# --- config ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    embed_dim: int = 12
    pairs_per_crop: int = 256
    negatives_per_crop: int = 256
    mask_pixels_per_crop: int = 256
    batch_size: int = 8
    lr_query: float = 3e-4
    lr_key: float = 3e-5
    warmup_steps: int = 2000
    epochs: int = 1
    max_steps: int = 0
    rng_seed: int = 0
    feature_noise: float = 0.05
    noise_prob: float = 0.5
    omega0: float = 30.0
    key_hidden: tuple = (64, 64, 64)
    query_hidden: tuple = (128, 128)

    def __post_init__(self):
        counts = ("embed_dim", "pairs_per_crop", "negatives_per_crop", "mask_pixels_per_crop", "batch_size")
        for name in counts:
            if int(getattr(self, name)) < 1:
                raise InvalidConfig(f"{name} must be >= 1")
        if self.epochs < 0 or self.max_steps < 0:
            raise InvalidConfig("epochs and max_steps must be non-negative")
        self.key_hidden = tuple(int(x) for x in self.key_hidden)
        self.query_hidden = tuple(int(x) for x in self.query_hidden)


def parse_value(text: str, like):
    """Convert config text to the type of the default ``like``."""
    if isinstance(like, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise InvalidConfig(f"not a boolean: {text!r}")
    if isinstance(like, tuple):
        return tuple(int(x) for x in text.replace(",", " ").split())
    try:
        if isinstance(like, int):
            value = float(text)
            if value != int(value):
                raise ValueError
            return int(value)
        if isinstance(like, float):
            return float(text)
    except ValueError as exc:
        raise InvalidConfig(f"cannot parse {text!r}") from exc
    return text


def read_kv_file(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidConfig(f"{path}:{lineno}: expected key=value")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def config_from_mapping(cls, mapping: dict, strict: bool = True):
    """Build a config dataclass from string values; unknown keys are rejected when strict."""
    defaults = cls()
    names = {f.name for f in fields(cls)}
    kwargs = {}
    for k, v in mapping.items():
        if k not in names:
            if strict:
                raise InvalidConfig(f"unknown config key {k!r} for {cls.__name__}")
            continue
        kwargs[k] = parse_value(v, getattr(defaults, k)) if isinstance(v, str) else v
    return cls(**kwargs)


def read_train_config(path) -> TrainConfig:
    return config_from_mapping(TrainConfig, read_kv_file(path))


# --- data -------------------------------------------------------------------------------

@dataclass(eq=False)
class TrainingCrop:
    """Compact per-crop training data."""

    features: np.ndarray      # (H*W, F) float32
    coords: np.ndarray        # (H*W, 3) float32, NaN outside the full mask
    full_mask: np.ndarray     # (H*W,) bool
    mask_pixels: np.ndarray   # flat indices of full-mask pixels
    shape: tuple

    @classmethod
    def from_crop(cls, crop) -> TrainingCrop:
        H, W = crop.full_mask.shape
        mask = crop.full_mask.reshape(-1)
        return cls(np.asarray(crop.feature_image, dtype=np.float32).reshape(H * W, -1),
                   np.asarray(crop.coord_image, dtype=np.float32).reshape(H * W, 3),
                   mask.copy(), np.flatnonzero(mask), (H, W))


@dataclass(eq=False)
class TrainingBatch:
    pixels: np.ndarray          # (C, P) flat pixel indices inside the full mask
    positives: np.ndarray       # (C, P, 3)
    negatives: np.ndarray       # (C, K, 3)
    features: np.ndarray        # (C, P, F)
    mask_pixels: np.ndarray     # (C, M)
    mask_features: np.ndarray   # (C, M, F)
    mask_labels: np.ndarray     # (C, M) bool


def sample_batch(crops, surface: SurfaceSampleSet, cfg: TrainConfig, rng) -> TrainingBatch:
    """Draw pairs, negatives and mask pixels for a list of crops."""
    crops = [c if isinstance(c, TrainingCrop) else TrainingCrop.from_crop(c) for c in crops]
    C, P, K, M = len(crops), cfg.pairs_per_crop, cfg.negatives_per_crop, cfg.mask_pixels_per_crop
    F = crops[0].features.shape[1]
    pix = np.empty((C, P), dtype=np.int64)
    mpix = np.empty((C, M), dtype=np.int64)
    pos = np.empty((C, P, 3))
    feats = np.empty((C, P, F))
    mfeats = np.empty((C, M, F))
    mlab = np.empty((C, M), dtype=bool)
    for i, crop in enumerate(crops):
        if len(crop.mask_pixels) == 0:
            raise EmptyMask("crop has an empty full mask")
        pix[i] = crop.mask_pixels[rng.integers(0, len(crop.mask_pixels), P)]
        npx = crop.full_mask.size
        mpix[i] = rng.integers(0, npx, M)
        pos[i] = crop.coords[pix[i]]
        feats[i] = crop.features[pix[i]]
        mfeats[i] = crop.features[mpix[i]]
        mlab[i] = crop.full_mask[mpix[i]]
        if cfg.feature_noise > 0 and rng.random() < cfg.noise_prob:
            feats[i] += rng.normal(0.0, cfg.feature_noise, feats[i].shape)
            mfeats[i] += rng.normal(0.0, cfg.feature_noise, mfeats[i].shape)
    neg = surface.points[rng.integers(0, len(surface), (C, K))]
    return TrainingBatch(pix, pos, neg, feats, mpix, mfeats, mlab)


# --- training loop ------------------------------------------------------------------

@dataclass
class LossRecord:
    step: int
    embed_loss: float
    mask_loss: float
    effective_lr: float


@dataclass(eq=False)
class Trainer:
    """Explicit training state so runs can be checkpointed and resumed."""

    models: EmbeddingModels
    cfg: TrainConfig
    surface: SurfaceSampleSet
    query_opt: AdamState = None
    key_opt: AdamState = None
    rng: np.random.Generator = None
    trace: list = field(default_factory=list)

    def __post_init__(self):
        if self.query_opt is None:
            self.query_opt = AdamState(self.cfg.lr_query, self.cfg.warmup_steps)
        if self.key_opt is None:
            self.key_opt = AdamState(self.cfg.lr_key, self.cfg.warmup_steps)
        if self.rng is None:
            self.rng = np.random.default_rng(self.cfg.rng_seed)

    @property
    def step_count(self) -> int:
        return self.query_opt.step

    def step(self, crops) -> LossRecord:
        cfg, models = self.cfg, self.models
        batch = sample_batch(crops, self.surface, cfg, self.rng)
        C, P, F = batch.features.shape
        K = batch.negatives.shape[1]
        M = batch.mask_pixels.shape[1]
        E = models.embed_dim

        q_in = np.concatenate([batch.features.reshape(-1, F), batch.mask_features.reshape(-1, F)])
        q_out, q_tape = siren_forward(models.query_model, q_in)
        k_in = np.concatenate([batch.positives.reshape(-1, 3), batch.negatives.reshape(-1, 3)])
        k_out, k_tape = siren_forward(models.key_model, k_in / models.coord_scale)

        queries = q_out[:C * P, :E].reshape(C, P, E)
        mask_logits = q_out[C * P:, E]
        kp = k_out[:C * P].reshape(C, P, E)
        kn = k_out[C * P:].reshape(C, K, E)
        l_e, d_q, d_kp, d_kn = infonce_loss(queries, kp, kn)
        l_m, d_m = mask_bce_loss(mask_logits, batch.mask_labels.reshape(-1))
        loss = l_e + l_m
        step_no = self.step_count + 1
        if not np.isfinite(loss):
            raise Diverged(step_no)

        g_q = np.zeros_like(q_out)
        g_q[:C * P, :E] = d_q.reshape(-1, E)
        g_q[C * P:, E] = d_m
        g_k = np.concatenate([d_kp.reshape(-1, E), d_kn.reshape(-1, E)])
        qgrads, _ = siren_backward(models.query_model, q_tape, g_q)
        kgrads, _ = siren_backward(models.key_model, k_tape, g_k)
        try:
            adam_step(self.query_opt, models.query_model.parameters(), qgrads)
            adam_step(self.key_opt, models.key_model.parameters(), kgrads)
        except Exception as exc:
            raise Diverged(step_no, f"step {step_no}: {exc}") from exc
        rec = LossRecord(step_no, l_e, l_m, self.query_opt.effective_lr())
        self.trace.append(rec)
        return rec

    def run(self, crops):
        """Run ``cfg.epochs`` over shuffled crops (stopping early at ``cfg.max_steps``)."""
        n = len(crops)
        if n == 0:
            raise ValueError("no training crops")
        for epoch in range(self.cfg.epochs):
            order = self.rng.permutation(n)
            for start in range(0, n, self.cfg.batch_size):
                if self.cfg.max_steps and self.step_count >= self.cfg.max_steps:
                    return self.trace
                rec = self.step([crops[i] for i in order[start:start + self.cfg.batch_size]])
                if rec.step % 500 == 0:
                    log.info("step %d  L_E %.4f  L_M %.4f  lr %.2e", rec.step, rec.embed_loss,
                             rec.mask_loss, rec.effective_lr)
        return self.trace

    # checkpointing
    def save_checkpoint(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        self.models.save(directory)
        arrays = {}
        for name, opt in (("q", self.query_opt), ("k", self.key_opt)):
            for i, (m, v) in enumerate(zip(opt.m, opt.v)):
                arrays[f"{name}_m{i}"] = m
                arrays[f"{name}_v{i}"] = v
        np.savez(os.path.join(directory, "optimizer.npz"), **arrays)
        meta = {"query_step": self.query_opt.step, "key_step": self.key_opt.step,
                "rng": self.rng.bit_generator.state, "config": asdict(self.cfg)}
        with open(os.path.join(directory, "trainer.json"), "w") as fh:
            json.dump(meta, fh)

    @classmethod
    def load_checkpoint(cls, directory, surface: SurfaceSampleSet, cfg: TrainConfig | None = None) -> Trainer:
        with open(os.path.join(directory, "trainer.json")) as fh:
            meta = json.load(fh)
        if cfg is None:
            cfg = TrainConfig(**meta["config"])
        models = EmbeddingModels.load(directory)
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng"]
        data = np.load(os.path.join(directory, "optimizer.npz"))
        opts = []
        for name, lr, step in (("q", cfg.lr_query, meta["query_step"]), ("k", cfg.lr_key, meta["key_step"])):
            count = sum(1 for k in data.files if k.startswith(f"{name}_m"))
            opt = AdamState(lr, cfg.warmup_steps, step=step,
                            m=[data[f"{name}_m{i}"].copy() for i in range(count)],
                            v=[data[f"{name}_v{i}"].copy() for i in range(count)])
            opts.append(opt)
        return cls(models, cfg, surface, opts[0], opts[1], rng)


def train(crops, surface: SurfaceSampleSet, cfg: TrainConfig, models: EmbeddingModels | None = None,
          coord_scale: float | None = None):
    """Train key and query models jointly. Returns ``(models, loss trace)``."""
    crops = [c if isinstance(c, TrainingCrop) else TrainingCrop.from_crop(c) for c in crops]
    if not crops:
        raise ValueError("need at least one training crop")
    if models is None:
        scale = coord_scale or float(np.linalg.norm(surface.points, axis=1).max())
        models = init_models(cfg, crops[0].features.shape[1], scale)
    trainer = Trainer(models, cfg, surface)
    trainer.run(crops)
    return trainer.models, trainer.trace


def write_loss_csv(trace, dest, config_hash: str | None = None) -> None:
    buf = io.StringIO()
    if config_hash:
        buf.write(f"# config_hash={config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "L_E", "L_M", "effective_lr"])
    for r in trace:
        w.writerow([r.step, repr(r.embed_loss), repr(r.mask_loss), repr(r.effective_lr)])
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "w", encoding="utf-8", newline="") as fh:
            fh.write(buf.getvalue())
    else:
        dest.write(buf.getvalue())
