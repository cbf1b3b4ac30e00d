"""A one-dimensional contrastive problem with a known conditional density.

The "surface" is the unit circle, parameterized by an angle ``c``. A context
angle ``θ`` plays the role of the image: given ``θ`` the true surface point is
drawn from a mixture of two von Mises modes, at ``θ`` and at ``θ + π``, which
mimics a two-fold visual ambiguity. Keys embed ``(cos c, sin c)`` and queries
embed ``(cos θ, sin θ)``. After InfoNCE training with uniform negatives the
normalized ``exp(q·k)`` over a dense grid of ``c`` should recover ``p(c | θ)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import i0

from surfdist.siren import AdamState, adam_step, siren_backward, siren_forward, siren_init
from surfdist.training import infonce_loss


@dataclass
class ToyConfig:
    embed_dim: int = 8
    hidden: tuple = (64, 64)
    omega0: float = 3.0
    steps: int = 8000
    batch: int = 256
    negatives: int = 256
    kappa: float = 4.0
    major_weight: float = 0.7
    lr: float = 1e-3
    warmup_steps: int = 100
    rng_seed: int = 0


def von_mises(x, mu, kappa):
    return np.exp(kappa * np.cos(x - mu)) / (2 * np.pi * i0(kappa))


def true_conditional(c, theta, cfg: ToyConfig):
    """Density of the surface angle ``c`` given context ``θ``."""
    w = cfg.major_weight
    return w * von_mises(c, theta, cfg.kappa) + (1 - w) * von_mises(c, theta + np.pi, cfg.kappa)


def sample_conditional(theta, cfg: ToyConfig, rng) -> np.ndarray:
    flip = rng.random(len(theta)) >= cfg.major_weight
    return np.mod(rng.vonmises(theta + np.pi * flip, cfg.kappa), 2 * np.pi)


def _circle(a):
    return np.column_stack([np.cos(a), np.sin(a)])


@dataclass(eq=False)
class ToyModels:
    key_model: object
    query_model: object

    def keys(self, c):
        return self.key_model(_circle(np.asarray(c, dtype=np.float64)))

    def queries(self, theta):
        return self.query_model(_circle(np.atleast_1d(np.asarray(theta, dtype=np.float64))))

    def conditional(self, theta, grid):
        """Normalized ``exp(q·k)`` over ``grid`` for each context; rows sum to 1."""
        logits = self.queries(theta) @ self.keys(grid).T
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)


def train_toy(cfg: ToyConfig | None = None):
    """Train key and query Sirens on the toy problem. Returns (models, loss trace)."""
    cfg = cfg or ToyConfig()
    rng = np.random.default_rng(cfg.rng_seed)
    key = siren_init(2, cfg.hidden, cfg.embed_dim, cfg.omega0, rng_seed=cfg.rng_seed)
    query = siren_init(2, cfg.hidden, cfg.embed_dim, cfg.omega0, rng_seed=cfg.rng_seed + 1)
    key_opt = AdamState(cfg.lr, cfg.warmup_steps)
    query_opt = AdamState(cfg.lr, cfg.warmup_steps)
    trace = []
    B, K, E = cfg.batch, cfg.negatives, cfg.embed_dim
    for _ in range(cfg.steps):
        theta = rng.uniform(0, 2 * np.pi, B)
        pos = sample_conditional(theta, cfg, rng)
        neg = rng.uniform(0, 2 * np.pi, K)
        q, q_tape = siren_forward(query, _circle(theta))
        k, k_tape = siren_forward(key, _circle(np.concatenate([pos, neg])))
        loss, dq, dkp, dkn = infonce_loss(q, k[:B], k[B:])
        qg, _ = siren_backward(query, q_tape, dq)
        kg, _ = siren_backward(key, k_tape, np.concatenate([dkp, dkn]).reshape(-1, E))
        adam_step(query_opt, query.parameters(), qg)
        adam_step(key_opt, key.parameters(), kg)
        trace.append(loss)
    return ToyModels(key, query), trace


def total_variation(models: ToyModels, cfg: ToyConfig, n_contexts: int = 256, grid_size: int = 720) -> np.ndarray:
    """Total-variation distance between learned and true conditionals, one value per context.

    Contexts are offset from multiples of ``2π/n`` so they do not coincide with grid cells.
    """
    grid = (np.arange(grid_size) + 0.5) * (2 * np.pi / grid_size)
    theta = (np.arange(n_contexts) + 0.37) * (2 * np.pi / n_contexts)
    learned = models.conditional(theta, grid)
    true = true_conditional(grid[None, :], theta[:, None], cfg)
    true /= true.sum(axis=1, keepdims=True)
    return 0.5 * np.abs(learned - true).sum(axis=1)
