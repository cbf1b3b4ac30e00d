"""Siren MLPs with hand-written reverse-mode gradients, Adam with linear warmup.

A Siren hidden layer computes ``sin(omega0 * (W @ x + b))``; the last layer is
affine. Weights are stored as (out, in) matrices.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from surfdist.errors import NonFiniteGradient, ShapeMismatch, TapeReuse

SMLP_MAGIC = b"SMLP"


@dataclass(eq=False)
class SirenMlp:
    weights: list
    biases: list
    omega0: float = 30.0

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeMismatch("need one bias per weight matrix and at least one layer")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ShapeMismatch(f"layer {k}: weight {W.shape} / bias {b.shape}")
            if k and W.shape[1] != self.weights[k - 1].shape[0]:
                raise ShapeMismatch(f"layer {k} input {W.shape[1]} != previous output "
                                    f"{self.weights[k - 1].shape[0]}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def parameters(self) -> list:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> SirenMlp:
        return SirenMlp([W.copy() for W in self.weights], [b.copy() for b in self.biases], self.omega0)

    def __call__(self, inputs) -> np.ndarray:
        out, _ = siren_forward(self, inputs)
        return out


@dataclass(eq=False)
class GradientTape:
    layer_inputs: list
    phases: list
    consumed: bool = False


def siren_init(in_dim: int, hidden_dims, out_dim: int, omega0: float = 30.0, rng_seed=0) -> SirenMlp:
    """Siren initialization.

    First layer weights ~ U(±1/in_dim); hidden layers ~ U(±sqrt(6/fan_in)/omega0)
    so that ``omega0 * W`` has unit-scale activations; the linear output layer
    ~ U(±sqrt(6/fan_in)). Biases ~ U(±1/sqrt(fan_in)).
    """
    dims = [in_dim, *hidden_dims, out_dim]
    if min(dims) < 1:
        raise ValueError("all layer sizes must be >= 1")
    rng = np.random.default_rng(rng_seed)
    weights, biases = [], []
    n = len(dims) - 1
    for k in range(n):
        fan_in, fan_out = dims[k], dims[k + 1]
        if k == 0 and n > 1:
            bound = 1.0 / fan_in
        elif k < n - 1:
            bound = np.sqrt(6.0 / fan_in) / omega0
        else:
            bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-1, 1, size=fan_out) / np.sqrt(fan_in))
    return SirenMlp(weights, biases, float(omega0))


def siren_forward(model: SirenMlp, inputs) -> tuple[np.ndarray, GradientTape]:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.in_dim:
        raise ShapeMismatch(f"expected B×{model.in_dim} inputs, got {x.shape}")
    layer_inputs, phases = [], []
    h = x
    last = model.n_layers - 1
    for k, (W, b) in enumerate(zip(model.weights, model.biases)):
        layer_inputs.append(h)
        z = h @ W.T + b
        if k < last:
            z = model.omega0 * z
            phases.append(z)
            h = np.sin(z)
        else:
            h = z
    return h, GradientTape(layer_inputs, phases)


def siren_backward(model: SirenMlp, tape: GradientTape, output_grads):
    """Reverse pass. Returns (parameter grads in ``parameters()`` order, input grads)."""
    if tape.consumed:
        raise TapeReuse("gradient tape already used by a backward pass")
    tape.consumed = True
    g = np.asarray(output_grads, dtype=np.float64)
    B = tape.layer_inputs[0].shape[0]
    if g.shape != (B, model.out_dim):
        raise ShapeMismatch(f"expected output grads {(B, model.out_dim)}, got {g.shape}")
    grads = [None] * (2 * model.n_layers)
    for k in range(model.n_layers - 1, -1, -1):
        W = model.weights[k]
        if k < model.n_layers - 1:
            g = g * (model.omega0 * np.cos(tape.phases[k]))
        h = tape.layer_inputs[k]
        grads[2 * k] = g.T @ h
        grads[2 * k + 1] = g.sum(axis=0)
        g = g @ W
    return grads, g


# --- optimizer ---------------------------------------------------------------

@dataclass(eq=False)
class AdamState:
    lr_base: float
    warmup_steps: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def effective_lr(self, step: int | None = None) -> float:
        s = self.step if step is None else step
        if self.warmup_steps <= 0:
            return self.lr_base
        return self.lr_base * min(1.0, s / self.warmup_steps)


def adam_step(state: AdamState, params: list, grads: list):
    """One Adam update, in place on ``params``. Returns (params, state)."""
    if len(params) != len(grads):
        raise ShapeMismatch("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise ShapeMismatch(f"param {p.shape} vs grad {np.shape(g)}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("gradient contains NaN or inf")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    lr = state.effective_lr()
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# --- persistence -----------------------------------------------------------------

def save_siren(model: SirenMlp, dest) -> None:
    """``SMLP`` format: magic, u32 layers, per layer u32 in/out + f64 W + f64 b, f64 omega0."""
    parts = [SMLP_MAGIC, struct.pack("<I", model.n_layers)]
    for W, b in zip(model.weights, model.biases):
        parts.append(struct.pack("<II", W.shape[1], W.shape[0]))
        parts.append(np.ascontiguousarray(W, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    parts.append(struct.pack("<d", model.omega0))
    payload = b"".join(parts)
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "wb") as fh:
            fh.write(payload)
    else:
        dest.write(payload)


def load_siren(source) -> SirenMlp:
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            raw = fh.read()
    else:
        raw = source.read()
    if raw[:4] != SMLP_MAGIC:
        raise ValueError("not an SMLP file")
    (n,) = struct.unpack_from("<I", raw, 4)
    off = 8
    weights, biases = [], []
    for _ in range(n):
        fan_in, fan_out = struct.unpack_from("<II", raw, off)
        off += 8
        W = np.frombuffer(raw, "<f8", fan_in * fan_out, off).reshape(fan_out, fan_in).copy()
        off += 8 * fan_in * fan_out
        b = np.frombuffer(raw, "<f8", fan_out, off).copy()
        off += 8 * fan_out
        weights.append(W)
        biases.append(b)
    (omega0,) = struct.unpack_from("<d", raw, off)
    if off + 8 != len(raw):
        raise ValueError("trailing bytes in SMLP file")
    return SirenMlp(weights, biases, omega0)
