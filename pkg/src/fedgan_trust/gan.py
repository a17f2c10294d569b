"""Small numpy GAN: two-layer perceptrons with hand-written backpropagation."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .modmath import Prng

EPS = 1e-7


class GanError(ValueError):
    pass


class ShapeError(GanError):
    pass


class ArchitectureMismatch(GanError):
    pass


class TrainingFault(GanError):
    """Raised when an update would introduce non-finite parameters."""


_ACTIVATIONS = {
    "tanh": (np.tanh, lambda y: 1.0 - y * y),
    "linear": (lambda z: z, lambda y: np.ones_like(y)),
    "sigmoid": (lambda z: 0.5 * (1.0 + np.tanh(0.5 * z)), lambda y: y * (1.0 - y)),
}


@dataclass
class ModelParams:
    """Per-layer weight matrices (out x in), bias vectors and activation names."""

    weights: list
    biases: list
    activations: tuple

    def __post_init__(self):
        self.activations = tuple(self.activations)
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ShapeError("weights, biases and activations must have equal length")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {i}: weight {w.shape} incompatible with bias {b.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(f"layer {i} input {w.shape[1]} != previous output {self.weights[i - 1].shape[0]}")

    @property
    def shapes(self):
        return [w.shape for w in self.weights]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def architecture_digest(self) -> bytes:
        desc = json.dumps({"shapes": [list(s) for s in self.shapes], "act": list(self.activations)},
                          sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(desc.encode()).digest()

    def flatten(self) -> np.ndarray:
        """Concatenate layer by layer: weights row-major, then bias."""
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts).astype(np.float64)

    def unflatten(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ShapeError(f"expected {self.n_params} values, got {vec.shape}")
        weights, biases, pos = [], [], 0
        for w, b in zip(self.weights, self.biases):
            weights.append(vec[pos:pos + w.size].reshape(w.shape).copy())
            pos += w.size
            biases.append(vec[pos:pos + b.size].copy())
            pos += b.size
        return type(self)(weights, biases, self.activations)

    def copy(self):
        return type(self)([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.activations)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.weights + self.biases)


class GradientSet(ModelParams):
    """Same layout as :class:`ModelParams`; entries are loss derivatives."""

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "GradientSet":
        return cls([np.zeros_like(w) for w in params.weights],
                   [np.zeros_like(b) for b in params.biases], params.activations)


@dataclass(frozen=True)
class Architecture:
    sizes: tuple
    activations: tuple

    def init(self, rng: Prng, scale: float = 0.5) -> ModelParams:
        """Weights uniform in [-scale, scale], biases zero."""
        weights, biases = [], []
        for n_in, n_out in zip(self.sizes[:-1], self.sizes[1:]):
            u = rng.uniform((n_out, n_in))
            weights.append((2.0 * u - 1.0) * scale)
            biases.append(np.zeros(n_out))
        return ModelParams(weights, biases, self.activations)

    def zeros(self) -> ModelParams:
        return ModelParams([np.zeros((o, i)) for i, o in zip(self.sizes[:-1], self.sizes[1:])],
                           [np.zeros(o) for o in self.sizes[1:]], self.activations)


def generator_architecture(noise_dim=8, hidden=32, data_dim=1) -> Architecture:
    return Architecture((noise_dim, hidden, data_dim), ("tanh", "linear"))


def discriminator_architecture(data_dim=1, hidden=32) -> Architecture:
    return Architecture((data_dim, hidden, 1), ("tanh", "sigmoid"))


@dataclass
class SyntheticBatch:
    rows: np.ndarray
    source_iteration: int = 0

    def to_bytes(self) -> bytes:
        return batch_bytes(self.rows)

    @property
    def digest(self) -> bytes:
        return hashlib.sha256(self.to_bytes()).digest()


def batch_bytes(rows: np.ndarray) -> bytes:
    """Canonical layout: rows and cols as little-endian u32, then float64 LE row-major."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2:
        raise ShapeError("batch must be 2-D")
    return struct.pack("<II", *rows.shape) + rows.astype("<f8").tobytes(order="C")


def batch_from_bytes(raw: bytes) -> np.ndarray:
    n, d = struct.unpack_from("<II", raw)
    body = raw[8:]
    if len(body) != 8 * n * d:
        raise ShapeError("batch byte length does not match its dims prefix")
    return np.frombuffer(body, dtype="<f8").reshape(n, d).astype(np.float64)


def batch_digest(rows: np.ndarray) -> bytes:
    return hashlib.sha256(batch_bytes(rows)).digest()


def mlp_forward(params: ModelParams, x: np.ndarray):
    """Returns the output and the list of layer outputs needed by :func:`mlp_backward`."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.weights[0].shape[1]:
        raise ShapeError(f"input shape {x.shape} does not match layer input {params.weights[0].shape[1]}")
    outs = [x]
    h = x
    for w, b, act in zip(params.weights, params.biases, params.activations):
        h = _ACTIVATIONS[act][0](h @ w.T + b)
        outs.append(h)
    return h, outs


def mlp_backward(params: ModelParams, outs: list, grad_out: np.ndarray):
    """Backpropagate ``grad_out`` (dLoss/dOutput) through a cached forward pass.

    Returns the parameter gradients and dLoss/dInput.
    """
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != outs[-1].shape:
        raise ShapeError(f"upstream gradient {grad_out.shape} != output {outs[-1].shape}")
    gw = [None] * len(params.weights)
    gb = [None] * len(params.weights)
    g = grad_out
    for i in reversed(range(len(params.weights))):
        dz = g * _ACTIVATIONS[params.activations[i]][1](outs[i + 1])
        gw[i] = dz.T @ outs[i]
        gb[i] = dz.sum(axis=0)
        g = dz @ params.weights[i]
    return GradientSet(gw, gb, params.activations), g


def generator_forward(params: ModelParams, noise: np.ndarray, iteration: int = 0) -> SyntheticBatch:
    out, _ = mlp_forward(params, noise)
    return SyntheticBatch(out, iteration)


def discriminator_forward(params: ModelParams, batch) -> np.ndarray:
    rows = batch.rows if isinstance(batch, SyntheticBatch) else batch
    out, _ = mlp_forward(params, rows)
    return out[:, 0]


def clamp(p):
    return np.clip(p, EPS, 1.0 - EPS)


def compute_losses(d_real, d_fake):
    """Discriminator loss and non-saturating generator loss."""
    d_real = clamp(np.asarray(d_real, dtype=np.float64))
    d_fake = clamp(np.asarray(d_fake, dtype=np.float64))
    if d_real.size == 0 or d_fake.size == 0:
        raise GanError("empty probability vector")
    d_loss = -np.mean(np.log(d_real)) - np.mean(np.log(1.0 - d_fake))
    g_loss = -np.mean(np.log(d_fake))
    return float(d_loss), float(g_loss)


def _inside(p):
    return ((p > EPS) & (p < 1.0 - EPS)).astype(np.float64)


@dataclass
class DiscriminatorOutcome:
    d_loss: float
    g_loss: float
    grads: GradientSet
    fake_grad: np.ndarray  # d g_loss / d fake rows, handed to the generator
    d_real: np.ndarray = field(repr=False)
    d_fake: np.ndarray = field(repr=False)


def discriminator_pass(params: ModelParams, real: np.ndarray, fake: np.ndarray) -> DiscriminatorOutcome:
    """Classify both batches, compute losses and their gradients.

    ``grads`` is d(d_loss)/d(params); ``fake_grad`` is d(g_loss)/d(fake).
    """
    p_real, outs_real = mlp_forward(params, real)
    p_fake, outs_fake = mlp_forward(params, fake)
    d_loss, g_loss = compute_losses(p_real[:, 0], p_fake[:, 0])
    nr, nf = len(real), len(fake)
    # d/dp of -log(clip(p)) is -1/p inside the clip range and 0 outside
    up_real = -_inside(p_real) / p_real / nr
    up_fake = _inside(p_fake) / (1.0 - p_fake) / nf
    g_real, _ = mlp_backward(params, outs_real, up_real)
    g_fake, _ = mlp_backward(params, outs_fake, up_fake)
    grads = GradientSet([a + b for a, b in zip(g_real.weights, g_fake.weights)],
                        [a + b for a, b in zip(g_real.biases, g_fake.biases)], params.activations)
    _, fake_grad = mlp_backward(params, outs_fake, -_inside(p_fake) / p_fake / nf)
    return DiscriminatorOutcome(d_loss, g_loss, grads, fake_grad, p_real[:, 0], p_fake[:, 0])


def generator_gradients(params: ModelParams, noise: np.ndarray, fake_grad: np.ndarray) -> GradientSet:
    _, outs = mlp_forward(params, noise)
    grads, _ = mlp_backward(params, outs, fake_grad)
    return grads


def sgd_step(params: ModelParams, grads: GradientSet, lr: float) -> ModelParams:
    if params.shapes != grads.shapes:
        raise ShapeError("gradient shapes do not match parameters")
    if not grads.is_finite():
        raise TrainingFault("non-finite gradient")
    new = ModelParams([w - lr * g for w, g in zip(params.weights, grads.weights)],
                      [b - lr * g for b, g in zip(params.biases, grads.biases)], params.activations)
    if not new.is_finite():
        raise TrainingFault("update produced non-finite parameters")
    return new


def average_params(models) -> ModelParams:
    """Elementwise mean; the plaintext counterpart of encrypted FedAvg."""
    models = list(models)
    if not models:
        raise GanError("nothing to average")
    digest = models[0].architecture_digest()
    if any(m.architecture_digest() != digest for m in models[1:]):
        raise ArchitectureMismatch("cannot average models with different architectures")
    return models[0].unflatten(np.mean([m.flatten() for m in models], axis=0))


# -- data sources -------------------------------------------------------------

@dataclass(frozen=True)
class DataDistribution:
    """Shared real-data distribution; registries draw disjoint samples via their own seeds.

    ``kind`` is ``gaussian1d`` (params: mu, sigma), ``mixture2d`` (params:
    components = [[weight, mx, my, std], ...]) or ``categorical`` (params:
    marginals = [[p0, p1, ...], ...], emitted one-hot per column).
    """

    kind: str = "gaussian1d"
    params: tuple = (("mu", 3.0), ("sigma", 1.0))

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        kind = d.pop("kind")
        return cls(kind, tuple(sorted((k, _freeze(v)) for k, v in d.items())))

    def to_dict(self):
        return {"kind": self.kind, **{k: _thaw(v) for k, v in self.params}}

    @property
    def p(self):
        return dict(self.params)

    @property
    def data_dim(self) -> int:
        if self.kind == "gaussian1d":
            return 1
        if self.kind == "mixture2d":
            return 2
        if self.kind == "categorical":
            return sum(len(m) for m in self.p["marginals"])
        raise GanError(f"unknown distribution kind {self.kind!r}")

    def sample(self, rng: Prng, n: int) -> np.ndarray:
        p = self.p
        if self.kind == "gaussian1d":
            return rng.normal((n, 1), p["mu"], p["sigma"])
        if self.kind == "mixture2d":
            comps = np.array(p["components"], dtype=np.float64)
            cum = np.cumsum(comps[:, 0] / comps[:, 0].sum())
            idx = np.minimum(np.searchsorted(cum, rng.uniform(n), side="right"), len(comps) - 1)
            z = rng.normal((n, 2))
            return comps[idx, 1:3] + comps[idx, 3:4] * z
        if self.kind == "categorical":
            cols = []
            for marg in p["marginals"]:
                cum = np.cumsum(np.asarray(marg, dtype=np.float64))
                cum /= cum[-1]
                idx = np.minimum(np.searchsorted(cum, rng.uniform(n), side="right"), len(marg) - 1)
                cols.append(np.eye(len(marg))[idx])
            return np.hstack(cols)
        raise GanError(f"unknown distribution kind {self.kind!r}")


def _freeze(v):
    if isinstance(v, list):
        return tuple(_freeze(x) for x in v)
    return v


def _thaw(v):
    if isinstance(v, tuple):
        return [_thaw(x) for x in v]
    return v


# -- standalone training ------------------------------------------------------

@dataclass(frozen=True)
class GanConfig:
    noise_dim: int = 8
    hidden: int = 32
    lr: float = 0.05
    batch_size: int = 64
    init_scale: float = 0.5

    def generator_arch(self, data_dim):
        return generator_architecture(self.noise_dim, self.hidden, data_dim)

    def discriminator_arch(self, data_dim):
        return discriminator_architecture(data_dim, self.hidden)


def sample_generator(params: ModelParams, rng: Prng, n: int) -> np.ndarray:
    noise = rng.normal((n, params.weights[0].shape[1]))
    return generator_forward(params, noise).rows


def train_standalone(cfg: GanConfig, dist: DataDistribution, seed: int, iterations: int,
                     callback=None):
    """Plain single-party GAN loop with the same update rule the registries use."""
    rng = Prng(seed, "standalone")
    g = cfg.generator_arch(dist.data_dim).init(rng.substream("g-init"), cfg.init_scale)
    d = cfg.discriminator_arch(dist.data_dim).init(rng.substream("d-init"), cfg.init_scale)
    noise_rng, data_rng = rng.substream("noise"), rng.substream("data")
    history = []
    for it in range(1, iterations + 1):
        noise = noise_rng.normal((cfg.batch_size, cfg.noise_dim))
        fake = generator_forward(g, noise, it).rows
        real = dist.sample(data_rng, cfg.batch_size)
        out = discriminator_pass(d, real, fake)
        d = sgd_step(d, out.grads, cfg.lr)
        g = sgd_step(g, generator_gradients(g, noise, out.fake_grad), cfg.lr)
        history.append((out.d_loss, out.g_loss))
        if callback is not None:
            callback(it, g, d, out)
    return g, d, history
