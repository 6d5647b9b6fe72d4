"""Sine-activated MLP score network, implicit score matching and training.

The network maps ``(x, t)`` to a score in the tangent chart. Divergences are
computed by pushing tangent directions through the network alongside the
primal pass, so they stay on the tape and the loss can be differentiated
with respect to the parameters.
"""

from __future__ import annotations

import csv
import json
import math
import struct
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Tensor
from .constraints import ConstraintSet, NoConstraint
from .diffusion import TimeGrid, forward_noise_batch, rescale_factor
from .geometry import ContractError, Manifold, Sphere
from .streams import stream


class TrainingError(RuntimeError):
    def __init__(self, step, param_norm):
        self.step, self.param_norm = step, param_norm
        super().__init__(f"non-finite loss at step {step} (parameter norm {param_norm:.3e})")


@dataclass
class MlpParams:
    weights: list
    biases: list

    @classmethod
    def init(cls, in_dim, out_dim, width=512, n_layers=6, rng=None, omega0=1.0):
        """Weights ``U(+-sqrt(6 / fan_in))``, the first layer scaled by ``omega0``; biases ``U(+-1/sqrt(fan_in))``."""
        rng = np.random.default_rng(0) if rng is None else rng
        sizes = [in_dim] + [width] * (n_layers - 1) + [out_dim]
        weights, biases = [], []
        for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = math.sqrt(6.0 / a) * (omega0 if k == 0 else 1.0)
            weights.append(rng.uniform(-bound, bound, (a, b)))
            biases.append(rng.uniform(-1.0 / math.sqrt(a), 1.0 / math.sqrt(a), b))
        return cls(weights, biases)

    @classmethod
    def zeros_like(cls, other):
        return cls([np.zeros_like(w) for w in other.weights], [np.zeros_like(b) for b in other.biases])

    @property
    def shapes(self):
        return [list(w.shape) for w in self.weights]

    @property
    def in_dim(self):
        return self.weights[0].shape[0]

    @property
    def out_dim(self):
        return self.weights[-1].shape[1]

    def arrays(self):
        return self.weights + self.biases

    def flat(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    def copy(self):
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    @classmethod
    def from_flat(cls, shapes, flat):
        flat = np.asarray(flat, dtype=float)
        weights, biases, pos = [], [], 0
        for a, b in shapes:
            weights.append(flat[pos:pos + a * b].reshape(a, b))
            pos += a * b
        for _, b in shapes:
            biases.append(flat[pos:pos + b].copy())
            pos += b
        if pos != flat.size:
            raise ValueError(f"parameter vector has {flat.size} entries, expected {pos}")
        return cls(weights, biases)

    def norm(self):
        return float(np.linalg.norm(self.flat()))


def _inputs(t, x):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
    return np.concatenate([x, t[:, None]], axis=1), x


def forward(params: MlpParams, t, x):
    """Raw network output; sine on hidden layers, identity on the last."""
    h, _ = _inputs(t, x)
    L = len(params.weights)
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ W + b
        if k < L - 1:
            h = np.sin(h)
    return h


def _tape_forward(Ws, bs, z, directions):
    """Primal output and directional derivatives along ``directions`` (arrays over the x inputs)."""
    pre = Tensor(z) @ Ws[0] + bs[0]
    pad = np.zeros((z.shape[0], 1))
    dpre = [Tensor(np.concatenate([np.broadcast_to(u, (z.shape[0], u.shape[-1])), pad], axis=1)) @ Ws[0]
            for u in directions]
    for W, b in zip(Ws[1:], bs[1:]):
        s, c = pre.sin(), pre.cos()
        dpre = [(c * d) @ W for d in dpre]
        pre = s @ W + b
    return pre, dpre


def _sphere_field(x, out, jvps, directions):
    """Tangent projection ``V = s - <x, s> x`` and its directional derivatives."""
    xs = (out * x).sum(axis=1, keepdims=True)
    V = out - xs * x
    dV = []
    for u, Ju in zip(directions, jvps):
        us = (out * u).sum(axis=1, keepdims=True)
        xJu = (Ju * x).sum(axis=1, keepdims=True)
        dV.append(Ju - (us + xJu) * x - xs * u)
    return V, dV


def _field_and_divergence(params, t, x, manifold=None, mode="exact", rng=None, probes=1):
    """Tape tensors for the score field and its (Riemannian) divergence."""
    z, x = _inputs(t, x)
    B, D = x.shape
    Ws = [Tensor(w) for w in params.weights]
    bs = [Tensor(b) for b in params.biases]
    sphere = isinstance(manifold, Sphere)
    if mode == "exact":
        if D > 64:
            warnings.warn(f"exact divergence in {D} dimensions costs {D} directional passes",
                          stacklevel=3)
        directions = [np.eye(D)[j][None, :] for j in range(D)]
        if sphere:
            directions.append(x)
        weights = [np.eye(D)[j][None, :] for j in range(D)]
    elif mode == "hutchinson":
        rng = np.random.default_rng() if rng is None else rng
        directions = [rng.choice([-1.0, 1.0], size=(B, D)) for _ in range(probes)]
        if sphere:
            directions = [u - np.sum(u * x, axis=1, keepdims=True) * x for u in directions]
        weights = [u / probes for u in directions]
    else:
        raise ContractError(f"unknown divergence mode {mode!r}")
    out, jvps = _tape_forward(Ws, bs, z, directions)
    if sphere:
        out, jvps = _sphere_field(x, out, jvps, directions)
    div = None
    for w, Ju in zip(weights, jvps):
        term = (Ju * w).sum(axis=1)
        div = term if div is None else div + term
    if sphere and mode == "exact":
        div = div - (jvps[-1] * x).sum(axis=1)
    return out, div, Ws, bs


def divergence(params: MlpParams, t, x, mode="exact", rng=None, probes=1, manifold=None):
    """Divergence of the score field in ``x`` (surface divergence on spheres).

    ``exact`` sums one directional derivative per coordinate; ``hutchinson``
    averages ``v^T J v`` over Rademacher probes (tangent-projected on spheres).
    """
    _, div, _, _ = _field_and_divergence(params, t, x, manifold, mode, rng, probes)
    return div.data


def default_mode(manifold_or_dim):
    d = manifold_or_dim if isinstance(manifold_or_dim, int) else manifold_or_dim.storage_size
    return "exact" if d <= 3 else "hutchinson"


def ism_value(scores, divs, t, weight=lambda t: 1.0 + t):
    """Monte Carlo ISM objective ``mean(lambda(t) (|s|^2 / 2 + div s))`` for precomputed terms."""
    scores = np.atleast_2d(scores)
    return float(np.mean(weight(np.asarray(t)) * (0.5 * np.sum(scores ** 2, axis=1) + divs)))


def ism_loss(params, t, x, constraint: ConstraintSet | None = None, eps=0.01, mode="exact", rng=None,
             probes=1, manifold=None, weight=lambda t: 1.0 + t, with_grad=False):
    """Implicit score matching loss of the rescaled score ``f(x) s(t, x)``.

    ``f = min(1, d(x, boundary) / eps)`` multiplies the network field before
    both terms; its divergence contribution ``grad f . s`` is included. With
    ``with_grad`` returns ``(loss, MlpParams of gradients)``.
    """
    t = np.broadcast_to(np.asarray(t, dtype=float), (np.atleast_2d(x).shape[0],))
    if t.size == 0:
        raise ContractError("ism loss needs a non-empty batch")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    out, div, Ws, bs = _field_and_divergence(params, t, x, manifold, mode, rng, probes)
    if constraint is None or isinstance(constraint, NoConstraint) or eps is None:
        field_, div_ = out, div
    else:
        f, gf = rescale_factor(constraint, x, eps)
        field_ = out * f[:, None]
        div_ = div * f + (out * gf).sum(axis=1)
    lam = weight(t)
    per = ((field_ * field_).sum(axis=1) * 0.5 + div_) * lam
    loss = per.mean()
    if not with_grad:
        return float(loss.data)
    loss.backward()
    grads = MlpParams([w.grad.copy() for w in Ws], [b.grad.copy() for b in bs])
    return float(loss.data), grads


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    batch_size: int = 256
    repeats: int = 8
    steps: int = 1000
    probes: int = 1
    width: int = 512
    n_layers: int = 6
    eps: float = 0.01
    divergence: str = "auto"
    seed: int = 0
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.repeats < 1 or self.steps < 0:
            raise ContractError("training config values must be positive")
        if self.batch_size % self.repeats:
            raise ContractError("batch_size must be a multiple of repeats")


def cosine_lr(base, step, total):
    return base * 0.5 * (1.0 + math.cos(math.pi * step / max(total, 1)))


@dataclass
class TrainResult:
    params: MlpParams
    losses: list = field(default_factory=list)
    lrs: list = field(default_factory=list)

    def write_loss_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss", "lr"])
            for k, (l, lr) in enumerate(zip(self.losses, self.lrs)):
                w.writerow([k, repr(float(l)), repr(float(lr))])


def train(m: Manifold, c: ConstraintSet, data, grid: TimeGrid, cfg: TrainConfig, params=None,
          callback=None):
    """Adam with cosine decay on the ISM loss of freshly noised batches.

    Each step noises ``batch_size // repeats`` data points and keeps
    ``repeats`` states from every rollout. Fully determined by ``cfg.seed``.
    """
    data = np.atleast_2d(np.asarray(data, dtype=float))
    rng = stream(cfg.seed, "train")
    if params is None:
        params = MlpParams.init(m.storage_size + 1, m.storage_size, cfg.width, cfg.n_layers,
                                stream(cfg.seed, "init"))
    params = params.copy()
    mode = default_mode(m) if cfg.divergence == "auto" else cfg.divergence
    mom = MlpParams.zeros_like(params)
    vel = MlpParams.zeros_like(params)
    result = TrainResult(params)
    n_items = cfg.batch_size // cfg.repeats
    for step in range(cfg.steps):
        items = data[rng.integers(0, len(data), n_items)]
        t, x = forward_noise_batch(m, c, items, grid, cfg.repeats, rng)
        loss, grads = ism_loss(params, t, x, c, cfg.eps, mode, rng, cfg.probes, m, with_grad=True)
        if not math.isfinite(loss):
            raise TrainingError(step, params.norm())
        lr = cosine_lr(cfg.learning_rate, step, cfg.steps)
        k = step + 1
        for p, g, m1, m2 in zip(params.arrays(), grads.arrays(), mom.arrays(), vel.arrays()):
            m1 *= cfg.adam_b1
            m1 += (1 - cfg.adam_b1) * g
            m2 *= cfg.adam_b2
            m2 += (1 - cfg.adam_b2) * g * g
            mhat = m1 / (1 - cfg.adam_b1 ** k)
            vhat = m2 / (1 - cfg.adam_b2 ** k)
            p -= lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
        result.losses.append(loss)
        result.lrs.append(lr)
        if callback is not None:
            callback(step, loss)
    return result


class ScoreModel:
    """Callable ``(t, x) -> score`` around trained parameters (tangent-projected on spheres)."""

    def __init__(self, params: MlpParams, manifold: Manifold | None = None):
        self.params, self.manifold = params, manifold

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        out = forward(self.params, t, x)
        if isinstance(self.manifold, Sphere):
            out = out - np.sum(out * x, axis=-1, keepdims=True) * x
        return out.reshape(x.shape)


_MAGIC = b"MRBMCKPT"


def save_checkpoint(path, params: MlpParams, config: dict | None = None):
    """Magic, little-endian u64 header length, JSON header, then float64 LE parameters."""
    header = json.dumps({"shapes": params.shapes, "config": config or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(params.flat().astype("<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n).decode())
        flat = np.frombuffer(fh.read(), dtype="<f8")
    return MlpParams.from_flat(header["shapes"], flat), header["config"]


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
