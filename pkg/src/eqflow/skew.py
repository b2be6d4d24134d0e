"""Training-free dynamics: linear operators applied to the score, and their SDE.

A skew-symmetric ``S`` turns any score ``s = grad log p`` into a drift
``S s`` that leaves ``p`` stationary.  Convolutional operators act on
``(c, h, w)`` grids with wrap-around and are skew exactly when
``K[o, i, u, v] == -K[i, o, -u, -v]``.
"""
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from ._util import NumericalError, to_tensor


@dataclass
class SkewOperator:
    """Dense ``d x d`` matrix or ``c x c x (2r+1) x (2r+1)`` periodic conv kernel.

    Nothing forces the weights to be skew: baselines reuse this class with
    unconstrained kernels, and :func:`validate_skew` tells them apart.
    """

    form: str
    weights: np.ndarray
    gamma: float = 1.0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.form == "dense":
            if self.weights.ndim != 2 or self.weights.shape[0] != self.weights.shape[1]:
                raise ValueError("dense operator needs a square matrix")
        elif self.form == "conv":
            c1, c2, kh, kw = self.weights.shape
            if c1 != c2 or kh != kw or kh % 2 == 0:
                raise ValueError("conv kernel must be c x c x (2r+1) x (2r+1)")
        else:
            raise ValueError(f"unknown operator form {self.form!r}")

    @property
    def radius(self):
        return (self.weights.shape[-1] - 1) // 2 if self.form == "conv" else 0

    def __neg__(self):
        return SkewOperator(self.form, -self.weights, -self.gamma)

    def __call__(self, s):
        return v_skew(self, s)


def make_rotation_kernel(gamma=1.0):
    """1x1 two-channel kernel ``gamma * [[0, -1], [1, 0]]``."""
    if gamma == 0:
        raise ValueError("gamma must be nonzero")
    K = np.zeros((2, 2, 1, 1))
    K[0, 1, 0, 0] = -gamma
    K[1, 0, 0, 0] = gamma
    return SkewOperator("conv", K, gamma)


def random_skew_kernel(c, r, rng, scale=1.0):
    """Gaussian kernel projected onto the skew condition (exact in floating point)."""
    A = rng.standard_normal((c, c, 2 * r + 1, 2 * r + 1)) * scale
    return SkewOperator("conv", (A - A.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]) / 2)


def random_skew_matrix(d, rng, scale=1.0):
    A = rng.standard_normal((d, d)) * scale
    return SkewOperator("dense", (A - A.T) / 2)


def validate_skew(op):
    W = op.weights
    if op.form == "dense":
        return bool(np.array_equal(W, -W.T))
    return bool(np.array_equal(W, -W.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]))


def conv_to_dense(op, h, w):
    """Matrix of the periodic convolution on flattened ``(c, h, w)`` states.

    Entry ``[(o, p), (i, q)]`` is ``K[o, i, p - q]`` with the displacement
    taken modulo the grid, so output pixel ``p`` reads input ``q = p - u``.
    """
    if op.form != "conv":
        raise ValueError("conv_to_dense needs a conv operator")
    r = op.radius
    if h < 2 * r + 1 or w < 2 * r + 1:
        raise ValueError("grid is smaller than the kernel support")
    c = op.weights.shape[0]
    hw = h * w
    S = np.zeros((c * hw, c * hw))
    pr, pc = np.divmod(np.arange(hw), w)
    for du in range(-r, r + 1):
        for dv in range(-r, r + 1):
            q = ((pr - du) % h) * w + (pc - dv) % w
            for o in range(c):
                for i in range(c):
                    S[o * hw + np.arange(hw), i * hw + q] += op.weights[o, i, du + r, dv + r]
    return S


def v_skew(op, s):
    """Apply the operator to a score: ``S s`` (dense) or periodic convolution (conv)."""
    t = to_tensor(s)
    W = torch.as_tensor(op.weights, dtype=t.dtype)
    if op.form == "dense":
        out = t @ W.T
    else:
        single = t.ndim == 3
        g = t[None] if single else t
        r = op.radius
        if r == 0:
            out = torch.einsum("oi,nihw->nohw", W[:, :, 0, 0], g)
        else:
            padded = F.pad(g, (r, r, r, r), mode="circular")
            out = F.conv2d(padded, W.flip(-1, -2))
        out = out[0] if single else out
    return out.numpy() if isinstance(s, np.ndarray) else out


@dataclass
class LangevinConfig:
    eta: float = 0.1
    dt: float = 0.01
    steps: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be > 0")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")


def langevin_step(x, op, score_fn, cfg, rng=None, noise=None):
    """Euler-Maruyama step of ``dx = [S s + eta s] dt + sqrt(2 eta) dW``.

    ``op`` may be ``None`` (pure Langevin) or any callable on scores.
    """
    x = to_tensor(x)
    s = to_tensor(score_fn(x)).to(x.dtype)
    drift = cfg.eta * s
    if op is not None:
        drift = drift + to_tensor(op(s)).to(x.dtype)
    out = x + cfg.dt * drift
    if cfg.eta > 0:
        if noise is None:
            noise = rng.standard_normal(tuple(x.shape))
        out = out + np.sqrt(2 * cfg.eta * cfg.dt) * to_tensor(noise).to(x.dtype)
    if not torch.isfinite(out).all():
        raise NumericalError("Langevin state became non-finite")
    return out


def langevin_rollout(x0, op, score_fn, cfg, record_every=0):
    """Integrate ``cfg.steps`` steps; noise comes from ``cfg.seed`` so rollouts
    with different operators but the same config see identical increments.

    Returns the final state, plus recorded frames when ``record_every > 0``.
    """
    rng = np.random.default_rng(cfg.seed)
    x = to_tensor(x0)
    frames = [x] if record_every else None
    for i in range(cfg.steps):
        x = langevin_step(x, op, score_fn, cfg, rng)
        if record_every and (i + 1) % record_every == 0:
            frames.append(x)
    if record_every:
        return x, torch.stack(frames)
    return x


def recover_turing_dynamics(score_fn, initial_state, reference_change, cfg, gammas=(1.0, -1.0)):
    """Pick the rotation orientation whose rollout change best matches ``reference_change``.

    Every candidate starts from ``initial_state`` with the same noise stream
    and is scored by its signed cosine similarity to the reference change.
    Returns ``(operator, final_state, similarities)`` with ``similarities``
    keyed by gamma.
    """
    from .metrics import cosine_similarity

    ref = np.asarray(reference_change, dtype=float).reshape(-1)
    x0 = to_tensor(initial_state)
    best = None
    sims = {}
    for g in gammas:
        op = make_rotation_kernel(g)
        xT = langevin_rollout(x0, op, score_fn, cfg)
        change = (xT - x0).numpy().reshape(-1)
        sims[g] = cosine_similarity(change, ref)
        if best is None or sims[g] > sims[best[0].gamma]:
            best = (op, xT)
    return best[0], best[1], sims
