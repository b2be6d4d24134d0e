"""Evaluation harness: MMD, Lyapunov exponents, dynamics fingerprints, baselines."""
import copy
import hashlib
from dataclasses import dataclass
from itertools import combinations, product

import numpy as np
import torch
from scipy.spatial.distance import cdist

from ._util import NumericalError, to_tensor
from .field import VelocityNetwork, integrate_rk4
from .skew import SkewOperator
from .systems import Standardizer


def mmd_rbf(X, Y, sigma=0.5):
    """Biased (V-statistic) RBF-kernel MMD, returned as a distance (square root)."""
    X = np.asarray(X, dtype=float).reshape(len(X), -1)
    Y = np.asarray(Y, dtype=float).reshape(len(Y), -1)
    g = 1.0 / (2 * sigma**2)
    kxx = np.exp(-g * cdist(X, X, "sqeuclidean")).mean()
    kyy = np.exp(-g * cdist(Y, Y, "sqeuclidean")).mean()
    kxy = np.exp(-g * cdist(X, Y, "sqeuclidean")).mean()
    return float(np.sqrt(max(kxx + kyy - 2 * kxy, 0.0)))


def preservation_curve(field, samples, steps=100, dt=0.1, every=10, sigma=0.5, standardizer=None):
    """MMD between the initial sample set and its RK4 image at every ``every`` steps.

    MMD is measured on coordinates whitened with ``standardizer`` (fitted on
    ``samples`` when omitted).  Returns ``[(t, mmd), ...]`` for t > 0.
    """
    samples = np.asarray(samples, dtype=float)
    std = standardizer or Standardizer.fit(samples)
    traj = integrate_rk4(field, samples, dt, steps)
    ref = std.transform(samples)
    return [(k * dt, mmd_rbf(ref, std.transform(traj[k]), sigma)) for k in range(every, steps + 1, every)]


def _as_float64(field):
    if isinstance(field, torch.nn.Module):
        return copy.deepcopy(field).double().eval()
    return field


def lyapunov_max(field, x0, d0=1e-8, dt=0.01, horizon_steps=50_000, renorm_every=10, direction=None):
    """Largest Lyapunov exponent by the two-trajectory (Benettin) method.

    A companion trajectory starts ``d0`` away; every ``renorm_every`` RK4
    steps its separation is measured, logged and rescaled back to ``d0``.
    The mean log-stretch per unit time over the second half of the horizon
    is returned.  Networks are evaluated in float64 so ``d0`` stays resolvable.
    """
    if horizon_steps < renorm_every:
        raise ValueError("horizon_steps must be >= renorm_every")
    field = _as_float64(field)
    x = to_tensor(np.asarray(x0, dtype=float)).reshape(1, -1)
    u = torch.ones_like(x) if direction is None else to_tensor(direction).reshape(1, -1)
    pair = torch.cat([x, x + d0 * u / u.norm()])
    n_blocks = horizon_steps // renorm_every
    logs = []
    start = float((pair[1] - pair[0]).norm())
    for _ in range(n_blocks):
        pair = integrate_rk4(field, pair, dt, renorm_every)[-1]
        delta = pair[1] - pair[0]
        dist = float(delta.norm())
        if dist == 0.0 or not np.isfinite(dist):
            raise NumericalError("degenerate separation in Lyapunov estimate")
        # stretch is measured against the separation actually represented after rounding
        logs.append(np.log(dist / start))
        pair[1] = pair[0] + delta * (d0 / dist)
        start = float((pair[1] - pair[0]).norm())
    tail = logs[n_blocks // 2 :]
    return float(np.sum(tail) / (len(tail) * renorm_every * dt))


def probe_set_id(probes):
    arr = np.ascontiguousarray(np.asarray(probes, dtype=np.float64))
    return hashlib.sha1(arr.tobytes() + str(arr.shape).encode()).hexdigest()[:16]


@dataclass
class DynamicsFingerprint:
    """Field values at a fixed probe set, flattened in probe order."""

    values: np.ndarray
    probe_set_id: str
    aligned_to: str = None

    def __neg__(self):
        return DynamicsFingerprint(-self.values, self.probe_set_id, self.aligned_to)


@dataclass
class ChangeFingerprint:
    """Flattened ``x_T - x_0`` of a rollout; ``probe_set_id`` hashes ``x_0``."""

    values: np.ndarray
    probe_set_id: str


def fingerprint(field, probes):
    probes = np.asarray(probes, dtype=float)
    with torch.no_grad():
        vals = field(to_tensor(probes))
    vals = vals.detach().double().numpy() if isinstance(vals, torch.Tensor) else np.asarray(vals, float)
    return DynamicsFingerprint(vals.reshape(-1).copy(), probe_set_id(probes))


def _vals(e):
    return np.asarray(e.values if hasattr(e, "values") else e, dtype=float).reshape(-1)


def _check_pair(e1, e2):
    id1, id2 = getattr(e1, "probe_set_id", None), getattr(e2, "probe_set_id", None)
    if id1 is not None and id2 is not None and id1 != id2:
        raise ValueError("fingerprints were built on different probe sets")
    a, b = _vals(e1), _vals(e2)
    if a.shape != b.shape:
        raise ValueError("fingerprints have different lengths")
    return a, b


def align_sign(e, e_ref):
    """Return ``e`` or ``-e`` so that its dot product with ``e_ref`` is non-negative."""
    a, b = _check_pair(e, e_ref)
    flip = float(a @ b) < 0
    if isinstance(e, (DynamicsFingerprint, ChangeFingerprint)):
        out = copy.copy(e)
        out.values = -a if flip else a
        if isinstance(out, DynamicsFingerprint):
            out.aligned_to = getattr(e_ref, "probe_set_id", None)
        return out
    return -a if flip else a


def cosine_similarity(e1, e2):
    a, b = _check_pair(e1, e2)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def change_fingerprint(initial, stepper, T):
    """Net change after ``T`` applications of a deterministic ``stepper``."""
    x0 = np.asarray(initial, dtype=float)
    x = x0
    for _ in range(T):
        x = stepper(x)
        x = x.detach().numpy() if isinstance(x, torch.Tensor) else np.asarray(x, dtype=float)
        if not np.isfinite(x).all():
            raise NumericalError("rollout blew up while building a change fingerprint")
    return ChangeFingerprint((x - x0).reshape(-1), probe_set_id(x0))


def make_baseline(kind, template, rng, calibrate_on=None):
    """Random reference dynamics shaped like ``template``.

    ``random_network``: a fresh :class:`VelocityNetwork` with the template's
    architecture; pass ``calibrate_on`` to set its output statistics from data
    so its velocities are unit-scale like a trained model's.
    ``random_kernel``: an unconstrained Gaussian kernel/matrix of the template's shape.
    ``score_reweight``: a diagonal operator of per-channel Gaussian weights.
    """
    if kind == "random_network":
        net = VelocityNetwork(
            template.dim, template.pe_levels, template.hidden, seed=int(rng.integers(2**31 - 1))
        ).to(next(template.parameters()).dtype)
        if calibrate_on is not None:
            net.calibrate(calibrate_on)
        return net.eval()
    if kind == "random_kernel":
        return SkewOperator(template.form, rng.standard_normal(template.weights.shape))
    if kind == "score_reweight":
        c = template.weights.shape[0]
        w = rng.standard_normal(c)
        if template.form == "dense":
            return SkewOperator("dense", np.diag(w))
        K = np.zeros((c, c, 1, 1))
        K[np.arange(c), np.arange(c), 0, 0] = w
        return SkewOperator("conv", K)
    raise ValueError(f"unknown baseline kind {kind!r}")


def pairwise_similarities(group_a, group_b=None):
    """Cosine similarities over all distinct pairs (within a group) or the full cross product."""
    pairs = combinations(group_a, 2) if group_b is None else product(group_a, group_b)
    return np.array([cosine_similarity(a, b) for a, b in pairs])


def similarity_table(groups, reference_name):
    """Mean/std of pairwise similarities between every pair of named groups.

    Each fingerprint is first sign-aligned to the single fingerprint in
    ``groups[reference_name]``.  Returns rows ``(row, col, mean, std, count)``.
    """
    ref = groups[reference_name][0]
    aligned = {k: [align_sign(e, ref) for e in v] for k, v in groups.items()}
    names = list(groups)
    rows = []
    for i, a in enumerate(names):
        for b in names[i:]:
            if a == b:
                sims = pairwise_similarities(aligned[a]) if len(aligned[a]) > 1 else np.array([1.0])
            else:
                sims = pairwise_similarities(aligned[a], aligned[b])
            rows.append((a, b, float(sims.mean()), float(sims.std()), len(sims)))
    return rows
