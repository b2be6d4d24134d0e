"""End-to-end studies shared by the CLI, the demos and the acceptance suite."""
import numpy as np
from scipy import ndimage

from ._util import derive_rng
from .metrics import (
    align_sign,
    change_fingerprint,
    cosine_similarity,
    fingerprint,
    make_baseline,
    similarity_table,
)
from .skew import langevin_rollout, make_rotation_kernel, recover_turing_dynamics
from .systems import Standardizer, gray_scott_preset, gray_scott_step, lorenz_dataset, lorenz_field


LORENZ_SCALE = 3.0


def standardized_lorenz(n, seed=0, scale=LORENZ_SCALE):
    """``n`` attractor samples, centred and divided by one global ``scale``.

    A single scale keeps the field conjugate to Lorenz up to a similarity.
    Dividing by 3 leaves the attractor a few units wide, so the working noise
    level blurs it less than whitening to unit variance would.
    """
    raw = lorenz_dataset(n, derive_rng(seed, "lorenz"))
    std = Standardizer(raw.mean(0), np.full(raw.shape[1], float(scale)))
    return std.transform(raw), std


def lorenz_fingerprint_groups(models, probes, standardizer, n_random=10, seed=0, score_model=None, alpha=0.95):
    """Fingerprint groups for a Lorenz fidelity table.

    ``learned`` holds the trained fields, ``random`` calibrated random networks
    of the same architecture, ``lorenz`` the true field in whitened
    coordinates and, when given, ``score`` the score field itself.
    """
    rng = derive_rng(seed, "random-baselines")
    groups = {
        "lorenz": [fingerprint(standardizer.conjugate(lorenz_field()), probes)],
        "learned": [fingerprint(m, probes) for m in models],
        "random": [
            fingerprint(make_baseline("random_network", models[0], rng, calibrate_on=probes), probes)
            for _ in range(n_random)
        ],
    }
    if score_model is not None:
        groups["score"] = [fingerprint(score_model.score_fn(alpha), probes)]
    return groups


def lorenz_fidelity(groups):
    """Similarities to the truth and within groups, as a dict of arrays."""
    ref = groups["lorenz"][0]
    out = {}
    for name in ("learned", "random"):
        aligned = [align_sign(e, ref) for e in groups[name]]
        out[f"{name}_vs_lorenz"] = np.array([cosine_similarity(e, ref) for e in aligned])
        out[f"{name}_pairwise"] = np.array(
            [cosine_similarity(a, b) for i, a in enumerate(aligned) for b in aligned[i + 1 :]]
        )
    out["table"] = similarity_table(groups, "lorenz")
    return out


def turing_comparison(score_fn, initial_states, preset, cfg, T=50, n_random=10, seed=0):
    """Change-fingerprint similarity of the training-free drift against the simulator.

    For each initial state the ground-truth change comes from ``T`` Gray-Scott
    steps.  The rotation drift is rolled out for ``cfg.steps`` Langevin steps
    with both orientations and the better one is kept.  ``n_random`` random
    kernels and score re-weightings are drawn once and applied to every state
    with the same noise stream, so baseline rows are ``(n_states, n_random)``.
    States that do not change under the simulator are skipped.  All
    similarities are reported after sign alignment to the ground truth.
    """
    p = gray_scott_preset(preset) if isinstance(preset, str) else preset
    rng = derive_rng(seed, "turing-baselines")
    template = make_rotation_kernel(1.0)
    baselines = {kind: [make_baseline(kind, template, rng) for _ in range(n_random)]
                 for kind in ("random_kernel", "score_reweight")}
    rows = {"training_free": [], "random_kernel": [], "score_reweight": [], "gamma": []}
    for x0 in np.asarray(initial_states, dtype=float):
        gt = change_fingerprint(x0, lambda x: gray_scott_step(x, p), T).values
        if not np.any(gt):
            continue  # a dead pattern has no direction of change to compare with
        op, _, sims = recover_turing_dynamics(score_fn, x0[None], gt, cfg)
        rows["training_free"].append(abs(sims[op.gamma]))
        rows["gamma"].append(op.gamma)
        for kind, ops in baselines.items():
            row = []
            for base in ops:
                xT = langevin_rollout(x0[None], base, score_fn, cfg)
                row.append(abs(cosine_similarity((xT.numpy() - x0[None]).reshape(-1), gt)))
            rows[kind].append(row)
    return {k: np.array(v) for k, v in rows.items()}


def centroid_tracks(frames, threshold=0.05, max_jump=None):
    """Per-object centroid tracks through a rollout of ``(T, c, h, w)`` frames.

    Objects are connected regions (periodic in both axes) whose channel-summed
    intensity exceeds ``threshold``.  Each object in frame ``t`` is linked to
    the nearest unclaimed object of frame ``t - 1`` (wrap-around distance);
    links longer than ``max_jump`` start a new track.  Returns rows
    ``(frame, track, row, col)``.
    """
    frames = np.asarray(frames, dtype=float)
    _, _, h, w = frames.shape
    max_jump = max_jump if max_jump is not None else 0.1 * min(h, w)
    rows, prev, next_id = [], [], 0
    for t, frame in enumerate(frames):
        cents = _periodic_centroids(frame.sum(0) > threshold)
        current = []
        taken = set()
        for c in cents:
            best, best_d = None, max_jump
            for tid, pc in prev:
                if tid in taken:
                    continue
                d = np.hypot(*_wrap_delta(c, pc, (h, w)))
                if d <= best_d:
                    best, best_d = tid, d
            if best is None:
                best, next_id = next_id, next_id + 1
            taken.add(best)
            current.append((best, c))
            rows.append((t, best, float(c[0]), float(c[1])))
        prev = current
    return rows


def _wrap_delta(a, b, shape):
    d = np.subtract(a, b)
    return (d + np.divide(shape, 2)) % shape - np.divide(shape, 2)


def _periodic_centroids(mask):
    h, w = mask.shape
    labels, n = ndimage.label(mask)
    # merge labels that touch across the periodic seams
    parent = list(range(n + 1))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a, b in list(zip(labels[0], labels[-1])) + list(zip(labels[:, 0], labels[:, -1])):
        if a and b:
            parent[find(a)] = find(b)
    cents = []
    for root in sorted({find(i) for i in range(1, n + 1)}):
        rr, cc = np.nonzero(np.isin(labels, [i for i in range(1, n + 1) if find(i) == root]))
        # circular mean keeps wrapped objects in one piece
        ang_r, ang_c = 2 * np.pi * rr / h, 2 * np.pi * cc / w
        r = (np.arctan2(np.sin(ang_r).mean(), np.cos(ang_r).mean()) % (2 * np.pi)) * h / (2 * np.pi)
        c = (np.arctan2(np.sin(ang_c).mean(), np.cos(ang_c).mean()) % (2 * np.pi)) * w / (2 * np.pi)
        cents.append((r, c))
    return cents
