"""Ground-truth systems: toy 2-d densities, Lorenz, Gray-Scott and alife scenes."""
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage

from ._util import NumericalError, derive_rng
from .field import integrate_rk4

TOY_SYSTEMS = ("two_gaussians", "ring", "two_moons")


def sample_toy2d(name, n, rng):
    """Draw ``n`` points from one of the 2-d toy densities."""
    if name == "two_gaussians":
        side = np.where(rng.random(n) < 0.5, -1.5, 1.5)
        pts = rng.normal(0.0, 0.4, (n, 2))
        pts[:, 0] += side
        return pts
    if name == "ring":
        theta = rng.uniform(0, 2 * np.pi, n)
        r = 1.0 + rng.normal(0.0, 0.1, n)
        return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    if name == "two_moons":
        upper = rng.random(n) < 0.5
        theta = rng.uniform(0, np.pi, n)
        pts = np.where(
            upper[:, None],
            np.stack([np.cos(theta), np.sin(theta)], 1),
            np.stack([1 - np.cos(theta), 0.5 - np.sin(theta)], 1),
        )
        return pts - [0.5, 0.25] + rng.normal(0.0, 0.1, (n, 2))
    raise ValueError(f"unknown toy system {name!r}; expected one of {TOY_SYSTEMS}")


@dataclass(frozen=True)
class LorenzParams:
    sigma: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0


def lorenz_derivative(x, params=LorenzParams()):
    """Lorenz vector field; works on numpy arrays or torch tensors of shape (..., 3)."""
    lib = torch if isinstance(x, torch.Tensor) else np
    a, b, c = x[..., 0], x[..., 1], x[..., 2]
    return lib.stack(
        [params.sigma * (b - a), a * (params.rho - c) - b, a * b - params.beta * c], -1
    )


def lorenz_field(params=LorenzParams()):
    return lambda x: lorenz_derivative(x, params)


def lorenz_jacobian(x, params=LorenzParams()):
    a, b, c = x
    return np.array(
        [[-params.sigma, params.sigma, 0.0], [params.rho - c, -1.0, -a], [b, a, -params.beta]]
    )


def lorenz_dataset(n, rng, dt=0.01, transient=1000, every=10, params=LorenzParams()):
    """Points along one long RK4 trajectory, after a transient, every ``every`` steps."""
    x0 = rng.normal(0, 1, 3) + [1.0, 1.0, 20.0]
    steps = transient + n * every
    traj = integrate_rk4(lorenz_field(params), x0, dt, steps)
    return traj[transient + every :: every][:n].copy()


@dataclass
class Standardizer:
    """Per-component affine whitening ``z = (x - mean) / std``."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x):
        x = np.asarray(x, dtype=float)
        return cls(x.mean(0), x.std(0))

    def transform(self, x):
        return (x - self.mean) / self.std

    def inverse(self, z):
        return z * self.std + self.mean

    def conjugate(self, field):
        """The field ``dz/dt`` induced on whitened coordinates by ``dx/dt = field(x)``."""
        mean, std = torch.as_tensor(self.mean), torch.as_tensor(self.std)
        return lambda z: field(z * std.to(z) + mean.to(z)) / std.to(z)


@dataclass(frozen=True)
class GrayScottParams:
    Du: float
    Dv: float
    F: float
    kill: float


GRAY_SCOTT_PRESETS = {
    "life": (0.006, 0.045),
    "wave": (0.018, 0.049),
    "spirals": (0.007, 0.028),
    "maze": (0.029, 0.057),
}


def gray_scott_preset(name):
    try:
        F, kill = GRAY_SCOTT_PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; expected one of {list(GRAY_SCOTT_PRESETS)}") from None
    return GrayScottParams(0.16, 0.08, F, kill)


def laplacian(z):
    """Periodic 9-point Laplacian (edge weight 0.2, corner 0.05, centre -1) over the last two axes.

    On smooth fields this is 0.3 times the continuum Laplacian, so the
    effective diffusivities are 0.3 * Du and 0.3 * Dv.
    """
    r = np.roll
    edge = r(z, 1, -1) + r(z, -1, -1) + r(z, 1, -2) + r(z, -1, -2)
    up, down = r(z, 1, -2), r(z, -1, -2)
    corner = r(up, 1, -1) + r(up, -1, -1) + r(down, 1, -1) + r(down, -1, -1)
    return 0.2 * edge + 0.05 * corner - z


def gray_scott_rate(state, p):
    u, v = state[..., 0, :, :], state[..., 1, :, :]
    uvv = u * v * v
    du = p.Du * laplacian(u) - uvv + p.F * (1 - u)
    dv = p.Dv * laplacian(v) + uvv - (p.F + p.kill) * v
    return np.stack([du, dv], axis=-3)


def gray_scott_step(state, p, dt=1.0):
    """One explicit Euler step on states shaped ``(..., 2, h, w)``."""
    if dt <= 0:
        raise ValueError("dt must be > 0")
    out = state + dt * gray_scott_rate(state, p)
    if not np.isfinite(out).all():
        raise NumericalError("Gray-Scott state became non-finite")
    return out


def gray_scott_run(state, p, steps, dt=1.0):
    for _ in range(steps):
        state = gray_scott_step(state, p, dt)
    return state


def gray_scott_init(h, w, rng, n_splotch=(5, 20), size=6, level=0.5):
    """``u=1, v=0`` background with random ``size x size`` splotches at ``u=v=level``."""
    state = np.zeros((2, h, w))
    state[0] = 1.0
    for _ in range(rng.integers(n_splotch[0], n_splotch[1] + 1)):
        i, j = rng.integers(0, h), rng.integers(0, w)
        rows = (np.arange(i, i + size) % h)[:, None]
        cols = (np.arange(j, j + size) % w)[None, :]
        state[1, rows, cols] = level
        state[0, rows, cols] = level
    return state


def generate_turing_dataset(preset, n_samples, grid=(64, 64), burn_in=4000, seed=0, chunk=64):
    """Final states of ``n_samples`` independent Gray-Scott runs, ``(n, 2, h, w)`` float32.

    Run ``i`` is initialized from a generator keyed by ``(seed, i)`` so any
    subset of runs can be regenerated on its own.
    """
    if burn_in < 1:
        raise ValueError("burn_in must be >= 1")
    p = gray_scott_preset(preset) if isinstance(preset, str) else preset
    h, w = grid
    out = np.empty((n_samples, 2, h, w), dtype=np.float32)
    for start in range(0, n_samples, chunk):
        idx = range(start, min(start + chunk, n_samples))
        batch = np.stack([gray_scott_init(h, w, derive_rng(seed, f"gs-run-{i}")) for i in idx])
        out[start : start + len(batch)] = gray_scott_run(batch, p, burn_in)
    return out


def relative_change(state, p, steps=100, dt=1.0):
    """Mean per-step ``||x_{t+1} - x_t|| / ||x_t||`` over ``steps`` steps, per run."""
    flat = lambda a: a.reshape(a.shape[0], -1)  # noqa: E731
    state = np.asarray(state, dtype=float)
    batch = state[None] if state.ndim == 3 else state
    rel = np.zeros(batch.shape[0])
    for _ in range(steps):
        nxt = gray_scott_step(batch, p, dt)
        rel += np.linalg.norm(flat(nxt - batch), axis=1) / np.linalg.norm(flat(batch), axis=1)
        batch = nxt
    return rel / steps


@dataclass
class Placement:
    row: int
    col: int
    angle: float
    cells: np.ndarray  # flat canvas indices covered by the binarized alpha mask


@dataclass
class AlifeScene:
    rgb: np.ndarray
    occupancy: np.ndarray
    placements: list = field(default_factory=list)


def _rotated(pattern, angle):
    rot = ndimage.rotate(pattern, angle, axes=(1, 0), reshape=True, order=1, mode="constant", cval=0.0)
    return rot[..., :3], rot[..., 3] >= 0.5


def make_alife_scene(pattern, canvas=(128, 128), n_patterns=16, attempts_per_pattern=2, rng=None):
    """Scatter rotated copies of an RGBA ``pattern`` on a periodic canvas without overlap.

    Each of the ``n_patterns`` slots gets ``attempts_per_pattern`` random
    (position, rotation) draws; a draw is kept only if its alpha mask
    (binarized at 0.5, wrapped around the canvas) misses every cell already
    occupied.
    """
    rng = rng if rng is not None else np.random.default_rng()
    pattern = np.asarray(pattern, dtype=float)
    if pattern.max() > 1.0:
        pattern = pattern / 255.0
    h, w = canvas
    if pattern.shape[0] > h or pattern.shape[1] > w:
        raise ValueError("pattern must fit inside the canvas")
    scene = AlifeScene(np.zeros((h, w, 3)), np.zeros((h, w), dtype=bool))
    occ = scene.occupancy.reshape(-1)
    rgb = scene.rgb.reshape(-1, 3)
    for _ in range(n_patterns):
        for _ in range(attempts_per_pattern):
            angle = float(rng.uniform(0, 360))
            row, col = int(rng.integers(h)), int(rng.integers(w))
            colors, mask = _rotated(pattern, angle)
            r, c = np.nonzero(mask)
            flat = ((r + row) % h) * w + (c + col) % w
            cells, first = np.unique(flat, return_index=True)
            if occ[cells].any():
                continue
            occ[cells] = True
            rgb[cells] = colors[r[first], c[first]]
            scene.placements.append(Placement(row, col, angle, cells))
            break
    return scene


def alife_dataset(pattern, n_scenes, canvas=(128, 128), n_patterns=16, seed=0):
    """Scenes as ``(n, 3, h, w)`` float32 RGB grids."""
    scenes = [
        make_alife_scene(pattern, canvas, n_patterns, rng=derive_rng(seed, f"scene-{i}")) for i in range(n_scenes)
    ]
    return np.stack([s.rgb.transpose(2, 0, 1) for s in scenes]).astype(np.float32)


def demo_sprite(size=12):
    """An asymmetric RGBA sprite (teardrop body with a coloured head) for alife demos."""
    yy, xx = np.mgrid[:size, :size] / (size - 1) * 2 - 1
    body = (xx / 1.0) ** 2 + (yy / 0.55) ** 2 <= 1.0
    head = (xx - 0.55) ** 2 + yy**2 <= 0.16
    img = np.zeros((size, size, 4))
    img[body] = [0.2, 0.8, 0.3, 1.0]
    img[head] = [0.9, 0.9, 0.1, 1.0]
    return img
