"""Cosine noise schedule, denoiser training and score extraction.

Score estimates always go through the predicted clean sample:
``s(x) = (sqrt(a) * x0_hat - x) / (1 - a)``, which makes the eps- and
v-prediction objectives interchangeable downstream.
"""
import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from ._util import FormatError, NumericalError, to_tensor
from .field import MLP, positional_encode

SCORE_MAGIC = b"EQFS1"
ALPHA_FLOOR = 1e-5
ALPHA_CEIL = 1 - 1e-5
OBJECTIVES = ("eps", "v")


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str = "cosine"
    s_offset: float = 0.008

    def alpha(self, tau):
        return alpha_of_tau(self, tau)

    def tau(self, alpha):
        return tau_for_alpha(self, alpha)


def alpha_of_tau(schedule, tau):
    """Cumulative signal fraction ``cos^2((tau + s) / (1 + s) * pi / 2)``, clamped."""
    t = np.asarray(tau, dtype=float)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    s = schedule.s_offset
    a = np.cos((t + s) / (1 + s) * math.pi / 2) ** 2
    a = np.clip(a, ALPHA_FLOOR, ALPHA_CEIL)
    return float(a) if a.ndim == 0 else a


def tau_for_alpha(schedule, alpha_target, tol=1e-6):
    """Invert :func:`alpha_of_tau` by bisection (alpha is non-increasing in tau)."""
    if not 0 < alpha_target < 1:
        raise ValueError("alpha_target must lie in (0, 1)")
    lo, hi = 0.0, 1.0
    if alpha_of_tau(schedule, lo) <= alpha_target:
        return lo
    if alpha_of_tau(schedule, hi) >= alpha_target:
        return hi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        a = alpha_of_tau(schedule, mid)
        if abs(a - alpha_target) <= tol:
            return mid
        if a > alpha_target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def diffuse(x0, alpha, eps):
    return math.sqrt(alpha) * x0 + math.sqrt(1 - alpha) * eps


class DenseDenoiser(nn.Module):
    """MLP denoiser for low-dimensional states; tau rides along as an encoded input."""

    def __init__(self, dim, pe_levels=4, hidden=(128, 128, 128)):
        super().__init__()
        self.dim = dim
        self.pe_levels = pe_levels
        self.hidden = tuple(hidden)
        self.mlp = MLP(dim + 1, dim, pe_levels, hidden)

    def forward(self, x, tau):
        tau = tau.reshape(-1, 1).expand(x.shape[0], 1).to(x)
        return self.mlp(torch.cat([x, tau], dim=-1))

    def header(self):
        return struct.pack("<BIII", 0, self.dim, self.pe_levels, len(self.hidden)) + struct.pack(
            f"<{len(self.hidden)}I", *self.hidden
        )


def _conv(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1, padding_mode="circular")


class _Block(nn.Module):
    def __init__(self, cin, cout, temb, stride=1, groups=8):
        super().__init__()
        self.conv1 = _conv(cin, cout, stride)
        self.norm1 = nn.GroupNorm(min(groups, cout), cout)
        self.conv2 = _conv(cout, cout)
        self.norm2 = nn.GroupNorm(min(groups, cout), cout)
        self.time = nn.Linear(temb, cout)

    def forward(self, x, t):
        h = F.silu(self.norm1(self.conv1(x)))
        h = h + self.time(t)[:, :, None, None]
        return F.silu(self.norm2(self.conv2(h)))


class ConvDenoiser(nn.Module):
    """Small periodic encoder-decoder for ``c x h x w`` grids.

    Encoder widths follow ``widths``; each later stage halves the resolution
    with a strided conv, the decoder mirrors it with nearest upsampling and
    skip concatenation.  Every conv pads circularly.
    """

    def __init__(self, channels=2, widths=(16, 32, 64), pe_levels=4):
        super().__init__()
        self.channels = channels
        self.widths = tuple(widths)
        self.pe_levels = pe_levels
        temb = 64
        self.time_mlp = nn.Sequential(nn.Linear(2 * (pe_levels + 1), temb), nn.SiLU(), nn.Linear(temb, temb))
        self.stem = _conv(channels, widths[0])
        self.down = nn.ModuleList()
        cin = widths[0]
        for i, w in enumerate(widths):
            self.down.append(_Block(cin, w, temb, stride=1 if i == 0 else 2))
            cin = w
        self.up = nn.ModuleList()
        for i in range(len(widths) - 1, 0, -1):
            self.up.append(_Block(widths[i] + widths[i - 1], widths[i - 1], temb))
        self.head = _conv(widths[0], channels)

    def forward(self, x, tau):
        t = positional_encode(tau.reshape(-1, 1).expand(x.shape[0], 1).to(x), self.pe_levels)
        t = self.time_mlp(t)
        h = self.stem(x)
        skips = []
        for blk in self.down:
            h = blk(h, t)
            skips.append(h)
        skips.pop()
        for blk in self.up:
            skip = skips.pop()
            h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
            h = blk(torch.cat([h, skip], dim=1), t)
        return self.head(h)

    def header(self):
        return struct.pack("<BIII", 1, self.channels, self.pe_levels, len(self.widths)) + struct.pack(
            f"<{len(self.widths)}I", *self.widths
        )


@dataclass
class DenoiserModel:
    """A trained denoiser plus the schedule and objective it was trained with."""

    net: nn.Module
    objective: str = "v"
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    losses: list = field(default_factory=list)

    @property
    def final_loss(self):
        return self.losses[-1] if self.losses else float("nan")

    def _dtype(self):
        return next(self.net.parameters()).dtype

    def predict_x0(self, x_tau, tau=None, alpha=None):
        return predict_x0(self, x_tau, tau=tau, alpha=alpha)

    def score(self, x, alpha):
        return score(self, x, alpha)

    def score_fn(self, alpha):
        """``x -> s(x)`` at a fixed noise level, without gradient tracking."""
        return lambda x: score(self, x, alpha)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    def to_bytes(self):
        head = SCORE_MAGIC + struct.pack("<Bf", OBJECTIVES.index(self.objective), self.schedule.s_offset)
        head += self.net.header()
        state = self.net.state_dict()
        body = b"".join(t.detach().cpu().numpy().astype("<f4").tobytes() for t in state.values())
        return head + struct.pack("<Q", sum(t.numel() for t in state.values())) + body

    @classmethod
    def from_bytes(cls, buf):
        if buf[:5] != SCORE_MAGIC:
            raise FormatError("not an EQFS1 score-model file")
        f = io.BytesIO(buf[5:])
        obj, s_off = struct.unpack("<Bf", f.read(5))
        arch, a, pe, nl = struct.unpack("<BIII", f.read(13))
        sizes = struct.unpack(f"<{nl}I", f.read(4 * nl))
        net = DenseDenoiser(a, pe, sizes) if arch == 0 else ConvDenoiser(a, sizes, pe)
        (count,) = struct.unpack("<Q", f.read(8))
        flat = np.frombuffer(f.read(), dtype="<f4")
        state = net.state_dict()
        if flat.size != count or count != sum(t.numel() for t in state.values()):
            raise FormatError("EQFS1 payload size does not match header")
        pos = 0
        for k, t in state.items():
            state[k] = torch.from_numpy(flat[pos : pos + t.numel()].copy()).reshape(t.shape).to(t.dtype)
            pos += t.numel()
        net.load_state_dict(state)
        return cls(net.eval(), OBJECTIVES[obj], NoiseSchedule(s_offset=round(s_off, 6)))

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def make_denoiser(sample_shape, **kw):
    """Dense net for flat states, conv net for ``(c, h, w)`` grids."""
    if len(sample_shape) == 1:
        return DenseDenoiser(sample_shape[0], **kw)
    return ConvDenoiser(sample_shape[0], **kw)


def train_denoiser(
    samples,
    schedule=None,
    objective="v",
    epochs=2000,
    batch=256,
    lr=1e-3,
    seed=0,
    tau_min=0.01,
    tau_max=1.0,
    net=None,
    log_every=0,
):
    """Fit an eps- or v-prediction denoiser on ``samples`` with Adam.

    Noise levels are drawn uniformly on ``[tau_min, tau_max]``.  The returned
    model records the mean training loss per epoch.
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}")
    schedule = schedule or NoiseSchedule()
    data = to_tensor(samples, torch.float32)
    if data.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    gen = torch.Generator().manual_seed(int(seed))
    if net is None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(int(seed))
            net = make_denoiser(tuple(data.shape[1:]))
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    model = DenoiserModel(net, objective, schedule)
    s = schedule.s_offset
    n = data.shape[0]
    net.train()
    for epoch in range(epochs):
        perm = torch.randperm(n, generator=gen)
        total, count = 0.0, 0
        for b, start in enumerate(range(0, n, batch)):
            x0 = data[perm[start : start + batch]]
            m = x0.shape[0]
            tau = tau_min + (tau_max - tau_min) * torch.rand(m, generator=gen)
            alpha = torch.clamp(torch.cos((tau + s) / (1 + s) * math.pi / 2) ** 2, ALPHA_FLOOR, ALPHA_CEIL)
            alpha = alpha.reshape(-1, *([1] * (x0.ndim - 1)))
            eps = torch.randn(x0.shape, generator=gen)
            x_tau = alpha.sqrt() * x0 + (1 - alpha).sqrt() * eps
            target = eps if objective == "eps" else alpha.sqrt() * eps - (1 - alpha).sqrt() * x0
            loss = ((net(x_tau, tau) - target) ** 2).mean()
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite denoiser loss at epoch {epoch}, batch {b}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * m
            count += m
        model.losses.append(total / count)
        if log_every and (epoch + 1) % log_every == 0:
            print(f"denoiser epoch {epoch + 1}/{epochs} loss {model.losses[-1]:.5f}")
    net.eval()
    return model


def _alpha_tau(model, tau, alpha):
    if alpha is None:
        alpha = alpha_of_tau(model.schedule, tau)
    if tau is None:
        tau = tau_for_alpha(model.schedule, alpha)
    if alpha < ALPHA_FLOOR:
        raise ValueError("alpha below the schedule clamp floor")
    return float(tau), float(alpha)


def predict_x0(model, x_tau, tau=None, alpha=None):
    """Clean-sample estimate from a noisy input, for either objective."""
    tau, alpha = _alpha_tau(model, tau, alpha)
    x = to_tensor(x_tau)
    with torch.no_grad():
        out = model.net(x.to(model._dtype()), torch.tensor([tau])).to(x.dtype)
    if model.objective == "eps":
        return (x - math.sqrt(1 - alpha) * out) / math.sqrt(alpha)
    return math.sqrt(alpha) * x - math.sqrt(1 - alpha) * out


def score(model, x, alpha):
    """Score of the alpha-diffused data distribution at ``x``."""
    if not ALPHA_FLOOR < alpha < 1:
        raise ValueError("alpha must lie strictly between the clamp floor and 1")
    x = to_tensor(x)
    x0 = model.predict_x0(x, alpha=alpha)
    return (x0 * math.sqrt(alpha) - x) / (1 - alpha)


class GaussianDenoiser:
    """Bayes-optimal denoiser for standard-normal data (``E[x0 | x] = sqrt(a) x``).

    Used as an exact reference model; its score is ``-x`` at every noise level.
    """

    objective = "x0"
    schedule = NoiseSchedule()

    def predict_x0(self, x_tau, tau=None, alpha=None):
        if alpha is None:
            alpha = alpha_of_tau(self.schedule, tau)
        return math.sqrt(alpha) * to_tensor(x_tau)

    def score(self, x, alpha):
        return score(self, x, alpha)

    def score_fn(self, alpha):
        return lambda x: score(self, x, alpha)
