"""Velocity fields, divergence operators and fixed-step RK4 integration.

A velocity field is any callable mapping a batch of states ``(n, d)`` to
velocities ``(n, d)``; torch tensors in, torch tensors out.  Analytic fields
written with plain torch ops (``lambda x: x @ A.T``) work everywhere a
:class:`VelocityNetwork` does.
"""
import struct

import numpy as np
import torch
from torch import nn

from ._util import FormatError, NumericalError, to_tensor

FIELD_MAGIC = b"EQFV1"


def positional_encode(x, n):
    """Sin/cos features at octaves ``2**0 .. 2**n``.

    Ordering is octave-major, then (sin, cos), then component, so a 2-d input
    with ``n=0`` gives ``[sin x1, sin x2, cos x1, cos x2]``.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    x = to_tensor(x)
    feats = []
    for level in range(n + 1):
        scaled = x * (2.0**level)
        feats.append(torch.sin(scaled))
        feats.append(torch.cos(scaled))
    return torch.cat(feats, dim=-1)


class OutputNorm(nn.Module):
    """Per-component normalization with no learnable scale or shift.

    Train mode normalizes with batch statistics (biased variance) and folds
    them into running averages; eval mode uses the running averages.
    Zero-variance components map to 0 through the ``eps`` guard.
    """

    def __init__(self, dim, eps=1e-5, momentum=0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.register_buffer("running_mean", torch.zeros(dim))
        self.register_buffer("running_var", torch.ones(dim))

    def batch_stats(self, raw, update=True):
        if raw.shape[0] < 2:
            raise ValueError("train-mode normalization needs a batch of at least 2")
        mean = raw.mean(0)
        var = raw.var(0, unbiased=False)
        if update:
            with torch.no_grad():
                n = raw.shape[0]
                m = self.momentum
                self.running_mean.mul_(1 - m).add_(m * mean.detach().to(self.running_mean))
                self.running_var.mul_(1 - m).add_(
                    m * var.detach().to(self.running_var) * n / (n - 1)
                )
        return mean, var

    def apply(self, raw, mean, var):
        return (raw - mean) / torch.sqrt(var + self.eps)

    def forward(self, raw):
        if self.training:
            mean, var = self.batch_stats(raw)
        else:
            mean, var = self.running_mean.to(raw), self.running_var.to(raw)
        return self.apply(raw, mean, var)


class MLP(nn.Module):
    """Dense SiLU stack over ``[x, positional_encode(x)]``."""

    def __init__(self, in_dim, out_dim, pe_levels=4, hidden=(128, 128, 128), extra_in=0):
        super().__init__()
        self.in_dim = in_dim
        self.pe_levels = pe_levels
        self.hidden = tuple(int(h) for h in hidden)
        width = in_dim + 2 * in_dim * (pe_levels + 1) + extra_in
        layers = []
        for h in self.hidden:
            layers += [nn.Linear(width, h), nn.SiLU()]
            width = h
        layers.append(nn.Linear(width, out_dim))
        self.net = nn.Sequential(*layers)

    @property
    def input_width(self):
        return self.net[0].in_features

    def features(self, x):
        return torch.cat([x, positional_encode(x, self.pe_levels)], dim=-1)

    def forward(self, x):
        return self.net(self.features(x))


class VelocityNetwork(nn.Module):
    """Learned velocity field: encode -> dense SiLU stack -> OutputNorm."""

    def __init__(self, dim, pe_levels=4, hidden=(128, 128, 128), eps=1e-5, momentum=0.1, seed=None):
        super().__init__()
        self.dim = dim
        if seed is None:
            self.mlp = MLP(dim, dim, pe_levels, hidden)
        else:
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(seed)
                self.mlp = MLP(dim, dim, pe_levels, hidden)
        self.norm = OutputNorm(dim, eps, momentum)

    @property
    def pe_levels(self):
        return self.mlp.pe_levels

    @property
    def hidden(self):
        return self.mlp.hidden

    def _cast(self, x):
        return to_tensor(x).to(next(self.parameters()).dtype)

    def raw(self, x):
        return self.mlp(self._cast(x))

    def forward(self, x):
        x = self._cast(x)
        single = x.ndim == 1
        out = self.norm(self.raw(x.reshape(-1, self.dim)))
        return out[0] if single else out

    def with_batch_stats(self, x):
        """Velocities for batch ``x`` plus a per-sample field frozen at its statistics.

        In train mode the returned callable normalizes any input with the
        statistics of ``x`` (gradients still flow through them), so shifted
        copies of the batch can be evaluated for divergence without
        perturbing the normalization.  In eval mode it is just the network.
        """
        x = self._cast(x)
        raw = self.raw(x)
        if not self.training:
            mean, var = self.norm.running_mean.to(raw), self.norm.running_var.to(raw)
        else:
            mean, var = self.norm.batch_stats(raw)
        field = lambda y: self.norm.apply(self.raw(y), mean, var)  # noqa: E731
        return self.norm.apply(raw, mean, var), field

    @torch.no_grad()
    def calibrate(self, samples, batch=4096):
        """Set running statistics to the exact raw-output moments over ``samples``."""
        x = self._cast(samples)
        raw = torch.cat([self.raw(x[i : i + batch]) for i in range(0, len(x), batch)])
        self.norm.running_mean.copy_(raw.mean(0))
        self.norm.running_var.copy_(raw.var(0, unbiased=False))
        return self

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    def to_bytes(self):
        sizes = self.hidden
        head = FIELD_MAGIC + struct.pack("<III", self.dim, self.pe_levels, len(sizes))
        head += struct.pack(f"<{len(sizes)}I", *sizes)
        tensors = [p for _, p in self.named_parameters()] + [self.norm.running_mean, self.norm.running_var]
        body = b"".join(t.detach().cpu().numpy().astype("<f4").tobytes() for t in tensors)
        return head + body

    @classmethod
    def from_bytes(cls, buf):
        if buf[:5] != FIELD_MAGIC:
            raise FormatError("not an EQFV1 velocity-network file")
        dim, n, nlayers = struct.unpack_from("<III", buf, 5)
        off = 5 + 12
        sizes = struct.unpack_from(f"<{nlayers}I", buf, off)
        off += 4 * nlayers
        net = cls(dim, pe_levels=n, hidden=sizes)
        tensors = [p for _, p in net.named_parameters()] + [net.norm.running_mean, net.norm.running_var]
        total = sum(t.numel() for t in tensors)
        if off + 4 * total != len(buf):
            raise FormatError("EQFV1 payload size does not match header")
        flat = np.frombuffer(buf, dtype="<f4", count=total, offset=off)
        with torch.no_grad():
            pos = 0
            for t in tensors:
                t.copy_(torch.from_numpy(flat[pos : pos + t.numel()].copy()).reshape(t.shape))
                pos += t.numel()
        return net.eval()

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def _batched(x):
    x = to_tensor(x)
    return (x[None], True) if x.ndim == 1 else (x, False)


def _unbatch(out, single, like):
    out = out[0] if single else out
    return out.detach().numpy() if isinstance(like, np.ndarray) else out


def divergence_exact(field, x, create_graph=False):
    """Jacobian trace by reverse-mode autodiff, one input axis at a time.

    Assumes the field acts on samples independently (true for analytic fields
    and for networks in eval mode or frozen via ``with_batch_stats``).
    """
    xb, single = _batched(x)
    with torch.enable_grad():
        xb = xb.detach().requires_grad_(True)
        v = field(xb)
        div = torch.zeros(xb.shape[0], dtype=v.dtype)
        for i in range(xb.shape[1]):
            (g,) = torch.autograd.grad(v[:, i].sum(), xb, create_graph=create_graph, retain_graph=True)
            div = div + g[:, i]
    return _unbatch(div, single, x)


def divergence_fd(field, x, h=1e-3):
    """Central-difference divergence; exact for fields linear in x."""
    if h <= 0:
        raise ValueError("h must be > 0")
    xb, single = _batched(x)
    n, d = xb.shape
    eye = torch.eye(d, dtype=xb.dtype) * h
    shifted = torch.cat([xb[None] + eye[:, None], xb[None] - eye[:, None]]).reshape(-1, d)
    v = field(shifted).reshape(2, d, n, d)
    idx = torch.arange(d)
    div = (v[0, idx, :, idx] - v[1, idx, :, idx]).sum(0) / (2 * h)
    return _unbatch(div, single, x)


def divergence_hutchinson(field, x, k=4, rng=None, probes=None, h=None, create_graph=False):
    """Hutchinson trace estimate ``mean_j z_j^T J z_j`` with Gaussian probes.

    ``probes`` of shape ``(k, d)`` or ``(k, n, d)`` override sampling.  With
    ``h`` set, each ``J z`` is a central difference along ``z`` instead of an
    autodiff vector-Jacobian product.
    """
    xb, single = _batched(x)
    n, d = xb.shape
    if probes is None:
        if k < 1:
            raise ValueError("k must be >= 1")
        rng = rng if rng is not None else np.random.default_rng()
        z = torch.as_tensor(rng.standard_normal((k, n, d)), dtype=xb.dtype)
    else:
        z = to_tensor(probes).to(xb.dtype)
        if z.ndim == 1:
            z = z[None]
        if z.ndim == 2:
            z = z[:, None, :].expand(-1, n, -1)
        k = z.shape[0]
    xr = xb[None].expand(k, n, d).reshape(-1, d)
    zr = z.reshape(-1, d)
    if h is not None:
        v = field(torch.cat([xr + h * zr, xr - h * zr]))
        est = ((v[: k * n] - v[k * n :]) * zr).sum(-1) / (2 * h)
    else:
        with torch.enable_grad():
            xr = xr.detach().requires_grad_(True)
            v = field(xr)
            (g,) = torch.autograd.grad((v * zr).sum(), xr, create_graph=create_graph)
        est = (g * zr).sum(-1)
    return _unbatch(est.reshape(k, n).mean(0), single, x)


def integrate_rk4(field, x0, dt, steps):
    """Classical RK4 trajectory of ``steps + 1`` states starting at ``x0``."""
    if dt <= 0:
        raise ValueError("dt must be > 0")
    x = to_tensor(x0)
    single = x.ndim == 1
    x = x.reshape(1, -1) if single else x
    out = [x]
    with torch.no_grad():
        for i in range(steps):
            k1 = field(x)
            k2 = field(x + 0.5 * dt * k1)
            k3 = field(x + 0.5 * dt * k2)
            k4 = field(x + dt * k3)
            x = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            if not torch.isfinite(x).all():
                raise NumericalError(f"trajectory blew up at step {i + 1}")
            out.append(x)
    traj = torch.stack(out)
    traj = traj[:, 0] if single else traj
    return traj.numpy() if isinstance(x0, np.ndarray) else traj


def linear_field(A):
    """``x -> A x`` as a batched torch field."""
    A = to_tensor(A)
    return lambda x: x @ A.to(x.dtype).T


def zero_field(x):
    return torch.zeros_like(x)
