"""Equilibrium-flow training: fit ``v`` so that ``div v + v . s = 0`` pointwise.

The score ``s`` comes from a frozen denoiser evaluated at a fixed noise level
``alpha``; training batches are drawn from the same alpha-diffused data
distribution the score describes.
"""
import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from ._util import NumericalError, to_tensor
from .field import VelocityNetwork, divergence_exact, divergence_fd, divergence_hutchinson

log = logging.getLogger(__name__)

DIV_MODES = ("fd", "hutchinson", "exact")


@dataclass
class FlowTrainConfig:
    epochs: int = 2000
    batch: int = 256
    lr: float = 1e-3
    k_probes: int = 4
    div_mode: str = "fd"
    alpha: float = 0.95
    seed: int = 0
    h: float = 1e-3
    pe_levels: int = 4
    hidden: tuple = (128, 128, 128)
    min_speed: float = 0.1

    def __post_init__(self):
        if self.div_mode not in DIV_MODES:
            raise ValueError(f"div_mode must be one of {DIV_MODES}")
        if self.div_mode == "hutchinson" and self.k_probes < 1:
            raise ValueError("k_probes must be >= 1 in hutchinson mode")


@dataclass
class ResidualReport:
    mean_sq_residual: float
    residuals: np.ndarray
    mean_speed: float = float("nan")
    flagged: bool = False
    losses: list = field(default_factory=list)


def residual(v_at_x, div_v, s_at_x):
    """Pointwise continuity residual ``div v + v . s``; batched along the leading axis."""
    return div_v + (v_at_x * s_at_x).sum(-1)


def _velocity_and_divergence(net, x, cfg, rng=None):
    if isinstance(net, VelocityNetwork):
        v, fld = net.with_batch_stats(x)
    else:
        fld = net
        v = fld(x)
    if cfg.div_mode == "fd":
        div = divergence_fd(fld, x, cfg.h)
    elif cfg.div_mode == "exact":
        div = divergence_exact(fld, x, create_graph=True)
    else:
        div = divergence_hutchinson(fld, x, cfg.k_probes, rng=rng, h=cfg.h)
    return v, div


def loss_batch(net, score_fn, batch, cfg, scores=None, rng=None):
    """Mean squared residual over a batch; the score is a fixed target (no gradient)."""
    x = to_tensor(batch)
    if isinstance(net, VelocityNetwork):
        x = x.to(next(net.parameters()).dtype)
    if x.shape[0] < 2 and isinstance(net, VelocityNetwork) and net.training:
        raise ValueError("batch size must be >= 2")
    if scores is None:
        with torch.no_grad():
            scores = score_fn(x)
    s = to_tensor(scores).to(x.dtype).detach()
    v, div = _velocity_and_divergence(net, x, cfg, rng)
    loss = (residual(v, div, s) ** 2).mean()
    if not torch.isfinite(loss):
        raise NumericalError("non-finite equilibrium-flow loss")
    return loss


def negate_network(net):
    """Copy of ``net`` computing ``-v`` exactly (final linear layer negated)."""
    out = copy.deepcopy(net)
    last = out.mlp.net[-1]
    with torch.no_grad():
        last.weight.neg_()
        last.bias.neg_()
    out.norm.running_mean.neg_()
    return out


def residual_report(net, score_fn, x, cfg, rng=None):
    """Per-sample residuals of ``net`` (eval mode) on states ``x``."""
    was_training = net.training
    net.eval()
    x = to_tensor(x).to(next(net.parameters()).dtype)
    with torch.no_grad():
        s = to_tensor(score_fn(x)).to(x.dtype)
    v, div = _velocity_and_divergence(net, x, cfg, rng)
    res = residual(v, div, s).detach().double().numpy()
    speed = float(v.detach().norm(dim=-1).mean())
    net.train(was_training)
    return ResidualReport(float(np.mean(res**2)), res, speed)


def train_flow(samples, score_model, cfg=None, log_every=0):
    """Train a :class:`VelocityNetwork` on ``samples`` against ``score_model``.

    Every epoch re-diffuses the samples at ``cfg.alpha`` with fresh noise, so
    the network sees draws from the same distribution whose score it is
    matched against.  Returns ``(net, report)``; ``report.flagged`` is set if
    the final mean speed falls below ``cfg.min_speed`` (a collapsed field).
    """
    cfg = cfg or FlowTrainConfig()
    data = to_tensor(samples, torch.float32)
    n, d = data.shape
    gen = torch.Generator().manual_seed(int(cfg.seed))
    rng = np.random.default_rng(cfg.seed)
    net = VelocityNetwork(d, cfg.pe_levels, cfg.hidden, seed=cfg.seed)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    score_fn = score_model.score_fn(cfg.alpha)
    a = cfg.alpha
    losses = []
    net.train()
    for epoch in range(cfg.epochs):
        perm = torch.randperm(n, generator=gen)
        total, count = 0.0, 0
        for b, start in enumerate(range(0, n - 1, cfg.batch)):
            x0 = data[perm[start : start + cfg.batch]]
            if x0.shape[0] < 2:
                continue
            eps = torch.randn(x0.shape, generator=gen)
            x = math.sqrt(a) * x0 + math.sqrt(1 - a) * eps
            try:
                loss = loss_batch(net, score_fn, x, cfg, rng=rng)
            except NumericalError as exc:
                raise NumericalError(f"{exc} at epoch {epoch}, batch {b}") from None
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * x0.shape[0]
            count += x0.shape[0]
        losses.append(total / count)
        if log_every and (epoch + 1) % log_every == 0:
            log.info("flow epoch %d/%d loss %.5f", epoch + 1, cfg.epochs, losses[-1])
    net.eval()
    eps = torch.randn(data.shape, generator=gen)
    report = residual_report(net, score_fn, math.sqrt(a) * data + math.sqrt(1 - a) * eps, cfg, rng)
    report.losses = losses
    if report.mean_speed < cfg.min_speed:
        report.flagged = True
        log.warning("trained field collapsed: mean speed %.3g < %.3g", report.mean_speed, cfg.min_speed)
    return net, report
