"""Command-line entry point.

Every command writes its primary artifact atomically, a ``<out>.csv`` metrics
sidecar and a ``<out>.manifest.json`` echoing the resolved configuration.
Options may also come from a ``key = value`` file given with ``--config``;
flags on the command line win.

Exit status: 0 on success, 2 for bad input, 3 for numerical failure.
"""
import argparse
import csv
import io
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import torch

from . import __version__
from ._util import FormatError, NumericalError, derive_rng, derive_seed
from .diffusion import DenoiserModel, train_denoiser
from .field import VelocityNetwork, integrate_rk4
from .io import atomic_write, load_dataset, save_dataset, save_rollout
from .metrics import make_baseline, mmd_rbf, preservation_curve
from .pipelines import (
    centroid_tracks,
    lorenz_fidelity,
    lorenz_fingerprint_groups,
    standardized_lorenz,
    turing_comparison,
)
from .skew import LangevinConfig, langevin_rollout, random_skew_kernel, recover_turing_dynamics
from .systems import (
    TOY_SYSTEMS,
    Standardizer,
    alife_dataset,
    demo_sprite,
    generate_turing_dataset,
    gray_scott_preset,
    gray_scott_step,
    sample_toy2d,
)
from .trainer import FlowTrainConfig, train_flow

log = logging.getLogger("eqflow")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3

# Langevin settings for 2-channel grids scored at alpha = 0.9; dt = 1 diverges (see README)
GRID_DT = 0.01
GRID_STEPS = 50


# ---------------------------------------------------------------- helpers


def read_config(path):
    """Parse a ``key = value`` file; ``#`` starts a comment, keys use dashes or underscores."""
    out = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{n}: expected key = value")
            k, v = (s.strip() for s in line.split("=", 1))
            out[k.replace("-", "_")] = v
    return out


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    atomic_write(path, buf.getvalue().encode())


def write_manifest(args, extra=None):
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}
    body = {"command": args.command, "version": __version__, "config": cfg}
    if extra:
        body.update(extra)
    atomic_write(args.out + ".manifest.json", (json.dumps(body, indent=2, default=str) + "\n").encode())


def read_manifest(path):
    try:
        with open(path + ".manifest.json") as fh:
            return json.load(fh)
    except FileNotFoundError:
        return {}


def load_standardizer(data_path):
    st = read_manifest(data_path).get("standardizer")
    return Standardizer(np.array(st["mean"]), np.array(st["std"])) if st else None


def _f(x):
    return f"{x:.6g}"


# ---------------------------------------------------------------- commands


def cmd_gen_data(args):
    extra = {}
    system = args.system.replace("-", "_")
    if system in TOY_SYSTEMS:
        data = sample_toy2d(system, args.n, derive_rng(args.seed, "toy"))
    elif system == "lorenz":
        data, std = standardized_lorenz(args.n, args.seed)
        extra["standardizer"] = {"mean": std.mean.tolist(), "std": std.std.tolist()}
    elif system == "gray_scott":
        if args.preset is None:
            raise ValueError("gray-scott needs --preset")
        data = generate_turing_dataset(args.preset, args.n, (args.grid, args.grid), args.burn_in, args.seed)
    else:
        raise ValueError(f"unknown system {args.system!r}")
    save_dataset(args.out, data)
    write_csv(args.out + ".csv", ["stat", "value"], [["n", len(data)], ["shape", "x".join(map(str, data.shape))],
              ["mean", _f(float(np.mean(data)))], ["std", _f(float(np.std(data)))]])
    write_manifest(args, extra)
    print(f"wrote {args.out} {data.shape}")


def cmd_train_score(args):
    data = load_dataset(args.data)
    grid = data.ndim == 4
    epochs = args.epochs or (50 if grid else 2000)
    batch = args.batch or (16 if grid else 256)
    model = train_denoiser(
        data, objective=args.objective, epochs=epochs, batch=batch, lr=args.lr, seed=args.seed,
        tau_min=args.tau_min, tau_max=args.tau_max, log_every=args.log_every,
    )
    atomic_write(args.out, model.to_bytes())
    write_csv(args.out + ".csv", ["epoch", "loss"], [[i + 1, _f(v)] for i, v in enumerate(model.losses)])
    write_manifest(args, {"final_loss": model.final_loss})
    print(f"wrote {args.out} final loss {model.final_loss:.5f}")


def _flow_job(job):
    data, score_bytes, cfg = job
    torch.set_num_threads(1)
    net, report = train_flow(data, DenoiserModel.from_bytes(score_bytes), cfg)
    return net.to_bytes(), report


def _seed_path(out, seed, many):
    if not many:
        return out
    stem, dot, ext = out.rpartition(".")
    return f"{stem}-s{seed}.{ext}" if dot else f"{out}-s{seed}"


def cmd_train_flow(args):
    data = load_dataset(args.data)
    if data.ndim != 2:
        raise ValueError("train-flow expects an n x d dataset")
    with open(args.score, "rb") as fh:
        score_bytes = fh.read()
    DenoiserModel.from_bytes(score_bytes)  # validate before any training
    div = {"hutch": "hutchinson"}.get(args.div, args.div)
    seeds = [args.seed + i for i in range(args.seeds)]
    jobs = [
        (data, score_bytes, FlowTrainConfig(epochs=args.epochs, batch=args.batch, lr=args.lr, k_probes=args.k,
                                            div_mode=div, alpha=args.alpha, seed=s, pe_levels=args.pe_levels))
        for s in seeds
    ]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_flow_job, jobs))
    else:
        results = [_flow_job(j) for j in jobs]
    rows, outs = [], []
    for s, (blob, report) in zip(seeds, results):
        path = _seed_path(args.out, s, len(seeds) > 1)
        atomic_write(path, blob)
        outs.append(path)
        rows += [[s, i + 1, _f(v)] for i, v in enumerate(report.losses)]
        status = "FLAGGED (collapsed)" if report.flagged else "ok"
        print(f"seed {s}: residual {report.mean_sq_residual:.5f} speed {report.mean_speed:.3f} {status} -> {path}")
    write_csv(args.out + ".csv", ["seed", "epoch", "loss"], rows)
    write_manifest(args, {
        "models": outs,
        "reports": [{"seed": s, "mean_sq_residual": r.mean_sq_residual, "mean_speed": r.mean_speed,
                     "flagged": r.flagged} for s, (_, r) in zip(seeds, results)],
    })


def _grid_states(path, index, count=1):
    data = load_dataset(path)
    if data.ndim != 4:
        raise ValueError("expected a grid dataset (n x c x h x w)")
    if not 0 <= index < len(data) or index + count > len(data):
        raise ValueError(f"index {index} out of range for {len(data)} samples")
    return data[index : index + count].astype(np.float64)


def cmd_recover(args):
    model = DenoiserModel.load(args.score)
    x0 = _grid_states(args.data, args.index)
    p = gray_scott_preset(args.preset)
    cfg = LangevinConfig(args.eta, args.dt, args.steps, args.seed)
    score_fn = model.score_fn(args.alpha)
    gt = x0
    for _ in range(args.T):
        gt = gray_scott_step(gt, p)
    gammas = {"both": (1.0, -1.0), "1": (1.0,), "-1": (-1.0,)}[args.gamma]
    op, _, sims = recover_turing_dynamics(score_fn, x0, (gt - x0).reshape(-1), cfg, gammas)
    _, frames = langevin_rollout(x0, op, score_fn, cfg, record_every=args.record_every)
    frames = frames[:, 0].numpy()
    save_rollout(args.out, frames)
    rel = [float(np.linalg.norm(b - a) / np.linalg.norm(a)) for a, b in zip(frames[:-1], frames[1:])]
    write_csv(args.out + ".csv", ["gamma", "similarity", "selected"],
              [[g, _f(s), int(g == op.gamma)] for g, s in sims.items()])
    write_manifest(args, {"selected_gamma": op.gamma, "similarities": sims,
                          "mean_relative_frame_change": float(np.mean(rel)) if rel else 0.0})
    print(f"selected gamma {op.gamma:+g}; similarities {sims}; wrote {frames.shape[0]} frames")


def cmd_rollout(args):
    net = VelocityNetwork.load(args.model)
    data = load_dataset(args.data)
    x0 = data[: args.n].astype(np.float64)
    traj = integrate_rk4(net.double(), x0, args.dt, args.steps)
    frames = traj[:: args.record_every]
    save_rollout(args.out, frames)
    rows = [[i * args.record_every, _f(i * args.record_every * args.dt), _f(mmd_rbf(x0, f))] for i, f in enumerate(frames)]
    write_csv(args.out + ".csv", ["step", "t", "mmd_to_initial"], rows)
    write_manifest(args)
    print(f"wrote {len(frames)} frames of {len(x0)} particles")


def _eval_mmd(args):
    net = VelocityNetwork.load(args.model).double()
    data = load_dataset(args.data).astype(np.float64)[: args.n]
    rng = derive_rng(args.seed, "eval-mmd")
    base = make_baseline("random_network", net, rng, calibrate_on=data)
    ours = preservation_curve(net, data, args.steps, args.dt, args.every)
    rand = preservation_curve(base, data, args.steps, args.dt, args.every)
    half = len(data) // 2
    floor = mmd_rbf(data[:half], data[half:])
    rows = [[_f(t), _f(a), _f(b), _f(floor)] for (t, a), (_, b) in zip(ours, rand)]
    return ["t", "mmd_learned", "mmd_random", "noise_floor"], rows


def _eval_lorenz(args):
    data = load_dataset(args.data).astype(np.float64)
    std = load_standardizer(args.data)
    if std is None:
        raise ValueError("Lorenz dataset manifest carries no standardizer; regenerate with gen-data")
    probes = data[: args.n_probes]
    save_dataset(args.out + ".probes.eqf", probes)
    models = [VelocityNetwork.load(p) for p in args.models]
    score = DenoiserModel.load(args.score) if args.score else None
    groups = lorenz_fingerprint_groups(models, probes, std, args.n_random, args.seed, score, args.alpha)
    res = lorenz_fidelity(groups)
    return ["row", "col", "mean", "std", "count"], [[a, b, _f(m), _f(s), n] for a, b, m, s, n in res["table"]]


def _eval_turing(args):
    model = DenoiserModel.load(args.score)
    x0 = _grid_states(args.data, args.index, args.n_init)
    cfg = LangevinConfig(args.eta, args.dt, args.steps, args.seed)
    res = turing_comparison(model.score_fn(args.alpha), x0, args.preset, cfg, args.T, args.n_random, args.seed)
    # baselines: spread of each random draw's mean over the initial states
    rows = [[k, _f(v.mean()), _f(v.mean(0).std() if v.ndim == 2 else v.std()), v.size]
            for k, v in res.items() if k != "gamma"]
    return ["method", "mean_similarity", "std", "count"], rows


def cmd_eval(args):
    header, rows = {"mmd": _eval_mmd, "lorenz": _eval_lorenz, "turing": _eval_turing}[args.mode](args)
    write_csv(args.out, header, rows)
    write_manifest(args)
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    for r in [header] + rows:
        print("  ".join(str(c).ljust(w) for c, w in zip(r, widths)))


def _read_png(path):
    from PIL import Image

    img = np.asarray(Image.open(path).convert("RGBA"), dtype=float) / 255.0
    return img


def cmd_alife(args):
    pattern = _read_png(args.pattern) if args.pattern else demo_sprite()
    data = alife_dataset(pattern, args.n_scenes, (args.canvas, args.canvas), args.n_patterns, args.seed)
    model = train_denoiser(data, objective="v", epochs=args.score_epochs, batch=args.batch,
                           seed=derive_seed(args.seed, "alife-score"), log_every=args.log_every)
    op = random_skew_kernel(3, args.radius, derive_rng(args.seed, "alife-kernel"))
    op.weights *= args.gamma / max(np.abs(op.weights).max(), 1e-12)
    cfg = LangevinConfig(args.eta, args.dt, args.steps, args.seed)
    _, frames = langevin_rollout(data[:1].astype(np.float64), op, model.score_fn(args.alpha), cfg,
                                 record_every=args.record_every)
    frames = frames[:, 0].numpy()
    save_rollout(args.out, frames)
    tracks = centroid_tracks(frames, threshold=args.threshold)
    write_csv(args.out + ".csv", ["frame", "track", "row", "col"], [[f, t, _f(r), _f(c)] for f, t, r, c in tracks])
    write_manifest(args, {"score_final_loss": model.final_loss, "kernel_radius": args.radius})
    print(f"wrote {frames.shape[0]} frames, {len({t for _, t, _, _ in tracks})} tracks")


# ---------------------------------------------------------------- parser


def build_parser():
    ap = argparse.ArgumentParser(prog="eqflow", description=__doc__.split("\n")[0])
    ap.add_argument("--config", help="key = value file with option defaults")
    ap.add_argument("--log-level", default="WARNING")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True)
        return p

    p = add("gen-data", cmd_gen_data, "generate a dataset")
    p.add_argument("--system", required=True, help="ring | two_gaussians | two_moons | lorenz | gray-scott")
    p.add_argument("--preset", help="Gray-Scott preset: life | wave | spirals | maze")
    p.add_argument("--n", type=int, default=4096)
    p.add_argument("--grid", type=int, default=64)
    p.add_argument("--burn-in", type=int, default=4000)

    p = add("train-score", cmd_train_score, "train a denoising score model")
    p.add_argument("--data", required=True)
    p.add_argument("--objective", choices=("eps", "v"), default="v")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--tau-min", type=float, default=0.01)
    p.add_argument("--tau-max", type=float, default=1.0)
    p.add_argument("--log-every", type=int, default=0)

    p = add("train-flow", cmd_train_flow, "train equilibrium-flow velocity fields")
    p.add_argument("--data", required=True)
    p.add_argument("--score", required=True)
    p.add_argument("--alpha", type=float, default=0.95)
    p.add_argument("--div", choices=("fd", "hutch", "hutchinson", "exact"), default="fd")
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--epochs", type=int, default=2000)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--pe-levels", type=int, default=4)
    p.add_argument("--seeds", type=int, default=1, help="train this many models, seeds seed..seed+n-1")
    p.add_argument("--jobs", type=int, default=1)

    def langevin_opts(p, alpha):
        p.add_argument("--alpha", type=float, default=alpha)
        p.add_argument("--eta", type=float, default=0.1)
        p.add_argument("--dt", type=float, default=GRID_DT)
        p.add_argument("--steps", type=int, default=GRID_STEPS)

    p = add("recover", cmd_recover, "training-free Turing dynamics with orientation selection")
    p.add_argument("--score", required=True)
    p.add_argument("--data", required=True, help="grid dataset supplying the initial state")
    p.add_argument("--preset", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--gamma", choices=("both", "1", "-1"), default="both")
    p.add_argument("--T", type=int, default=50, help="simulator steps for the reference change")
    p.add_argument("--record-every", type=int, default=10)
    langevin_opts(p, 0.9)

    p = add("rollout", cmd_rollout, "RK4 rollout of a learned velocity field")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--dt", type=float, default=0.1)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--record-every", type=int, default=10)

    p = add("eval", cmd_eval, "MMD curves and similarity tables")
    p.add_argument("--mode", choices=("mmd", "lorenz", "turing"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--model", help="velocity model (mmd)")
    p.add_argument("--models", nargs="+", help="velocity models (lorenz)")
    p.add_argument("--score", help="score model (lorenz: optional extra row; turing: required)")
    p.add_argument("--preset", help="Gray-Scott preset (turing)")
    p.add_argument("--n", type=int, default=1024)
    p.add_argument("--steps", type=int, help="100 for mmd, the grid Langevin default for turing")
    p.add_argument("--dt", type=float, help="0.1 for mmd, the grid Langevin default for turing")
    p.add_argument("--every", type=int, default=10)
    p.add_argument("--n-probes", type=int, default=1024)
    p.add_argument("--n-random", type=int, default=10)
    p.add_argument("--n-init", type=int, default=4)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--T", type=int, default=50)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--eta", type=float, default=0.1)

    p = add("alife", cmd_alife, "scatter a sprite, learn its score and roll out skew dynamics")
    p.add_argument("--pattern", help="RGBA PNG; a built-in sprite when omitted")
    p.add_argument("--n-scenes", type=int, default=256)
    p.add_argument("--canvas", type=int, default=64)
    p.add_argument("--n-patterns", type=int, default=16)
    p.add_argument("--score-epochs", type=int, default=50)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--radius", type=int, default=1)
    p.add_argument("--gamma", type=float, default=1.0, help="largest kernel entry after scaling")
    p.add_argument("--threshold", type=float, default=0.05)
    p.add_argument("--record-every", type=int, default=10)
    p.add_argument("--log-every", type=int, default=0)
    langevin_opts(p, 0.9)
    return ap


def parse_args(argv):
    ap = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, rest = pre.parse_known_args(argv)
    if known.config:
        cfg = read_config(known.config)
        command = next((a for a in rest if not a.startswith("-")), None)
        sub = ap._subparsers._group_actions[0].choices.get(command)
        if sub is not None:
            actions = {a.dest: a for a in sub._actions}
            unknown = sorted(set(cfg) - set(actions) - {"func"})
            if unknown:
                raise ValueError(f"unknown config keys for {command}: {unknown}")
            for k in cfg:
                actions[k].required = False  # the file supplies it; a flag still wins
            sub.set_defaults(**cfg)
    return ap.parse_args(argv)


def _fill_eval_defaults(args):
    if args.command != "eval":
        return
    turing = args.mode == "turing"
    if args.alpha is None:
        args.alpha = 0.9 if turing else 0.95
    if args.steps is None:
        args.steps = GRID_STEPS if turing else 100
    if args.dt is None:
        args.dt = GRID_DT if turing else 0.1


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_INPUT
    except (OSError, ValueError) as exc:
        print(f"eqflow: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    _fill_eval_defaults(args)
    try:
        args.func(args)
    except NumericalError as exc:
        print(f"eqflow: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError, ValueError, KeyError) as exc:
        print(f"eqflow: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
