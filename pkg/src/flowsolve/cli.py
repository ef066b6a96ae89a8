"""Command-line experiments: training, convergence ladders, round trips and diagnostics.

Settings are resolved as built-in defaults < ``--config FILE`` < command-line
flags. Every run writes its CSVs, SVG plots, ``summary.json`` and an echo of
the resolved settings (``config.txt``, itself a valid ``--config`` file) into
``--out``.
"""

from __future__ import annotations

import argparse
import ast
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from flowsolve import metrics
from flowsolve.fields import AnalyticField, parse_field
from flowsolve.metrics import csv_block
from flowsolve.reflow_train import (
    GaussianMixtureSpec,
    IndependentCoupling,
    TrainConfig,
    TrainingDiverged,
    reflow,
    sample_mixture,
    train_rectified_flow,
)
from flowsolve.solvers import DivergenceError, SolverKind, TimeGrid, expected_nfe, integrate, steps_for_nfe
from flowsolve.svg import line_plot
from flowsolve.tinynet import MLPField, load_checkpoint, save_checkpoint

log = logging.getLogger("flowsolve")

COMMANDS = ("train", "convergence", "reconstruct", "velocity-error", "straightness", "perturb", "energy")
SOLVERS = tuple(k.value for k in SolverKind)
CHUNK = 250

COMMON = {
    "seed": 1024,
    "solver": "all",
    "schedule": "uniform",
    "checkpoint": None,
    "field": None,
    "workers": 1,
    "samples": 1000,
    "source_means": [(-8.0, -3.0), (-8.0, 3.0)],
    "target_means": [(8.0, -4.0), (8.0, 0.0), (8.0, 4.0)],
    "mixture_scale": 1.0,
}
PER_COMMAND = {
    "train": {"iterations": 3000, "batch_size": 256, "lr": 3e-3, "hidden": (64, 64, 64),
              "reflow": False, "reflow_pairs": 10000, "reflow_steps": 100},
    "convergence": {"steps": (4, 8, 16, 32, 64, 128), "field": "linear:-1", "x0": 1.0, "samples": 64,
                    "reference_steps": 4096},
    "reconstruct": {"steps": (4, 8, 16, 32)},
    "velocity-error": {"steps": (10, 20)},
    "straightness": {"nfe": 20},
    "perturb": {"steps": (512,), "field": "linear:1", "x0": 1.0, "delta": 0.1, "solver": "midpoint"},
    "energy": {"nfe": 20, "samples": 2000},
}


def load_config(path) -> dict:
    """Read ``key = value`` lines. Values are Python literals or bare strings; ``#`` starts a comment."""
    cfg = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line or (line.startswith("[") and line.endswith("]")):
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            cfg[key.strip().replace("-", "_")] = _literal(val.strip())
    return cfg


def _literal(text):
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def dump_config(cfg: dict) -> str:
    return "".join(f"{k} = {cfg[k]!r}\n" for k in sorted(cfg))


def _int_list(v) -> tuple:
    if isinstance(v, (int, np.integer)):
        return (int(v),)
    if isinstance(v, str):
        return tuple(int(s) for s in v.split(",") if s.strip())
    return tuple(int(s) for s in v)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowsolve", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="key = value settings file (flags override it)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--steps", help="step count or comma-separated ladder, e.g. 4,8,16")
        sp.add_argument("--solver", choices=SOLVERS + ("all",))
        sp.add_argument("--schedule", help="uniform or power:<gamma>")
        sp.add_argument("--out", help="output directory (created if missing)")
        sp.add_argument("--checkpoint", help="trained network checkpoint (JSON)")
        sp.add_argument("--field", help="analytic field NAME:params, e.g. linear:-1 or constant:1,-2")
        sp.add_argument("--samples", type=int)
        sp.add_argument("--workers", type=int)
        if name == "train":
            sp.add_argument("--iterations", type=int)
            sp.add_argument("--batch-size", type=int)
            sp.add_argument("--lr", type=float)
            sp.add_argument("--reflow", action="store_true", default=None, help="also train the 2-rectified flow")
            sp.add_argument("--reflow-pairs", type=int)
        if name in ("straightness", "energy"):
            sp.add_argument("--nfe", type=int)
        if name in ("convergence", "perturb"):
            sp.add_argument("--x0", type=float)
        if name == "perturb":
            sp.add_argument("--delta", type=float)
    return p


def resolve(args: argparse.Namespace) -> dict:
    cfg = dict(COMMON)
    cfg.update(PER_COMMAND[args.command])
    cfg["out"] = os.path.join("runs", args.command)
    if args.config:
        cfg.update(load_config(args.config))
    for k, v in vars(args).items():
        if k not in ("command", "config") and v is not None:
            cfg[k] = v
    if "steps" in cfg:
        cfg["steps"] = _int_list(cfg["steps"])
    cfg["command"] = args.command
    return cfg


def _solvers(cfg) -> list[SolverKind]:
    return list(SolverKind) if cfg["solver"] == "all" else [SolverKind(cfg["solver"])]


def _mixtures(cfg):
    s = float(cfg["mixture_scale"])
    return (GaussianMixtureSpec.isotropic(cfg["source_means"], s, role="source"),
            GaussianMixtureSpec.isotropic(cfg["target_means"], s, role="target"))


def _field(cfg, required: bool = False):
    if cfg.get("checkpoint"):
        return MLPField(load_checkpoint(cfg["checkpoint"]))
    if cfg.get("field"):
        return parse_field(cfg["field"])
    if required:
        raise ValueError(f"{cfg['command']} needs --checkpoint or --field")
    return None


def _samples(cfg, field, which: str, seed_offset: int = 0) -> np.ndarray:
    """Source (t=0) or target (t=1) draws for a network; standard normals for analytic fields."""
    n = int(cfg["samples"])
    seed = int(cfg["seed"]) + seed_offset
    if isinstance(field, AnalyticField):
        return np.random.default_rng(seed).standard_normal((n, field.dim))
    src, tgt = _mixtures(cfg)
    return sample_mixture(src if which == "source" else tgt, n, seed)


def _chunked(fn, x, workers: int):
    """Apply ``fn`` to fixed-size chunks of ``x``; results do not depend on ``workers``."""
    chunks = [x[i:i + CHUNK] for i in range(0, len(x), CHUNK)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, chunks))
    return [fn(c) for c in chunks]


class Run:
    def __init__(self, cfg):
        self.cfg = cfg
        self.out = cfg["out"]
        os.makedirs(self.out, exist_ok=True)
        self.csvs, self.svgs, self.nfe, self.metrics = [], [], {}, {}
        self.t0 = time.perf_counter()

    def write(self, name, text) -> str:
        path = os.path.join(self.out, name)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        (self.csvs if name.endswith(".csv") else self.svgs if name.endswith(".svg") else []).append(name)
        return path

    def finish(self) -> dict:
        self.write("config.txt", dump_config(self.cfg))
        report = {
            "command": self.cfg["command"],
            "metrics": self.metrics,
            "csv": self.csvs,
            "svg": self.svgs,
            "nfe": self.nfe,
            "wall_clock_s": round(time.perf_counter() - self.t0, 3),
        }
        self.write("summary.json", json.dumps(report, indent=2, sort_keys=True, default=metrics._jsonable) + "\n")
        return report


def cmd_train(cfg) -> dict:
    run = Run(cfg)
    src, tgt = _mixtures(cfg)
    tc = TrainConfig(int(cfg["batch_size"]), int(cfg["iterations"]), float(cfg["lr"]), int(cfg["seed"]),
                     tuple(cfg["hidden"]))
    res = train_rectified_flow(tc, IndependentCoupling(src, tgt))
    stage = {"initial_loss": float(res.losses[:10].mean()), "final_loss": float(res.losses[-100:].mean())}
    stage["loss_ratio"] = stage["final_loss"] / stage["initial_loss"]
    run.metrics["rectified_1"] = stage
    if not cfg["reflow"]:
        save_checkpoint(res.params, os.path.join(run.out, "checkpoint.json"))
        run.write("loss.csv", _loss_csv(res.losses))
    else:
        save_checkpoint(res.params, os.path.join(run.out, "checkpoint_1rf.json"))
        run.write("loss_1rf.csv", _loss_csv(res.losses))
        tc2 = TrainConfig(tc.batch_size, tc.iterations, tc.lr, tc.seed + 1, tc.hidden)
        coupling, res2 = reflow(res.params, tc2, src, n_pairs=int(cfg["reflow_pairs"]),
                                n_steps=int(cfg["reflow_steps"]))
        run.write("coupling.csv", coupling.to_csv())
        save_checkpoint(res2.params, os.path.join(run.out, "checkpoint.json"))
        run.write("loss.csv", _loss_csv(res2.losses))
        run.metrics["rectified_2"] = {"initial_loss": float(res2.losses[:10].mean()),
                                      "final_loss": float(res2.losses[-100:].mean())}
        run.nfe["coupling_generation"] = expected_nfe("fireflow", int(cfg["reflow_steps"]))
    run.write("loss.svg", line_plot({"loss": (np.arange(len(res.losses)), res.losses)},
                                    "training loss", "iteration", "loss", logy=True))
    return run.finish()


def _loss_csv(losses) -> str:
    return csv_block(["iter", "loss"], ((i, v) for i, v in enumerate(losses)))


def cmd_convergence(cfg) -> dict:
    run = Run(cfg)
    field = _field(cfg, required=True)
    rows, estimates, plot = [], {}, {}
    if isinstance(field, AnalyticField):
        x0 = np.full(field.dim, float(cfg["x0"]))
        ref = None
    else:
        x0 = _samples(cfg, field, "source")
        ref = integrate(field, x0, TimeGrid.uniform(int(cfg["reference_steps"])), "midpoint").final
    for kind in _solvers(cfg):
        if ref is None:
            series = metrics.convergence_series(field, x0, kind, cfg["steps"], schedule=cfg["schedule"])
        else:
            dts, errs, nfes = [], [], []
            for n in cfg["steps"]:
                grid = TimeGrid.from_schedule(cfg["schedule"], n)
                traj = integrate(field, x0, grid, kind)
                dts.append(grid.max_dt)
                errs.append(float(np.linalg.norm(traj.final - ref, axis=-1).mean()))
                nfes.append(traj.nfe_total)
            series = metrics.ErrorSeries(dts, errs, kind.value, "checkpoint", list(cfg["steps"]), nfes)
        for n, dt, e, nfe in zip(series.steps, series.dts, series.errors, series.nfe):
            rows.append((kind.value, n, dt, e, nfe))
        est = metrics.estimate_order(series)
        estimates[kind.value] = vars(est)
        run.nfe[kind.value] = dict(zip(map(str, series.steps), series.nfe))
        plot[kind.value] = (series.dts, series.errors)
    run.metrics["order"] = estimates
    run.write("order.csv", csv_block(["solver", "N", "dt", "error", "nfe"], rows))
    run.write("order.svg", line_plot(plot, "global error vs step size", "dt", "error", logx=True, logy=True))
    return run.finish()


def cmd_reconstruct(cfg) -> dict:
    run = Run(cfg)
    field = _field(cfg, required=True)
    x = _samples(cfg, field, "target")
    rows, plot = [], {}
    for kind in _solvers(cfg):
        xs, ys = [], []
        for n in cfg["steps"]:
            parts = _chunked(lambda c: metrics.reconstruction_error(field, c, n, kind, cfg["schedule"]), x,
                             int(cfg["workers"]))
            errors = np.concatenate([p.errors for p in parts])
            diverged = [i * CHUNK + j for i, p in enumerate(parts) for j in p.diverged]
            nfe = max(p.nfe for p in parts)
            rep = metrics.ReconstructionReport(kind.value, n, nfe, errors, diverged)
            rows.append((kind.value, n, nfe, rep.mean, rep.percentile(50), rep.percentile(95)))
            if diverged:
                run.metrics.setdefault("diverged", {})[f"{kind.value}:{n}"] = diverged
            xs.append(nfe)
            ys.append(rep.mean)
        plot[kind.value] = (xs, ys)
        run.nfe[kind.value] = dict(zip(map(str, cfg["steps"]), xs))
    run.metrics["mean_err"] = {f"{r[0]}:{r[1]}": r[3] for r in rows}
    run.write("recon.csv", csv_block(["solver", "N", "nfe", "mean_err", "p50_err", "p95_err"], rows))
    run.write("recon.svg", line_plot(plot, "reconstruction error vs NFE", "NFE (inversion + reconstruction)",
                                     "mean L2 error", logy=True))
    return run.finish()


def cmd_velocity_error(cfg) -> dict:
    run = Run(cfg)
    field = _field(cfg, required=True)
    x0 = _samples(cfg, field, "source")
    rows, plot, means = [], {}, {}
    for n in cfg["steps"]:
        grid = TimeGrid.from_schedule(cfg["schedule"], n)
        rep = metrics.velocity_reuse_error(field, x0, grid)
        rows += [(n, s, t, dt, m, sd) for s, t, dt, m, sd in zip(rep.steps, rep.times, rep.dts, rep.mean, rep.std)]
        plot[f"N={n} error"] = (rep.steps, rep.mean)
        plot[f"N={n} dt"] = (rep.steps, rep.dts)
        means[str(n)] = rep.mean_error
        run.nfe[str(n)] = expected_nfe("fireflow", n)
    run.metrics["mean_reuse_error"] = means
    if len(cfg["steps"]) >= 2:
        a, b = cfg["steps"][0], cfg["steps"][1]
        run.metrics["reduction_factor"] = means[str(a)] / means[str(b)] if means[str(b)] > 0 else math.nan
    run.write("velocity_error.csv", csv_block(["steps", "step", "t", "dt", "mean_err", "std_err"], rows))
    run.write("velocity_error.svg", line_plot(plot, "velocity reuse error", "step", "||v_hat - v||",
                                              logy=True, dashed={k for k in plot if k.endswith(" dt")}))
    return run.finish()


def cmd_straightness(cfg) -> dict:
    run = Run(cfg)
    field = _field(cfg, required=True)
    x0 = _samples(cfg, field, "source")
    rows = []
    for kind in _solvers(cfg):
        n = steps_for_nfe(kind, int(cfg["nfe"]))
        traj = integrate(field, x0, TimeGrid.from_schedule(cfg["schedule"], n), kind)
        s = metrics.straightness(traj.states)
        rows.append((kind.value, n, traj.nfe_total, float(np.nanmean(s)), float(np.nanpercentile(s, 95))))
        run.nfe[kind.value] = traj.nfe_total
    run.metrics["mean_straightness"] = {r[0]: r[3] for r in rows}
    run.write("straightness.csv", csv_block(["solver", "N", "nfe", "mean_straightness", "p95_straightness"], rows))
    run.write("straightness.svg", line_plot({r[0]: ([r[2]], [r[3]]) for r in rows},
                                            "mean chord deviation", "NFE", "straightness"))
    return run.finish()


def cmd_perturb(cfg) -> dict:
    run = Run(cfg)
    field = _field(cfg, required=True)
    if not isinstance(field, AnalyticField):
        raise ValueError("perturb needs an analytic field with a known Lipschitz constant")
    n = cfg["steps"][0]
    grid = TimeGrid.from_schedule(cfg["schedule"], n, reverse=True)
    kind = SolverKind(cfg["solver"] if cfg["solver"] != "all" else "midpoint")
    x_T = np.full(field.dim, float(cfg["x0"]))
    delta = np.zeros(field.dim)
    delta[0] = float(cfg["delta"])
    rep = metrics.perturbation_propagation(field, x_T, delta, grid, kind)
    a = integrate(field, x_T, grid, kind)
    b = integrate(field, x_T + delta, grid, kind)
    gap = np.linalg.norm(b.states - a.states, axis=-1)
    T0 = float(grid.points[0])
    bound = rep.delta_T * np.exp(-rep.lipschitz * (T0 - grid.points))
    run.write("perturb.csv", csv_block(["t", "delta_norm", "bound"], zip(grid.points, gap, bound)))
    run.write("perturb.svg", line_plot({"||delta(t)||": (grid.points, gap), "exp(-L(T-t))||delta_T||":
                                        (grid.points, bound)}, "perturbation propagated backward", "t",
                                       "norm", dashed={"exp(-L(T-t))||delta_T||"}))
    run.metrics["perturbation"] = vars(rep)
    run.nfe[kind.value] = 2 * a.nfe_total
    return run.finish()


def cmd_energy(cfg) -> dict:
    run = Run(cfg)
    field = _field(cfg, required=True)
    if isinstance(field, AnalyticField):
        raise ValueError("energy compares generated samples with the target mixture; pass --checkpoint")
    x0 = _samples(cfg, field, "source")
    ref = _samples(cfg, field, "target", seed_offset=1)
    rows = []
    for kind in _solvers(cfg):
        n = steps_for_nfe(kind, int(cfg["nfe"]))
        traj = integrate(field, x0, TimeGrid.from_schedule(cfg["schedule"], n), kind)
        rows.append((kind.value, n, traj.nfe_total, metrics.energy_distance(traj.final, ref)))
        run.nfe[kind.value] = traj.nfe_total
    run.metrics["energy_distance"] = {r[0]: r[3] for r in rows}
    run.write("energy.csv", csv_block(["solver", "N", "nfe", "energy_distance"], rows))
    run.write("energy.svg", line_plot({r[0]: ([r[2]], [r[3]]) for r in rows}, "energy distance to target",
                                      "NFE", "energy distance"))
    return run.finish()


HANDLERS = {
    "train": cmd_train,
    "convergence": cmd_convergence,
    "reconstruct": cmd_reconstruct,
    "velocity-error": cmd_velocity_error,
    "straightness": cmd_straightness,
    "perturb": cmd_perturb,
    "energy": cmd_energy,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args)
        report = HANDLERS[args.command](cfg)
    except (ValueError, TypeError, OSError, DivergenceError, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(report["metrics"], indent=2, sort_keys=True, default=metrics._jsonable))
    return 0


if __name__ == "__main__":
    sys.exit(main())
