"""Command-line front end: generate, train, rollout, eval."""

from __future__ import annotations

import argparse
import shutil
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .dataset import load_dataset, save_dataset
from .dynamics import RolloutDiverged, load_model, read_trajectory_csv, rollout, save_model
from .experiment import ConfigError, generate_data, load_config, train_model
from .neuralnet import TrainingDiverged
from .systems import KsInstability, shape_phase_series

EXIT_OK = 0
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_DIVERGED = 5
EXIT_ROLLOUT = 6

DIAGNOSTICS = ("mse", "period", "smoothness", "phase_speed", "bursting", "sweep")


class DataError(RuntimeError):
    pass


def _prepare_out(path: Path, force: bool, is_dir: bool = True):
    if path.exists():
        if not force:
            raise DataError(f"{path} exists; pass --force to overwrite")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    if is_dir:
        path.mkdir(parents=True)
    else:
        path.parent.mkdir(parents=True, exist_ok=True)


def _config(args):
    cfg = load_config(args.config)
    if getattr(args, "charts", None) is not None:
        cfg = cfg.with_overrides(n_charts=args.charts)
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    return cfg


def _load_data(directory) -> dict:
    d = Path(directory)
    if not (d / "train.manifest.json").is_file():
        raise DataError(f"{d}: no dataset (expected train.csv and its manifest)")
    try:
        data = {"train": load_dataset(d / "train")}
        if (d / "dynamics.manifest.json").is_file():
            data["dynamics"] = load_dataset(d / "dynamics")
    except (OSError, ValueError) as e:
        raise DataError(str(e)) from e
    return data


def cmd_generate(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    data = generate_data(cfg)
    _prepare_out(out, args.force)
    for role, ds in data.items():
        save_dataset(ds, out / role, recipe={"config": cfg.to_json(), "role": role, "seed": cfg.seed})
    print(f"wrote {', '.join(f'{k} ({len(v)} rows)' for k, v in data.items())} to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    data = _load_data(args.data)
    out = Path(args.out)
    _prepare_out(out, args.force)
    model = train_model(cfg, data, jobs=args.jobs)
    save_model(model, out)
    print(f"trained {len(model.atlas)} charts; reconstruction MSE {model.meta['reconstruction_mse']:.3e}")
    return EXIT_OK


def cmd_rollout(args) -> int:
    model = load_model(args.model)
    cfg = model.meta.get("config", {})
    steps = args.steps if args.steps is not None else cfg.get("rollout", {}).get("steps", 1000)
    row = args.init_row if args.init_row is not None else cfg.get("rollout", {}).get("init_row", 0)
    data = _load_data(args.data)
    X = data["train"].points
    if not 0 <= row < len(X):
        raise DataError(f"init row {row} outside the dataset")
    out = Path(args.out)
    _prepare_out(out, args.force, is_dir=False)
    traj = rollout(model, X[row], steps)
    traj.to_csv(out)
    print(f"{steps} steps, {len(traj.events)} chart transitions -> {out}")
    return EXIT_OK


def _write_summary(out: Path, lines: list[str]):
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))


def cmd_eval(args) -> int:
    out = Path(args.out)
    wanted = [d.strip() for d in args.diagnostics.split(",") if d.strip()]
    bad = [d for d in wanted if d not in DIAGNOSTICS]
    if bad:
        raise ConfigError(f"unknown diagnostics {bad}; choose from {', '.join(DIAGNOSTICS)}")
    model = load_model(args.model) if args.model else None
    data = _load_data(args.data) if args.data else None
    traj = read_trajectory_csv(args.trajectory) if args.trajectory else None
    _prepare_out(out, args.force)
    lines = []

    def need(obj, what, diag):
        if obj is None:
            raise ConfigError(f"diagnostic {diag!r} needs {what}")
        return obj

    for diag in wanted:
        if diag == "mse":
            atlas = need(model, "--model", diag).atlas
            rows = [(c, atlas.chart_mse(c)) for c in range(len(atlas))]
            with open(out / "mse.csv", "w") as f:
                f.write("chart,mse\n")
                for c, m in rows:
                    f.write(f"{c},{m!r}\n")
                f.write(f"global,{atlas.reconstruction_mse()!r}\n")
            lines.append(f"global reconstruction MSE {atlas.reconstruction_mse():.4e}")
        elif diag == "period":
            t = need(traj, "--trajectory", diag)
            dt = args.dt
            X = t.ambient
            if t.phases and t.phases[0] is not None:
                sp = shape_phase_series(X)
                beat = ev.estimate_period(sp.shape, dt, units="time", discard=args.discard)
                travel = ev.travelling_period(np.array(t.phases, dtype=np.float64), dt)
                lines.append(f"beating period: {beat}")
                lines.append(f"travelling period: {travel.period:.6g} +/- {travel.uncertainty:.2g} time")
                rows = [("beating", beat.periodic, beat.period, beat.uncertainty),
                        ("travelling", True, travel.period, travel.uncertainty)]
            else:
                est = ev.estimate_period(X, dt, units="steps" if dt == 1.0 else "time", discard=args.discard)
                lines.append(f"period: {est}")
                rows = [("recurrence", est.periodic, est.period, est.uncertainty)]
            with open(out / "period.csv", "w") as f:
                f.write("kind,periodic,period,uncertainty\n")
                for r in rows:
                    f.write(f"{r[0]},{int(r[1])},{r[2]!r},{r[3]!r}\n")
        elif diag == "smoothness":
            t = need(traj, "--trajectory", diag)
            rep = ev.transition_smoothness(t.ambient, t.charts)
            rep.to_csv(out / "smoothness.csv")
            lines.append(f"{len(rep.jumps)} transitions; largest first-difference ratio {rep.max_first_ratio():.3g}")
        elif diag == "phase_speed":
            t = need(traj, "--trajectory", diag)
            ref = need(data, "--data", diag)["train"].points
            pol, tor = ev.phase_speed_error(t.ambient, ref)
            (out / "phase_speed.csv").write_text(f"poloidal_error,toroidal_error\n{pol!r},{tor!r}\n")
            lines.append(f"phase speed errors: poloidal {pol:+.3%}, toroidal {tor:+.3%}")
        elif diag == "bursting":
            t = need(traj, "--trajectory", diag)
            verdict = ev.classify_bursting_behavior(t.ambient, dt=args.dt)
            dwell = ev.dwell_times(t.ambient, dt=args.dt)
            np.savetxt(out / "dwell_times.csv", dwell, header="dwell_time", comments="", fmt="%.17g")
            lines.append(f"bursting verdict: {verdict}; {dwell.size} dwell intervals")
        elif diag == "sweep":
            cfg = _config(args)
            ds = need(data, "--data", diag)["train"]
            cells = []
            for spec in args.cells.split(","):
                c, d, pol = spec.split(":")
                cells.append((int(c), int(d), pol))
            res = ev.mse_sweep(ds, cells, args.trials, cfg.chart, K=cfg.K, rounds=cfg.rounds,
                               reference_charts=cfg.n_charts, seed=cfg.seed)
            res.to_csv(out / "sweep.csv")
            lines.append(res.summary())
    _write_summary(out, lines)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="candyman", description="Chart-atlas models of dynamical systems.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="preset name (s1..s6) or JSON config path")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--jobs", type=int, default=1, help="parallel workers (default 1)")
        sp.add_argument("--force", action="store_true", help="overwrite existing output")
        sp.add_argument("--out", required=True, help="output path")

    g = sub.add_parser("generate", help="write the experiment's datasets")
    common(g)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="fit atlas and dynamics")
    common(t)
    t.add_argument("--data", required=True, help="directory written by generate")
    t.add_argument("--charts", type=int, default=None, help="override the number of charts")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("rollout", help="roll a trained model forward")
    common(r, config=False)
    r.add_argument("--model", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--steps", type=int, default=None)
    r.add_argument("--init-row", type=int, default=None)
    r.set_defaults(func=cmd_rollout)

    e = sub.add_parser("eval", help="run diagnostics")
    e.add_argument("--config", default=None, help="needed by the sweep diagnostic")
    common(e, config=False)
    e.add_argument("--model", default=None)
    e.add_argument("--data", default=None)
    e.add_argument("--trajectory", default=None)
    e.add_argument("--diagnostics", default="mse", help=f"comma list from {', '.join(DIAGNOSTICS)}")
    e.add_argument("--dt", type=float, default=1.0, help="time between trajectory records")
    e.add_argument("--discard", type=int, default=0, help="leading records to drop before period search")
    e.add_argument("--cells", default="6:3:same,1:6:matched", help="sweep cells charts:dim:policy")
    e.add_argument("--trials", type=int, default=5)
    e.add_argument("--charts", type=int, default=None)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, KsInstability) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except RolloutDiverged as e:
        print(f"rollout diverged: {e}", file=sys.stderr)
        return EXIT_ROLLOUT


if __name__ == "__main__":
    sys.exit(main())
