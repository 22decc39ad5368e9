"""Command-line workflow: retarget, synth, train, adapt, simulate, eval, export-latents.

Default layout under ``--out``::

    data/                  synthetic meta-dataset (synth)
    train/theta.json       meta-initialization checkpoint, train/loss.csv
    adapt/<task>.json      adapted checkpoint, adapt/<task>.report.json
    sim/<task>.csv         closed-loop trace, sim/plots/*.dat
    eval/report.json       aggregate report (+ report.md)
    logs/<command>.log     timestamped sidecar logs (excluded from determinism)
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .config import RunConfig, load_config
from .dataset import (Trajectory, default_subjects, extract_trajectory, read_meta_dataset,
                      read_trajectory_csv, synth_meta_dataset, write_meta_dataset,
                      write_trajectory_csv, MetaDataset)
from .errors import (CheckpointError, ConfigError, Divergence, LyapunovViolation, MetaExoError,
                     NaNDetected, NonConvergence)
from .kinematics import HumanModel, load_motion, retarget, solve_sequence
from .meta import meta_train, online_adapt, write_training_log
from .simcontrol import ControllerGains, GravityCompensator, PlantModel, simulate_tracking
from .tasknet import MetaConfig, export_latents, init_params, param_shapes, task_reference

log = logging.getLogger("metaexo")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3, 4
HELD_SPLIT = "held"


# ---------------------------------------------------------------------------
# helpers


def _out(cfg: RunConfig) -> Path:
    p = Path(cfg.out)
    return p if p.is_absolute() else Path.cwd() / p


def _data_dir(cfg: RunConfig) -> Path:
    p = cfg.path("data_dir") or _out(cfg) / "data"
    if not (p / "dataset.json").is_file():
        raise FileNotFoundError(f"no dataset at {p} (run 'synth' or set data_dir)")
    return p


def _theta_path(cfg: RunConfig) -> Path:
    p = cfg.path("checkpoint") or _out(cfg) / "train" / "theta.json"
    if not p.is_file():
        raise FileNotFoundError(f"no checkpoint at {p} (run 'train' or set checkpoint)")
    return p


def _load_params(path) -> tuple[ad.ParamSet, MetaConfig]:
    _, config, _ = ad.load_checkpoint(path)
    try:
        mcfg = MetaConfig.from_dict(config.get("meta", {}))
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad network config: {exc}") from exc
    params, _, _ = ad.load_checkpoint(path, expected_shapes=param_shapes(mcfg))
    return params, mcfg


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _plant(cfg: RunConfig):
    plant = PlantModel(cfg.a0, cfg.a1, cfg.m_load, cfg.l_m, cfg.m_link, cfg.l_c)
    comp = GravityCompensator(cfg.m_hat, cfg.l_m)
    gains = ControllerGains(cfg.kp, cfg.kd)
    return plant, comp, gains


def _held_tasks(cfg: RunConfig) -> MetaDataset:
    held = read_meta_dataset(_data_dir(cfg), split=HELD_SPLIT)
    if not held.tasks:
        raise FileNotFoundError(f"dataset at {_data_dir(cfg)} has no held-out tasks")
    return held


# ---------------------------------------------------------------------------
# commands


def cmd_retarget(cfg: RunConfig) -> list[Path]:
    """Keypoint motion -> per-frame IK on the built-in arm model -> elbow trajectory CSV."""
    motion_path = cfg.path("motion")
    if motion_path is None:
        raise ConfigError("retarget needs a motion file (--motion or motion = ...)")
    motion = load_motion(motion_path)
    model = HumanModel()
    target_tree = model.tree()
    frames = [retarget(f, motion.tree, target_tree, target_root=model.root_pos) for f in motion.frames]
    results = solve_sequence(model, frames)
    elbow = model.elbow_index(cfg.side)
    angles = np.array([r.q[elbow] for r in results])
    traj = extract_trajectory(angles, 1.0 / motion.fps, cfg.task_id, cfg.subject_id)
    out = _out(cfg)
    out.mkdir(parents=True, exist_ok=True)
    stem = cfg.task_id or Path(motion_path).stem
    traj_path = out / f"{stem}.csv"
    write_trajectory_csv(traj_path, traj)
    res_path = out / f"{stem}.residuals.csv"
    with open(res_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "residual", "converged", "iterations", "elbow"])
        for k, r in enumerate(results):
            w.writerow([k, repr(float(r.residual)), int(r.converged), r.iterations, repr(float(r.q[elbow]))])
    worst = max(r.residual for r in results)
    log.info("retargeted %d frames, worst residual %.3g, %d unconverged", len(results), worst,
             sum(not r.converged for r in results))
    return [traj_path, res_path]


def cmd_synth(cfg: RunConfig) -> list[Path]:
    """Generate the synthetic train and held-out task families under data/."""
    subjects = default_subjects(cfg.n_subjects, seed=cfg.seed)
    train = synth_meta_dataset(cfg.n_train_tasks, cfg.n_traj, cfg.seed, split="train", prefix="task",
                               noise=cfg.synth_noise, subjects=subjects, dt=cfg.dt)
    held = synth_meta_dataset(cfg.n_held_tasks, cfg.n_traj, cfg.seed + 1, split=HELD_SPLIT, prefix="held",
                              noise=cfg.synth_noise, subjects=subjects, dt=cfg.dt)
    root = cfg.path("data_dir") or _out(cfg) / "data"
    write_meta_dataset(root, MetaDataset(train.tasks + held.tasks))
    log.info("wrote %d training and %d held-out tasks to %s", len(train), len(held), root)
    return [root / "dataset.json"]


def cmd_train(cfg: RunConfig) -> list[Path]:
    """Meta-train on the train split and write the checkpoint and loss curve."""
    meta = read_meta_dataset(_data_dir(cfg), split="train")
    mcfg = cfg.meta_config()
    out = _out(cfg) / "train"
    out.mkdir(parents=True, exist_ok=True)
    written = []
    config = {"meta": mcfg.to_dict()}

    def callback(state):
        if state.iteration % 50 == 0:
            log.info("iter %d mean query loss %.5g", state.iteration, np.mean(state.history[-50:]))
        if cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
            p = out / f"ckpt_{state.iteration:06d}.json"
            ad.save_checkpoint(p, state.params, config, {"iteration": state.iteration, "seed": cfg.seed})
            written.append(p)

    state = meta_train(mcfg, meta, cfg.iterations, seed=cfg.seed, max_windows=cfg.max_windows,
                       workers=cfg.workers, callback=callback)
    theta = out / "theta.json"
    ad.save_checkpoint(theta, state.params, config,
                       {"iteration": state.iteration, "seed": cfg.seed,
                        "tasks": [t.task_id for t in meta.tasks]})
    loss = out / "loss.csv"
    write_training_log(loss, state)
    return written + [theta, loss]


def _adapt_one(params, mcfg, demo: Trajectory, query, baseline_seed: int):
    report = online_adapt(params, demo, mcfg, query=query)
    out = report.to_dict()
    if query:
        base = online_adapt(init_params(mcfg, baseline_seed), demo, mcfg, query=query)
        out["baseline_query_post"] = base.query_post
        out["baseline_losses"] = base.losses
    return report, out


def cmd_adapt(cfg: RunConfig) -> list[Path]:
    """Five-step adaptation on a demonstration.

    With ``demo`` set, adapts to that single CSV; otherwise to trajectory 0 of
    every held-out task, scoring on the task's remaining trajectories.
    """
    theta_path = _theta_path(cfg)
    params, mcfg = _load_params(theta_path)
    mcfg = MetaConfig.from_dict({**mcfg.to_dict(), "inner_steps_deploy": cfg.inner_steps_deploy,
                                 "alpha": cfg.alpha})
    out = _out(cfg) / "adapt"
    written = []
    jobs = []
    demo_path = cfg.path("demo")
    if demo_path is not None:
        demo = read_trajectory_csv(demo_path, task_id=demo_path.stem)
        jobs.append((demo_path.stem, demo, None))
    else:
        for task in _held_tasks(cfg).tasks:
            jobs.append((task.task_id, task.trajectories[0], list(task.trajectories[1:])))
    for name, demo, query in jobs:
        report, summary = _adapt_one(params, mcfg, demo, query, cfg.baseline_seed)
        summary["task_id"] = name
        ckpt = out / f"{name}.json"
        out.mkdir(parents=True, exist_ok=True)
        ad.save_checkpoint(ckpt, report.params, {"meta": mcfg.to_dict()}, {"task_id": name, "demo_len": len(demo)})
        rep = out / f"{name}.report.json"
        _write_json(rep, summary)
        log.info("%s: demo loss %.4g -> %.4g", name, report.pre_loss, report.losses[-1] if report.losses else report.pre_loss)
        written += [ckpt, rep]
    return written


def _simulate_job(args):
    name, ckpt, demo, target, settings = args
    params, mcfg = _load_params(ckpt)
    ref = task_reference(params, demo, target, mcfg)
    plant = PlantModel(*settings["plant"])
    comp = GravityCompensator(*settings["comp"])
    gains = ControllerGains(*settings["gains"])
    trace = simulate_tracking(plant, gains, comp, ref, (float(ref.angles[0]), 0.0), settings["dt"],
                              tau_max=settings["tau_max"], velocity_error=settings["velocity_error"],
                              hold=settings["hold"])
    return name, trace


def cmd_simulate(cfg: RunConfig) -> list[Path]:
    """Track network references on the simulated joint and write traces + plot data."""
    plant, comp, gains = _plant(cfg)
    settings = {
        "plant": (plant.a0, plant.a1, plant.m_load, plant.l_m, plant.m_link, plant.l_c),
        "comp": (comp.m_hat, comp.l_m), "gains": (gains.kp, gains.kd), "dt": cfg.sim_dt,
        "tau_max": cfg.tau_max if cfg.tau_max > 0 else None,
        "velocity_error": cfg.velocity_error, "hold": cfg.hold,
    }
    adapt_dir = _out(cfg) / "adapt"
    jobs = []
    demo_path = cfg.path("demo")
    if demo_path is not None:
        demo = read_trajectory_csv(demo_path, task_id=demo_path.stem)
        ckpt = cfg.path("checkpoint") or adapt_dir / f"{demo_path.stem}.json"
        if not ckpt.is_file():
            raise FileNotFoundError(f"no adapted checkpoint at {ckpt} (run 'adapt' first)")
        jobs.append((demo_path.stem, ckpt, demo, demo, settings))
    else:
        for task in _held_tasks(cfg).tasks:
            ckpt = adapt_dir / f"{task.task_id}.json"
            if not ckpt.is_file():
                raise FileNotFoundError(f"no adapted checkpoint at {ckpt} (run 'adapt' first)")
            jobs.append((task.task_id, ckpt, task.trajectories[0], task.trajectories[1], settings))
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_simulate_job, jobs))
    else:
        results = [_simulate_job(j) for j in jobs]
    out = _out(cfg) / "sim"
    out.mkdir(parents=True, exist_ok=True)
    written, summary = [], {}
    for name, trace in results:
        p = out / f"{name}.csv"
        trace.write_csv(p)
        written.append(p)
        written += list(trace.write_plot_data(out / "plots", name).values())
        summary[name] = {"rms_error": trace.rms_error, "saturated_fraction": float(trace.saturated.mean()),
                         "samples": len(trace)}
        log.info("%s: RMS tracking error %.4f rad", name, trace.rms_error)
    s = out / "summary.json"
    _write_json(s, {"tasks": summary, "plant": dict(zip(("a0", "a1", "m_load", "l_m", "m_link", "l_c"),
                                                        settings["plant"])),
                    "kp": gains.kp, "kd": gains.kd, "m_hat": comp.m_hat, "dt": cfg.sim_dt})
    return written + [s]


def _trace_rms(path: Path) -> float:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        e = np.array([float(row["e"]) for row in reader])
    if e.size == 0:
        raise ValueError(f"{path}: empty trace")
    return float(np.sqrt(np.mean(e ** 2)))


def cmd_eval(cfg: RunConfig) -> list[Path]:
    """Aggregate traces and adaptation reports into report.json and report.md."""
    root = _out(cfg)
    traces = sorted((root / "sim").glob("*.csv"))
    if not traces:
        raise FileNotFoundError(f"no traces in {root / 'sim'} (run 'simulate' first)")
    rows = []
    for tp in traces:
        name = tp.stem
        row = {"task_id": name, "rms_error": _trace_rms(tp)}
        rp = root / "adapt" / f"{name}.report.json"
        if rp.is_file():
            rep = json.loads(rp.read_text())
            row["demo_loss_pre"] = rep["pre_loss"]
            row["demo_loss_post"] = rep["losses"][-1] if rep["losses"] else rep["pre_loss"]
            if "query_pre" in rep:
                row["query_pre"] = rep["query_pre"]
                row["query_post"] = rep["query_post"]
                row["query_gain"] = 1.0 - rep["query_post"] / rep["query_pre"]
            if "baseline_query_post" in rep:
                row["baseline_query_post"] = rep["baseline_query_post"]
                row["ratio_to_baseline"] = rep["query_post"] / rep["baseline_query_post"]
        rows.append(row)
    rms = np.array([r["rms_error"] for r in rows])
    report = {
        "n_tasks": len(rows),
        "mean_rms_error": float(rms.mean()),
        "max_rms_error": float(rms.max()),
        "rms_bound": cfg.rms_bound,
        "within_rms_bound": bool(rms.mean() <= cfg.rms_bound),
        "tasks": rows,
    }
    gains = [r["query_gain"] for r in rows if "query_gain" in r]
    if gains:
        report["mean_query_gain"] = float(np.mean(gains))
    ratios = [r["ratio_to_baseline"] for r in rows if "ratio_to_baseline" in r]
    if ratios:
        report["mean_ratio_to_baseline"] = float(np.mean(ratios))
        report["fraction_better_than_baseline"] = float(np.mean(np.array(ratios) < 1.0))
    demo_ok = [r["demo_loss_post"] <= r["demo_loss_pre"] for r in rows if "demo_loss_pre" in r]
    if demo_ok:
        report["fraction_demo_loss_decreased"] = float(np.mean(demo_ok))
    out = root / "eval"
    jp = out / "report.json"
    _write_json(jp, report)
    mp = out / "report.md"
    mp.write_text(_markdown(report))
    log.info("mean RMS %.4f rad over %d tasks", report["mean_rms_error"], len(rows))
    return [jp, mp]


def _fmt(x) -> str:
    return "-" if x is None else f"{x:.4g}"


def _markdown(report: dict) -> str:
    lines = ["# Evaluation report", ""]
    lines.append(f"- tasks: {report['n_tasks']}")
    lines.append(f"- mean RMS tracking error: {report['mean_rms_error']:.4f} rad "
                 f"(bound {report['rms_bound']} rad, {'met' if report['within_rms_bound'] else 'not met'})")
    lines.append(f"- max RMS tracking error: {report['max_rms_error']:.4f} rad")
    for key, label in (("mean_query_gain", "mean query MSE reduction from adaptation"),
                       ("mean_ratio_to_baseline", "mean query MSE ratio to random-init adaptation"),
                       ("fraction_better_than_baseline", "fraction of tasks better than random init"),
                       ("fraction_demo_loss_decreased", "fraction of demos with decreased loss")):
        if key in report:
            lines.append(f"- {label}: {report[key]:.4f}")
    lines += ["", "| task | RMS (rad) | query pre | query post | random-init post |",
              "|---|---|---|---|---|"]
    for r in report["tasks"]:
        lines.append(f"| {r['task_id']} | {r['rms_error']:.4f} | {_fmt(r.get('query_pre'))} | "
                     f"{_fmt(r.get('query_post'))} | {_fmt(r.get('baseline_query_post'))} |")
    return "\n".join(lines) + "\n"


def cmd_export_latents(cfg: RunConfig) -> list[Path]:
    """Write the encoder's latent mean for every trajectory to latents.csv."""
    params, mcfg = _load_params(_theta_path(cfg))
    meta = read_meta_dataset(_data_dir(cfg))
    trajs = [t for task in meta.tasks for t in task.trajectories]
    out = _out(cfg) / "latents.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    export_latents(out, params, trajs, mcfg)
    return [out]


COMMANDS = {
    "retarget": cmd_retarget,
    "synth": cmd_synth,
    "train": cmd_train,
    "adapt": cmd_adapt,
    "simulate": cmd_simulate,
    "eval": cmd_eval,
    "export-latents": cmd_export_latents,
}


# ---------------------------------------------------------------------------
# entry point


def _common_flags(suppress: bool) -> argparse.ArgumentParser:
    # subcommand copies must not reset values given before the subcommand
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file", **kw)
    common.add_argument("--seed", type=int, help="global seed", **kw)
    common.add_argument("--out", help="output directory", **kw)
    common.add_argument("--set", action="append", metavar="KEY=VALUE", dest="set_sub" if suppress else "set",
                        default=[], help="override a config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true", **kw)
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metaexo", description=__doc__.splitlines()[0],
                                     parents=[_common_flags(False)])
    parser.add_argument("--version", action="version", version=f"metaexo {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub_common = _common_flags(True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[sub_common], help=(COMMANDS[name].__doc__ or name).splitlines()[0])
        if name in ("retarget",):
            p.add_argument("--motion", help="keypoint motion JSON")
        if name in ("adapt", "simulate"):
            p.add_argument("--demo", help="demonstration trajectory CSV")
        if name in ("adapt", "simulate", "export-latents"):
            p.add_argument("--checkpoint", help="checkpoint JSON")
        if name in ("train", "eval", "export-latents", "adapt", "simulate"):
            p.add_argument("--data-dir", dest="data_dir", help="meta-dataset directory")
    return parser


def _setup_logging(out: Path, command: str, verbose: bool) -> logging.Handler | None:
    log.setLevel(logging.DEBUG)
    log.handlers.clear()
    stream = logging.StreamHandler(sys.stderr)
    stream.setLevel(logging.INFO if verbose else logging.WARNING)
    stream.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    log.addHandler(stream)
    try:
        (out / "logs").mkdir(parents=True, exist_ok=True)
        fh = logging.FileHandler(out / "logs" / f"{command}.log", mode="w")
    except OSError:
        return None
    fh.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    log.addHandler(fh)
    return fh


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = {"seed": args.seed, "out": args.out}
    for key in ("motion", "demo", "checkpoint", "data_dir"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = str(Path(value).resolve())
    for item in args.set + args.set_sub:
        if "=" not in item:
            print(f"metaexo: error: --set expects KEY=VALUE, got {item!r}", file=sys.stderr)
            return EXIT_CONFIG
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    try:
        cfg = load_config(args.config, overrides=overrides)
    except ConfigError as exc:
        print(f"metaexo: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _setup_logging(_out(cfg), args.command, args.verbose)
    try:
        written = COMMANDS[args.command](cfg)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (NaNDetected, Divergence, LyapunovViolation, NonConvergence) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (MetaExoError, FileNotFoundError, ValueError, KeyError, json.JSONDecodeError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_INPUT
    for p in written:
        log.info("wrote %s", p)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
