"""Command line entry point: ``grouptraj <command> [--config FILE] [--key value ...]``.

Each command has a fixed set of keys.  Values come from built-in defaults,
then an optional ``key=value`` config file, then command-line flags.  The
resolved configuration is logged and written to ``<out>/<command>.config``,
which can be fed back through ``--config`` to repeat the run exactly.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical or
runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .dataset import (
    DataFormatError,
    SyntheticCrowdSpec,
    extract_scenes,
    generate_synthetic_crowd,
    label_table_groups,
    load_group_labels,
    load_trajectory_file,
    parse_key_values,
    write_group_labels,
    write_trajectory_file,
)
from .model import VARIANTS, init_params, load_params, save_params, predict
from .plotting import sweep_svg, trajectory_svg
from .sampler import write_sample_dump
from .training import (
    RHO_GRID,
    LossConfig,
    NumericalError,
    best_of_k_eval,
    rho_sweep,
    train,
    within_group_crossings,
    within_group_divergence,
    write_metrics_csv,
)

log = logging.getLogger("grouptraj")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------- config


def _bool(s: str) -> bool:
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s: str) -> list[float]:
    return [float(v) for v in str(s).replace(",", " ").split()]


def _paths(s: str) -> list[str]:
    return [v.strip() for v in str(s).split(",") if v.strip()]


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class Key:
    kind: Callable
    default: object
    help: str = ""


_SCENE_KEYS = {
    "t_obs": Key(int, 8, "observed steps"),
    "horizon": Key(int, 12, "predicted steps"),
    "stride": Key(int, 1, "window stride in frames"),
}

_TRAIN_KEYS = {
    "train": Key(_paths, [], "comma-separated trajectory files"),
    "train_labels": Key(_paths, [], "group label files, one per trajectory file"),
    "val": Key(_paths, [], "validation trajectory files (default: training files)"),
    "val_labels": Key(_paths, [], "validation label files"),
    **_SCENE_KEYS,
    "k": Key(int, 20, "samples for validation best-of-k"),
    "k_variety": Key(int, 20, "candidates in the variety loss"),
    "rho": Key(float, 1.0, "within-group latent correlation"),
    "alpha": Key(float, 1.0, "KL weight"),
    "lr": Key(float, 1e-4, "Adam learning rate"),
    "batch": Key(int, 64, "scenes per mini-batch"),
    "epochs": Key(int, 400, "training epochs"),
    "val_every": Key(int, 1, "validate every n epochs"),
    "seed": Key(int, 0, "random seed"),
    "variant": Key(str, "hierarchical", "hierarchical or parallel"),
    "resume": Key(_bool, False, "continue from <out>/last.ckpt if present"),
}

COMMANDS: dict[str, dict[str, Key]] = {
    "gen-synth": {
        "out": Key(str, "out", "output directory"),
        "name": Key(str, "synth", "file name stem"),
        "n_groups": Key(int, 2, "number of groups (ignored when group_sizes is set)"),
        "group_size": Key(int, 2, "members per group when n_groups is used"),
        "group_sizes": Key(lambda s: [int(v) for v in _floats(s)], [], "explicit group sizes"),
        "headings": Key(_floats, [], "per-group heading, degrees"),
        "speeds": Key(_floats, [], "per-group speed, m/s"),
        "speed_min": Key(float, 0.8),
        "speed_max": Key(float, 1.4),
        "noise": Key(float, 0.0, "per-step displacement noise sigma, m"),
        "seed": Key(int, 0),
        "n_frames": Key(int, 20),
        "dt": Key(float, 0.4),
        "spacing": Key(float, 0.6, "lateral member spacing, m"),
        "arena": Key(float, 8.0),
        "episodes": Key(int, 1, "independent crowds written back to back"),
        "frame_step": Key(int, 1),
    },
    "label-groups": {
        "data": Key(str, "", "trajectory file"),
        "out": Key(str, "out"),
        "dt": Key(float, 0.4, "seconds between consecutive frames"),
        "eps_pos": Key(float, 2.0, "position threshold, m"),
        "eps_vel": Key(float, 0.5, "velocity threshold, m/s"),
        "min_cluster": Key(int, 2),
    },
    "train": {"out": Key(str, "out"), **_TRAIN_KEYS},
    "eval": {
        "checkpoint": Key(str, "", "parameter checkpoint"),
        "data": Key(_paths, [], "trajectory files"),
        "labels": Key(_paths, [], "label files"),
        "out": Key(str, "out"),
        **_SCENE_KEYS,
        "k": Key(int, 20),
        "rho": Key(float, 1.0),
        "seed": Key(int, 0),
        "dataset": Key(str, "", "name written to the metrics CSV"),
        "split": Key(str, "test"),
        "fde_mode": Key(str, "ade", "ade: FDE of the min-ADE sample; independent: min FDE"),
    },
    "sample": {
        "checkpoint": Key(str, ""),
        "data": Key(str, ""),
        "labels": Key(str, ""),
        "out": Key(str, "out"),
        **_SCENE_KEYS,
        "scene": Key(int, 0, "scene index within the file"),
        "k": Key(int, 20),
        "rho": Key(float, 1.0),
        "seed": Key(int, 0),
    },
    "sweep-rho": {
        "out": Key(str, "out"),
        **_TRAIN_KEYS,
        "rhos": Key(_floats, list(RHO_GRID), "rho values to train"),
        "eval": Key(_paths, [], "evaluation files (default: validation or training files)"),
        "eval_labels": Key(_paths, []),
    },
}


def resolve_config(command: str, config_path: str | None, overrides: dict[str, str]) -> dict:
    schema = COMMANDS[command]
    raw: dict[str, str] = {}
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        raw.update(parse_key_values(path.read_text(encoding="utf-8")))
    raw.update({k: v for k, v in overrides.items() if v is not None})
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"unknown keys for {command}: {unknown}")
    resolved = {}
    for key, spec in schema.items():
        if key in raw:
            try:
                resolved[key] = spec.kind(raw[key])
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw[key]!r} ({exc})") from None
        else:
            resolved[key] = list(spec.default) if isinstance(spec.default, list) else spec.default
    return resolved


def _echo(command: str, cfg: dict, out: Path) -> None:
    text = "".join(f"{k}={_fmt(v)}\n" for k, v in cfg.items())
    log.info("resolved %s config:\n%s", command, text.rstrip())
    (out / f"{command}.config").write_text(text, encoding="utf-8")


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("", encoding="utf-8")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable ({exc})") from None
    return out


def _require_file(path: str, what: str) -> Path:
    if not path:
        raise ConfigError(f"{what} path is required")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _check_rho(rho: float) -> None:
    if not 0.0 <= rho <= 1.0:
        raise ConfigError(f"rho must lie in [0, 1], got {rho}")


def _load_scenes(files: list[str], labels: list[str], cfg: dict, what: str):
    if len(files) != len(labels):
        raise ConfigError(f"{what}: {len(files)} trajectory files but {len(labels)} label files")
    scenes = []
    for f, lab in zip(files, labels):
        table = load_trajectory_file(_require_file(f, f"{what} trajectory file"))
        groups = load_group_labels(_require_file(lab, f"{what} label file"), table)
        scenes.extend(extract_scenes(table, groups, cfg["t_obs"], cfg["horizon"], cfg["stride"]))
    if files and not scenes:
        raise ConfigError(f"{what}: no complete {cfg['t_obs'] + cfg['horizon']}-frame windows found")
    return scenes


def _loss_config(cfg: dict) -> LossConfig:
    return LossConfig(
        alpha=cfg["alpha"],
        k_variety=cfg["k_variety"],
        learning_rate=cfg["lr"],
        batch_size=cfg["batch"],
        epochs=cfg["epochs"],
        rho=cfg["rho"],
    )


def _check_train_cfg(cfg: dict) -> None:
    if not cfg["train"]:
        raise ConfigError("train: at least one training file is required")
    if cfg["variant"] not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}")
    _check_rho(cfg["rho"])
    _loss_config(cfg)


# ----------------------------------------------------------------- commands


def cmd_gen_synth(cfg: dict) -> Callable[[], None]:
    out = _out_dir(cfg)
    if cfg["group_sizes"]:
        sizes = cfg["group_sizes"]
    else:
        if cfg["n_groups"] < 1:
            raise ConfigError("n_groups must be at least 1")
        sizes = [cfg["group_size"]] * cfg["n_groups"]
    spec = SyntheticCrowdSpec(
        group_sizes=sizes,
        headings=cfg["headings"] or None,
        speeds=cfg["speeds"] or None,
        speed_min=cfg["speed_min"],
        speed_max=cfg["speed_max"],
        noise=cfg["noise"],
        seed=cfg["seed"],
        n_frames=cfg["n_frames"],
        dt=cfg["dt"],
        spacing=cfg["spacing"],
        arena=cfg["arena"],
        episodes=cfg["episodes"],
        frame_step=cfg["frame_step"],
    )

    def run():
        table, groups = generate_synthetic_crowd(spec)
        traj = out / f"{cfg['name']}.txt"
        labels = out / f"{cfg['name']}_groups.txt"
        write_trajectory_file(traj, table)
        write_group_labels(labels, table.ped_ids(), groups)
        manifest = [f"trajectories={traj.name}", f"labels={labels.name}", f"n_peds={len(table.ped_ids())}"]
        manifest += [f"{k}={v}" for k, v in spec.to_mapping().items()]
        (out / f"{cfg['name']}_manifest.txt").write_text("\n".join(manifest) + "\n", encoding="utf-8")
        log.info("wrote %s (%d records) and %s", traj, len(table), labels)

    return run


def cmd_label_groups(cfg: dict) -> Callable[[], None]:
    out = _out_dir(cfg)
    table = load_trajectory_file(_require_file(cfg["data"], "trajectory file"))

    def run():
        groups = label_table_groups(table, cfg["dt"], cfg["eps_pos"], cfg["eps_vel"], cfg["min_cluster"])
        dest = out / f"{Path(cfg['data']).stem}_groups.txt"
        write_group_labels(dest, table.ped_ids(), groups)
        log.info("wrote %s: %d pedestrians in %d groups", dest, groups.n_peds, groups.n_groups)

    return run


def cmd_train(cfg: dict) -> Callable[[], None]:
    _check_train_cfg(cfg)
    out = _out_dir(cfg)
    train_scenes = _load_scenes(cfg["train"], cfg["train_labels"], cfg, "train")
    val_scenes = _load_scenes(cfg["val"], cfg["val_labels"], cfg, "val") if cfg["val"] else None
    config = _loss_config(cfg)

    def run():
        params, opt_state, start = None, None, 0
        best_ade = np.inf
        if cfg["resume"] and (out / "last.ckpt").is_file():
            params, meta = load_params(out / "last.ckpt", with_meta=True)
            if params.variant != cfg["variant"]:
                raise ConfigError("checkpoint variant differs from the configured variant")
            start = int(meta.get("epoch", 0))
            best_ade = float(meta.get("best_val_ade", "inf"))
            opt_state = _load_state(out / "last_optim.ckpt")
            config.epochs = max(cfg["epochs"] - start, 0)
            log.info("resuming from epoch %d", start)
        mode = "a" if start else "w"
        with open(out / "train_log.txt", mode, encoding="utf-8") as fh:
            if not start:
                fh.write("# epoch train_loss val_ade val_fde wall_seconds\n")

            def log_line(line: str):
                fh.write(line + "\n")
                fh.flush()
                log.info("epoch %s", line)

            best = {"ade": best_ade}

            def on_improve(p, epoch, ade):
                if ade < best["ade"]:
                    best["ade"] = ade
                    save_params(out / "best.ckpt", p, {"epoch": str(epoch), "val_ade": repr(ade)})

            def on_epoch(p, opt, epoch):
                save_params(out / "last.ckpt", p, {"epoch": str(epoch), "best_val_ade": repr(best["ade"])})
                _save_state(out / "last_optim.ckpt", opt.state())

            res = train(
                train_scenes,
                config,
                val_scenes=val_scenes,
                variant=cfg["variant"],
                seed=cfg["seed"],
                params=params,
                optimizer_state=opt_state,
                start_epoch=start,
                eval_k=cfg["k"],
                val_every=cfg["val_every"],
                log_line=log_line,
                on_improve=on_improve,
                on_epoch=on_epoch,
            )
        if not (out / "best.ckpt").is_file():
            save_params(out / "best.ckpt", res.final_params, {"epoch": str(start)})
        log.info("best validation ADE %.4f at epoch %d", best["ade"], res.best_epoch)

    return run


def _save_state(path: Path, state: dict[str, np.ndarray]) -> None:
    lines = ["grouptraj-optimizer 1"]
    for name, arr in state.items():
        lines.append(f"{name} " + " ".join(float(v).hex() for v in np.asarray(arr).reshape(-1)))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _load_state(path: Path) -> dict[str, np.ndarray] | None:
    if not path.is_file():
        return None
    out = {}
    for line in path.read_text(encoding="utf-8").splitlines()[1:]:
        name, *vals = line.split()
        out[name] = np.array([float.fromhex(v) for v in vals])
    return out


def cmd_eval(cfg: dict) -> Callable[[], None]:
    out = _out_dir(cfg)
    params = load_params(_require_file(cfg["checkpoint"], "checkpoint"))
    _check_rho(cfg["rho"])
    if cfg["k"] < 1:
        raise ConfigError("k must be at least 1")
    if cfg["fde_mode"] not in ("ade", "independent"):
        raise ConfigError("fde_mode must be 'ade' or 'independent'")
    if not cfg["data"]:
        raise ConfigError("eval: at least one data file is required")
    scenes = _load_scenes(cfg["data"], cfg["labels"], cfg, "eval")

    def run():
        m = best_of_k_eval(scenes, params, k=cfg["k"], rho=cfg["rho"], seed=cfg["seed"], fde_mode=cfg["fde_mode"])
        name = cfg["dataset"] or ",".join(Path(p).stem for p in cfg["data"])
        row = dict(dataset=name, split=cfg["split"], k=cfg["k"], rho=cfg["rho"], ade_m=f"{m.ade:.6f}",
                   fde_m=f"{m.fde:.6f}", n_scenes=m.n_scenes, n_peds=m.n_peds, seed=cfg["seed"])
        write_metrics_csv(out / "metrics.csv", [row])
        log.info("ADE %.4f m, FDE %.4f m over %d pedestrians", m.ade, m.fde, m.n_peds)

    return run


def cmd_sample(cfg: dict) -> Callable[[], None]:
    out = _out_dir(cfg)
    params = load_params(_require_file(cfg["checkpoint"], "checkpoint"))
    _check_rho(cfg["rho"])
    if cfg["k"] < 1:
        raise ConfigError("k must be at least 1")
    scenes = _load_scenes([cfg["data"]], [cfg["labels"]], cfg, "sample")
    if not 0 <= cfg["scene"] < len(scenes):
        raise ConfigError(f"scene index {cfg['scene']} out of range (0..{len(scenes) - 1})")
    scene = scenes[cfg["scene"]]

    def run():
        pred = predict(scene, params, cfg["k"], cfg["rho"], cfg["seed"])
        samples, mean = pred.sample_positions(), pred.mean_positions()
        with open(out / "samples.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["kind", "sample_index", "ped_id", "step", "x", "y"])
            for s in range(pred.k):
                for i, pid in enumerate(scene.ped_ids):
                    for t in range(scene.horizon):
                        w.writerow(["sample", s, int(pid), t, repr(float(samples[s, i, t, 0])), repr(float(samples[s, i, t, 1]))])
            for i, pid in enumerate(scene.ped_ids):
                for t in range(scene.horizon):
                    w.writerow(["mean", -1, int(pid), t, repr(float(mean[i, t, 0])), repr(float(mean[i, t, 1]))])
        write_sample_dump(out / "latent_draws.csv", pred.eps)
        svg = trajectory_svg(scene.observed, scene.future, samples, mean)
        (out / "samples.svg").write_text(svg, encoding="utf-8")
        log.info(
            "within-group crossings %d, divergence %.5f m^2",
            within_group_crossings(pred, scene.groups),
            within_group_divergence(pred, scene.groups),
        )

    return run


def cmd_sweep_rho(cfg: dict) -> Callable[[], None]:
    for r in cfg["rhos"]:
        _check_rho(r)
    _check_train_cfg(cfg)
    out = _out_dir(cfg)
    train_scenes = _load_scenes(cfg["train"], cfg["train_labels"], cfg, "train")
    if cfg["eval"]:
        eval_scenes = _load_scenes(cfg["eval"], cfg["eval_labels"], cfg, "eval")
    elif cfg["val"]:
        eval_scenes = _load_scenes(cfg["val"], cfg["val_labels"], cfg, "val")
    else:
        eval_scenes = train_scenes
    config = _loss_config(cfg)

    def run():
        rows = rho_sweep(
            train_scenes, eval_scenes, config, cfg["rhos"], variant=cfg["variant"], seed=cfg["seed"],
            eval_k=cfg["k"], log_line=lambda s: log.info(s),
        )
        with open(out / "rho_sweep.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["rho", "ade_m", "fde_m", "n_scenes", "n_peds", "seed"])
            for r in rows:
                w.writerow([r["rho"], f"{r['ade']:.6f}", f"{r['fde']:.6f}", r["n_scenes"], r["n_peds"], cfg["seed"]])
        (out / "rho_sweep.svg").write_text(sweep_svg(rows), encoding="utf-8")
        ades = [r["ade"] for r in rows]
        trend = all(b <= a for a, b in zip(ades, ades[1:]))
        log.info("ADE non-increasing in rho: %s (reported only)", trend)

    return run


HANDLERS = {
    "gen-synth": cmd_gen_synth,
    "label-groups": cmd_label_groups,
    "train": cmd_train,
    "eval": cmd_eval,
    "sample": cmd_sample,
    "sweep-rho": cmd_sweep_rho,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="grouptraj", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, schema in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value config file")
        for key, spec in schema.items():
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None, help=spec.help or None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr
    )
    overrides = {k: getattr(args, k) for k in COMMANDS[args.command]}
    try:
        cfg = resolve_config(args.command, args.config, overrides)
        run = HANDLERS[args.command](cfg)
        _echo(args.command, cfg, Path(cfg["out"]))
    except (ValueError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_INVALID
    try:
        t0 = time.perf_counter()
        run()
        log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    except (ConfigError, DataFormatError) as exc:
        log.error("%s", exc)
        return EXIT_INVALID
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError, ValueError) as exc:
        log.error("runtime failure: %s", exc)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
