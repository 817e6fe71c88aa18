"""Command-line entry point.

    collabmi <subcommand> [--config FILE] [key=value ...]

Every output lands under the configured ``output_dir``; file names embed
the seed and the mode. Failures print one ``error: kind=... path=...
message=...`` line on stderr and exit non-zero.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import sys
from pathlib import Path

from .bench import CollabMode, run_benchmark, sweep_csv, weight_maps
from .config import ExperimentConfig, emit_config, load_config
from .errors import ConfigError, ContractError, DimensionError, GenerationError
from .gradsuite import run_gradient_suite, suite_table
from .network import NetworkParams, weight_heatmap_csv
from .scene import BevGrid, build_dataset
from .train import LossBreakdown, train

SUBCOMMANDS = ("gen-data", "train", "eval", "sweep-compression", "sweep-noise", "grad-check", "export-heatmaps")


class MissingInput(Exception):
    def __init__(self, path, message):
        super().__init__(message)
        self.path = str(path)


class CheckFailed(Exception):
    def __init__(self, path, message):
        super().__init__(message)
        self.path = str(path)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(text)
    tmp.replace(path)


def datasets(cfg: ExperimentConfig):
    d = cfg.data
    common = dict(scene_config=cfg.scene, sensor=cfg.sensor, grid=cfg.grid,
                  occlusion_only=d.occlusion_only, label_visible_only=d.label_visible_only)
    return build_dataset(d.n_train, d.train_seed, **common), build_dataset(d.n_test, d.test_seed, **common)


def checkpoint_keys(cfg: ExperimentConfig) -> list:
    return list(dict.fromkeys(m.checkpoint_key for m in cfg.collab_modes()))


def checkpoint_path(cfg: ExperimentConfig, key: str, seed: int) -> Path:
    return Path(cfg.output_dir) / "checkpoints" / f"{key}_seed{seed}.ckpt"


def _train_args(cfg: ExperimentConfig, key: str):
    """(training mode, TrainConfig) for a checkpoint key."""
    if key in ("none", "early"):
        return key, cfg.train_config()
    return "intermediate", cfg.train_config(alpha=0.0 if "alpha0" in key else None)


def _metrics_csv(log) -> str:
    names = ["epoch", *LossBreakdown.__dataclass_fields__, "lr_multiplier"]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(names)
    for rec in log:
        writer.writerow([rec["epoch"], *(repr(float(rec[k])) for k in names[1:])])
    return buf.getvalue()


def _require(paths) -> None:
    for p in paths:
        if not Path(p).is_file():
            raise MissingInput(p, "checkpoint not found; run `train` first")


def _load(cfg, keys, seeds) -> dict:
    paths = {k: {s: checkpoint_path(cfg, k, s) for s in seeds} for k in keys}
    _require(p for d in paths.values() for p in d.values())
    return {k: {s: NetworkParams.load(p) for s, p in d.items()} for k, d in paths.items()}


# -- subcommands -------------------------------------------------------------------------------
def cmd_gen_data(cfg: ExperimentConfig) -> None:
    out = Path(cfg.output_dir) / "data"
    train_set, test_set = datasets(cfg)
    manifest = {"train": [], "test": []}
    for split, items in (("train", train_set), ("test", test_set)):
        for d in items:
            _write(out / split / f"scene_{d.id:06d}.json", d.scene.dumps())
            for j in range(d.n_agents):
                path = out / split / f"bev_{d.id:06d}_agent{j}.bin"
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_bytes(BevGrid(d.bev[j], cfg.grid.resolution).to_bytes())
            manifest[split].append(d.id)
    _write(out / "manifest.json", json.dumps(manifest, indent=1) + "\n")
    print(f"wrote {len(train_set)} training and {len(test_set)} test scenes to {out}")


def cmd_train(cfg: ExperimentConfig) -> None:
    train_set, _ = datasets(cfg)
    root = Path(cfg.output_dir)
    for seed in cfg.seeds:
        for key in checkpoint_keys(cfg):
            mode, tcfg = _train_args(cfg, key)
            result = train(train_set, tcfg, seed, mode, log_path=root / "logs" / f"train_{key}_seed{seed}.jsonl")
            result.params.save(checkpoint_path(cfg, key, seed))
            _write(root / "metrics" / f"train_{key}_seed{seed}.csv", _metrics_csv(result.log))
            last = result.log[-1]
            print(f"seed {seed} {key}: final total loss {last['total']:.4f}")


def _write_eval(cfg, reports, rows, stem: str) -> None:
    root = Path(cfg.output_dir) / "metrics"
    for seed in cfg.seeds:
        _write(root / f"{stem}_seed{seed}.csv", sweep_csv([r for r in rows if r["seed"] == seed]))
    summary = {"config": emit_config(cfg), "reports": [r.as_dict() for r in reports]}
    _write(root / f"{stem}_summary.json", json.dumps(summary, indent=1, sort_keys=True) + "\n")
    for r in reports:
        m = r.mode
        print(f"{m.label:<22} r=1/{m.ratio_denominator:<4} noise={m.noise_std:<4} AP50={r.ap50:.4f} AP70={r.ap70:.4f} comm={r.comm_bytes}")


def cmd_eval(cfg: ExperimentConfig) -> None:
    modes = cfg.collab_modes()
    ckpts = _load(cfg, checkpoint_keys(cfg), cfg.seeds)
    _, test_set = datasets(cfg)
    reports, rows = run_benchmark(ckpts, modes, test_set, cfg.seeds, cfg.grid, cfg.eval.ego)
    _write_eval(cfg, reports, rows, "eval")


def cmd_sweep_noise(cfg: ExperimentConfig) -> None:
    modes = [m for m in cfg.collab_modes(noise=True) if m.kind != "none"]
    modes = [dataclasses.replace(m, noise_std=s) for m in modes if m.kind != "intermediate" for s in cfg.eval.noise_stds] + [
        m for m in modes if m.kind == "intermediate"
    ]
    keys = list(dict.fromkeys(m.checkpoint_key for m in modes))
    ckpts = _load(cfg, keys, cfg.seeds)
    _, test_set = datasets(cfg)
    reports, rows = run_benchmark(ckpts, modes, test_set, cfg.seeds, cfg.grid, cfg.eval.ego)
    _write_eval(cfg, reports, rows, "sweep_noise")


def cmd_sweep_compression(cfg: ExperimentConfig) -> None:
    train_set, test_set = datasets(cfg)
    root = Path(cfg.output_dir)
    rows, reports = [], []
    for n in range(cfg.sweep.compression_max_n + 1):
        den = 1 << n
        net = dataclasses.replace(cfg.network, feature_channels=cfg.sweep.feature_channels, compress_denominator=den)
        mode = CollabMode("intermediate", ratio_denominator=den)
        ckpts = {}
        for seed in cfg.seeds:
            result = train(train_set, cfg.train_config(network=net), seed, "intermediate")
            result.params.save(root / "checkpoints" / "compression" / f"{mode.checkpoint_key}_seed{seed}.ckpt")
            ckpts[seed] = result.params
        rep, r = run_benchmark({mode.checkpoint_key: ckpts}, [mode], test_set, cfg.seeds, cfg.grid, cfg.eval.ego)
        reports += rep
        rows += r
    _write_eval(cfg, reports, rows, "sweep_compression")


def cmd_grad_check(cfg: ExperimentConfig) -> None:
    results = run_gradient_suite(range(10))
    table = suite_table(results)
    path = Path(cfg.output_dir) / "metrics" / "grad_check.txt"
    _write(path, table + "\n")
    print(table)
    failed = sorted({r.name for r in results if not r.passed})
    if failed:
        raise CheckFailed(path, f"finite-difference checks failed: {', '.join(failed)}")


def cmd_export_heatmaps(cfg: ExperimentConfig) -> None:
    key = CollabMode("intermediate").checkpoint_key
    ckpts = _load(cfg, [key], cfg.seeds)
    _, test_set = datasets(cfg)
    root = Path(cfg.output_dir) / "heatmaps"
    count = 0
    for seed in cfg.seeds:
        for d in test_set[: cfg.sweep.heatmap_scenes]:
            for (ego, sender), w in sorted(weight_maps(d, ckpts[key][seed], cfg.grid).items()):
                _write(root / f"seed{seed}" / f"scene{d.id:06d}_ego{ego}_sender{sender}.csv", weight_heatmap_csv(w))
                count += 1
    print(f"wrote {count} heatmaps to {root}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep-compression": cmd_sweep_compression,
    "sweep-noise": cmd_sweep_noise,
    "grad-check": cmd_grad_check,
    "export-heatmaps": cmd_export_heatmaps,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="collabmi", description="Collaborative perception with multi-view MI maximisation.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML experiment file")
        p.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides, e.g. loss.alpha=0.3")
    return parser


def _fail(kind: str, path, message) -> int:
    text = " ".join(str(message).split())
    print(f"error: kind={kind} path={path} message={text}", file=sys.stderr)
    return {"config": 2, "missing": 3}.get(kind, 1)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        COMMANDS[args.command](cfg)
    except ConfigError as exc:
        return _fail("config", exc.path, exc.message)
    except MissingInput as exc:
        return _fail("missing", exc.path, exc)
    except CheckFailed as exc:
        return _fail("check", exc.path, exc)
    except (ContractError, DimensionError, GenerationError) as exc:
        return _fail(type(exc).__name__, "-", exc)
    except OSError as exc:
        return _fail("io", getattr(exc, "filename", "-") or "-", exc.strerror or exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
