"""``atmask`` command-line entry point.

Every config field is addressable as a dotted flag (``--head.k 1``); flags
beat the ``--config`` file, which beats built-in defaults. The last line
written to stdout is always a JSON object.
"""

from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import jsonschema

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import SECTIONS, RunConfig, load_config, set_dotted
from .gradcheck import run_and_summarize
from .synthetic import generate_dataset, load_dataset, load_scene, save_dataset
from .training import (
    ABLATION_CONFIGS,
    EVAL_COLUMNS,
    LOSS_COLUMNS,
    TrainingError,
    evaluate,
    render_maps,
    rows_to_csv,
    run_ablation,
    threshold_sweep,
    train,
)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3

log = logging.getLogger("atmask")


class UsageError(Exception):
    pass


class ConfigError(Exception):
    """Config file or override failed validation."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="atmask", description="Adaptive-threshold mask head on synthetic scenes.")
    parser.add_argument("--version", action="version", version=f"atmask {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate the synthetic train/eval dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the eval split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("sweep", help="fixed vs adaptive threshold masks for one scene")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True, help="scene directory (scene_<seed>)")
    p.add_argument("--thresholds", default="0.3,0.5,0.7")
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="train and evaluate the ablation configs over seeds")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", default="1,2,3,4,5")
    p.add_argument("--configs", default=",".join(ABLATION_CONFIGS))
    p.add_argument("--out", required=True)

    p = sub.add_parser("render", help="write P, T, soft and hard maps as PGM heatmaps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True, help="scene directory (scene_<seed>)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--out")
    return parser


def split_overrides(extra: list[str]) -> dict[str, str]:
    """Turn leftover ``--section.field value`` tokens into an override dict."""
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok or tok[2:].split(".", 1)[0] not in SECTIONS:
            raise UsageError(f"unrecognized argument: {tok}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        elif i + 1 < len(extra):
            i += 1
            value = extra[i]
        else:
            raise UsageError(f"flag {tok} needs a value")
        out[key] = value
        i += 1
    return out


def _parse_list(text: str, kind, flag: str) -> list:
    try:
        return [kind(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad value for {flag}: {text!r}") from exc


def _build_id() -> str:
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if rev.returncode == 0 and rev.stdout.strip():
            return f"atmask-{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"atmask-{__version__}"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class Manifest:
    """Run manifest, written before the work starts and finalized after."""

    def __init__(self, out_dir: Path, command: str, cfg: RunConfig | None, argv: list[str]):
        self.path = out_dir / "manifest.json"
        self.body = {
            "command": command,
            "argv": argv,
            "config_echo": cfg.to_dict() if cfg is not None else None,
            "git_or_build_id": _build_id(),
            "timestamps": {"started": _now(), "finished": None},
            "outputs": [],
            "status": "running",
        }
        self._write()

    def _write(self) -> None:
        self.path.write_text(json.dumps(self.body, indent=2, sort_keys=True) + "\n")

    def finish(self, outputs: list[Path], status: str = "ok") -> None:
        self.body["outputs"] = sorted(str(p) for p in outputs)
        self.body["timestamps"]["finished"] = _now()
        self.body["status"] = status
        self._write()


def _write(path: Path, text: str) -> Path:
    path.write_text(text)
    return path


def _json(path: Path, obj) -> Path:
    return _write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _resolve(build):
    try:
        return build()
    except KeyError as exc:
        raise UsageError(str(exc.args[0]) if exc.args else "unknown config key") from exc
    except (ValueError, TypeError, jsonschema.ValidationError) as exc:
        msg = exc.message if isinstance(exc, jsonschema.ValidationError) else str(exc)
        raise ConfigError(msg) from exc


def _config(path: str | None, overrides: dict) -> RunConfig:
    return _resolve(lambda: load_config(path, overrides))


def _checkpoint_config(path: str, overrides: dict) -> tuple[dict, RunConfig]:
    params, meta = load_checkpoint(path)

    def build():
        cfg = RunConfig.from_dict(meta.get("config", {}))
        for key, value in overrides.items():
            set_dotted(cfg, key, value)
        return cfg.validate()

    return params, _resolve(build)


def cmd_gen_data(args, overrides, out: Path, argv):
    cfg = _config(args.config, overrides)
    man = Manifest(out, "gen-data", cfg, argv)
    train_scenes, eval_scenes = generate_dataset(cfg.data)
    save_dataset(train_scenes, eval_scenes, cfg.data, out)
    outputs = [out / "dataset.json", out / "train", out / "eval"]
    man.finish(outputs)
    return {"command": "gen-data", "n_train": len(train_scenes), "n_eval": len(eval_scenes), "out": str(out)}


def cmd_train(args, overrides, out: Path, argv):
    cfg = _config(args.config, overrides)
    man = Manifest(out, "train", cfg, argv)
    train_scenes, _ = load_dataset(args.data)
    result = train(None, train_scenes, cfg)
    ckpt = out / "checkpoint.bin"
    save_checkpoint(ckpt, result.params, {"config": cfg.to_dict()})
    curve = _write(out / "loss.csv", rows_to_csv(LOSS_COLUMNS, result.loss_curve))
    man.finish([ckpt, curve])
    last = result.loss_curve[-1][1] if result.loss_curve else None
    return {"command": "train", "steps": cfg.train.steps, "final_loss": last, "checkpoint": str(ckpt)}


def cmd_eval(args, overrides, out: Path, argv):
    params, cfg = _checkpoint_config(args.checkpoint, overrides)
    man = Manifest(out, "eval", cfg, argv)
    _, eval_scenes = load_dataset(args.data)
    report = evaluate(params, eval_scenes, cfg)
    rows = [tuple(r[c] for c in EVAL_COLUMNS) for r in report.per_scene]
    table = _write(out / "eval.csv", rows_to_csv(EVAL_COLUMNS, rows))
    summary = _json(out / "summary.json", report.summary())
    man.finish([table, summary])
    return {"command": "eval", **report.summary()}


def cmd_sweep(args, overrides, out: Path, argv):
    thresholds = _parse_list(args.thresholds, float, "--thresholds")
    params, cfg = _checkpoint_config(args.checkpoint, overrides)
    man = Manifest(out, "sweep", cfg, argv)
    scene = load_scene(args.scene)
    rows = threshold_sweep(params, scene, cfg, thresholds, out)
    outputs = [out / "sweep.csv"] + [out / f"mask_{r.label}.pgm" for r in rows]
    man.finish(outputs)
    return {
        "command": "sweep",
        "scene_seed": scene.seed,
        "masks": len(rows),
        "misclassified": {r.label: r.misclassified for r in rows},
    }


def cmd_ablate(args, overrides, out: Path, argv):
    seeds = _parse_list(args.seeds, int, "--seeds")
    names = _parse_list(args.configs, str, "--configs")
    cfg = _config(args.config, overrides)
    man = Manifest(out, "ablate", cfg, argv)
    train_scenes, eval_scenes = load_dataset(args.data)
    result = run_ablation(train_scenes, eval_scenes, cfg, seeds, names)
    paths = result.write(out)
    man.finish(paths)
    return {
        "command": "ablate",
        "median_mean_iou": {n: result.median(n) for n in names},
        "rows": len(result.runs) + len(result.summary_rows()),
    }


def cmd_render(args, overrides, out: Path, argv):
    params, cfg = _checkpoint_config(args.checkpoint, overrides)
    man = Manifest(out, "render", cfg, argv)
    scene = load_scene(args.scene)
    paths = render_maps(params, scene, cfg, out)
    man.finish(paths)
    return {"command": "render", "scene_seed": scene.seed, "files": len(paths)}


def cmd_gradcheck(args, overrides, out: Path | None, argv):
    man = Manifest(out, "gradcheck", None, argv) if out is not None else None
    results, summary = run_and_summarize()
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{status:4s} {r.name:40s} rel_err={r.rel_err:.3e} tol={r.tol:.0e}")
    if man is not None:
        report = _json(out / "gradcheck.json", summary)
        man.finish([report], "ok" if not summary["failed"] else "failed")
    print(f"gradcheck: {summary['passed']}/{summary['checks']} passed")
    return {"command": "gradcheck", **summary}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
    "render": cmd_render,
    "gradcheck": cmd_gradcheck,
}


def _usage(parser: argparse.ArgumentParser, exc: UsageError) -> None:
    msg = str(exc)
    if not msg.startswith("usage:"):
        msg = f"{parser.format_usage()}atmask: error: {msg}"
    print(msg, file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        overrides = split_overrides(extra)
        if args.command == "gradcheck" and overrides:
            raise UsageError("gradcheck takes no config overrides")
    except UsageError as exc:
        _usage(parser, exc)
        return EXIT_USAGE
    out = Path(args.out) if getattr(args, "out", None) else None
    t0 = time.perf_counter()
    try:
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        summary = COMMANDS[args.command](args, overrides, out, argv)
    except UsageError as exc:
        _usage(parser, exc)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"atmask: invalid config: {exc}", file=sys.stderr)
        print(json.dumps({"command": args.command, "error": f"invalid config: {exc}"}))
        return EXIT_CHECK
    except TrainingError as exc:
        print(f"atmask: training aborted: {exc}", file=sys.stderr)
        print(json.dumps({"command": args.command, "error": str(exc), "step": exc.step}))
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - any failure inside a command is a runtime error
        print(f"atmask: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        print(json.dumps({"command": args.command, "error": f"{type(exc).__name__}: {exc}"}))
        return EXIT_RUNTIME
    log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    print(json.dumps(summary, sort_keys=True))
    if args.command == "gradcheck" and summary["failed"]:
        return EXIT_CHECK
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
