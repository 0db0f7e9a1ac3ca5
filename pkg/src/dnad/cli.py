"""Command-line entry point: ``dnad <command> [options]``.

Every command accepts ``--config`` (JSON document, may name a preset),
``--preset``, ``--seed``, ``--out`` and repeated ``--set a.b=value``
overrides. Failures print one JSON line ``{"error": ..., "type": ...}``
to stderr and exit non-zero.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

from pydantic import ValidationError

from .config import PRESETS, RunConfig, build_config, merge_docs
from .data import write_idx
from .distillation import load_teacher, save_teacher, train_teacher
from .driver import Search, count_cost, retrain_seeds
from .search_space import DiscreteArch, export_dot

log = logging.getLogger("dnad")

EXIT_USAGE = 2
EXIT_FAILURE = 1


class CliError(Exception):
    pass


class RunLocked(CliError):
    pass


@contextlib.contextmanager
def run_lock(out: Path):
    """Exclusive ownership of an output directory for one invocation."""
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLocked(f"{out} is in use by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out
    finally:
        lock.unlink(missing_ok=True)


def _parse_set(items) -> dict:
    doc: dict = {}
    for item in items or ():
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise CliError(f"--set expects key.path=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return doc


def _config(args, extra: dict | None = None) -> RunConfig:
    doc = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.preset:
        doc["preset"] = args.preset
    if not doc.get("preset") and not args.config:
        doc["preset"] = "desk"
    doc = merge_docs(doc, _parse_set(args.set))
    doc = merge_docs(doc, extra or {})
    return build_config(doc, seed=args.seed, out=str(args.out) if args.out else None)


def _out(args, cfg: RunConfig, default: str) -> Path:
    return Path(args.out or cfg.out or default)


# ------------------------------------------------------------------ commands

def cmd_gen_data(args) -> dict:
    cfg = _config(args)
    ds = cfg.dataset()
    out = _out(args, cfg, "data")
    with run_lock(out):
        write_idx(out / "images.idx", out / "labels.idx", ds.raw, ds.labels)
        (out / "dataset.json").write_text(json.dumps(
            {"shape": list(ds.shape), "classes": ds.classes, "train": len(ds.train_idx), "val": len(ds.val_idx),
             "mean": ds.mean.tolist(), "std": ds.std.tolist(), "spec": cfg.data.model_dump(mode="json"),
             "seed": cfg.seed}, sort_keys=True, indent=1) + "\n")
    return {"out": str(out), "shape": list(ds.shape)}


def cmd_train_teacher(args) -> dict:
    cfg = _config(args)
    ds = cfg.dataset()
    out = _out(args, cfg, "teacher")
    with run_lock(out):
        bundle = train_teacher(ds, cfg.teacher_config(), cfg.teacher.width, cfg.kd.blocks)
        save_teacher(bundle, out / "teacher.bin")
        (out / "teacher.json").write_text(json.dumps(
            {"val_acc": bundle.accuracy, "checksum": bundle.checksum(), "arch": bundle.net.descriptor(),
             "params": bundle.net.param_count()}, sort_keys=True, indent=1) + "\n")
    return {"out": str(out), "val_acc": bundle.accuracy}


def cmd_search(args) -> dict:
    extra: dict = {}
    if args.mode:
        extra.setdefault("search", {})["mode"] = args.mode
    if args.kd:
        extra.setdefault("kd", {})["variant"] = args.kd
    cfg = _config(args, extra)
    ds = cfg.dataset()
    scfg = cfg.search_config()
    teacher = None
    if scfg.mode.value == "dnad" and scfg.kd.variant.value != "none":
        if not args.teacher:
            raise CliError(f"search --mode dnad --kd {scfg.kd.variant.value} needs --teacher")
        teacher = load_teacher(args.teacher)
    out = _out(args, cfg, "run")
    with run_lock(out):
        (out / "config.json").write_text(cfg.to_json())
        search = Search(ds, scfg, teacher)
        search.run()
        search.write_outputs(out)
    return {"out": str(out), "snapshots": len(search.pareto), "steps": search.step,
            "truncated": search.pareto.truncated}


def cmd_retrain(args) -> dict:
    cfg = _config(args)
    arch = DiscreteArch.from_json(Path(args.arch).read_text())
    ds = cfg.dataset()
    seeds = [cfg.seed + k for k in range(args.seeds)]
    report = retrain_seeds(arch, ds, cfg.retrain_config(), seeds, cfg.space())
    doc = {"arch": str(args.arch), "op_count": arch.op_count, "seeds": seeds, **report.to_dict()}
    text = json.dumps(doc, sort_keys=True, indent=1) + "\n"
    if args.out:
        out = Path(args.out)
        with run_lock(out):
            (out / f"retrain_{Path(args.arch).stem}.json").write_text(text)
    else:
        sys.stdout.write(text)
    return {"mean_best_val_acc": report.mean_best, "runs": len(report.runs)}


def cmd_export(args) -> dict:
    arch = DiscreteArch.from_json(Path(args.arch).read_text())
    text = arch.to_json() if args.format == "json" else export_dot(arch)
    if args.out:
        try:
            Path(args.out).write_text(text)
        except OSError as e:
            raise CliError(f"cannot write {args.out}: {e.strerror}") from None
    else:
        sys.stdout.write(text)
    return {"format": args.format, "op_count": arch.op_count}


def cmd_report(args) -> dict:
    run = Path(args.run)
    manifest = json.loads((run / "pareto" / "manifest.json").read_text())
    cfg = RunConfig.model_validate(json.loads((run / "config.json").read_text()))
    shape = (cfg.data.channels, cfg.data.size, cfg.data.size)
    rows = []
    for k, entry in enumerate(manifest["snapshots"]):
        arch = DiscreteArch.from_json((run / entry["file"]).read_text())
        cost = count_cost(arch, cfg.retrain.channels, shape, cfg.data.classes, cfg.space())
        rows.append({"index": k, "file": entry["file"], "step": entry["step"], "op_count": entry["op_count"],
                     "L_S": repr(entry["sparsity_entropy"]), "running_L_A": repr(entry["running_task_loss"]),
                     "params": cost.params, "macs": cost.macs})
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["index", "file", "step", "op_count", "L_S", "running_L_A", "params",
                                        "macs"], lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    out = Path(args.out) if args.out else run / "report"
    out.mkdir(parents=True, exist_ok=True)
    (out / "controller.csv").write_text((run / "controller.csv").read_text())
    (out / "pareto.csv").write_text(buf.getvalue())
    (out / "pareto.json").write_text(json.dumps({"truncated": manifest["truncated"], "snapshots": rows},
                                                sort_keys=True, indent=1) + "\n")
    return {"out": str(out), "snapshots": len(rows)}


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--preset", choices=sorted(PRESETS), help="named preset (default: desk)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory (or file for export)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field, e.g. --set search.batch_size=32")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dnad", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write the synthetic dataset as IDX files")
    sub.add_parser("train-teacher", parents=[common], help="train and save a teacher network")
    s = sub.add_parser("search", parents=[common], help="run SNPS or DNAD")
    s.add_argument("--mode", choices=["snps", "dnad"])
    s.add_argument("--kd", choices=["none", "st", "at", "st+at"], help="distillation variant (dnad)")
    s.add_argument("--teacher", help="teacher container from train-teacher")
    r = sub.add_parser("retrain", parents=[common], help="retrain an architecture from scratch")
    r.add_argument("--arch", required=True)
    r.add_argument("--seeds", type=int, default=1)
    e = sub.add_parser("export", parents=[common], help="export an architecture as JSON or DOT")
    e.add_argument("--arch", required=True)
    e.add_argument("--format", choices=["json", "dot"], default="json")
    rp = sub.add_parser("report", parents=[common], help="summarise a finished search run")
    rp.add_argument("--run", required=True)
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train-teacher": cmd_train_teacher, "search": cmd_search,
            "retrain": cmd_retrain, "export": cmd_export, "report": cmd_report}


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": message.replace("\n", "; "), "type": kind}) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = COMMANDS[args.command](args)
    except ValidationError as e:
        msgs = [f"{'.'.join(str(x) for x in err['loc'])}: {err['msg']}" for err in e.errors()]
        return _fail("ConfigError", "; ".join(msgs), EXIT_USAGE)
    except (CliError, ValueError, OSError, KeyError) as e:
        return _fail(type(e).__name__, str(e), EXIT_USAGE if isinstance(e, CliError) else EXIT_FAILURE)
    except Exception as e:  # noqa: BLE001 - surface anything else as one line too
        return _fail(type(e).__name__, str(e), EXIT_FAILURE)
    if args.verbose:
        log.info("%s", json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
