"""cmkg command line: gen, train, ablate, score.

Exit codes: 0 success, 2 bad config or arguments, 3 missing or malformed
input, 4 checkpoint version/corruption, 5 recomputed scores disagree.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from pathlib import Path

from . import config as C
from .checkpoint import restore_checkpoint
from .errors import CMKGError, ConfigError, VersionError
from .metrics import f1_counts, f1_from_counts, gold_of
from .taskstream import TaskStream, generate_stream, load_stream, manifest, save_stream, stream_lines
from .trainer import ABLATIONS, LifelongTrainer, ablate, score_mode

log = logging.getLogger("cmkg")

EXIT_OK, EXIT_CONFIG, EXIT_INPUT, EXIT_VERSION, EXIT_MISMATCH = 0, 2, 3, 4, 5


class ScoreMismatch(CMKGError):
    pass


def _exit_code(err: Exception) -> int:
    if isinstance(err, ConfigError):
        return EXIT_CONFIG
    if isinstance(err, VersionError):
        return EXIT_VERSION
    if isinstance(err, ScoreMismatch):
        return EXIT_MISMATCH
    return EXIT_INPUT


def stream_digest(stream: TaskStream) -> str:
    return hashlib.sha256("\n".join(stream_lines(stream)).encode("utf-8")).hexdigest()[:16]


def _get_stream(cfg: C.RunConfig) -> TaskStream:
    if cfg.data.path is None:
        return generate_stream(cfg.data.synthetic)
    path = Path(cfg.data.path)
    if not path.is_file():
        raise FileNotFoundError(f"dataset file not found: {path}")
    return load_stream(path)


def _csv(rows, header, config_hash: str) -> str:
    buf = io.StringIO()
    buf.write(f"# config_hash={config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _num(v):
    return repr(float(v)) if v is not None else ""


# ------------------------------------------------------------------ writers


def gamma_trace_csv(trace: list[dict], config_hash: str) -> str:
    rows = [[n, r["task"], r["phase"], r["epoch"], r["batch"], _num(r["gamma"]), _num(abs(r["gamma"] - 1)),
             _num(r["g"]), _num(r["scale_visual"]), _num(r["scale_textual"])]
            for n, r in enumerate(trace)]
    header = ["step", "task", "phase", "epoch", "batch", "gamma", "abs_dev", "g", "scale_visual", "scale_textual"]
    return _csv(rows, header, config_hash)


def forgetting_curve_csv(curves: dict[str, tuple[list, list]], config_hash: str) -> str:
    rows = [[method, k, _num(a), _num(u)]
            for method, (A, U) in curves.items() for k, (a, u) in enumerate(zip(A, U), start=1)]
    return _csv(rows, ["method", "k", "A_k", "U_k"], config_hash)


def _results_lines(tr: LifelongTrainer) -> list[str]:
    # batch traces of each finished task, then its summary
    lines = []
    for k in range(1, tr.trained + 1):
        lines += [json.dumps(r, sort_keys=True) for r in tr.trace if r["task"] == k]
        lines.append(json.dumps(tr.records[k - 1], sort_keys=True))
    return lines


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


def rescore(stream: TaskStream, predictions: dict) -> tuple[list[float], list[float], list[list]]:
    """Recompute (A, U, cells) from saved predictions only."""
    mode = score_mode(stream.task_type)
    cells = {(k, i): p for k, i, p in predictions["cells"]}
    K = max(k for k, _ in cells) if cells else 0
    A, U, out = [], [], []
    for k in range(1, K + 1):
        tp = fp = fn = 0
        for i in range(1, k + 1):
            if (k, i) not in cells:
                raise ScoreMismatch(f"predictions for cell ({k}, {i}) are missing")
            test = stream[i].test
            preds = cells[(k, i)]
            if len(preds) != len(test):
                raise ScoreMismatch(f"cell ({k}, {i}): {len(preds)} predictions for {len(test)} test examples")
            c = f1_counts(preds, [gold_of(ex) for ex in test], mode)
            out.append([k, i, list(c)])
            tp, fp, fn = tp + c[0], fp + c[1], fn + c[2]
            if i == k:
                U.append(f1_from_counts(*c))
        A.append(f1_from_counts(tp, fp, fn))
    return A, U, out


# ----------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    cfg = C.load_config(args.config)
    stream = generate_stream(cfg.data.synthetic)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_stream(stream, out)
    man = {"config_hash": cfg.hash(), "digest": stream_digest(stream), **manifest(stream)}
    _write(out.with_name(out.name + ".manifest.json"), json.dumps(man, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out} ({stream.K} tasks, digest {man['digest']})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = C.load_config(args.config)
    stream = _get_stream(cfg)
    out = cfg.output_dir()
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    chash = cfg.hash()
    _write(out / "resolved_config.json", C.dump_config(cfg))

    tr = LifelongTrainer(stream, cfg.trainer, cfg.encoder, cfg.distill, chash, cfg.run.run_id)
    if args.resume:
        restore_checkpoint(args.resume, tr)
        log.info("resumed after task %d from %s", tr.trained, args.resume)
    first = tr.trained + 1
    with open(out / "results.jsonl", "w", encoding="utf-8") as fh:
        for line in _results_lines(tr):
            fh.write(line + "\n")
        tr.emit = lambda rec: fh.write(json.dumps(rec, sort_keys=True) + "\n")
        tr.run(checkpoint_dir=ckpt_dir)

    digest = stream_digest(stream)
    _write(out / "score_matrix.csv", tr.scores.to_csv(chash))
    _write(out / "metrics.json", tr.report().to_json(chash, cfg.trainer.seed) + "\n")
    _write(out / "gamma_trace.csv", gamma_trace_csv(tr.trace, chash))
    _write(out / "forgetting_curve.csv", forgetting_curve_csv({"full": (tr.A, tr.U)}, chash))
    preds = {"config_hash": chash, "stream_digest": digest,
             "cells": [[k, i, p] for (k, i), p in sorted(tr.predictions.items())]}
    _write(out / "predictions.json", json.dumps(preds, sort_keys=True) + "\n")

    # validate: the saved predictions must reproduce what was just reported
    A, U, _ = rescore(stream, preds)
    if A != tr.A or U != tr.U:
        raise ScoreMismatch("saved predictions do not reproduce the training-time scores")
    missing = [k for k in range(first, stream.K + 1) if not (ckpt_dir / f"task_{k}.ckpt").is_file()]
    if missing:
        raise CMKGError(f"checkpoints missing for tasks {missing}")
    print(f"run {cfg.run.run_id}: A = {[round(a, 4) for a in tr.A]}  (outputs in {out})")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = C.load_config(args.config)
    stream = _get_stream(cfg)
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    chash = cfg.hash()
    _write(out / "resolved_config.json", C.dump_config(cfg))
    with open(out / "ablation_results.jsonl", "w", encoding="utf-8") as fh:
        rows = ablate(stream, cfg.trainer, cfg.encoder, cfg.distill, chash, cfg.run.run_id,
                      emit=lambda rec: fh.write(json.dumps(rec, sort_keys=True) + "\n"))
    header = ["variant", "MI", "AD", "GM", "MM", "A_K", "U_mean"] + [f"A_{k}" for k in range(1, stream.K + 1)]
    table = [[r["variant"], int(r["MI"]), int(r["AD"]), int(r["GM"]), int(r["MM"]), _num(r["A_K"]),
              _num(r["U_mean"])] + [_num(a) for a in r["A"]] for r in rows]
    _write(out / "ablation.csv", _csv(table, header, chash))
    if len(rows) != len(ABLATIONS):
        raise CMKGError(f"ablation produced {len(rows)} rows, expected {len(ABLATIONS)}")
    for r in rows:
        print(f"{r['variant']:8s} A_K={r['A_K']:.4f} U_mean={r['U_mean']:.4f}")
    return EXIT_OK


def cmd_score(args) -> int:
    run_dir = Path(args.run_dir)
    for name in ("resolved_config.json", "metrics.json", "predictions.json"):
        if not (run_dir / name).is_file():
            raise FileNotFoundError(f"{run_dir / name} not found")
    raw = json.loads((run_dir / "resolved_config.json").read_text(encoding="utf-8"))
    metrics = json.loads((run_dir / "metrics.json").read_text(encoding="utf-8"))
    preds = json.loads((run_dir / "predictions.json").read_text(encoding="utf-8"))
    if args.force:
        raw.pop("config_hash", None)
    cfg = C.from_dict(raw)
    chash = cfg.hash()
    hashes = {metrics.get("config_hash"), preds.get("config_hash")}
    if hashes != {chash} and not args.force:
        raise ScoreMismatch(f"config hash mismatch in {run_dir} ({sorted(map(str, hashes))} vs {chash});"
                            " pass --force to score anyway")
    stream = _get_stream(cfg)
    if preds.get("stream_digest") != stream_digest(stream) and not args.force:
        raise ScoreMismatch("predictions were made on a different dataset than the configured one")
    A, U, _ = rescore(stream, preds)
    for k, a in enumerate(A, start=1):
        print(f"A_{k} = {a!r}  U_{k} = {U[k - 1]!r}")
    if A != metrics["A"] or U != metrics["U"]:
        raise ScoreMismatch("recomputed scores differ from metrics.json")
    print("scores match metrics.json")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cmkg", description="Lifelong multimodal KG construction on synthetic streams")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic task stream")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True, help="dataset file to write (manifest goes next to it)")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="run lifelong training over every task")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", help="task-boundary checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", help="full model plus the four single-switch removals")
    a.add_argument("--config", required=True)
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("score", help="recompute metrics from a run's saved predictions")
    s.add_argument("--run-dir", required=True)
    s.add_argument("--force", action="store_true", help="score even if config hashes disagree")
    s.set_defaults(func=cmd_score)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CMKGError, OSError, ValueError) as e:
        print(f"cmkg {args.command}: error: {e}", file=sys.stderr)
        return _exit_code(e)


if __name__ == "__main__":
    sys.exit(main())
