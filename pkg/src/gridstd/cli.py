"""Command-line driver: ``gridstd {gen,train,eval,tune,gradcheck,compare-dissim,report}``.

Exit status: 0 success, 1 validation or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, detect, gradcheck, metrics, pipeline
from .config import ConfigError, RunConfig, dump_config, load_config
from .loss import VARIANTS
from .net import ModelParameters, load_checkpoint, save_checkpoint
from .synthcorpus import generate, read_corpus, write_corpus
from .trainer import AdamState

log = logging.getLogger("gridstd")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
HISTORY_FIELDS = ("epoch", "loss", "l1", "l2", "l3", "val_ap", "seconds")
COMPARE_FIELDS = ("variant", "iv_ap", "iv_iou", "oov_ap", "oov_iou")
# the full-scale ordering of the dissimilarity variants by AP, best first
EXPECTED_ORDER = ("cos_squared", "abs_cos", "shifted_cos")


class UsageError(ValueError):
    pass


# --------------------------------------------------------------------------
# helpers


def _overrides(args) -> list[str]:
    out = list(args.set or [])
    if getattr(args, "preset", None):
        out.append(f"train.preset={args.preset}")
    if getattr(args, "dissim", None):
        out.append(f"train.dissim={args.dissim}")
    return out


def _config(args, base_text: str | None = None) -> RunConfig:
    return load_config(args.config, _overrides(args), args.seed, text=base_text)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_manifest(out: Path, command: str, cfg: RunConfig | None, inputs: dict, outputs: list[str],
                    started: float) -> None:
    _write_json(out / "manifest.json", {
        "command": command,
        "config": cfg.to_dict() if cfg else None,
        "seed": cfg.seed if cfg else None,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": sorted(outputs),
        "artifact_version": __version__,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
    })


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _load_corpus(path):
    if not Path(path).is_dir():
        raise UsageError(f"corpus directory {path} does not exist")
    return read_corpus(path)


def _check_corpus(corpus, cfg: RunConfig) -> None:
    C = cfg.preset().num_cells
    if corpus.config.frames % C:
        raise ConfigError(f"corpus has T={corpus.config.frames} frames, not divisible by C={C}")


def _opt_arrays(opt: AdamState) -> dict:
    arrays = {f"adam.m/{k}": v for k, v in opt.m.items()}
    arrays.update({f"adam.v/{k}": v for k, v in opt.v.items()})
    return arrays


def _opt_from(extra: dict, arrays: dict) -> AdamState:
    m = {k[len("adam.m/"):]: v for k, v in arrays.items() if k.startswith("adam.m/")}
    v = {k[len("adam.v/"):]: a for k, a in arrays.items() if k.startswith("adam.v/")}
    return AdamState(int(extra["adam_step"]), m, v)


def _load_model(path) -> tuple[ModelParameters, dict, dict]:
    if not Path(path).is_file():
        raise UsageError(f"checkpoint {path} does not exist")
    return load_checkpoint(path)


# --------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    started = time.time()
    cfg = _config(args)
    corpus = generate(cfg.corpus_config())
    out = _out_dir(args.out)
    write_corpus(corpus, out)
    _write_json(out / "config.json", cfg.to_dict())
    _write_manifest(out, "gen", cfg, {}, ["corpus.jsonl", "lexicon.jsonl", "splits.json"], started)
    print(f"wrote {len(corpus.utterances)} utterances to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    started = time.time()
    out = _out_dir(args.out)
    ckpt_dir = _out_dir(out / "checkpoints")
    model = opt = None
    start_epoch, rows, best_ap = 0, [], -np.inf
    if args.resume:
        model, extra, arrays = _load_model(ckpt_dir / "last.npz")
        cfg = load_config(None, _overrides(args), args.seed, text=extra["config"])
        opt = _opt_from(extra, arrays)
        start_epoch = int(extra["epoch"]) + 1
        rows = list(extra["history"])
        best_ap = float(extra["best_val_ap"])
    else:
        cfg = _config(args)
    corpus = _load_corpus(args.corpus)
    _check_corpus(corpus, cfg)
    (out / "config.ini").write_text(dump_config(cfg), encoding="utf-8")
    remaining = cfg.train.epochs - start_epoch
    if remaining < 0:
        raise ConfigError(f"checkpoint is at epoch {start_epoch}, beyond train.epochs={cfg.train.epochs}")
    text = dump_config(cfg)
    every = cfg.train_config().checkpoint_every
    state = {"best": best_ap}

    def on_epoch(epoch, m, o, history):
        row = list(history.rows())[-1]
        rows.append(row)
        meta = {"config": text, "epoch": epoch, "adam_step": o.step, "history": rows}
        if row["val_ap"] > state["best"]:
            state["best"] = row["val_ap"]
            save_checkpoint(out / "best.npz", m, {**meta, "best_val_ap": row["val_ap"]})
        meta["best_val_ap"] = state["best"]
        save_checkpoint(ckpt_dir / "last.npz", m, meta, _opt_arrays(o))
        if (epoch + 1) % every == 0:
            save_checkpoint(ckpt_dir / f"epoch_{epoch:03d}.npz", m, meta, _opt_arrays(o))
        metrics.write_rows(out / "history.csv", rows, HISTORY_FIELDS)

    result = pipeline.train_model(corpus, cfg, model=model, optimizer=opt, start_epoch=start_epoch,
                                  on_epoch=on_epoch, epochs=remaining)
    if not (out / "best.npz").exists():
        # zero epochs run: the initial parameters are the best we have
        save_checkpoint(out / "best.npz", result.model, {"config": text, "epoch": start_epoch - 1,
                                                          "history": rows, "best_val_ap": None})
    metrics.write_rows(out / "history.csv", rows, HISTORY_FIELDS)
    _write_manifest(out, "train", cfg, {"corpus": args.corpus}, ["config.ini", "history.csv", "best.npz",
                    "checkpoints/last.npz"], started)
    print(f"trained epochs {start_epoch}..{cfg.train.epochs - 1}; best val AP {state['best']:.4f}")
    return EXIT_OK


def _eval_config(args, extra) -> RunConfig:
    return load_config(args.config, _overrides(args), args.seed, text=extra["config"])


def cmd_eval(args) -> int:
    started = time.time()
    model, extra, _ = _load_model(args.checkpoint)
    cfg = _eval_config(args, extra)
    corpus = _load_corpus(args.corpus)
    _check_corpus(corpus, cfg)
    subsets = pipeline.SUBSETS if args.subset == "all" else (args.subset,)
    threshold = None
    if args.phi is not None:
        threshold = detect.Threshold(args.phi, "fixed", float("nan"), "cli")
    ev = pipeline.evaluate(model, corpus, cfg, split=args.split, threshold=threshold, subsets=subsets)
    out = _out_dir(args.out)
    ev.report.write_csv(out / "metrics.csv")
    _write_json(out / "metrics.json", {
        "rows": [{**r, "value": _json_float(r["value"])} for r in ev.report.rows],
        "threshold": _threshold_dict(ev.threshold),
    })
    detect.write_detections(out / "detections.jsonl", ev.detections)
    metrics.write_rows(out / "det_sweep.csv", ev.sweep, ("theta", "p_miss", "p_fa", "twv"))
    _write_manifest(out, "eval", cfg, {"checkpoint": args.checkpoint, "corpus": args.corpus},
                    ["metrics.csv", "metrics.json", "detections.jsonl", "det_sweep.csv"], started)
    for r in ev.report.rows:
        print(f"{r['metric']:>10} {r['subset']:>4} {r['value']:.4f}")
    return EXIT_OK


def _json_float(v):
    return None if isinstance(v, float) and not np.isfinite(v) else v


def _threshold_dict(t: detect.Threshold) -> dict:
    return {"phi": t.phi, "objective": t.objective, "value": _json_float(t.value), "tuning_set": t.tuning_set}


def cmd_tune(args) -> int:
    started = time.time()
    model, extra, _ = _load_model(args.checkpoint)
    cfg = _eval_config(args, extra)
    if args.objective:
        cfg.eval.objective = args.objective
    corpus = _load_corpus(args.corpus)
    _check_corpus(corpus, cfg)
    t = pipeline.tune(model, corpus, cfg, split=args.split)
    out = _out_dir(args.out)
    _write_json(out / "threshold.json", _threshold_dict(t))
    _write_manifest(out, "tune", cfg, {"checkpoint": args.checkpoint, "corpus": args.corpus},
                    ["threshold.json"], started)
    print(f"phi={t.phi:.6f} ({t.objective}={t.value:.4f} on {t.tuning_set})")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    res = gradcheck.check_loss(args.instances, args.seed)
    res.merge(gradcheck.check_network(args.instances, args.seed))
    for name in sorted(res.max_error):
        flag = "ok" if res.max_error[name] < res.tolerance else "FAIL"
        print(f"{name:<20} max_rel_err={res.max_error[name]:.3e} instances={res.instances[name]}"
              f" skipped={res.skipped[name]} {flag}")
    worst = max(res.max_error.values())
    print(f"max relative error {worst:.3e} (tolerance {res.tolerance:g}) in {res.seconds:.1f}s")
    return EXIT_OK if res.passed else EXIT_RUNTIME


def compare_dissim(corpus, cfg: RunConfig, out: Path | None = None) -> tuple[list[dict], list[str]]:
    """Train and evaluate one model per variant from identical seeds."""
    rows = []
    for variant in VARIANTS:
        vcfg = load_config(None, [f"train.dissim={variant}"], text=dump_config(cfg))
        res = pipeline.train_model(corpus, vcfg)
        ev = pipeline.evaluate(res.best_model, corpus, vcfg, subsets=("IV", "OOV"))
        if out is not None:
            ev.report.write_csv(out / f"metrics_{variant}.csv")
        rows.append({
            "variant": variant,
            "iv_ap": ev.report.value("ap", "IV"),
            "iv_iou": ev.report.value("mean_iou", "IV"),
            "oov_ap": ev.report.value("ap", "OOV"),
            "oov_iou": ev.report.value("mean_iou", "OOV"),
        })
    return rows, ordering_violations(rows)


def ordering_violations(rows) -> list[str]:
    by = {r["variant"]: r for r in rows}
    found = []
    for col in ("iv_ap", "oov_ap"):
        for hi, lo in zip(EXPECTED_ORDER, EXPECTED_ORDER[1:]):
            if by[hi][col] < by[lo][col]:
                found.append(f"{col}: {hi} ({by[hi][col]:.4f}) < {lo} ({by[lo][col]:.4f})")
    return found


def cmd_compare_dissim(args) -> int:
    started = time.time()
    cfg = _config(args)
    corpus = _load_corpus(args.corpus)
    _check_corpus(corpus, cfg)
    out = _out_dir(args.out)
    rows, violations = compare_dissim(corpus, cfg, out)
    metrics.write_rows(out / "compare_dissim.csv", rows, COMPARE_FIELDS)
    for v in violations:
        log.warning("ordering differs from the full-scale result: %s", v)
    _write_json(out / "compare_dissim.json", {"rows": rows, "expected_order": list(EXPECTED_ORDER),
                                               "ordering_violations": violations})
    _write_manifest(out, "compare-dissim", cfg, {"corpus": args.corpus},
                    ["compare_dissim.csv", "compare_dissim.json"], started)
    for r in rows:
        print("  ".join(f"{r[k]:.4f}" if k != "variant" else f"{r[k]:<12}" for k in COMPARE_FIELDS))
    if violations:
        print("ordering flagged: " + "; ".join(violations))
    return EXIT_OK


def cmd_report(args) -> int:
    """Collect ``metrics.csv`` files from eval directories into one wide table."""
    table = {}
    for d in args.runs:
        path = Path(d) / "metrics.csv"
        if not path.is_file():
            raise UsageError(f"{path} does not exist")
        with open(path, newline="", encoding="utf-8") as fh:
            for r in csv.DictReader(fh):
                table.setdefault(str(d), {})[f"{r['metric']}[{r['subset']}]"] = r["value"]
    columns = sorted({c for row in table.values() for c in row})
    rows = [{"run": run, **{c: vals.get(c, "") for c in columns}} for run, vals in table.items()]
    if args.out:
        metrics.write_rows(args.out, rows, ("run", *columns))
    writer = csv.DictWriter(sys.stdout, fieldnames=["run", *columns], lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def _common(p, presets=True):
    p.add_argument("--config", help="INI run configuration")
    p.add_argument("--seed", type=int, help="root seed (overrides [run] seed)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override")
    if presets:
        p.add_argument("--preset", choices=("single_word", "multi_word"))
        p.add_argument("--dissim", choices=VARIANTS)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gridstd", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic corpus")
    _common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a detector")
    _common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoints/last.npz")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="test", choices=("train", "validation", "test"))
    p.add_argument("--subset", default="all", choices=("IV", "OOV", "all"),
                   help="term subset; 'all' reports IV, OOV and their union")
    p.add_argument("--phi", type=float, help="fixed detection threshold instead of tuning")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("tune", help="tune the detection threshold")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="validation", choices=("train", "validation", "test"))
    p.add_argument("--objective", choices=detect.OBJECTIVES)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=100)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("compare-dissim", help="train/evaluate all dissimilarity variants")
    _common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare_dissim)

    p = sub.add_parser("report", help="merge eval metrics into one table")
    p.add_argument("runs", nargs="+", help="eval output directories")
    p.add_argument("--out", help="write the merged CSV here as well")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001 - the exit-code contract covers every failure
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
