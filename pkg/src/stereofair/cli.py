"""Command-line entry point: ``stereofair {gen,audit,train,eval,report}``.

Every command writes its outputs plus a ``manifest.json`` into an output
directory. Exit codes: 0 success, 2 bad input or configuration, 3 numerical
failure during training.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from pathlib import Path

from . import __version__
from .backbone import BackboneError, load_scorer, make_frozen_scorer, save_scorer, tokenize_rec_prompt
from .config import ConfigError, coerce, read_config
from .dataset import (DatasetError, SYNTHETIC_SCHEMA, SyntheticConfig, generate_synthetic,
                      label_from_rating, load_dataset, save_dataset)
from .evaluation import SETTINGS, EvaluationError, comparison, evaluate, paired_group_eval
from .fairness import FairnessError, RecommendationEntry, stereotype_fairness, write_report
from .mos import MoSError, load_mos, save_mos
from .pipeline import DEFAULT_MAX_SEQUENCES, encode, prepare
from .stereotype import (DEFAULT_MIN_INTERACTIONS, DEFAULT_Z, StereotypeError, audit_items,
                         user_history_proportion, write_audit)
from .training import TrainConfig, TrainingError, fit, new_params

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3

# keys of a gen config that are not generator knobs
PIPELINE_SCHEMA = {
    "max_sequences": int,
    "z": float,
    "min_interactions": int,
    "d": int,
    "hidden": int,
    "beta": float,
}
PIPELINE_DEFAULTS = {"max_sequences": DEFAULT_MAX_SEQUENCES, "z": DEFAULT_Z,
                     "min_interactions": DEFAULT_MIN_INTERACTIONS, "d": 16, "hidden": 16, "beta": 1.0}
META_FILE = "dataset.json"


class InputError(Exception):
    """Bad command-line input; maps to exit code 2."""


INPUT_ERRORS = (InputError, ConfigError, DatasetError, StereotypeError, BackboneError, MoSError,
                EvaluationError, FairnessError, FileNotFoundError, NotADirectoryError,
                json.JSONDecodeError)


# -- helpers ----------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_manifest(out_dir, command, config, seed, inputs, outputs, started, threads=1) -> Path:
    """Record one command's run in ``out_dir/manifest.json``.

    The file maps command name to run record, so train and eval can share a
    directory without overwriting each other's manifest.
    """
    out_dir = Path(out_dir)
    path = out_dir / "manifest.json"
    manifest = {}
    if path.is_file():
        try:
            manifest = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            manifest = {}
    manifest[command] = {
        "config": config,
        "seed": seed,
        "threads": threads,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {str(Path(p).relative_to(out_dir)): sha256_file(p) for p in outputs},
        "tool_version": __version__,
        "wall_clock_s": round(time.time() - started, 3),
    }
    return _write_json(path, manifest)


def resolve_seed(arg) -> int:
    if arg is not None:
        return arg
    env = os.environ.get("SF_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise InputError(f"SF_SEED must be an integer, got {env!r}") from None


def _say(args, msg):
    if not args.quiet:
        print(msg)


def load_data_dir(data_dir):
    """Dataset plus the pipeline settings stored next to it by ``gen``."""
    data_dir = Path(data_dir)
    meta_path = data_dir / META_FILE
    if not meta_path.is_file():
        raise InputError(f"{meta_path} not found")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    ds = load_dataset(data_dir / "users.csv", data_dir / "items.csv", data_dir / "interactions.csv",
                      meta["group_set"], meta["rating_median"], tuple(meta["rating_scale"]))
    return ds, meta


def _prepare(ds, meta):
    return prepare(ds, meta["max_sequences"], meta["seed"], meta["z"], meta["min_interactions"])


# -- commands ---------------------------------------------------------------

def cmd_gen(args) -> int:
    started = time.time()
    raw = read_config(args.config)
    synth_raw = {k: v for k, v in raw.items() if k not in PIPELINE_SCHEMA}
    pipe = {**PIPELINE_DEFAULTS,
            **coerce({k: v for k, v in raw.items() if k in PIPELINE_SCHEMA}, PIPELINE_SCHEMA, where="gen config")}
    cfg = SyntheticConfig.from_mapping(synth_raw)
    seed = args.seed
    ds = generate_synthetic(cfg, seed)
    out = Path(args.out)
    paths = save_dataset(ds, out)
    meta = {"group_set": list(ds.group_set), "rating_median": ds.rating_median,
            "rating_scale": list(ds.rating_scale), "seed": seed, **pipe}
    meta_path = _write_json(out / META_FILE, meta)
    # The scorer is planted from generator-side item pools, which the CSVs do
    # not carry, so it has to be built here and shipped with the data.
    prep = _prepare(ds, meta)
    calib = [tokenize_rec_prompt(s, ds, "implicit", prep.vocab) for s in prep.split.train]
    scorer = make_frozen_scorer(prep.vocab, pipe["d"], pipe["hidden"], seed, pipe["beta"], calib)
    scorer_path = save_scorer(scorer, out / "scorer.bin")
    outputs = [*paths.values(), meta_path, scorer_path]
    write_manifest(out, "gen", {**cfg.to_mapping(), **pipe}, seed, [args.config], outputs,
                   started, args.threads)
    _say(args, f"wrote {len(ds.users)} users, {len(ds.items)} items, "
               f"{len(ds.interactions)} interactions to {out}")
    return EXIT_OK


def audit_fairness(ds, audit):
    """SF with every observed positive interaction taken as a recommendation."""
    flags = audit.flag_index.lenient()
    profiles = {u.user_id: user_history_proportion([x.item_id for x in ds.history(u.user_id)], flags, u.user_id)
                for u in ds.users}
    entries = [RecommendationEntry(x.user_id, x.item_id, 1.0, 1)
               for x in ds.interactions if label_from_rating(x.rating, ds.rating_median)]
    return stereotype_fairness(entries, profiles, flags, ds.group_set, strict=False)


def cmd_audit(args) -> int:
    started = time.time()
    ds, meta = load_data_dir(args.data)
    if not ds.interactions:
        raise InputError("dataset has no interactions")
    zs = args.z or [meta.get("z", DEFAULT_Z)]
    min_inter = args.min_interactions if args.min_interactions is not None else meta.get(
        "min_interactions", DEFAULT_MIN_INTERACTIONS)
    out = Path(args.out)
    outputs, sweep = [], []
    for i, z in enumerate(zs):
        target = out if i == 0 else out / f"z_{z:g}"
        audit = audit_items(ds, z, min_inter)
        paths = write_audit(audit, target)
        report = audit_fairness(ds, audit)
        paths["fairness"] = write_report(report, target / "fairness_report.json")
        outputs.extend(paths.values())
        sweep.append({"z": z, "threshold": audit.threshold.threshold, "n_flagged": audit.n_flagged(),
                      "sf": report.to_json()["sf"]})
        sf = "n/a" if report.degenerate else f"{report.sf:+.4f}"
        _say(args, f"z={z:g}: {audit.n_flagged()} flagged items, SF={sf}")
    if len(zs) > 1:
        outputs.append(_write_json(out / "z_sweep.json", sweep))
    write_manifest(out, "audit", {"z": zs, "min_interactions": min_inter}, meta["seed"],
                   [Path(args.data) / n for n in ("users.csv", "items.csv", "interactions.csv")],
                   outputs, started, args.threads)
    return EXIT_OK


def cmd_train(args) -> int:
    started = time.time()
    ds, meta = load_data_dir(args.data)
    values = read_config(args.train_config)
    if args.seed_given:
        values["seed"] = str(args.seed)
    cfg = TrainConfig.from_mapping(values)
    if args.objective == "rec":
        cfg = cfg.rec_only()
    scorer = load_scorer(args.scorer)
    prep = _prepare(ds, meta)
    train = encode(prep, scorer, prep.split.train, cfg.setting)
    val = encode(prep, scorer, prep.split.validation, cfg.setting) if prep.split.validation else None
    out = Path(args.out)
    log_path = out / "train_log.jsonl"
    params, log = fit(cfg, train.batch, scorer, new_params(cfg, scorer.d),
                      val.batch if val is not None else None, log_path)
    mos_path = save_mos(params, out / "mos.bin")
    config = {**cfg.to_mapping(), "objective": args.objective}
    write_manifest(out, "train", config, cfg.seed, [args.scorer, args.train_config],
                   [mos_path, log_path], started, args.threads)
    if log:
        last = log[-1]
        _say(args, f"{len(log)} epochs, final l_total={last['l_total']:.4f}")
    else:
        _say(args, "0 epochs, initial parameters saved")
    return EXIT_OK


def cmd_eval(args) -> int:
    started = time.time()
    ds, meta = load_data_dir(args.data)
    settings = [s.strip() for s in args.settings.split(",") if s.strip()]
    for s in settings:
        if s not in SETTINGS:
            raise InputError(f"unknown setting {s!r}")
    scorer = load_scorer(args.scorer)
    digest = scorer.weights_digest
    params = load_mos(args.mos) if args.mos else None
    prep = _prepare(ds, meta)
    report = evaluate(params, scorer, prep, settings=settings, threshold=args.threshold)
    paired = paired_group_eval(params, scorer, prep, settings=settings, threshold=args.threshold)
    report.extra["paired"] = {k: (None if v is None else v.to_json()) for k, v in paired.items()}
    report.extra["mos"] = args.mos is not None
    if scorer.compute_digest() != digest:
        raise BackboneError("scorer changed during evaluation")
    out = Path(args.out)
    path = report.write(out / "metrics.json")
    inputs = [args.scorer] + ([args.mos] if args.mos else [])
    write_manifest(out, "eval", {"settings": settings, "threshold": args.threshold}, meta["seed"],
                   inputs, [path], started, args.threads)
    sf = ", ".join(f"{k}={'n/a' if v is None else f'{v:+.4f}'}" for k, v in report.sf.items())
    _say(args, f"AUC={report.auc if report.auc is None else round(report.auc, 4)}  SF: {sf}")
    return EXIT_OK


def cmd_report(args) -> int:
    started = time.time()
    reports, logs, inputs = {}, {}, []
    for run in args.runs:
        run = Path(run)
        metrics = run / "metrics.json"
        if not metrics.is_file():
            raise InputError(f"{metrics} not found")
        label = run.name
        if label in reports:
            label = str(run)
        reports[label] = json.loads(metrics.read_text(encoding="utf-8"))
        inputs.append(metrics)
        log = run / "train_log.jsonl"
        if log.is_file():
            logs[label] = [json.loads(line) for line in log.read_text(encoding="utf-8").splitlines() if line]
            inputs.append(log)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    comp_path = _write_json(out / "comparison.json", comparison(reports))
    sf_path = out / "sf_by_setting.csv"
    with open(sf_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "setting", "sf", "auc"])
        for label, rep in reports.items():
            for setting, block in rep.get("settings", {}).items():
                w.writerow([label, setting, block.get("sf"), block.get("auc")])
    curve_path = out / "epoch_curves.csv"
    cols = ["epoch", "l_rec", "l_fair", "l_expert", "l_total", "val_auc", "val_sf"]
    with open(curve_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", *cols])
        for label, log in logs.items():
            for rec in log:
                w.writerow([label, *(rec.get(c) for c in cols)])
    write_manifest(out, "report", {"runs": [str(r) for r in args.runs]}, None, inputs,
                   [comp_path, sf_path, curve_path], started, args.threads)
    _say(args, f"compared {len(reports)} runs into {comp_path}")
    return EXIT_OK


# -- argument parsing -------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="random seed (falls back to $SF_SEED, then 0)")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="worker threads (recorded; work is single-threaded)")
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="stereofair", parents=[common],
                                description="Stereotype-aware fairness audit and MoS mitigation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset and frozen scorer")
    g.add_argument("config", help="key=value generator config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    a = sub.add_parser("audit", parents=[common], help="stereotype degrees, threshold and SF of the data")
    a.add_argument("data")
    a.add_argument("--out", required=True)
    a.add_argument("--z", type=float, action="append", help="threshold z; repeat for a sweep")
    a.add_argument("--min-interactions", type=int, default=None)
    a.set_defaults(func=cmd_audit)

    t = sub.add_parser("train", parents=[common], help="train MoS parameters on a frozen scorer")
    t.add_argument("data")
    t.add_argument("scorer")
    t.add_argument("train_config")
    t.add_argument("--out", required=True)
    t.add_argument("--objective", choices=("rec", "total"), default="total")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="AUC, precision, recall and SF per setting")
    e.add_argument("data")
    e.add_argument("scorer")
    e.add_argument("mos", nargs="?", default=None)
    e.add_argument("--settings", default=",".join(SETTINGS))
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", parents=[common], help="compare evaluated runs")
    r.add_argument("runs", nargs="+")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.seed_given = hasattr(args, "seed") or "SF_SEED" in os.environ
    args.quiet = getattr(args, "quiet", False)
    args.threads = getattr(args, "threads", 1)
    try:
        args.seed = resolve_seed(getattr(args, "seed", None))
        if args.threads < 1:
            raise InputError("--threads must be at least 1")
        return args.func(args)
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except INPUT_ERRORS as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
