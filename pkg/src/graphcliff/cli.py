"""Command-line entry point.

Configuration precedence, lowest to highest: built-in defaults, the JSON file
given with ``--config``, dedicated flags (``--data``, ``--out``,
``--checkpoint``, ``--seed``), then ``--set section.key=value`` overrides.
The effective configuration is written as ``config.json`` into every output
directory; passing that file back with ``--config`` reproduces the run.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric abort.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import math
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .analysis import analyze, export_gate_scores
from .chem import SmilesError, parse_smiles
from .cliff import DEFAULT_COLUMNS, CompoundRecord, DatasetError, annotate_cliffs, apply_flags, load_dataset, stratified_split
from .fingerprint import FpConfig, ecfp
from .graphnn import ModelConfig, param_count
from .train import CheckpointError, TrainConfig, TrainingDiverged, evaluate, load_checkpoint, save_checkpoint, train_model

log = logging.getLogger("graphcliff")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SUBCOMMANDS = ("parse", "fp", "annotate", "split", "train", "eval", "analyze", "export-gates", "ingest")


class UsageError(Exception):
    pass


def default_config() -> dict[str, Any]:
    train = asdict(TrainConfig())
    del train["seed"]  # the single top-level seed drives everything
    return {
        "seed": 0,
        "data": None,
        "out": "graphcliff_out",
        "checkpoint": None,
        "subset": "auto",
        "columns": dict(DEFAULT_COLUMNS),
        "fp": asdict(FpConfig()),
        "model": ModelConfig().to_dict(),
        "train": train,
        "cliff": {"sim_threshold": 0.9, "fold": 10.0, "test_frac": 0.2},
        "analysis": {"k_max": 5, "trials": 8, "eps": 1e-3, "n_mols": 20, "layer": -1},
    }


def merge_config(base: dict, override: dict, path: str = "") -> dict:
    """Overlay ``override`` onto ``base``; keys unknown to ``base`` are rejected."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise UsageError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and key != "columns":
            if not isinstance(value, dict):
                raise UsageError(f"config key {where!r} must be an object")
            out[key] = merge_config(base[key], value, where + ".")
        elif key == "columns":
            if not isinstance(value, dict) or set(value) - set(DEFAULT_COLUMNS):
                raise UsageError(f"columns accepts only {sorted(DEFAULT_COLUMNS)}")
            out[key] = {**base[key], **value}
        else:
            out[key] = value
    return out


def _parse_set(items: Sequence[str]) -> dict:
    out: dict = {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return out


def _build(cls, values: dict, **extra):
    try:
        return cls(**values, **extra)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {cls.__name__}: {exc}") from exc


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = default_config()
    if args.config:
        try:
            cfg = merge_config(cfg, json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    flags = {k: getattr(args, k) for k in ("data", "out", "checkpoint", "seed") if getattr(args, k) is not None}
    cfg = merge_config(cfg, flags)
    cfg = merge_config(cfg, _parse_set(args.set or []))
    # validate eagerly so a bad value is a usage error before any work starts
    _build(FpConfig, cfg["fp"])
    _build(ModelConfig, cfg["model"])
    _build(TrainConfig, cfg["train"], seed=cfg["seed"])
    if cfg["subset"] not in ("auto", "all", "train", "test"):
        raise UsageError(f"subset must be auto, all, train or test, got {cfg['subset']!r}")
    return cfg


def _fmt(value: Any, indent: int, level: int) -> str:
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(value, bool) or value is None:
        return json.dumps(value)
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g") if math.isfinite(value) else "null"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, dict):
        if not value:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_fmt(v, indent, level + 1)}" for k, v in value.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(value, (list, tuple, np.ndarray)):
        if len(value) == 0:
            return "[]"
        items = [pad + _fmt(v, indent, level + 1) for v in value]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    raise TypeError(f"cannot serialize {type(value).__name__}")


def dump_json(obj: Any) -> str:
    """Deterministic JSON with floats at 17 significant digits and non-finite values as null."""
    return _fmt(obj, 2, 0) + "\n"


def _f17(x: float | None) -> str:
    return "" if x is None else format(float(x), ".17g")


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_f17(v) if isinstance(v, (float, np.floating)) else v for v in row])


def _prepare_out(cfg: dict, command: str) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(dump_json({"tool_version": __version__, "command": command, "config": cfg}))
    return out


def _require(cfg: dict, key: str) -> str:
    if not cfg.get(key):
        raise UsageError(f"--{key} is required for this command")
    return cfg[key]


def _dataset(cfg: dict):
    return load_dataset(_require(cfg, "data"), cfg["columns"])


def _write_skipped(out: Path, skipped) -> None:
    if skipped:
        _write_csv(out / "skipped.csv", ["row", "smiles", "reason"], [(s.row, s.smiles, s.reason) for s in skipped])


def _subset(records: list[CompoundRecord], which: str, default: str) -> list[CompoundRecord]:
    if which == "auto":
        which = default if any(r.split for r in records) else "all"
    if which == "all":
        return records
    chosen = [r for r in records if r.split == which]
    if not chosen:
        raise DatasetError(f"no records in the {which!r} split")
    return chosen


def _read_smiles(cfg: dict) -> tuple[list[tuple[int, str]], list[tuple[int, str, str]]]:
    path = _require(cfg, "data")
    col = cfg["columns"]["smiles"]
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if not reader.fieldnames or col not in reader.fieldnames:
                raise DatasetError(f"{path}: missing column {col!r}")
            rows = [(n, (row[col] or "").strip()) for n, row in enumerate(reader, start=2)]
    except OSError as exc:
        raise DatasetError(str(exc)) from exc
    return rows, []


def cmd_parse(cfg: dict) -> int:
    out = _prepare_out(cfg, "parse")
    rows, _ = _read_smiles(cfg)
    summaries, skipped = [], []
    for row, smiles in rows:
        try:
            mol = parse_smiles(smiles)
        except SmilesError as exc:
            skipped.append((row, smiles, str(exc)))
            continue
        summaries.append({
            "row": row,
            "smiles": smiles,
            "n_atoms": mol.n_atoms,
            "n_bonds": len(mol.bonds),
            "n_ring_atoms": sum(a.in_ring for a in mol.atoms),
            "n_aromatic_atoms": sum(a.aromatic for a in mol.atoms),
            "elements": sorted({a.element for a in mol.atoms}),
            "total_h": sum(a.implicit_h for a in mol.atoms),
            "formal_charge": sum(a.formal_charge for a in mol.atoms),
        })
    (out / "molecules.json").write_text(dump_json({"molecules": summaries, "skipped": [
        {"row": r, "smiles": s, "reason": why} for r, s, why in skipped]}))
    if skipped:
        _write_csv(out / "skipped.csv", ["row", "smiles", "reason"], skipped)
    return EXIT_OK


def cmd_fp(cfg: dict) -> int:
    out = _prepare_out(cfg, "fp")
    fp_cfg = FpConfig(**cfg["fp"])
    rows, _ = _read_smiles(cfg)
    good, skipped = [], []
    for row, smiles in rows:
        try:
            good.append((row, smiles, ecfp(parse_smiles(smiles), fp_cfg).hex()))
        except SmilesError as exc:
            skipped.append((row, smiles, str(exc)))
    _write_csv(out / "fingerprints.csv", ["row", "smiles", "ecfp_hex"], good)
    if skipped:
        _write_csv(out / "skipped.csv", ["row", "smiles", "reason"], skipped)
    return EXIT_OK


def _augmented_csv(path: Path, records: list[CompoundRecord], cols: dict, extra: dict[str, list]) -> None:
    header = ["id", cols["smiles"], cols["pki"], cols["cliff"], cols["split"], *extra]
    rows = []
    for k, r in enumerate(records):
        cliff = "" if r.cliff is None else int(r.cliff)
        rows.append([r.id, r.smiles, r.pki, cliff, r.split or "", *(extra[c][k] for c in extra)])
    _write_csv(path, header, rows)


def cmd_annotate(cfg: dict) -> int:
    out = _prepare_out(cfg, "annotate")
    ds = _dataset(cfg)
    _write_skipped(out, ds.skipped)
    ann = annotate_cliffs(ds.records, cfg["cliff"]["sim_threshold"], cfg["cliff"]["fold"], FpConfig(**cfg["fp"]))
    shipped = [r.cliff for r in ds.records]
    _augmented_csv(out / "annotated.csv", ds.records, cfg["columns"], {"cliff_annotated": [int(f) for f in ann.flags]})
    known = [(s, f) for s, f in zip(shipped, ann.flags) if s is not None]
    summary = {
        "n": len(ds.records),
        "n_skipped": len(ds.skipped),
        "n_cliff": int(sum(ann.flags)),
        "n_cliff_pairs": len(ann.cliff_pairs()),
        "agreement_with_input_flags": (sum(s == f for s, f in known) / len(known)) if known else None,
    }
    (out / "summary.json").write_text(dump_json(summary))
    _write_csv(out / "cliff_pairs.csv", ["i", "j", "sim_substructure", "sim_scaffold", "sim_smiles", "delta"],
               [(p.i, p.j, p.sim_sub, p.sim_scaf, p.sim_smiles, p.delta_pki) for p in ann.cliff_pairs()])
    return EXIT_OK


def cmd_split(cfg: dict) -> int:
    out = _prepare_out(cfg, "split")
    ds = _dataset(cfg)
    _write_skipped(out, ds.skipped)
    records = ds.records
    if any(r.cliff is None for r in records):
        ann = annotate_cliffs(records, cfg["cliff"]["sim_threshold"], cfg["cliff"]["fold"], FpConfig(**cfg["fp"]))
        records = apply_flags(records, ann)
    records = stratified_split(records, cfg["cliff"]["test_frac"], cfg["seed"])
    _augmented_csv(out / "split.csv", records, cfg["columns"], {})
    test = [r for r in records if r.split == "test"]
    summary = {
        "n": len(records),
        "n_train": len(records) - len(test),
        "n_test": len(test),
        "n_cliff": sum(bool(r.cliff) for r in records),
        "n_test_cliff": sum(bool(r.cliff) for r in test),
    }
    (out / "summary.json").write_text(dump_json(summary))
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    out = _prepare_out(cfg, "train")
    ds = _dataset(cfg)
    _write_skipped(out, ds.skipped)
    model_cfg = ModelConfig(**cfg["model"])
    train_cfg = TrainConfig(seed=cfg["seed"], **cfg["train"])
    records = ds.records
    use_all = not any(r.split for r in records)
    warm = load_checkpoint(cfg["checkpoint"]) if cfg.get("checkpoint") else None
    ckpt, history = train_model(records, train_cfg, model_cfg, warm_start=warm, use_all=use_all)
    save_checkpoint(ckpt, out / "checkpoint.bin")
    (out / "history.csv").write_text(history.to_csv())
    summary = {
        "epochs_run": len(history.epoch),
        "best_epoch": ckpt.extra.get("best_epoch"),
        "parameters": param_count(ckpt.params),
        "final_train_rmse": history.train_rmse[-1] if history.train_rmse else None,
        "warm_start": bool(warm),
    }
    (out / "train_summary.json").write_text(dump_json(summary))
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    out = _prepare_out(cfg, "eval")
    ckpt = load_checkpoint(_require(cfg, "checkpoint"))
    ds = _dataset(cfg)
    _write_skipped(out, ds.skipped)
    records = _subset(ds.records, cfg["subset"], "test")
    res = evaluate(ckpt, records)
    (out / "metrics.json").write_text(dump_json(res.to_dict()))
    return EXIT_OK


def cmd_analyze(cfg: dict) -> int:
    out = _prepare_out(cfg, "analyze")
    ckpt = load_checkpoint(_require(cfg, "checkpoint"))
    ds = _dataset(cfg)
    _write_skipped(out, ds.skipped)
    a = cfg["analysis"]
    records = _subset(ds.records, cfg["subset"], "test")[: a["n_mols"]]
    mols = [r.molecule() for r in records]
    pairs = []
    if len(records) >= 2:
        pairs = annotate_cliffs(records, cfg["cliff"]["sim_threshold"], cfg["cliff"]["fold"], FpConfig(**cfg["fp"])).cliff_pairs()
    report = analyze(ckpt, mols, pairs, k_max=a["k_max"], trials=a["trials"], eps=a["eps"], seed=cfg["seed"],
                     fp=FpConfig(**cfg["fp"]))
    (out / "report.json").write_text(dump_json(report.to_dict()))
    _write_csv(out / "hop_sensitivity.csv", ["hop", "sensitivity"], list(report.hop_sensitivity.items()))
    _write_csv(out / "dirichlet.csv", ["layer", "energy"], list(enumerate(report.dirichlet)))
    _write_csv(out / "jacobian.csv", ["layer", "top_singular_value", "converged"],
               [(k + 1, v, int(c)) for k, (v, c) in enumerate(zip(report.jacobian_sv, report.jacobian_converged))])
    _write_csv(out / "pairs.csv", ["x_ecfp_dissimilarity", "y_embedding_distance"], list(zip(report.pair_x, report.pair_y)))
    return EXIT_OK


def cmd_export_gates(cfg: dict) -> int:
    out = _prepare_out(cfg, "export-gates")
    ckpt = load_checkpoint(_require(cfg, "checkpoint"))
    ds = _dataset(cfg)
    _write_skipped(out, ds.skipped)
    layer = cfg["analysis"]["layer"]
    rows = []
    for r in _subset(ds.records, cfg["subset"], "all"):
        mol = r.molecule()
        for k, score in enumerate(export_gate_scores(ckpt, mol, layer)):
            rows.append((r.id, r.smiles, k, mol.atoms[k].element, float(score)))
    _write_csv(out / "gate_scores.csv", ["id", "smiles", "atom", "element", "score"], rows)
    return EXIT_OK


def ingest_benchmark(directory: str | Path, column_map: dict | None = None) -> dict:
    """Per-file counts (total, cliff, train, test) for every CSV in ``directory``.

    Files that fail to load are listed under ``errors``; the rest proceed.
    """
    directory = Path(directory)
    files = sorted(directory.glob("*.csv")) if directory.is_dir() else []
    if not files:
        raise DatasetError(f"{directory}: no CSV files found")
    datasets, errors = {}, {}
    for path in files:
        try:
            ds = load_dataset(path, column_map)
        except (DatasetError, OSError, UnicodeDecodeError, csv.Error) as exc:
            errors[path.stem] = str(exc)
            continue
        recs = ds.records
        test = [r for r in recs if r.split == "test"]
        datasets[path.stem] = {
            "total": len(recs),
            "cliff": sum(bool(r.cliff) for r in recs),
            "train": sum(r.split == "train" for r in recs),
            "test": len(test),
            "test_cliff": sum(bool(r.cliff) for r in test),
            "skipped": len(ds.skipped),
        }
    return {"datasets": datasets, "errors": errors}


def cmd_ingest(cfg: dict) -> int:
    out = _prepare_out(cfg, "ingest")
    reg = ingest_benchmark(_require(cfg, "data"), cfg["columns"])
    (out / "registry.json").write_text(dump_json(reg))
    keys = ["total", "cliff", "train", "test", "test_cliff", "skipped"]
    _write_csv(out / "registry.csv", ["dataset", *keys], [(n, *(d[k] for k in keys)) for n, d in reg["datasets"].items()])
    for name, err in reg["errors"].items():
        log.error("%s: %s", name, err)
    return EXIT_OK


COMMANDS = {
    "parse": cmd_parse,
    "fp": cmd_fp,
    "annotate": cmd_annotate,
    "split": cmd_split,
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "export-gates": cmd_export_gates,
    "ingest": cmd_ingest,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="graphcliff", description="Activity-cliff aware molecular property regression.")
    p.add_argument("--version", action="version", version=f"graphcliff {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in SUBCOMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON run configuration")
        s.add_argument("--data", help="input CSV (or directory for ingest)")
        s.add_argument("--out", help="output directory")
        s.add_argument("--checkpoint", help="checkpoint to load (warm start for train)")
        s.add_argument("--seed", type=int)
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config field, e.g. train.epochs=5")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, CheckpointError, SmilesError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
