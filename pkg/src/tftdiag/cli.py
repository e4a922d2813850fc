"""Command-line entry point: ``tftdiag <command> [--profile desk|paper] [--config FILE] [--key value ...]``."""

from __future__ import annotations

import argparse
import math
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from .evaluation import (attention_summary, evaluate, export_hidden_features, head_summed, snr_sweep,
                         write_attention_table, write_pgm, write_snr_table)
from .model import (TFT, CheckpointError, ConfigError, NumericFault, count_parameters, load_checkpoint,
                    parameter_breakdown, save_checkpoint)
from .signals import (SpecError, StratificationError, TfrFormatError, build_dataset, load_samples,
                      read_manifest, split_dataset, write_manifest)
from .tensor import Rng
from .training import TrainingDiverged, train, write_history

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

PROVENANCE = "provenance.txt"
MANIFEST = "manifest.tsv"
CHECKPOINT = "best.tftc"
HISTORY = "history.tsv"
SPLITS = ("train.tsv", "val.tsv", "test.tsv")

COMMANDS = {
    "generate": "synthesize signals, transform them to TFRs and write a dataset directory",
    "train": "split the dataset, train, and write the best checkpoint plus history",
    "eval": "accuracy and confusion grid on the held-out split",
    "attn": "class-token attention summary (TSV) and full matrix (PGM) for one block",
    "snr": "accuracy on the held-out split re-synthesized at each SNR",
    "params": "per-layer parameter breakdown and closed-form total",
    "features": "export class-token hidden features of every sample",
}


def _key_table() -> str:
    w = max(len(f.key) for f in cfgmod.FIELDS)
    lines = ["config keys (flag --key-name; file 'key = value'):",
             f"  {'key'.ljust(w)}  {'desk':>12}  {'paper':>12}  description"]
    for f in cfgmod.FIELDS:
        lines.append(f"  {f.key.ljust(w)}  {str(f.desk):>12}  {str(f.paper):>12}  {f.help}")
    lines.append("\nexit codes: 0 success, 2 config error, 3 numeric fault, 4 I/O error")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tftdiag", description="Bearing-fault diagnosis with a time-frequency transformer.",
        epilog=_key_table(), formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, text in COMMANDS.items():
        p = sub.add_parser(name, help=text, description=text, epilog=_key_table(),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--profile", choices=cfgmod.PROFILES, default="desk", help="default set (desk)")
        p.add_argument("--config", metavar="FILE", help="UTF-8 'key = value' file; flags override it")
        if name == "generate":
            p.add_argument("--force", action="store_true", help="overwrite a non-empty data directory")
        for f in cfgmod.FIELDS:
            flag = "--" + f.key.replace("_", "-")
            p.add_argument(flag, dest=f.key, default=None, metavar=f.kind.__name__.upper(),
                           help=f"{f.help} (desk: {f.desk}, paper: {f.paper})")
    return parser


def _resolve(args) -> dict:
    file_values = cfgmod.load_config_file(args.config) if args.config else {}
    overrides = {f.key: getattr(args, f.key) for f in cfgmod.FIELDS}
    explicit = {k for k, v in overrides.items() if v is not None} | set(file_values)
    values = cfgmod.resolve(args.profile, file_values, overrides)
    values["_explicit"] = explicit
    values["_profile"] = args.profile
    return values


def _public(values: dict) -> dict:
    return {k: v for k, v in values.items() if not k.startswith("_")}


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing {what}: {path}")
    return path


def _adopt_dataset(values: dict) -> dict:
    """Take dataset keys from the provenance file; explicit conflicting values are an error."""
    prov = _require(Path(values["data_dir"]) / PROVENANCE, "dataset provenance (run 'generate' first)")
    stored = cfgmod.load_config_file(prov)
    out = dict(values)
    for k in cfgmod.DATASET_KEYS:
        if k not in stored:
            continue
        if k in values["_explicit"] and values[k] != stored[k]:
            raise ConfigError(f"{k}={values[k]!r} conflicts with dataset value {stored[k]!r} in {prov}")
        out[k] = stored[k]
    return out


def _say(msg: str) -> None:
    print(msg, flush=True)


# ---------------------------------------------------------------------------
# commands


def cmd_generate(values: dict, force: bool = False) -> int:
    out = Path(values["data_dir"])
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"{out} is not empty; pass --force to overwrite")
        # remove only what a previous generate run wrote
        shutil.rmtree(out / "samples", ignore_errors=True)
        for name in (MANIFEST, PROVENANCE):
            (out / name).unlink(missing_ok=True)
    out.mkdir(parents=True, exist_ok=True)
    ds = cfgmod.dataset_spec(values)
    t0 = time.perf_counter()
    rows = build_dataset(ds, out)
    header = f"# tftdiag {__version__} dataset provenance\n# profile = {values['_profile']}\n"
    (out / PROVENANCE).write_text(header + cfgmod.to_text(_public(values)), encoding="utf-8")
    h, w = ds.out_shape
    _say(f"wrote {len(rows)} samples ({h}x{w}x{ds.channels}, {ds.n_classes} classes) to {out} "
         f"in {time.perf_counter() - t0:.1f} s")
    return EXIT_OK


def _load_split(values: dict, name: str):
    run = Path(values["run_dir"])
    rows = read_manifest(_require(run / name, "split manifest (run 'train' first)"))
    x, y = load_samples(rows, Path(values["data_dir"]))
    return rows, x, y


def _load_model(values: dict) -> TFT:
    return load_checkpoint(_require(Path(values["run_dir"]) / CHECKPOINT, "checkpoint (run 'train' first)"))


def cmd_train(values: dict) -> int:
    values = _adopt_dataset(values)
    data = Path(values["data_dir"])
    rows = read_manifest(_require(data / MANIFEST, "dataset manifest"))
    fractions = cfgmod.split_fractions(values)
    parts = split_dataset(rows, fractions, Rng(values["seed"]).child(3))
    run = Path(values["run_dir"])
    run.mkdir(parents=True, exist_ok=True)
    for name, part in zip(SPLITS, parts):
        write_manifest(run / name, part)
    (run / "config.txt").write_text(cfgmod.to_text(_public(values)), encoding="utf-8")

    mcfg = cfgmod.model_config(values)
    tcfg = cfgmod.train_config(values)
    (x_tr, y_tr), (x_va, y_va), (x_te, y_te) = (load_samples(p, data) for p in parts)
    model = TFT(mcfg, seed=values["seed"])
    _say(f"train {len(x_tr)} / val {len(x_va)} / test {len(x_te)} samples, "
         f"{model.n_parameters()} parameters")

    def report(rec):
        _say(f"epoch {rec.epoch:4d}  loss {rec.train_loss:.4f}  acc {rec.train_acc:.4f}  "
             f"val_loss {rec.val_loss:.4f}  val_acc {rec.val_acc:.4f}")

    t0 = time.perf_counter()
    try:
        result = train(model, (x_tr, y_tr), (x_va, y_va), tcfg, on_epoch=report)
    except TrainingDiverged as exc:
        write_history(run / HISTORY, exc.history)
        if exc.best_state is not None:
            model.load_state(exc.best_state)
            save_checkpoint(model, run / CHECKPOINT)
        raise
    write_history(run / HISTORY, result.history)
    model.load_state(result.best_state)
    save_checkpoint(model, run / CHECKPOINT)
    lines = [f"best_epoch\t{result.best_epoch}", f"steps\t{result.steps}",
             f"seconds\t{time.perf_counter() - t0:.1f}"]
    if len(x_te):
        acc, _ = evaluate(model, x_te, y_te)
        lines.append(f"test_accuracy\t{acc!r}")
    if result.history:
        best = result.history[result.best_epoch - 1] if result.best_epoch else result.history[-1]
        lines += [f"val_accuracy\t{best.val_acc!r}", f"val_loss\t{best.val_loss!r}"]
    (run / "metrics.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _say("\n".join(lines))
    return EXIT_OK


def cmd_eval(values: dict) -> int:
    values = _adopt_dataset(values)
    model = _load_model(values)
    _, x, y = _load_split(values, SPLITS[2])
    names = tuple(s.name for s in cfgmod.dataset_spec(values).roster())
    acc, cm = evaluate(model, x, y, names)
    text = f"accuracy\t{acc!r}\n" + cm.to_text()
    (Path(values["run_dir"]) / "confusion.txt").write_text(text, encoding="utf-8")
    _say(text.rstrip())
    return EXIT_OK


def _parse_block(text: str, n_blocks: int) -> int:
    t = str(text).strip().lower()
    if t == "first":
        return 1
    if t == "last":
        return n_blocks
    try:
        b = int(t)
    except ValueError:
        raise ConfigError(f"block must be first, last or an integer, got {text!r}") from None
    if not 1 <= b <= n_blocks:
        raise ConfigError(f"block {b} outside 1..{n_blocks}")
    return b


def cmd_attn(values: dict) -> int:
    values = _adopt_dataset(values)
    model = _load_model(values)
    _, x, _ = _load_split(values, SPLITS[2])
    block = _parse_block(values["block"], model.config.n_blocks)
    k = values["sample"]
    if not 0 <= k < len(x):
        raise ConfigError(f"sample {k} outside 0..{len(x) - 1}")
    rec = model(x[k:k + 1]).attention
    run = Path(values["run_dir"])
    tsv, pgm = run / f"attention_block{block}.tsv", run / f"attention_block{block}.pgm"
    write_attention_table(tsv, attention_summary(rec, block, 0))
    write_pgm(pgm, head_summed(rec, block, 0))
    _say(f"block {block}, sample {k}: wrote {tsv} and {pgm}")
    return EXIT_OK


def cmd_snr(values: dict) -> int:
    values = _adopt_dataset(values)
    model = _load_model(values)
    rows = read_manifest(_require(Path(values["run_dir"]) / SPLITS[2], "split manifest (run 'train' first)"))
    table = snr_sweep(model, rows, cfgmod.dataset_spec(values), cfgmod.snr_points(values))
    path = Path(values["run_dir"]) / "snr.tsv"
    write_snr_table(path, table)
    for snr, acc in table:
        _say(f"{snr:g} dB\t{acc:.4f}")
    _say(f"floor\t{1.0 / model.config.n_cla:.4f}")
    if any(math.isnan(a) for _, a in table):
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_params(values: dict) -> int:
    mcfg = cfgmod.model_config(values)
    rows = parameter_breakdown(mcfg)
    total, formula = count_parameters(mcfg)
    w = max(len(n) for n, _ in rows)
    for name, n in rows:
        _say(f"{name.ljust(w)}  {n:>10,}")
    _say(f"{'total'.ljust(w)}  {total:>10,}")
    _say(formula)
    return EXIT_OK


def cmd_features(values: dict) -> int:
    values = _adopt_dataset(values)
    model = _load_model(values)
    data = Path(values["data_dir"])
    rows = read_manifest(_require(data / MANIFEST, "dataset manifest"))
    x, _ = load_samples(rows, data)
    path = Path(values["run_dir"]) / "features.tsv"
    feats = export_hidden_features(model, x, rows, path)
    _say(f"wrote {feats.shape[0]} x {feats.shape[1]} features to {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        values = _resolve(args)
        if args.command == "generate":
            return cmd_generate(values, args.force)
        handler = {"train": cmd_train, "eval": cmd_eval, "attn": cmd_attn, "snr": cmd_snr,
                   "params": cmd_params, "features": cmd_features}[args.command]
        return handler(values)
    except NumericFault as exc:
        kind = "training diverged" if isinstance(exc, TrainingDiverged) else "numeric fault"
        print(f"error: {kind}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError, TfrFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, SpecError, StratificationError, ValueError) as exc:
        print(f"error: configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
