"""Command-line front end: reproducible experiments from key=value configs.

Subcommands: ``train-sae``, ``predict``, ``similarity``, ``run``, ``synth``.
Every command writes its artifacts under the output directory together with a
``manifest.json`` recording the resolved config, its hash, the seed, and
library versions; nothing carries timestamps, so identical config + seed
reproduce byte-identical outputs. The ``BINADAPT_THREADS`` environment
variable (0 = auto) caps internal parallelism; all current kernels are
single-threaded, so it is validated and recorded only.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    PgmError,
    load_dataset,
    load_eval_masks,
    read_pgm,
    write_pgm,
    write_synthetic_dirs,
)
from .metrics import confusion, f1, precision, recall
from .models import SaeConfig, predict_prob_map
from .similarity import autobindann, compare_histograms, domain_histogram, histogram_csv
from .training import (
    TrainConfig,
    binarize,
    history_csv,
    load_binarizer,
    save_binarizer,
    train_sae,
)

__all__ = ["ConfigError", "ExperimentConfig", "parse_config", "main"]


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass
class ExperimentConfig:
    source_dir: str = ""
    target_dir: str = ""
    out_dir: str = ""
    patch_h: int = 32
    patch_w: int = 32
    depth: int = 3
    filters: int = 8
    dropout: float = 0.2
    epochs: int = 60
    batch: int = 16
    seed: int = 0
    lr: float = 1e-3
    lambda0: float = 0.1
    lambda_inc: float = 0.01
    h_prec: float = 0.1
    rho_th: float = 0.25
    sweep_step: float = 0.05
    validation_fraction: float = 0.2

    def train_config(self) -> TrainConfig:
        try:
            model = SaeConfig(
                depth=self.depth,
                filters=self.filters,
                dropout_rate=self.dropout,
                patch=(self.patch_h, self.patch_w),
            )
            return TrainConfig(
                epochs=self.epochs,
                batch=self.batch,
                seed=self.seed,
                lr=self.lr,
                sweep_step=self.sweep_step,
                lambda0=self.lambda0,
                lambda_increment=self.lambda_inc,
                model=model,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def as_dict(self):
        # out_dir is where artifacts land, not part of the experiment identity
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "out_dir"}

    def canonical_text(self):
        return "".join(f"{k}={v}\n" for k, v in sorted(self.as_dict().items()))


def parse_config(text: str) -> ExperimentConfig:
    """Parse key=value lines ('#' starts a comment); unknown keys are rejected."""
    known = {f.name: f.type for f in fields(ExperimentConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        caster = {"str": str, "int": int, "float": float}[known[key]]
        try:
            values[key] = caster(value)
        except ValueError:
            raise ConfigError(f"line {lineno}: bad {known[key]} value {value!r} for {key!r}") from None
    try:
        return ExperimentConfig(**values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _load_config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        cfg = parse_config(Path(args.config).read_text())
    else:
        cfg = ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    return cfg


def _thread_cap() -> int:
    raw = os.environ.get("BINADAPT_THREADS", "0")
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"BINADAPT_THREADS must be an integer, got {raw!r}") from None
    if cap < 0:
        raise ConfigError(f"BINADAPT_THREADS must be >= 0, got {cap}")
    return cap


def _out_dir(cfg) -> Path:
    if not cfg.out_dir:
        raise ConfigError("no output directory (set out_dir or pass --out)")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command, cfg, extra=None):
    manifest = {
        "command": command,
        "config": cfg.as_dict(),
        "config_hash": hashlib.sha256(cfg.canonical_text().encode()).hexdigest(),
        "seed": cfg.seed,
        "threads": _thread_cap(),
        "versions": {"binadapt": __version__, "numpy": np.__version__},
    }
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def _require(cfg, *keys):
    for key in keys:
        if not getattr(cfg, key):
            raise ConfigError(f"missing required config key {key!r}")


def _evaluation_rows(masks, eval_masks):
    rows = []
    total = None
    for stem in sorted(masks):
        if stem not in eval_masks:
            continue
        c = confusion(masks[stem], eval_masks[stem].mask)
        rows.append((stem, f1(c), precision(c), recall(c)))
        total = c if total is None else total + c
    if total is not None:
        rows.append(("overall", f1(total), precision(total), recall(total)))
    return rows


def _summary_csv(rows) -> str:
    lines = ["page,f1,precision,recall"]
    for stem, s_f1, s_p, s_r in rows:
        lines.append(f"{stem},{repr(s_f1)},{repr(s_p)},{repr(s_r)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# commands

def cmd_train_sae(args) -> int:
    cfg = _load_config(args)
    _require(cfg, "source_dir")
    out = _out_dir(cfg)
    source = load_dataset(cfg.source_dir, "source", cfg.validation_fraction, cfg.seed)
    tb = train_sae(source, cfg.train_config())
    save_binarizer(out / "sae.ckpt", tb)
    (out / "history_sae.csv").write_text(history_csv(tb.history))
    best_f1 = max(h.val_f1 for h in tb.history)
    _write_manifest(out, "train-sae", cfg, {"val_f1": best_f1, "th_s": tb.th_s})
    print(f"trained {cfg.epochs} epochs; best validation F1 {best_f1:.4f}; "
          f"checkpoint {out / 'sae.ckpt'}")
    return 0


def cmd_predict(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    tb = load_binarizer(args.checkpoint)
    page = read_pgm(Path(args.input).read_bytes())
    prob = predict_prob_map(tb.model, page)
    stem = Path(args.input).stem
    (out / f"{stem}.prob.pgm").write_bytes(write_pgm(prob))
    (out / f"{stem}.mask.pgm").write_bytes(write_pgm(binarize(prob, tb.th_s).astype(np.float64)))
    _write_manifest(out, "predict", cfg, {"input": str(args.input), "th_s": tb.th_s})
    print(f"wrote {out / f'{stem}.prob.pgm'} and {out / f'{stem}.mask.pgm'}")
    return 0


def cmd_similarity(args) -> int:
    cfg = _load_config(args)
    if args.source_dir:
        cfg.source_dir = args.source_dir
    if args.target_dir:
        cfg.target_dir = args.target_dir
    _require(cfg, "source_dir", "target_dir")
    out = _out_dir(cfg)
    tb = load_binarizer(args.checkpoint)
    source = load_dataset(cfg.source_dir, "source", cfg.validation_fraction, cfg.seed)
    target = load_dataset(cfg.target_dir, "target", cfg.validation_fraction, cfg.seed)
    hist_source = domain_histogram(tb, source.validation(), cfg.h_prec)
    hist_target = domain_histogram(tb, target.records, cfg.h_prec)
    report = compare_histograms(hist_source, hist_target, cfg.rho_th)
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "hist_source.csv").write_text(histogram_csv(hist_source))
    (out / "hist_target.csv").write_text(histogram_csv(hist_target))
    _write_manifest(out, "similarity", cfg, {"decision": report.decision, "rho": report.rho})
    print(f"rho={report.rho:.4f} decision={report.decision}")
    return 0


def cmd_run(args) -> int:
    cfg = _load_config(args)
    _require(cfg, "source_dir", "target_dir")
    out = _out_dir(cfg)
    source = load_dataset(cfg.source_dir, "source", cfg.validation_fraction, cfg.seed)
    target = load_dataset(cfg.target_dir, "target", cfg.validation_fraction, cfg.seed)

    result = autobindann(source, target, cfg.train_config(), cfg.h_prec, cfg.rho_th)

    mask_dir = out / "binarized"
    mask_dir.mkdir(exist_ok=True)
    for stem, mask in result.masks.items():
        (mask_dir / f"{stem}.pgm").write_bytes(write_pgm(mask.astype(np.float64)))

    (out / "report.json").write_text(result.report.to_json() + "\n")
    (out / "hist_source.csv").write_text(histogram_csv(result.hist_source))
    (out / "hist_target.csv").write_text(histogram_csv(result.hist_target))
    (out / "history_sae.csv").write_text(history_csv(result.sae.history))
    save_binarizer(out / "sae.ckpt", result.sae)
    if result.da is not None:
        (out / "history_bindann.csv").write_text(history_csv(result.da.history))
        save_binarizer(out / "bindann.ckpt", result.da)

    # post-hoc evaluation only: target labels, when present on disk, never
    # feed back into training or the gate
    eval_masks = load_eval_masks(cfg.target_dir)
    rows = _evaluation_rows(result.masks, eval_masks)
    if rows:
        (out / "summary.csv").write_text(_summary_csv(rows))

    _write_manifest(out, "run", cfg, {"decision": result.report.decision, "rho": result.report.rho})
    print(f"rho={result.report.rho:.4f} decision={result.report.decision}; "
          f"binarized {len(result.masks)} pages into {mask_dir}")
    return 0


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    dirs = write_synthetic_dirs(cfg.seed, out)
    _write_manifest(out, "synth", cfg, {"datasets": [d.name for d in dirs]})
    print("wrote " + ", ".join(str(d) for d in dirs))
    return 0


# ---------------------------------------------------------------------------

def _build_parser():
    parser = argparse.ArgumentParser(prog="binadapt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory (overrides out_dir)")

    p = sub.add_parser("train-sae", help="fit the plain binarizer on the source domain")
    common(p)
    p.set_defaults(func=cmd_train_sae)

    p = sub.add_parser("predict", help="binarize one page with a trained checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="page PGM to binarize")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("similarity", help="histogram similarity report for two domains")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source-dir", default="")
    p.add_argument("--target-dir", default="")
    p.set_defaults(func=cmd_similarity)

    p = sub.add_parser("run", help="full gated pipeline on source + target directories")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("synth", help="write the three synthetic fixture datasets")
    common(p)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except (PgmError, OSError) as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
