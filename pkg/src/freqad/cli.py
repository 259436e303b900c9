"""Command-line operator surface.

Subcommands: ``gen`` writes a synthetic benchmark to containers, ``train``
fits a model and logs metrics, ``eval`` scores a checkpoint on a dataset,
``infer`` emits patch- and pixel-level heatmaps for single inputs, and
``split`` dumps the low/high frequency components with a cutoff report.

Exit codes: 0 on success, 2 for configuration problems, 3 for file and
container problems, 4 for numeric failures.
"""
from __future__ import annotations

import argparse
import csv
import io
import sys
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import config as cfg_mod
from . import evalio
from . import pipeline as pl
from . import softgate
from . import training as tr
from .config import ConfigError, RunConfig
from .numerics import NumericsError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

METRIC_COLUMNS = ("P_ROC", "I_ROC", "P_PR", "I_PR")
LOG_COLUMNS = ("epoch", "step", "loss") + METRIC_COLUMNS


# =====================================================================
# shared plumbing
# =====================================================================


def _build_model(cfg: RunConfig) -> pl.Model:
    return pl.Model(cfg_mod.model_config(cfg), np.random.default_rng(cfg.seed))


def _dataset_records(samples: list[tr.SynthSample]) -> list[tuple[str, np.ndarray]]:
    records: list[tuple[str, np.ndarray]] = [
        ("meta/count", np.float64(len(samples))),
    ]
    if samples:
        records.append(("meta/image_size", np.float64(samples[0].image.shape[0])))
    for i, s in enumerate(samples):
        records.append((f"img/{i:04d}", s.image))
        records.append((f"mask/{i:04d}", s.mask.astype(np.uint8)))
        records.append((f"label/{i:04d}", np.uint8(1 if s.is_anomalous else 0)))
        records.append((f"class/{i:04d}", np.uint8(s.class_id)))
    return records


def _read_dataset(path, cfg: RunConfig) -> list[tr.FeatSample]:
    records = evalio.read_container(path)
    if "meta/count" not in records:
        raise evalio.ContainerError(f"{path} is not a dataset container (no meta/count)")
    count = int(records["meta/count"])
    feats = []
    for i in range(count):
        try:
            image = records[f"img/{i:04d}"]
            mask = records[f"mask/{i:04d}"]
            label = int(records[f"label/{i:04d}"])
            class_id = int(records[f"class/{i:04d}"])
        except KeyError as exc:
            raise evalio.ContainerError(f"dataset record missing: {exc}") from None
        feats.append(
            tr.FeatSample(
                feat=tr.stub_encoder(image, cfg.channels, cfg.patch),
                patch_mask=tr.patch_mask_from_pixels(mask, cfg.patch),
                pixel_mask=np.asarray(mask, dtype=np.uint8),
                is_anomalous=bool(label),
                class_id=class_id,
            )
        )
    return feats


def _generate_feats(cfg: RunConfig, split: str) -> list[tr.FeatSample]:
    per_class = cfg.train_per_class if split == "train" else cfg.test_per_class
    seed = cfg.seed if split == "train" else cfg.seed + 1
    data = tr.synth_dataset(per_class, classes=cfg.classes, size=cfg.image_size,
                            anomaly_fraction=cfg.anomaly_fraction, seed=seed)
    return tr.featurize(data, cfg.channels, cfg.patch)


def format_metrics_table(rows: list[tuple[str, dict]]) -> str:
    """Fixed-column text table, one labelled row per metrics dict."""
    width = max([len("split")] + [len(name) for name, _ in rows])
    header = "split".ljust(width) + "".join(f"  {c:>8}" for c in METRIC_COLUMNS)
    lines = [header]
    for name, metrics in rows:
        cells = "".join(f"  {metrics[c]:8.6f}" for c in METRIC_COLUMNS)
        lines.append(name.ljust(width) + cells)
    return "\n".join(lines) + "\n"


def write_metrics_csv(path, rows: list[dict]) -> None:
    """Epoch log as CSV; full-precision floats so reruns diff bit-exactly."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_COLUMNS)
    for row in rows:
        writer.writerow([
            row["epoch"], row["step"],
            *[repr(float(row[c])) for c in ("loss", *METRIC_COLUMNS)],
        ])
    Path(path).write_text(buf.getvalue())


def _feature_records(container: dict, cfg: RunConfig):
    """(name, feature map, pixel shape) per scorable record.

    ``img/...`` records are grayscale images run through the built-in
    encoder; ``feat/...`` records are ready-made (C, H, W) feature maps,
    scored on a pixel grid of the patch-scaled feature extent.
    """
    out = []
    for name, arr in container.items():
        if name.startswith("img/"):
            arr = np.asarray(arr, dtype=np.float64)
            feat = tr.stub_encoder(arr, cfg.channels, cfg.patch)
            out.append((name, feat, arr.shape))
        elif name.startswith("feat/"):
            feat = np.asarray(arr, dtype=np.float64)
            if feat.ndim != 3:
                raise evalio.ContainerError(
                    f"record {name!r} must be (C, H, W), got shape {feat.shape}"
                )
            pixel = (feat.shape[1] * cfg.patch, feat.shape[2] * cfg.patch)
            out.append((name, feat, pixel))
    if not out:
        raise evalio.ContainerError("container has no img/ or feat/ records")
    return out


# =====================================================================
# subcommands
# =====================================================================


def cmd_gen(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg_mod.echo_config(cfg, out)
    for split, per_class, seed in (
        ("train", cfg.train_per_class, cfg.seed),
        ("test", cfg.test_per_class, cfg.seed + 1),
    ):
        data = tr.synth_dataset(per_class, classes=cfg.classes, size=cfg.image_size,
                                anomaly_fraction=cfg.anomaly_fraction, seed=seed)
        evalio.write_container(out / f"{split}.had1", _dataset_records(data))
        print(f"wrote {out / (split + '.had1')} ({len(data)} samples)")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg_mod.echo_config(cfg, out)
    train_feats = _generate_feats(cfg, "train")
    test_feats = _generate_feats(cfg, "test")
    model = _build_model(cfg)
    pixel_hw = (cfg.image_size, cfg.image_size)

    def log(row):
        cells = "  ".join(f"{c}={row[c]:.4f}" for c in METRIC_COLUMNS if c in row)
        print(f"epoch {row['epoch']:3d}  step {row['step']:4d}  "
              f"loss {row['loss']:.4f}  {cells}")

    result = tr.train(model, train_feats, test_feats, cfg_mod.train_settings(cfg),
                      cfg_mod.loss_weights(cfg), pixel_hw=pixel_hw, log=log)
    write_metrics_csv(out / "metrics.csv", result.history)
    tr.save_checkpoint(out / "checkpoint.had1", model, result.optim,
                       cfg_mod.config_text(cfg))
    final = result.final_metrics or tr.evaluate_model(model, test_feats, pixel_hw)
    table = format_metrics_table([("test", final)])
    (out / "metrics.txt").write_text(table)
    print(table, end="")
    print(f"checkpoint: {out / 'checkpoint.had1'}")
    return EXIT_OK


def _load_checkpoint_model(path, overrides: dict) -> tuple[pl.Model, RunConfig]:
    records, config_text = tr.load_checkpoint_records(path)
    file_values = cfg_mod.parse_config_text(config_text)
    file_values.update(overrides)
    cfg = cfg_mod.load_config(None, file_values)
    model = _build_model(cfg)
    tr.restore_model(model, records)
    return model, cfg


def cmd_eval(args, overrides: dict) -> int:
    model, cfg = _load_checkpoint_model(args.checkpoint, overrides)
    feats = _read_dataset(args.dataset, cfg)
    pixel_hw = feats[0].pixel_mask.shape if feats else (cfg.image_size, cfg.image_size)
    metrics = tr.evaluate_model(model, feats, pixel_hw=pixel_hw)
    table = format_metrics_table([(Path(args.dataset).stem, metrics)])
    print(table, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        cfg_mod.echo_config(cfg, out)
        (out / "metrics.txt").write_text(table)
        write_metrics_csv(out / "metrics.csv", [dict(
            epoch=0, step=0, loss=float("nan"), **metrics)])
    return EXIT_OK


def cmd_infer(args, overrides: dict) -> int:
    model, cfg = _load_checkpoint_model(args.checkpoint, overrides)
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg_mod.echo_config(cfg, out)
    container = evalio.read_container(args.input)
    for name, feat, pixel_hw in _feature_records(container, cfg):
        amap = model.score(feat, pixel_hw=pixel_hw)
        if not (np.isfinite(amap.patch_scores).all()
                and np.isfinite(amap.pixel_scores).all()):
            raise NumericsError(f"non-finite anomaly scores for record {name!r}")
        base = name.replace("/", "_")
        evalio.export_heatmap(out / f"{base}_patch.pgm", amap.patch_scores)
        evalio.export_heatmap(out / f"{base}_pixel.pgm", amap.pixel_scores)
        print(f"{name}: image score {amap.image_score:.6f} "
              f"-> {base}_patch.pgm, {base}_pixel.pgm")
    return EXIT_OK


def cmd_split(args, cfg: RunConfig) -> int:
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    container = evalio.read_container(args.input)
    gate = cfg_mod.gate_config(cfg)
    low_records, high_records, report = [], [], []
    for name, feat, _ in _feature_records(container, cfg):
        c, h, w = feat.shape
        ph, pw = pl.next_pow2(h), pl.next_pow2(w)
        padded = feat if (ph, pw) == (h, w) else pl.edge_pad(feat, ph, pw)
        with ag.no_grad():
            state = softgate.split(padded, gate)
        low = state.low.value[:, :h, :w]
        high = state.high.value[:, :h, :w]
        low_records.append((name, low))
        high_records.append((name, high))
        report.append(f"{name}  cutoff={float(state.cutoff.value):.6f}  "
                      f"residual={np.abs(low + high - feat).max():.3e}")
    evalio.write_container(out / "low.had1", low_records)
    evalio.write_container(out / "high.had1", high_records)
    report_text = "\n".join(report) + "\n"
    (out / "cutoff_report.txt").write_text(report_text)
    print(report_text, end="")
    print(f"wrote {out / 'low.had1'} and {out / 'high.had1'}")
    return EXIT_OK


# =====================================================================
# argument parsing and dispatch
# =====================================================================


def _add_override_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int, help="run seed")
    p.add_argument("--steps", type=int, help="optimizer steps")
    p.add_argument("--out", help="output directory")
    p.add_argument("--gate", help="gate mode: soft or hard:<t>")
    p.add_argument("--no-fsam", action="store_true", help="disable the high-frequency branch")
    p.add_argument("--no-gscm", action="store_true", help="disable the low-frequency branch")
    p.add_argument("--no-f2s", action="store_true", help="disable attention in the high branch")


def _overrides(args) -> dict:
    out = {}
    for key in ("seed", "steps", "out", "gate"):
        val = getattr(args, key, None)
        if val is not None:
            out[key] = val
    for key in ("no_fsam", "no_gscm", "no_f2s"):
        if getattr(args, key, False):
            out[key] = True
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="freqad",
        description="Frequency-split dual-branch anomaly detection toolkit.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write the synthetic benchmark to containers")
    _add_override_flags(p)

    p = sub.add_parser("train", help="train a model and write checkpoint + logs")
    _add_override_flags(p)

    p = sub.add_parser("eval", help="score a checkpoint against a dataset container")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    _add_override_flags(p)

    p = sub.add_parser("infer", help="emit patch/pixel heatmaps per input record")
    p.add_argument("checkpoint")
    p.add_argument("input")
    _add_override_flags(p)

    p = sub.add_parser("split", help="dump low/high frequency components + cutoffs")
    p.add_argument("input")
    _add_override_flags(p)

    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = _overrides(args)
    try:
        if args.command in ("gen", "train", "split"):
            cfg = cfg_mod.load_config(args.config, overrides)
        if args.command == "gen":
            return cmd_gen(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(args, overrides)
        if args.command == "infer":
            return cmd_infer(args, overrides)
        return cmd_split(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (evalio.ContainerError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericsError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
