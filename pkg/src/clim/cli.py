"""Operator entry point: data generation, pretraining, evaluation, inspection.

One JSON config document (sections: data, augment, contrastive,
neighborhood, train, eval) with CLI flags overriding config values.
Exit codes: 0 ok, 1 validation, 2 I/O or file format, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from .augment import AugConfig, make_views
from .contrastive import ContrastiveConfig
from .data import Dataset, SyntheticSpec, generate_synthetic, load_tensor_file, save_ppm, save_tensor_file
from .encoder import load_checkpoint
from .errors import DataFormatError, NumericError, ValidationError
from .evaluate import ProbeConfig, finetune_fraction, intra_class_similarity, knn_probe, linear_probe
from .neighborhood import NeighborhoodConfig, EmbeddingBank, embed_dataset, kmeans_fit, select_positives
from .numerics import Rng
from .report import aggregate, compare_strategies, load_run_dir, render_table
from .trainer import TrainConfig, pretrain


# ---------------------------------------------------------------------------
# config document


def _as_int(value, key):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValidationError(f"config: {key} expects an integer, got {value!r}")
    return value


def _as_float(value, key):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(f"config: {key} expects a number, got {value!r}")
    return float(value)


def _as_bool(value, key):
    if not isinstance(value, bool):
        raise ValidationError(f"config: {key} expects a boolean, got {value!r}")
    return value


def _as_str(value, key):
    if not isinstance(value, str):
        raise ValidationError(f"config: {key} expects a string, got {value!r}")
    return value


def _as_int_list(value, key):
    if not isinstance(value, (list, tuple)) or not value or \
            any(isinstance(v, bool) or not isinstance(v, int) for v in value):
        raise ValidationError(f"config: {key} expects a non-empty list of integers, got {value!r}")
    return tuple(value)


def _as_float_pair(value, key):
    if not isinstance(value, (list, tuple)) or len(value) != 2 or \
            any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in value):
        raise ValidationError(f"config: {key} expects a pair of numbers, got {value!r}")
    return (float(value[0]), float(value[1]))


def _as_clusters(value, key):
    if value == "auto":
        return "auto"
    return _as_int(value, key)


def _as_optional_int(value, key):
    return None if value is None else _as_int(value, key)


_SCHEMAS = {
    "data": {"path": _as_str},
    "augment": {
        "crop_scale_range": _as_float_pair, "crop_aspect_range": _as_float_pair,
        "flip_prob": _as_float, "brightness": _as_float, "contrast": _as_float,
        "saturation": _as_float, "grayscale_prob": _as_float, "blur_prob": _as_float,
        "blur_radius_range": _as_float_pair, "resolutions": _as_int_list,
        "alpha": _as_float, "mixup_alpha": _as_float,
    },
    "contrastive": {"tau": _as_float, "queue_capacity": _as_int},
    "neighborhood": {
        "clusters": _as_clusters, "k": _as_int, "positives": _as_int,
        "refresh_every": _as_int, "kmeans_iters": _as_int, "kmeans_tol": _as_float,
    },
    "train": {
        "epochs": _as_int, "batch_size": _as_int, "lr0": _as_float,
        "sgd_momentum": _as_float, "weight_decay": _as_float, "key_momentum": _as_float,
        "warmup_epochs_instance_only": _as_optional_int, "strategy": _as_str,
        "mixing": _as_str, "key_view": _as_str, "seed": _as_int, "dtype": _as_str,
        "workers": _as_int, "queue_warm_start": _as_bool, "checkpoint_every": _as_int,
        "hidden": _as_int, "feat": _as_int, "head_hidden": _as_int, "embed": _as_int,
        "canonical_side": _as_optional_int,
    },
    "eval": {
        "epochs": _as_int, "lr": _as_float, "lr_backbone": _as_float,
        "label_fraction": _as_float, "holdout": _as_float, "seed": _as_int,
        "momentum": _as_float, "knn_k": _as_int,
    },
}


def _parse_section(doc: dict, section: str) -> dict:
    raw = doc.get(section, {})
    if not isinstance(raw, dict):
        raise ValidationError(f"config: section {section!r} must be an object")
    schema = _SCHEMAS[section]
    out = {}
    for key, value in raw.items():
        if key not in schema:
            raise ValidationError(f"config: unknown key {section}.{key}")
        out[key] = schema[key](value, f"{section}.{key}")
    return out


def load_config_doc(path: Optional[str]) -> dict:
    if path is None:
        return {}
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise ValidationError("config: top level must be a JSON object")
    for section in doc:
        if section not in _SCHEMAS:
            raise ValidationError(f"config: unknown section {section!r}")
    return doc


def build_train_config(doc: dict, **overrides) -> TrainConfig:
    aug = AugConfig(**_parse_section(doc, "augment"))
    contrastive = ContrastiveConfig(**_parse_section(doc, "contrastive"))
    neighborhood = NeighborhoodConfig(**_parse_section(doc, "neighborhood"))
    train = _parse_section(doc, "train")
    train.update({k: v for k, v in overrides.items() if v is not None})
    if "resolutions" in train:
        aug = dataclasses.replace(aug, resolutions=train.pop("resolutions"))
    return TrainConfig(aug=aug, contrastive=contrastive, neighborhood=neighborhood, **train)


def build_probe_config(doc: dict, **overrides) -> tuple[ProbeConfig, int]:
    section = _parse_section(doc, "eval")
    knn_k = section.pop("knn_k", 20)
    section.update({k: v for k, v in overrides.items() if v is not None})
    return ProbeConfig(**section), knn_k


def config_as_document(cfg: TrainConfig) -> dict:
    """Resolved config in the same JSON layout the loader accepts."""
    train = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)
             if f.name not in ("aug", "contrastive", "neighborhood")}
    augment = dataclasses.asdict(cfg.aug)
    augment.pop("mixing")  # train.mixing is authoritative
    return {
        "train": train,
        "augment": augment,
        "contrastive": dataclasses.asdict(cfg.contrastive),
        "neighborhood": dataclasses.asdict(cfg.neighborhood),
    }


# ---------------------------------------------------------------------------
# commands


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def _dataset_from(path: str) -> Dataset:
    return load_tensor_file(path)


def cmd_gen_data(args) -> int:
    spec = SyntheticSpec(class_count=args.classes, per_class=args.per_class,
                         latent_dim=args.latent, image_side=args.side,
                         channels=args.channels, blob_stddev=args.blob_stddev,
                         seed=args.seed)
    save_tensor_file(generate_synthetic(spec), args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    doc = load_config_doc(args.config)
    resolutions = tuple(int(r) for r in args.resolutions.split(",")) if args.resolutions else None
    cfg = build_train_config(
        doc, strategy=args.strategy, mixing=args.mixing, epochs=args.epochs,
        seed=args.seed, batch_size=args.batch_size, workers=args.workers,
        dtype=args.dtype, resolutions=resolutions)
    data_path = args.data or _parse_section(doc, "data").get("path")
    if data_path is None:
        raise ValidationError("no dataset: pass --data or set data.path in the config")
    dataset = _dataset_from(data_path)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config_as_document(cfg), indent=2, sort_keys=True) + "\n")
    params, log = pretrain(dataset, cfg, out_dir=out)
    (out / "metrics.tsv").write_text(log.to_tsv())
    epoch_lines = [f"{epoch}\t{sim:.10g}" for epoch, sim in log.epoch_stats]
    (out / "epochs.tsv").write_text("\n".join(epoch_lines) + ("\n" if epoch_lines else ""))
    print(f"wrote {out}/metrics.tsv ({len(log.rows)} steps)")
    return 0


_METRIC_NAMES = {"linear": "linear", "knn": "knn", "finetune": "finetune", "intra-sim": "intra_sim"}


def cmd_eval(args) -> int:
    doc = load_config_doc(args.config)
    base_probe, knn_k = build_probe_config(doc, label_fraction=args.fraction, epochs=args.epochs)
    if args.k is not None:
        knn_k = args.k
    query, _, _ = load_checkpoint(args.ckpt)
    dataset = _dataset_from(args.data)
    metric = _METRIC_NAMES[args.metric]
    lines = []
    values = []
    for offset in range(args.seeds):
        seed = (args.seed if args.seed is not None else base_probe.seed) + offset
        probe = dataclasses.replace(base_probe, seed=seed)
        if metric == "linear":
            value = linear_probe(query, dataset, probe)
        elif metric == "knn":
            value = knn_probe(query, dataset, knn_k, probe)
        elif metric == "finetune":
            value = finetune_fraction(query, dataset, probe)
        else:
            value = intra_class_similarity(query, dataset)[1]
        values.append(value)
        lines.append(f"{metric}\t{value:.6f}\t{seed}")
    if args.seeds > 1:
        lines.append(f"{metric}\t{float(np.mean(values)):.6f}\tmean")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        with open(args.out, "a", encoding="utf-8") as fh:
            fh.write(text)
    return 0


def cmd_select(args) -> int:
    _, key_params, _ = load_checkpoint(args.ckpt)
    dataset = _dataset_from(args.data)
    if not 0 <= args.anchor < len(dataset):
        raise ValidationError(f"anchor {args.anchor} out of range [0, {len(dataset)})")
    vectors = embed_dataset(key_params, dataset.images)
    bank = EmbeddingBank(vectors=vectors)
    cfg = NeighborhoodConfig(clusters="auto" if args.clusters == "auto" else int(args.clusters))
    model = kmeans_fit(Rng(args.seed), bank, cfg.resolve_clusters(len(bank)))
    sel = select_positives(bank, model, args.anchor, min(args.k, len(bank) - 1))
    center = model.centers[model.assignments[args.anchor]]
    print(f"anchor\t{args.anchor}")
    print(f"omega1_size\t{sel.omega1.size}")
    print(f"omega2_size\t{sel.omega2.size}")
    print(f"omega_p_size\t{sel.omega_p.size}")
    for idx in sel.omega1:
        print(f"omega1\t{idx}\t{np.linalg.norm(vectors[idx] - center):.6f}")
    for idx, dist in zip(sel.omega2, sel.omega2_dist):
        print(f"omega2\t{idx}\t{dist:.6f}")
    for idx in sel.omega_p:
        print(f"omega_p\t{idx}\t{np.linalg.norm(vectors[idx] - center):.6f}")
    return 0


def cmd_augment(args) -> int:
    dataset = _dataset_from(args.data)
    for name, idx in (("anchor", args.anchor), ("positive", args.positive)):
        if not 0 <= idx < len(dataset):
            raise ValidationError(f"{name} index {idx} out of range [0, {len(dataset)})")
    resolutions = tuple(int(r) for r in args.resolutions.split(","))
    cfg = AugConfig(resolutions=resolutions, alpha=args.alpha, mixing=args.mixing)
    views = make_views(Rng(args.seed), dataset.images[args.anchor], dataset.images[args.positive],
                       cfg, anchor_index=args.anchor, positive_index=args.positive)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = []
    for view in views:
        name = f"view_a{args.anchor}_p{args.positive}_r{view.resolution}.ppm"
        save_ppm(view.image, out / name)
        bbox = f"{view.mask.x0},{view.mask.y0},{view.mask.x1},{view.mask.y1}" if view.mask else "-"
        manifest.append(f"{args.anchor}\t{args.positive}\t{view.resolution}\t"
                        f"{view.lam:.10g}\t{bbox}\t{args.seed}")
    (out / "manifest.tsv").write_text("\n".join(manifest) + "\n")
    print(f"wrote {len(views)} views to {out}")
    return 0


def cmd_report(args) -> int:
    rows = [load_run_dir(path) for path in args.runs]
    groups = aggregate(rows)
    sys.stdout.write(render_table(groups))
    strategies = {g.key[0] for g in groups}
    if len(strategies) > 1:
        sys.stdout.write("\n")
        sys.stdout.write(compare_strategies(groups))
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="clim", description=__doc__,
                     formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic labeled dataset",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--classes", type=int, default=10, help="number of classes")
    p.add_argument("--per-class", type=int, default=200, help="samples per class")
    p.add_argument("--latent", type=int, default=8, help="latent blob dimensionality")
    p.add_argument("--side", type=int, default=16, help="square image side")
    p.add_argument("--channels", type=int, default=3, help="channels (1 or 3)")
    p.add_argument("--blob-stddev", type=float, default=0.55, help="within-class latent stddev")
    p.add_argument("--seed", type=int, default=1, help="generator seed")
    p.add_argument("--out", required=True, help="output tensor file")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="run contrastive pretraining",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--config", default=None, help="JSON config document")
    p.add_argument("--data", default=None, help="dataset tensor file (overrides config data.path)")
    p.add_argument("--out", required=True, help="run directory for checkpoints and logs")
    p.add_argument("--strategy", default=None, help="positive selection strategy override")
    p.add_argument("--mixing", default=None, help="mixing mode override (cutmix/mixup/none)")
    p.add_argument("--epochs", type=int, default=None, help="epoch count override")
    p.add_argument("--seed", type=int, default=None, help="run seed override")
    p.add_argument("--batch-size", type=int, default=None, help="batch size override")
    p.add_argument("--workers", type=int, default=None, help="loss-kernel worker threads")
    p.add_argument("--dtype", default=None, help="f32 or f64 override")
    p.add_argument("--resolutions", default=None, help="comma-separated view resolutions override")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("eval", help="evaluate a checkpoint",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="dataset tensor file")
    p.add_argument("--metric", required=True, choices=sorted(_METRIC_NAMES), help="metric to compute")
    p.add_argument("--config", default=None, help="JSON config document (eval section)")
    p.add_argument("--fraction", type=float, default=None, help="label fraction for finetune")
    p.add_argument("--k", type=int, default=None, help="neighbor count for the knn metric")
    p.add_argument("--epochs", type=int, default=None, help="probe epochs override")
    p.add_argument("--seeds", type=int, default=1, help="number of probe seeds (adds a mean line)")
    p.add_argument("--seed", type=int, default=None, help="base probe seed")
    p.add_argument("--out", default=None, help="also append metric lines to this file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("select", help="inspect positive selection for one anchor",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--ckpt", required=True, help="checkpoint file (key encoder is used)")
    p.add_argument("--data", required=True, help="dataset tensor file")
    p.add_argument("--anchor", type=int, required=True, help="anchor index")
    p.add_argument("--k", type=int, default=40, help="nearest-neighbor count")
    p.add_argument("--clusters", default="auto", help="cluster count or 'auto'")
    p.add_argument("--seed", type=int, default=0, help="k-means seeding")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("augment", help="preview mixed multi-resolution views",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--data", required=True, help="dataset tensor file")
    p.add_argument("--anchor", type=int, required=True, help="anchor index")
    p.add_argument("--positive", type=int, required=True, help="positive index")
    p.add_argument("--resolutions", default="32,24", help="comma-separated resolutions")
    p.add_argument("--alpha", type=float, default=2.0, help="Beta parameter for cutmix")
    p.add_argument("--mixing", default="cutmix", choices=["cutmix", "mixup", "none"], help="mixing mode")
    p.add_argument("--seed", type=int, default=7, help="view seed")
    p.add_argument("--out", required=True, help="output directory for P6 views + manifest")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("report", help="aggregate sweep run directories",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--runs", nargs="+", required=True, help="run directories")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ValidationError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except DataFormatError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except NumericError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
