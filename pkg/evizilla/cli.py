"""Command-line verbs.

Every ``cmd_*`` function computes a :class:`ReportRecord` and writes it (plus
any checkpoint) only once everything succeeded; ``build_parser`` wires them to
argparse sub-commands.
"""

from __future__ import annotations

import argparse
from dataclasses import fields
import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

import networkx as nx
import numpy as np
import pandas as pd

from .config import (
    FIELD_NAMES,
    FULL_SEARCH_SPACE,
    TrainConfig,
    config_hash,
    load_config,
    load_search_space,
)
from .data import (
    DATASET_FORMATS,
    DatasetBundle,
    SbmSpec,
    generate_sbm,
    inject_ood_noise,
    load_dataset,
    save_generic,
)
from .errors import InputError, ParseError
from .evidence_model import ModelParams, forward_evidence, load_checkpoint, save_checkpoint
from .reports import (
    ReportRecord,
    binned_density,
    parse_thresholds,
    probability_std,
    softmax,
    threshold_curve,
    true_class_summary,
    write_report,
)
from .training import (
    evaluate,
    grid_search,
    hop_ablation_configs,
    hop_uncertainty,
    propagate_for,
    repeat_runs,
    train,
    train_variants,
)

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.npz"
SPLITS = ("train", "val", "test")
PROB_SOURCES = ("expected", "softmax")


def _checkpoint_matches(params: ModelParams, dataset: DatasetBundle) -> None:
    if params.input_dim != dataset.d or params.class_count != dataset.class_count:
        raise InputError(
            f"checkpoint expects d={params.input_dim}, K={params.class_count}; "
            f"dataset has d={dataset.d}, K={dataset.class_count}"
        )


def _load_model(checkpoint: Path | str, dataset: DatasetBundle):
    params, config = load_checkpoint(checkpoint)
    _checkpoint_matches(params, dataset)
    return params, config


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_train(
    config: TrainConfig,
    dataset: DatasetBundle,
    out_dir: Path | str,
    *,
    runs: int = 1,
    n_jobs: int = 1,
    progress: bool = False,
) -> ReportRecord:
    """Train, score every split, write the checkpoint and the history table."""
    params, history = train(dataset, config, progress=progress)
    hop_features = propagate_for(dataset, config.propagation_steps, normalize=config.normalize_hops)
    record = ReportRecord.for_config("train", config)
    for split in SPLITS:
        metrics = evaluate(params, dataset, split, config=config, hop_features=hop_features)
        record.add("accuracy", metrics.accuracy, split=split)
        record.add("mean_uncertainty", metrics.mean_uncertainty, split=split)
    record.add("epochs_run", len(history))
    record.add("best_epoch", history.best_epoch)
    record.tables["history"] = history.to_frame()
    if runs > 1:
        summary = repeat_runs(dataset, config, range(config.seed, config.seed + runs), n_jobs=n_jobs, progress=progress)
        record.add("accuracy_mean", summary.mean, split="test", series="runs")
        record.add("accuracy_std", summary.std, split="test", series="runs")
        record.tables["runs"] = summary.table
    record.extra["dataset"] = dataset.summary()

    out = Path(out_dir)
    save_checkpoint(out / CHECKPOINT_NAME, params, config)
    write_report(record, out)
    return record


def cmd_eval(checkpoint: Path | str, dataset: DatasetBundle, out_dir: Path | str) -> ReportRecord:
    params, config = _load_model(checkpoint, dataset)
    hop_features = propagate_for(dataset, config.propagation_steps, normalize=config.normalize_hops)
    record = ReportRecord.for_config("eval", config)
    for split in SPLITS:
        metrics = evaluate(params, dataset, split, config=config, hop_features=hop_features)
        record.add("accuracy", metrics.accuracy, split=split)
        record.add("mean_uncertainty", metrics.mean_uncertainty, split=split)
        record.add("node_count", metrics.nodes.size, split=split)
    write_report(record, out_dir)
    return record


def cmd_uncertainty_curve(
    checkpoint: Path | str,
    dataset: DatasetBundle,
    out_dir: Path | str,
    thresholds: Sequence[float] | None = None,
) -> ReportRecord:
    """Test accuracy restricted to nodes whose vacuity is at most each threshold."""
    taus = parse_thresholds(None) if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    params, config = _load_model(checkpoint, dataset)
    metrics = evaluate(params, dataset, "test", config=config)
    record = ReportRecord.for_config("uncertainty_curve", config)
    for point in threshold_curve(metrics.uncertainty, metrics.correct, taus):
        record.add("accuracy", point.accuracy, split="test", coordinate=point.threshold)
        record.add("retained_fraction", point.retained_fraction, split="test", coordinate=point.threshold)
        record.add("retained", point.retained, split="test", coordinate=point.threshold)
    write_report(record, out_dir)
    return record


def cmd_ood_compare(
    checkpoint: Path | str,
    dataset: DatasetBundle,
    out_dir: Path | str,
    eta: float = 1.0,
    seed: int = 0,
    *,
    bins: int = 20,
) -> ReportRecord:
    """Vacuity on clean vs. Gaussian-polluted test features."""
    params, config = _load_model(checkpoint, dataset)
    polluted = inject_ood_noise(dataset.features, eta, seed, rows=dataset.test_mask)
    clean_m = evaluate(params, dataset, "test", config=config)
    noisy_m = evaluate(params, dataset, "test", config=config, features=polluted)
    record = ReportRecord.for_config("ood_compare", config)
    record.extra.update({"eta": float(eta), "noise_seed": int(seed)})
    for series, m in (("clean", clean_m), ("polluted", noisy_m)):
        record.add("mean_uncertainty", m.mean_uncertainty, split="test", series=series)
        record.add("accuracy", m.accuracy, split="test", series=series)
        density = binned_density(m.uncertainty, bins=bins)
        for center, count, dens in zip(density.centers, density.counts, density.density):
            record.add("count", int(count), split="test", series=series, coordinate=float(center))
            record.add("density", float(dens), split="test", series=series, coordinate=float(center))
    write_report(record, out_dir)
    return record


def cmd_hop_ablation(
    config: TrainConfig,
    dataset: DatasetBundle,
    out_dir: Path | str,
    *,
    n_jobs: int = 1,
    progress: bool = False,
) -> ReportRecord:
    """Train EP-0..EP-T single-hop variants and the fused model; one accuracy row each."""
    variants = hop_ablation_configs(config)
    results = train_variants(dataset, variants, n_jobs=n_jobs, progress=progress)
    record = ReportRecord.for_config("hop_ablation", config)
    table = []
    for name, cfg in variants.items():
        res = results[name]
        hop = cfg.hops[0] if cfg.hops is not None and len(cfg.hops) == 1 else ""
        record.add("accuracy", res["test_accuracy"], split="test", series=name, coordinate=hop)
        table.append(
            {
                "variant": name,
                "test_accuracy": res["test_accuracy"],
                "test_mean_uncertainty": res["test_mean_uncertainty"],
                "val_accuracy": res["val_accuracy"],
                "variant_config_hash": config_hash(cfg),
            }
        )
    record.tables["variants"] = pd.DataFrame(table)
    write_report(record, out_dir)
    return record


def cmd_hop_uncertainty(
    checkpoint: Path | str,
    dataset: DatasetBundle,
    out_dir: Path | str,
    split: str = "test",
) -> ReportRecord:
    params, config = _load_model(checkpoint, dataset)
    frame = hop_uncertainty(params, dataset, config, split)
    record = ReportRecord.for_config("hop_uncertainty", config)
    for row in frame.itertuples(index=False):
        coord = "" if row.hop < 0 else int(row.hop)
        record.add("mean_uncertainty", row.mean_uncertainty, split=split, series=row.variant, coordinate=coord)
        record.add("accuracy", row.accuracy, split=split, series=row.variant, coordinate=coord)
    write_report(record, out_dir)
    return record


def _class_probabilities(evidence: np.ndarray, source: str) -> np.ndarray:
    if source == "expected":
        alpha = evidence + 1.0
        return alpha / alpha.sum(axis=1, keepdims=True)
    if source == "softmax":
        return softmax(evidence)
    raise InputError(f"unknown probability source {source!r}; expected one of {PROB_SOURCES}")


def cmd_std_density(
    config: TrainConfig,
    dataset: DatasetBundle,
    out_dir: Path | str,
    depths: Sequence[int],
    *,
    prob_source: str = "expected",
    bins: int = 20,
    n_jobs: int = 1,
    progress: bool = False,
) -> ReportRecord:
    """Spread of the class-probability vector for fused and single-hop models at each depth.

    Also tabulates, for each fused model, the per-class true-class probability
    of every hop's own opinion.
    """
    depths = [int(d) for d in depths]
    if not depths or min(depths) < 1:
        raise InputError(f"depths must be >= 1, got {depths}")
    if prob_source not in PROB_SOURCES:
        raise InputError(f"unknown probability source {prob_source!r}; expected one of {PROB_SOURCES}")
    variants: Dict[str, TrainConfig] = {}
    for depth in depths:
        variants[f"fused-{depth}"] = config.replace(propagation_steps=depth, hops=None)
        variants[f"single-{depth}"] = config.replace(propagation_steps=depth, hops=(depth,))
    results = train_variants(dataset, variants, n_jobs=n_jobs, progress=progress)

    k = dataset.class_count
    top = math.sqrt(k - 1) / k
    record = ReportRecord.for_config("std_density", config)
    record.extra["prob_source"] = prob_source
    tcp_frames: List[pd.DataFrame] = []
    for name, cfg in variants.items():
        params = results[name]["params"]
        metrics = evaluate(params, dataset, "test", config=cfg)
        probs = _class_probabilities(metrics.evidence, prob_source)
        spread = probability_std(probs)
        depth = cfg.propagation_steps
        record.add("mean_std", float(spread.mean()) if spread.size else None, split="test", series=name, coordinate=depth)
        density = binned_density(spread, bins=bins, value_range=(0.0, top))
        for center, count in zip(density.centers, density.counts):
            record.add("count", int(count), split="test", series=name, coordinate=float(center))
        if cfg.hops is None:
            hop_features = propagate_for(dataset, depth, normalize=cfg.normalize_hops)
            hop_ev = forward_evidence(params, hop_features, hops=cfg.hop_set(), nodes=metrics.nodes)
            for hop, e in zip(hop_ev.hops, hop_ev.evidence):
                frame = true_class_summary(_class_probabilities(e, prob_source), metrics.labels, k)
                frame.insert(0, "hop", hop)
                frame.insert(0, "depth", depth)
                tcp_frames.append(frame)
    if tcp_frames:
        record.tables["true_class"] = pd.concat(tcp_frames, ignore_index=True)
    write_report(record, out_dir)
    return record


def cmd_grid(
    base: TrainConfig,
    search_space: Mapping[str, Sequence[Any]],
    dataset: DatasetBundle,
    out_dir: Path | str,
    *,
    trials: int = 1,
    n_jobs: int = 1,
    progress: bool = False,
) -> ReportRecord:
    result = grid_search(dataset, search_space, trials, base=base, n_jobs=n_jobs, progress=progress)
    record = ReportRecord.for_config("grid", base)
    for i, row in result.table.iterrows():
        series = f"cell-{i:04d}"
        record.add("val_accuracy", row["val_accuracy"], split="val", series=series, coordinate=row["config_hash"])
        record.add("test_accuracy", row["test_accuracy"], split="test", series=series, coordinate=row["config_hash"])
    record.tables["sweep"] = result.table
    record.extra["best_config"] = result.best_config.to_dict()
    record.extra["best_config_hash"] = config_hash(result.best_config)
    record.extra["search_space"] = {k: [v if not isinstance(v, tuple) else list(v) for v in vals] for k, vals in search_space.items()}
    write_report(record, out_dir)
    return record


def cmd_sbm_generate(spec: SbmSpec, out_dir: Path | str) -> ReportRecord:
    """Sample a block-model graph and write it in the generic format."""
    bundle = generate_sbm(spec)
    graph = nx.Graph()
    graph.add_nodes_from(range(bundle.n))
    graph.add_edges_from(bundle.edges.tolist())
    blocks = [set(np.flatnonzero(bundle.labels == c).tolist()) for c in range(bundle.class_count)]
    record = ReportRecord.for_config("sbm_generate", spec.to_dict())
    record.add("node_count", bundle.n)
    record.add("edge_count", len(bundle.edges))
    record.add("modularity", nx.community.modularity(graph, blocks))
    for split in SPLITS:
        record.add("node_count", int(bundle.mask(split).sum()), split=split)
    out = Path(out_dir)
    save_generic(bundle, out)
    write_report(record, out)
    return record


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_common(p: argparse.ArgumentParser, *, dataset: bool = True) -> None:
    if dataset:
        p.add_argument("--dataset", required=True, help="dataset prefix, directory, SBM spec JSON, or bare name")
        p.add_argument("--dataset-format", choices=DATASET_FORMATS, default="citation")
        p.add_argument("--split-file", default=None, help="explicit train/val/test index ranges")
        p.add_argument("--row-normalize", action="store_true", help="scale feature rows to sum 1")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--seed", type=int, default=None, help="random seed")
    p.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING, ...")
    p.add_argument("--progress", action="store_true", help="show progress bars")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="JSON file keyed by training field names")
    for name in FIELD_NAMES:
        if name == "seed":
            continue
        p.add_argument(_flag(name), dest=name, default=None, help=f"override {name}")
    p.add_argument("--jobs", type=int, default=1, help="parallel training runs")


def _add_checkpoint(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", default=None, help=f"trained model (default <out>/{CHECKPOINT_NAME})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evizilla",
        description="Evidential fusion of multi-hop graph embeddings: training and uncertainty reports.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("train", help="train a model and write checkpoint + history", formatter_class=fmt)
    _add_common(p)
    _add_config_flags(p)
    p.add_argument("--runs", type=int, default=1, help="also report mean/std test accuracy over this many seeds")

    p = sub.add_parser("eval", help="score a checkpoint on every split", formatter_class=fmt)
    _add_common(p)
    _add_checkpoint(p)

    p = sub.add_parser("uncertainty-curve", help="accuracy vs. vacuity threshold", formatter_class=fmt)
    _add_common(p)
    _add_checkpoint(p)
    p.add_argument("--thresholds", default=None, help="comma-separated values in (0, 1]; default 0.05 steps")

    p = sub.add_parser("ood-compare", help="vacuity on clean vs. noise-polluted test features", formatter_class=fmt)
    _add_common(p)
    _add_checkpoint(p)
    p.add_argument("--eta", type=float, default=1.0, help="noise intensity")
    p.add_argument("--bins", type=int, default=20)

    p = sub.add_parser("hop-ablation", help="single-hop variants against the fused model", formatter_class=fmt)
    _add_common(p)
    _add_config_flags(p)

    p = sub.add_parser("hop-uncertainty", help="per-hop vacuity and accuracy of a trained model", formatter_class=fmt)
    _add_common(p)
    _add_checkpoint(p)
    p.add_argument("--split", choices=SPLITS, default="test")

    p = sub.add_parser("std-density", help="class-probability spread by depth", formatter_class=fmt)
    _add_common(p)
    _add_config_flags(p)
    p.add_argument("--depths", default="2,4,8,16", help="comma-separated propagation depths")
    p.add_argument("--prob-source", choices=PROB_SOURCES, default="expected")
    p.add_argument("--bins", type=int, default=20)

    p = sub.add_parser("grid", help="exhaustive hyperparameter sweep", formatter_class=fmt)
    _add_common(p)
    _add_config_flags(p)
    p.add_argument("--trials", type=int, default=1, help="seeds per grid cell")
    p.add_argument("--full-space", action="store_true", help="sweep the full default search space")

    p = sub.add_parser("sbm-generate", help="write a synthetic block-model dataset", formatter_class=fmt)
    _add_common(p, dataset=False)
    p.add_argument("--spec", default=None, help="JSON file with block-model fields")
    for f in fields(SbmSpec):
        if f.name == "seed":
            continue
        p.add_argument(_flag(f.name), dest=f"sbm_{f.name}", type=type(f.default), default=None)
    return parser


def _int_list(text: str) -> List[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise InputError(f"expected comma-separated integers, got {text!r}") from exc


def config_from_args(args: argparse.Namespace) -> TrainConfig:
    overrides = {name: getattr(args, name, None) for name in FIELD_NAMES if name != "seed"}
    overrides["seed"] = args.seed
    return load_config(args.config, overrides=overrides)


def dataset_from_args(args: argparse.Namespace) -> DatasetBundle:
    return load_dataset(
        args.dataset,
        args.dataset_format,
        split_file=args.split_file,
        row_normalize_features=args.row_normalize,
    )


def _sbm_spec_from_args(args: argparse.Namespace) -> SbmSpec:
    values: Dict[str, Any] = {}
    if args.spec is not None:
        spec_path = Path(args.spec)
        if not spec_path.is_file():
            raise InputError(f"SBM spec file not found: {spec_path}")
        try:
            values.update(json.loads(spec_path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON ({exc.msg})", path=spec_path, line_number=exc.lineno) from exc
    for f in fields(SbmSpec):
        v = getattr(args, f"sbm_{f.name}", None)
        if v is not None:
            values[f.name] = v
    if args.seed is not None:
        values["seed"] = args.seed
    return SbmSpec.from_mapping(values)


def dispatch(args: argparse.Namespace) -> ReportRecord:
    out = Path(args.out)
    cmd = args.command
    if cmd == "sbm-generate":
        return cmd_sbm_generate(_sbm_spec_from_args(args), out)

    checkpoint = getattr(args, "checkpoint", None) or out / CHECKPOINT_NAME
    if cmd in {"train", "hop-ablation", "std-density"}:
        config = config_from_args(args)
        dataset = dataset_from_args(args)
        if cmd == "train":
            return cmd_train(config, dataset, out, runs=args.runs, n_jobs=args.jobs, progress=args.progress)
        if cmd == "hop-ablation":
            return cmd_hop_ablation(config, dataset, out, n_jobs=args.jobs, progress=args.progress)
        return cmd_std_density(
            config,
            dataset,
            out,
            _int_list(args.depths),
            prob_source=args.prob_source,
            bins=args.bins,
            n_jobs=args.jobs,
            progress=args.progress,
        )
    if cmd == "grid":
        overrides = {name: getattr(args, name, None) for name in FIELD_NAMES if name != "seed"}
        overrides["seed"] = args.seed
        if args.full_space:
            base = load_config(args.config, overrides=overrides)
            space: Mapping[str, Sequence[Any]] = FULL_SEARCH_SPACE
        elif args.config is not None:
            base, space = load_search_space(args.config, overrides=overrides)
        else:
            raise InputError("grid needs --config with list-valued fields or --full-space")
        dataset = dataset_from_args(args)
        return cmd_grid(base, space, dataset, out, trials=args.trials, n_jobs=args.jobs, progress=args.progress)

    dataset = dataset_from_args(args)
    if cmd == "eval":
        return cmd_eval(checkpoint, dataset, out)
    if cmd == "uncertainty-curve":
        return cmd_uncertainty_curve(checkpoint, dataset, out, parse_thresholds(args.thresholds))
    if cmd == "ood-compare":
        seed = 0 if args.seed is None else args.seed
        return cmd_ood_compare(checkpoint, dataset, out, args.eta, seed, bins=args.bins)
    if cmd == "hop-uncertainty":
        return cmd_hop_uncertainty(checkpoint, dataset, out, args.split)
    raise InputError(f"unknown command {cmd!r}")


__all__ = [
    "CHECKPOINT_NAME",
    "build_parser",
    "cmd_eval",
    "cmd_grid",
    "cmd_hop_ablation",
    "cmd_hop_uncertainty",
    "cmd_ood_compare",
    "cmd_sbm_generate",
    "cmd_std_density",
    "cmd_train",
    "cmd_uncertainty_curve",
    "config_from_args",
    "dataset_from_args",
    "dispatch",
]
