"""Training loop: one propagation pass, then Adam on the shared evidence head.

``train`` precomputes X^0..X^T, then every epoch runs a perturbed/dropped-out
forward over the labelled nodes, the analytic backward pass and one Adam step,
scoring the validation split after each update. The parameters of the best
validation epoch are returned.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import itertools
import logging
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from tqdm import tqdm

from .config import FIELD_NAMES, SweepConfig, TrainConfig, config_hash
from .data import DatasetBundle
from .errors import InputError, TrainingError
from .evidence_model import (
    LossWeights,
    ModelParams,
    backward,
    forward_evidence,
    fuse_forward,
    loss_total,
    opinions_from_evidence,
)
from .graph_core import FeatureMatrix, PropagatedFeatures, propagate, standardize_hops

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


# ---------------------------------------------------------------------------
# History
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    val_mean_uncertainty: float


@dataclass
class TrainHistory:
    records: List[EpochRecord] = field(default_factory=list)
    best_epoch: Optional[int] = None
    stopped_early: bool = False

    def __len__(self) -> int:
        return len(self.records)

    @property
    def best(self) -> Optional[EpochRecord]:
        if self.best_epoch is None:
            return None
        return self.records[self.best_epoch]

    def to_frame(self) -> pd.DataFrame:
        columns = ["epoch", "train_loss", "val_loss", "val_accuracy", "val_mean_uncertainty"]
        return pd.DataFrame([[getattr(r, c) for c in columns] for r in self.records], columns=columns)


# ---------------------------------------------------------------------------
# Optimiser
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdamState:
    m: Tuple[np.ndarray, ...]
    v: Tuple[np.ndarray, ...]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        zeros = tuple(np.zeros_like(a) for a in params.arrays())
        return cls(m=zeros, v=zeros, t=0)


def adam_step(
    params: ModelParams,
    grads: ModelParams,
    state: AdamState,
    lr: float,
    weight_decay: float,
    *,
    betas: Tuple[float, float] = ADAM_BETAS,
    eps: float = ADAM_EPS,
) -> Tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update with decoupled (multiplicative) weight decay."""
    b1, b2 = betas
    t = state.t + 1
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params.arrays(), grads.arrays(), state.m, state.v):
        if p.shape != g.shape:
            raise InputError(f"gradient shape {g.shape} does not match parameter shape {p.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_params.append(p * (1.0 - lr * weight_decay) - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return ModelParams.from_arrays(new_params), AdamState(m=tuple(new_m), v=tuple(new_v), t=t)


class EarlyStopping:
    """Track the best validation loss (accuracy breaks ties) and count stale epochs."""

    def __init__(self, patience: int):
        self.patience = int(patience)
        self.best_loss = np.inf
        self.best_accuracy = -np.inf
        self.best_epoch: Optional[int] = None
        self.counter = 0

    def update(self, epoch: int, val_loss: float, val_accuracy: float) -> bool:
        acc = val_accuracy if np.isfinite(val_accuracy) else -np.inf
        improved = val_loss < self.best_loss or (val_loss == self.best_loss and acc > self.best_accuracy)
        if improved:
            self.best_loss = val_loss
            self.best_accuracy = acc
            self.best_epoch = epoch
            self.counter = 0
        else:
            self.counter += 1
        return improved

    @property
    def should_stop(self) -> bool:
        return self.counter >= self.patience


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalMetrics:
    """Eval-mode outputs for one set of nodes."""

    split: str
    nodes: np.ndarray
    labels: np.ndarray
    predictions: np.ndarray
    probabilities: np.ndarray
    uncertainty: np.ndarray
    evidence: np.ndarray
    loss: float

    @property
    def correct(self) -> np.ndarray:
        return self.predictions == self.labels

    @property
    def accuracy(self) -> float:
        if self.nodes.size == 0:
            return float("nan")
        return float(np.mean(self.correct))

    @property
    def mean_uncertainty(self) -> float:
        if self.nodes.size == 0:
            return float("nan")
        return float(np.mean(self.uncertainty))


def _split_nodes(dataset: DatasetBundle, split) -> Tuple[str, np.ndarray]:
    if isinstance(split, str):
        return split, dataset.indices(split)
    arr = np.asarray(split)
    if arr.dtype == bool:
        if arr.size != dataset.n:
            raise InputError(f"split mask has {arr.size} entries for {dataset.n} nodes")
        return "custom", np.flatnonzero(arr)
    return "custom", arr.astype(np.int64).reshape(-1)


def propagate_for(dataset: DatasetBundle, steps: int, features=None, *, normalize: bool = False) -> PropagatedFeatures:
    X = dataset.features if features is None else features
    hop_features = propagate(dataset.adjacency(), X, steps)
    return standardize_hops(hop_features) if normalize else hop_features


def _score(
    params: ModelParams,
    hop_features: PropagatedFeatures,
    hops: Sequence[int],
    nodes: np.ndarray,
    labels: np.ndarray,
    weights: LossWeights,
    split: str,
) -> EvalMetrics:
    k = params.class_count
    if nodes.size == 0:
        empty = np.zeros(0)
        return EvalMetrics(
            split=split,
            nodes=nodes,
            labels=np.zeros(0, dtype=np.int64),
            predictions=np.zeros(0, dtype=np.int64),
            probabilities=np.zeros((0, k)),
            uncertainty=empty,
            evidence=np.zeros((0, k)),
            loss=float("nan"),
        )
    hop_ev = forward_evidence(params, hop_features, hops=hops, nodes=nodes)
    fused = fuse_forward(hop_ev)
    y = labels[nodes]
    return EvalMetrics(
        split=split,
        nodes=nodes,
        labels=y,
        predictions=fused.prediction,
        probabilities=fused.expected_probability,
        uncertainty=fused.uncertainty,
        evidence=fused.alpha - 1.0,
        loss=loss_total(fused.alpha, y, weights),
    )


def evaluate(
    params: ModelParams,
    dataset: DatasetBundle,
    split="test",
    *,
    config: TrainConfig | None = None,
    hops: Sequence[int] | None = None,
    hop_features: PropagatedFeatures | None = None,
    features: FeatureMatrix | np.ndarray | None = None,
) -> EvalMetrics:
    """Eval-mode forward (no perturbation, no dropout) over one split.

    ``split`` is a split name, a boolean mask or an index array. ``features``
    swaps in a different raw feature matrix (e.g. a noise-polluted copy) before
    propagation. Predictions take the argmax of α/S, lowest class on ties.
    """
    config = config or TrainConfig()
    hops = config.hop_set() if hops is None else tuple(int(h) for h in hops)
    if hop_features is None:
        hop_features = propagate_for(dataset, max(max(hops), 1), features, normalize=config.normalize_hops)
    name, nodes = _split_nodes(dataset, split)
    weights = LossWeights(lambda_kl=config.lambda_kl, lambda_dis=config.lambda_dis)
    return _score(params, hop_features, hops, nodes, dataset.labels, weights, name)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def seed_streams(seed: int) -> Tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    """Independent (init, perturbation, dropout) generators derived from one seed."""
    children = np.random.SeedSequence(int(seed)).spawn(3)
    init, perturbation, dropout = (np.random.default_rng(c) for c in children)
    return init, perturbation, dropout


def train(
    dataset: DatasetBundle,
    config: TrainConfig,
    *,
    progress: bool = False,
) -> Tuple[ModelParams, TrainHistory]:
    train_idx = dataset.indices("train")
    val_idx = dataset.indices("val")
    if train_idx.size == 0:
        raise InputError("training split is empty")
    if val_idx.size == 0:
        raise InputError("validation split is empty")
    hops = config.hop_set()
    weights = LossWeights(lambda_kl=config.lambda_kl, lambda_dis=config.lambda_dis)
    init_rng, perturb_rng, dropout_rng = seed_streams(config.seed)

    hop_features = propagate_for(dataset, config.propagation_steps, normalize=config.normalize_hops)
    log.info(
        "propagated %d steps; training on hops %s (config %s)",
        config.propagation_steps,
        ",".join(str(h) for h in hops),
        config_hash(config),
    )

    params = ModelParams.glorot(dataset.d, config.hidden_size, dataset.class_count, init_rng)
    state = AdamState.zeros_like(params)
    history = TrainHistory()
    stopper = EarlyStopping(config.patience)
    best = params

    epochs = tqdm(range(config.max_epochs), desc="train", unit="epoch", disable=not progress, leave=False)
    for epoch in epochs:
        try:
            loss, grads = backward(
                params,
                hop_features,
                dataset.labels,
                weights,
                perturb_rng,
                nodes=train_idx,
                hops=hops,
                perturb_sigma=config.perturb_sigma,
                dropout_rate=config.dropout_rate,
                dropout_rng=dropout_rng,
            )
            if not np.isfinite(loss):
                raise TrainingError(f"training loss is {loss}", epoch=epoch)
            params, state = adam_step(params, grads, state, config.learning_rate, config.weight_decay)
            val = _score(params, hop_features, hops, val_idx, dataset.labels, weights, "val")
        except InputError as exc:
            # overflowing weights or evidence surface as validation failures
            raise TrainingError(f"optimisation diverged ({exc})", epoch=epoch) from exc
        if not np.isfinite(val.loss):
            raise TrainingError(f"validation loss is {val.loss}", epoch=epoch)
        record = EpochRecord(
            epoch=epoch,
            train_loss=float(loss),
            val_loss=float(val.loss),
            val_accuracy=val.accuracy,
            val_mean_uncertainty=val.mean_uncertainty,
        )
        history.records.append(record)
        log.debug(
            "epoch %d train_loss=%.6f val_loss=%.6f val_acc=%.4f val_u=%.4f",
            epoch,
            record.train_loss,
            record.val_loss,
            record.val_accuracy,
            record.val_mean_uncertainty,
        )
        if stopper.update(epoch, record.val_loss, record.val_accuracy):
            best = params
        if stopper.should_stop:
            history.stopped_early = True
            log.info("early stop at epoch %d (no val improvement for %d epochs)", epoch, config.patience)
            break

    history.best_epoch = stopper.best_epoch
    if history.best is not None:
        log.info(
            "best epoch %d: val_loss=%.6f val_acc=%.4f",
            history.best.epoch,
            history.best.val_loss,
            history.best.val_accuracy,
        )
    return best, history


def _train_and_score(dataset: DatasetBundle, config: TrainConfig) -> Dict[str, Any]:
    params, history = train(dataset, config)
    hop_features = propagate_for(dataset, config.propagation_steps, normalize=config.normalize_hops)
    val = evaluate(params, dataset, "val", config=config, hop_features=hop_features)
    test = evaluate(params, dataset, "test", config=config, hop_features=hop_features)
    return {
        "params": params,
        "history": history,
        "val_accuracy": val.accuracy,
        "val_loss": val.loss,
        "test_accuracy": test.accuracy,
        "test_mean_uncertainty": test.mean_uncertainty,
        "best_epoch": -1 if history.best_epoch is None else history.best_epoch,
    }


def train_variants(
    dataset: DatasetBundle,
    configs: Mapping[str, TrainConfig],
    *,
    n_jobs: int = 1,
    progress: bool = False,
) -> Dict[str, Dict[str, Any]]:
    """Train and score several configs; results keep the mapping's order."""
    names = list(configs)
    jobs = tqdm(names, desc="variants", disable=not progress, leave=False)
    results = Parallel(n_jobs=n_jobs)(delayed(_train_and_score)(dataset, configs[name]) for name in jobs)
    return dict(zip(names, results))


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridResult:
    best_config: TrainConfig
    table: pd.DataFrame


def expand_grid(base: TrainConfig, search_space: Mapping[str, Sequence[Any]]) -> List[TrainConfig]:
    keys = list(search_space)
    for key in keys:
        if len(search_space[key]) == 0:
            raise InputError(f"search range for {key!r} is empty")
    sweep_base = SweepConfig.from_config(base)
    combos = itertools.product(*(search_space[k] for k in keys))
    return [sweep_base.replace(**dict(zip(keys, combo))) for combo in combos]


def grid_search(
    dataset: DatasetBundle,
    search_space: Mapping[str, Sequence[Any]],
    trials_per_config: int = 1,
    *,
    base: TrainConfig | None = None,
    n_jobs: int = 1,
    progress: bool = False,
) -> GridResult:
    """Exhaustive sweep; the winner has the best mean val accuracy, then the lowest val loss.

    Trial ``t`` of a cell trains with seed ``base.seed + t``.
    """
    if trials_per_config < 1:
        raise InputError(f"trials_per_config must be >= 1, got {trials_per_config}")
    base = base or TrainConfig()
    cells = expand_grid(base, search_space)
    runs = [(ci, cfg.replace(seed=cfg.seed + t)) for ci, cfg in enumerate(cells) for t in range(trials_per_config)]
    log.info("grid: %d configs x %d trials", len(cells), trials_per_config)
    jobs = tqdm(runs, desc="grid", disable=not progress, leave=False)
    results = Parallel(n_jobs=n_jobs)(delayed(_train_and_score)(dataset, cfg) for _, cfg in jobs)

    keys = list(search_space)
    rows = []
    for ci, cfg in enumerate(cells):
        cell = [r for (i, _), r in zip(runs, results) if i == ci]
        row: Dict[str, Any] = {}
        for key in keys:
            value = getattr(cfg, key)
            row[key] = ",".join(str(h) for h in value) if key == "hops" and value is not None else value
        row.update(
            {
                "val_accuracy": float(np.mean([r["val_accuracy"] for r in cell])),
                "val_loss": float(np.mean([r["val_loss"] for r in cell])),
                "test_accuracy": float(np.mean([r["test_accuracy"] for r in cell])),
                "test_accuracy_std": float(np.std([r["test_accuracy"] for r in cell])),
                "config_hash": config_hash(cfg),
            }
        )
        rows.append(row)
    table = pd.DataFrame(rows)
    order = sorted(range(len(rows)), key=lambda i: (-rows[i]["val_accuracy"], rows[i]["val_loss"], i))
    best = cells[order[0]]
    if best.learning_rate > 0.0:
        best = TrainConfig(**{name: getattr(best, name) for name in FIELD_NAMES})
    log.info("grid winner %s: val_acc=%.4f", config_hash(best), rows[order[0]]["val_accuracy"])
    return GridResult(best_config=best, table=table)


@dataclass(frozen=True)
class RunSummary:
    table: pd.DataFrame

    @property
    def mean(self) -> float:
        return float(self.table["test_accuracy"].mean())

    @property
    def std(self) -> float:
        return float(np.std(self.table["test_accuracy"].to_numpy()))


def repeat_runs(
    dataset: DatasetBundle,
    config: TrainConfig,
    seeds: Iterable[int] = range(10),
    *,
    n_jobs: int = 1,
    progress: bool = False,
) -> RunSummary:
    """Train once per seed and collect test accuracy."""
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise InputError("at least one seed is required")
    configs = {f"seed{s}": config.replace(seed=s) for s in seeds}
    results = train_variants(dataset, configs, n_jobs=n_jobs, progress=progress)
    table = pd.DataFrame(
        {
            "seed": seeds,
            "test_accuracy": [results[f"seed{s}"]["test_accuracy"] for s in seeds],
            "test_mean_uncertainty": [results[f"seed{s}"]["test_mean_uncertainty"] for s in seeds],
            "best_epoch": [results[f"seed{s}"]["best_epoch"] for s in seeds],
        }
    )
    summary = RunSummary(table=table)
    log.info("%d runs: test accuracy %.4f +/- %.4f", len(seeds), summary.mean, summary.std)
    return summary


def hop_ablation_configs(config: TrainConfig) -> Dict[str, TrainConfig]:
    """Single-hop variants EP-0..EP-T plus the fused model."""
    variants = {f"EP-{i}": config.replace(hops=(i,)) for i in range(config.propagation_steps + 1)}
    variants["fused"] = config
    return variants


def hop_uncertainty(
    params: ModelParams,
    dataset: DatasetBundle,
    config: TrainConfig,
    split="test",
) -> pd.DataFrame:
    """Mean vacuity and accuracy of every hop's own opinion next to the fused one."""
    hops = config.hop_set()
    hop_features = propagate_for(dataset, config.propagation_steps, normalize=config.normalize_hops)
    name, nodes = _split_nodes(dataset, split)
    if nodes.size == 0:
        raise InputError(f"split {name!r} has no nodes")
    hop_ev = forward_evidence(params, hop_features, hops=hops, nodes=nodes)
    y = dataset.labels[nodes]
    rows = []
    for hop, e in zip(hop_ev.hops, hop_ev.evidence):
        op = opinions_from_evidence(e)
        rows.append(
            {
                "variant": f"EP-{hop}",
                "hop": hop,
                "mean_uncertainty": float(np.mean(op.uncertainty)),
                "accuracy": float(np.mean(op.prediction == y)),
            }
        )
    fused = fuse_forward(hop_ev)
    rows.append(
        {
            "variant": "fused",
            "hop": -1,
            "mean_uncertainty": float(np.mean(fused.uncertainty)),
            "accuracy": float(np.mean(fused.prediction == y)),
        }
    )
    return pd.DataFrame(rows)


__all__ = [
    "ADAM_BETAS",
    "ADAM_EPS",
    "AdamState",
    "EarlyStopping",
    "EpochRecord",
    "EvalMetrics",
    "GridResult",
    "RunSummary",
    "TrainConfig",
    "TrainHistory",
    "adam_step",
    "evaluate",
    "expand_grid",
    "grid_search",
    "hop_ablation_configs",
    "hop_uncertainty",
    "propagate_for",
    "repeat_runs",
    "seed_streams",
    "train",
    "train_variants",
]
