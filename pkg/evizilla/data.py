"""Dataset ingestion, synthetic block-model graphs, splits and OOD noise.

Two on-disk formats are understood:

* citation raw: ``<prefix>.content`` (``id f_1 .. f_d label``) and
  ``<prefix>.cites`` (``cited citing``), whitespace separated;
* generic: a directory with ``features.csv``, ``edges.tsv``, ``labels.csv``
  and ``splits.txt`` (see :func:`save_generic` for the canonical layout).

Every loader hands back a :class:`DatasetBundle` whose edge list is canonical:
undirected pairs stored once as ``(i, j)`` with ``i < j``, sorted, with no
self-loops and no duplicates.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
import json
import logging
from pathlib import Path
import re
from typing import Dict, Iterable, List, Optional, Tuple

import networkx as nx
import numpy as np
import pandas as pd

from .errors import InputError, ParseError
from .graph_core import FeatureMatrix, SparseAdjacency, as_feature_matrix, normalize_adjacency
from .paths import ensure_out_dir, resolve_dataset_path

log = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "val", "test")
SBM_LAYOUTS = ("ray", "axis")
GENERIC_FILES = {
    "features": "features.csv",
    "edges": "edges.tsv",
    "labels": "labels.csv",
    "splits": "splits.txt",
}


# ---------------------------------------------------------------------------
# Bundle
# ---------------------------------------------------------------------------

def canonical_edges(pairs) -> Tuple[np.ndarray, int, int]:
    """Return (edges, self_loops_dropped, duplicates_dropped) for an undirected pair list."""
    arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    loops = int(np.count_nonzero(arr[:, 0] == arr[:, 1]))
    arr = arr[arr[:, 0] != arr[:, 1]]
    arr = np.sort(arr, axis=1)
    uniq = np.unique(arr, axis=0) if arr.size else arr.reshape(0, 2)
    return uniq.astype(np.int64), loops, int(arr.shape[0] - uniq.shape[0])


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class DatasetBundle:
    features: FeatureMatrix
    edges: np.ndarray
    labels: np.ndarray
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray
    class_count: int
    name: str = "dataset"
    class_names: Tuple[str, ...] = ()
    dangling_count: int = 0

    def __post_init__(self):
        features = as_feature_matrix(self.features)
        n = features.n
        labels = np.array(self.labels, dtype=np.int64).reshape(-1)
        if labels.size != n:
            raise InputError(f"{labels.size} labels for {n} nodes")
        k = int(self.class_count)
        if k < 2:
            raise InputError(f"need at least 2 classes, got {k}")
        if np.any(labels < 0) or np.any(labels >= k):
            raise InputError(f"labels must lie in [0, {k})")
        missing = sorted(set(range(k)) - set(np.unique(labels).tolist()))
        if missing:
            raise InputError(f"classes {missing} have no nodes")
        edges = np.array(self.edges, dtype=np.int64).reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges.max() >= n):
            raise InputError(f"edge endpoint outside [0, {n})")
        edges, loops, dups = canonical_edges(edges)
        if loops or dups:
            log.debug("bundle %s: dropped %d self-loops and %d duplicate edges", self.name, loops, dups)
        masks = []
        for split in SPLIT_NAMES:
            m = np.array(getattr(self, f"{split}_mask"), dtype=bool).reshape(-1)
            if m.size != n:
                raise InputError(f"{split} mask has {m.size} entries for {n} nodes")
            masks.append(m)
        overlap = (masks[0] & masks[1]) | (masks[0] & masks[2]) | (masks[1] & masks[2])
        if np.any(overlap):
            raise InputError(f"train/val/test masks overlap at {int(np.count_nonzero(overlap))} nodes")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "edges", _frozen(edges))
        object.__setattr__(self, "labels", _frozen(labels))
        for split, m in zip(SPLIT_NAMES, masks):
            object.__setattr__(self, f"{split}_mask", _frozen(m))
        object.__setattr__(self, "class_count", k)
        object.__setattr__(self, "class_names", tuple(str(c) for c in self.class_names))

    @property
    def n(self) -> int:
        return self.features.n

    @property
    def d(self) -> int:
        return self.features.d

    def mask(self, split: str) -> np.ndarray:
        if split not in SPLIT_NAMES:
            raise InputError(f"unknown split {split!r}; expected one of {SPLIT_NAMES}")
        return getattr(self, f"{split}_mask")

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.mask(split))

    def adjacency(self) -> SparseAdjacency:
        return normalize_adjacency(self.edges, self.n)

    def with_features(self, features) -> "DatasetBundle":
        return replace(self, features=as_feature_matrix(features))

    def summary(self) -> str:
        return (
            f"{self.name}: n={self.n} d={self.d} K={self.class_count} edges={len(self.edges)} "
            f"train={int(self.train_mask.sum())} val={int(self.val_mask.sum())} test={int(self.test_mask.sum())}"
        )


@dataclass(frozen=True)
class SbmSpec:
    n: int = 300
    k: int = 3
    p_in: float = 0.1
    p_out: float = 0.01
    feature_dim: int = 32
    separation: float = 0.2
    noise: float = 0.15
    seed: int = 0
    train_per_class: int = 20
    val_per_class: int = 30
    # "ray": class c mean is c * separation on feature 0; "axis": one axis per class
    layout: str = "ray"

    def __post_init__(self):
        if not 0.0 <= self.p_out < self.p_in <= 1.0:
            raise InputError(f"need 0 <= p_out < p_in <= 1, got p_in={self.p_in} p_out={self.p_out}")
        if self.k < 2:
            raise InputError(f"need at least 2 blocks, got {self.k}")
        if self.n < self.k:
            raise InputError(f"need n >= K, got n={self.n} K={self.k}")
        if self.feature_dim < 1:
            raise InputError(f"feature_dim must be >= 1, got {self.feature_dim}")
        if self.noise < 0.0:
            raise InputError(f"noise must be >= 0, got {self.noise}")
        if self.layout not in SBM_LAYOUTS:
            raise InputError(f"unknown mean layout {self.layout!r}; expected one of {SBM_LAYOUTS}")
        if self.train_per_class < 1 or self.val_per_class < 0:
            raise InputError("train_per_class must be >= 1 and val_per_class >= 0")

    @classmethod
    def from_mapping(cls, values: Dict) -> "SbmSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(values) - known)
        if unknown:
            raise InputError(f"unknown SBM field(s): {', '.join(unknown)}")
        return cls(**values)

    def to_dict(self) -> Dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

_RANGE_RE = re.compile(r"^\s*(\d+)\s*(?:-\s*(\d+))?\s*$")


def format_ranges(indices: Iterable[int]) -> str:
    idx = sorted(int(i) for i in indices)
    parts: List[str] = []
    start = prev = None
    for i in idx:
        if start is None:
            start = prev = i
        elif i == prev + 1:
            prev = i
        else:
            parts.append(f"{start}" if start == prev else f"{start}-{prev}")
            start = prev = i
    if start is not None:
        parts.append(f"{start}" if start == prev else f"{start}-{prev}")
    return ",".join(parts)


def parse_split_file(path: Path | str, n: int) -> Dict[str, np.ndarray]:
    """Read ``train|val|test <ranges>`` lines into boolean masks."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"split file not found: {path}")
    masks = {name: np.zeros(n, dtype=bool) for name in SPLIT_NAMES}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, _, rest = line.partition(" ")
        if head not in masks:
            raise ParseError(f"unknown split name {head!r}", path=path, line_number=lineno)
        for token in rest.split(","):
            if not token.strip():
                continue
            m = _RANGE_RE.match(token)
            if not m:
                raise ParseError(f"bad index range {token.strip()!r}", path=path, line_number=lineno)
            lo = int(m.group(1))
            hi = int(m.group(2)) if m.group(2) is not None else lo
            if hi < lo or hi >= n:
                raise ParseError(f"range {lo}-{hi} outside [0, {n})", path=path, line_number=lineno)
            masks[head][lo : hi + 1] = True
    return masks


def write_split_file(path: Path | str, bundle: DatasetBundle) -> Path:
    path = Path(path)
    lines = [f"{name} {format_ranges(bundle.indices(name))}".rstrip() for name in SPLIT_NAMES]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def standard_split(
    labels: np.ndarray,
    class_count: int,
    *,
    train_per_class: int = 20,
    val_size: int = 500,
    test_size: int = 1000,
) -> Dict[str, np.ndarray]:
    """Fixed split in node order: first ``train_per_class`` of every class train,
    the last ``test_size`` of the rest test, the first ``val_size`` of what remains val."""
    n = labels.size
    train = np.zeros(n, dtype=bool)
    seen = np.zeros(class_count, dtype=np.int64)
    for i, y in enumerate(labels):
        if seen[y] < train_per_class:
            train[i] = True
            seen[y] += 1
    rest = np.flatnonzero(~train)
    n_test = min(test_size, rest.size)
    test_idx = rest[rest.size - n_test :]
    remaining = rest[: rest.size - n_test]
    val_idx = remaining[: min(val_size, remaining.size)]
    val = np.zeros(n, dtype=bool)
    test = np.zeros(n, dtype=bool)
    val[val_idx] = True
    test[test_idx] = True
    return {"train": train, "val": val, "test": test}


def row_normalize(X: np.ndarray) -> np.ndarray:
    sums = X.sum(axis=1, keepdims=True)
    return np.divide(X, sums, out=X.copy(), where=sums != 0.0)


# ---------------------------------------------------------------------------
# Citation raw format
# ---------------------------------------------------------------------------

def citation_paths(path: Path | str) -> Tuple[Path, Path]:
    """Resolve a prefix (``data/cora/cora``) or a directory to its .content/.cites pair."""
    p = Path(path)
    if p.is_dir():
        contents = sorted(p.glob("*.content"))
        if len(contents) != 1:
            raise InputError(f"{p}: expected exactly one *.content file, found {len(contents)}")
        content = contents[0]
    elif p.suffix == ".content":
        content = p
    else:
        content = p.with_name(p.name + ".content")
    cites = content.with_suffix(".cites")
    return content, cites


def load_citation_raw(
    content_path: Path | str,
    cites_path: Path | str,
    *,
    split_file: Path | str | None = None,
    row_normalize_features: bool = False,
    name: str | None = None,
) -> DatasetBundle:
    content_path = Path(content_path)
    cites_path = Path(cites_path)
    for p in (content_path, cites_path):
        if not p.is_file():
            raise InputError(f"dataset file not found: {p}")

    ids: List[str] = []
    rows: List[List[float]] = []
    raw_labels: List[str] = []
    width: Optional[int] = None
    index: Dict[str, int] = {}
    with content_path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens:
                continue
            if len(tokens) < 3:
                raise ParseError("expected 'id feature... label'", path=content_path, line_number=lineno)
            if width is None:
                width = len(tokens)
            elif len(tokens) != width:
                raise ParseError(
                    f"expected {width} columns, found {len(tokens)}", path=content_path, line_number=lineno
                )
            node_id = tokens[0]
            if node_id in index:
                raise ParseError(f"duplicate node id {node_id!r}", path=content_path, line_number=lineno)
            try:
                feats = [float(t) for t in tokens[1:-1]]
            except ValueError as exc:
                raise ParseError(f"non-numeric feature ({exc})", path=content_path, line_number=lineno) from exc
            index[node_id] = len(ids)
            ids.append(node_id)
            rows.append(feats)
            raw_labels.append(tokens[-1])
    if not ids:
        raise ParseError("no nodes found", path=content_path, line_number=1)

    class_names = sorted(set(raw_labels))
    class_of = {c: i for i, c in enumerate(class_names)}
    labels = np.array([class_of[c] for c in raw_labels], dtype=np.int64)

    pairs: List[Tuple[int, int]] = []
    dangling = 0
    with cites_path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens:
                continue
            if len(tokens) != 2:
                raise ParseError("expected 'cited citing'", path=cites_path, line_number=lineno)
            a, b = index.get(tokens[0]), index.get(tokens[1])
            if a is None or b is None:
                dangling += 1
                continue
            pairs.append((a, b))
    edges, loops, dups = canonical_edges(pairs) if pairs else (np.zeros((0, 2), dtype=np.int64), 0, 0)
    if dangling:
        log.warning("%s: skipped %d citations with unknown endpoints", cites_path.name, dangling)
    if loops:
        log.warning("%s: dropped %d self-citations", cites_path.name, loops)
    if dups:
        log.info("%s: collapsed %d duplicate citations", cites_path.name, dups)

    X = np.array(rows, dtype=np.float64)
    if row_normalize_features:
        X = row_normalize(X)
    k = len(class_names)
    if split_file is not None:
        masks = parse_split_file(split_file, len(ids))
    else:
        masks = standard_split(labels, k)
    return DatasetBundle(
        features=FeatureMatrix(X),
        edges=edges,
        labels=labels,
        train_mask=masks["train"],
        val_mask=masks["val"],
        test_mask=masks["test"],
        class_count=k,
        name=name or content_path.stem,
        class_names=tuple(class_names),
        dangling_count=dangling,
    )


# ---------------------------------------------------------------------------
# Generic format
# ---------------------------------------------------------------------------

def _read_table(path: Path, *, sep: str, dtype=None) -> np.ndarray:
    if not path.is_file():
        raise InputError(f"dataset file not found: {path}")
    try:
        frame = pd.read_csv(path, sep=sep, header=None, dtype=dtype, float_precision="round_trip")
    except pd.errors.EmptyDataError:
        return np.zeros((0, 0))
    except (ValueError, pd.errors.ParserError) as exc:
        raise ParseError(f"cannot parse table ({exc})", path=path) from exc
    return frame.to_numpy()


def load_generic(
    features_csv: Path | str,
    edges_tsv: Path | str,
    labels_csv: Path | str,
    splits_file: Path | str,
    *,
    row_normalize_features: bool = False,
    name: str | None = None,
) -> DatasetBundle:
    features_csv, edges_tsv, labels_csv = Path(features_csv), Path(edges_tsv), Path(labels_csv)
    X = _read_table(features_csv, sep=",").astype(np.float64)
    if X.size == 0:
        raise ParseError("no feature rows", path=features_csv, line_number=1)
    labels_raw = _read_table(labels_csv, sep=",")
    if labels_raw.ndim != 2 or labels_raw.shape[1] != 1:
        raise ParseError("labels file must have exactly one column", path=labels_csv)
    try:
        labels = labels_raw[:, 0].astype(np.int64)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"labels must be integers ({exc})", path=labels_csv) from exc
    if labels.size != X.shape[0]:
        raise InputError(f"{labels_csv.name} has {labels.size} rows but {features_csv.name} has {X.shape[0]}")
    edges = _read_table(edges_tsv, sep="\t")
    if edges.size == 0:
        edges = np.zeros((0, 2), dtype=np.int64)
    elif edges.shape[1] != 2:
        raise ParseError(f"edges file needs 2 columns, found {edges.shape[1]}", path=edges_tsv)
    edges = edges.astype(np.int64)
    if edges.size and (edges.min() < 0 or edges.max() >= X.shape[0]):
        raise InputError(f"{edges_tsv.name} references nodes outside [0, {X.shape[0]})")
    masks = parse_split_file(splits_file, X.shape[0])
    if row_normalize_features:
        X = row_normalize(X)
    return DatasetBundle(
        features=FeatureMatrix(X),
        edges=edges,
        labels=labels,
        train_mask=masks["train"],
        val_mask=masks["val"],
        test_mask=masks["test"],
        class_count=int(labels.max()) + 1,
        name=name or features_csv.parent.name,
    )


def load_generic_dir(directory: Path | str, **kwargs) -> DatasetBundle:
    d = Path(directory)
    return load_generic(*(d / GENERIC_FILES[k] for k in ("features", "edges", "labels", "splits")), **kwargs)


def save_generic(bundle: DatasetBundle, directory: Path | str) -> Path:
    """Write the canonical generic layout; loading it back and saving again is byte-identical."""
    d = ensure_out_dir(directory)
    pd.DataFrame(bundle.features.data).to_csv(
        d / GENERIC_FILES["features"], header=False, index=False, float_format="%.17g", lineterminator="\n"
    )
    pd.DataFrame(bundle.edges).to_csv(
        d / GENERIC_FILES["edges"], sep="\t", header=False, index=False, lineterminator="\n"
    )
    pd.DataFrame(bundle.labels).to_csv(d / GENERIC_FILES["labels"], header=False, index=False, lineterminator="\n")
    write_split_file(d / GENERIC_FILES["splits"], bundle)
    log.info("wrote %s in generic format to %s", bundle.name, d)
    return d


# ---------------------------------------------------------------------------
# Synthetic graphs and noise
# ---------------------------------------------------------------------------

def block_sizes(n: int, k: int) -> List[int]:
    return [n // k + (1 if i < n % k else 0) for i in range(k)]


def generate_sbm(spec: SbmSpec) -> DatasetBundle:
    """Planted-partition graph with Gaussian class-mean features.

    With the ``ray`` layout all class means lie on one line through the origin,
    so class identity is carried by feature magnitude. Deep propagation scales
    every row by roughly the square root of its degree, which then swamps the
    shrinking class offsets; the ``axis`` layout keeps the classes apart in
    direction instead.
    """
    sizes = block_sizes(spec.n, spec.k)
    probs = np.full((spec.k, spec.k), spec.p_out)
    np.fill_diagonal(probs, spec.p_in)
    graph = nx.stochastic_block_model(sizes, probs.tolist(), seed=spec.seed, selfloops=False)
    edges = np.array(list(graph.edges()), dtype=np.int64).reshape(-1, 2)
    labels = np.repeat(np.arange(spec.k), sizes)

    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    means = np.zeros((spec.k, spec.feature_dim))
    if spec.layout == "ray":
        means[:, 0] = np.arange(spec.k) * spec.separation
    else:
        means[np.arange(spec.k), np.arange(spec.k) % spec.feature_dim] = spec.separation
    X = means[labels] + spec.noise * rng.standard_normal((spec.n, spec.feature_dim))

    train = np.zeros(spec.n, dtype=bool)
    val = np.zeros(spec.n, dtype=bool)
    test = np.zeros(spec.n, dtype=bool)
    for c in range(spec.k):
        members = rng.permutation(np.flatnonzero(labels == c))
        n_train = min(spec.train_per_class, members.size)
        n_val = min(spec.val_per_class, members.size - n_train)
        train[members[:n_train]] = True
        val[members[n_train : n_train + n_val]] = True
        test[members[n_train + n_val :]] = True

    return DatasetBundle(
        features=FeatureMatrix(X),
        edges=edges,
        labels=labels,
        train_mask=train,
        val_mask=val,
        test_mask=test,
        class_count=spec.k,
        name=f"sbm-n{spec.n}-k{spec.k}-s{spec.seed}",
        class_names=tuple(f"block{c}" for c in range(spec.k)),
    )


def inject_ood_noise(features, eta: float, seed: int, rows: Optional[np.ndarray] = None) -> FeatureMatrix:
    """X + η·ε with ε ~ N(0, I); ``rows`` (mask or indices) limits the pollution."""
    X = as_feature_matrix(features)
    eta = float(eta)
    if not np.isfinite(eta) or eta < 0.0:
        raise InputError(f"noise intensity must be >= 0, got {eta}")
    eps = np.random.default_rng(seed).standard_normal(X.data.shape)
    if rows is not None:
        keep = np.zeros(X.n, dtype=bool)
        keep[np.asarray(rows)] = True
        eps[~keep] = 0.0
    return FeatureMatrix(X.data + eta * eps)


# ---------------------------------------------------------------------------
# Dispatch used by the CLI
# ---------------------------------------------------------------------------

DATASET_FORMATS = ("citation", "generic", "sbm")


def load_dataset(
    path: Path | str,
    fmt: str = "citation",
    *,
    split_file: Path | str | None = None,
    row_normalize_features: bool = False,
) -> DatasetBundle:
    if fmt not in DATASET_FORMATS:
        raise InputError(f"unknown dataset format {fmt!r}; expected one of {DATASET_FORMATS}")
    p = resolve_dataset_path(path)
    if fmt == "citation":
        content, cites = citation_paths(p)
        bundle = load_citation_raw(content, cites, split_file=split_file, row_normalize_features=row_normalize_features)
    elif fmt == "generic":
        d = Path(p)
        if not d.is_dir():
            raise InputError(f"generic dataset directory not found: {d}")
        splits = Path(split_file) if split_file is not None else d / GENERIC_FILES["splits"]
        bundle = load_generic(
            d / GENERIC_FILES["features"],
            d / GENERIC_FILES["edges"],
            d / GENERIC_FILES["labels"],
            splits,
            row_normalize_features=row_normalize_features,
        )
    else:
        spec_path = Path(p)
        if not spec_path.is_file():
            raise InputError(f"SBM spec file not found: {spec_path}")
        try:
            values = json.loads(spec_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON ({exc.msg})", path=spec_path, line_number=exc.lineno) from exc
        bundle = generate_sbm(SbmSpec.from_mapping(values))
        if split_file is not None:
            masks = parse_split_file(split_file, bundle.n)
            bundle = replace(bundle, train_mask=masks["train"], val_mask=masks["val"], test_mask=masks["test"])
        if row_normalize_features:
            bundle = bundle.with_features(row_normalize(bundle.features.data.copy()))
    log.info("loaded %s", bundle.summary())
    return bundle


__all__ = [
    "DATASET_FORMATS",
    "DatasetBundle",
    "SbmSpec",
    "block_sizes",
    "canonical_edges",
    "citation_paths",
    "format_ranges",
    "generate_sbm",
    "inject_ood_noise",
    "load_citation_raw",
    "load_dataset",
    "load_generic",
    "load_generic_dir",
    "parse_split_file",
    "row_normalize",
    "save_generic",
    "standard_split",
    "write_split_file",
]
