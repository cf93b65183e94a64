"""Graph bundles: canonical representation, operators, edits, PCA, file I/O.

A bundle is an undirected simple graph stored as a dense symmetric 0/1
adjacency matrix with optional node features, labels and a train/val/test
split. Dense storage is deliberate: downstream edge scoring works with dense
gradients over node pairs, and the target graphs are small (a few thousand
nodes). A canonical edge list is derivable from the adjacency whenever pair
enumeration is needed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import ConsistencyError, DimensionError, EditConflict, FormatError

__all__ = [
    "EdgeSet",
    "Split",
    "GraphBundle",
    "PoisonRecord",
    "normalize_adjacency",
    "laplacian",
    "smoothness",
    "apply_edits",
    "pca_reduce",
    "load_bundle",
    "save_bundle",
    "load_poison_record",
    "save_poison_record",
]


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class EdgeSet:
    """Set of canonical undirected edges (u, v) with u < v."""

    edges: frozenset

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[int, int]]) -> "EdgeSet":
        canon = set()
        for u, v in pairs:
            u, v = int(u), int(v)
            if u == v:
                raise ConsistencyError(f"self-loop ({u},{v}) not allowed")
            if u < 0 or v < 0:
                raise ConsistencyError(f"negative node index in ({u},{v})")
            canon.add((u, v) if u < v else (v, u))
        return cls(frozenset(canon))

    @classmethod
    def empty(cls) -> "EdgeSet":
        return cls(frozenset())

    def check_indices(self, n: int) -> None:
        for u, v in self.edges:
            if v >= n:
                raise ConsistencyError(f"edge ({u},{v}) out of range for n={n}")

    def sorted_pairs(self) -> list[tuple[int, int]]:
        return sorted(self.edges)

    def union(self, other: "EdgeSet") -> "EdgeSet":
        return EdgeSet(self.edges | other.edges)

    def intersection(self, other: "EdgeSet") -> "EdgeSet":
        return EdgeSet(self.edges & other.edges)

    def __len__(self) -> int:
        return len(self.edges)

    def __iter__(self):
        return iter(sorted(self.edges))

    def __contains__(self, pair) -> bool:
        u, v = pair
        return ((u, v) if u < v else (v, u)) in self.edges


@dataclass(frozen=True)
class Split:
    """Disjoint train/val/test node index sets."""

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        for name in ("train", "val", "test"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            object.__setattr__(self, name, _readonly(np.unique(arr)))
        if self.train.size == 0 or self.val.size == 0:
            raise ConsistencyError("train and val splits must be nonempty")
        sets = [set(self.train.tolist()), set(self.val.tolist()), set(self.test.tolist())]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise ConsistencyError("split sets must be pairwise disjoint")

    def check_indices(self, n: int) -> None:
        for name in ("train", "val", "test"):
            arr = getattr(self, name)
            if arr.size and (arr.min() < 0 or arr.max() >= n):
                raise ConsistencyError(f"{name} split index out of range for n={n}")


@dataclass(frozen=True)
class GraphBundle:
    """Undirected graph with optional features/labels and a node split.

    Immutable after construction; every operation returns new arrays.
    """

    adjacency: np.ndarray
    features: Optional[np.ndarray]
    labels: Optional[np.ndarray]
    num_classes: int
    split: Split

    def __post_init__(self):
        # private copies: the bundle must not alias (or freeze) caller arrays
        A = np.array(self.adjacency, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ConsistencyError(f"adjacency must be square, got {A.shape}")
        if not np.array_equal(A, A.T):
            raise ConsistencyError("adjacency must be symmetric")
        if np.any(np.diag(A) != 0):
            raise ConsistencyError("adjacency diagonal must be zero")
        vals = np.unique(A)
        if not np.all(np.isin(vals, (0.0, 1.0))):
            raise ConsistencyError("adjacency entries must be 0 or 1")
        object.__setattr__(self, "adjacency", _readonly(A))
        n = A.shape[0]
        if self.features is not None:
            X = np.array(self.features, dtype=np.float64)
            if X.ndim != 2 or X.shape[0] != n:
                raise ConsistencyError(f"features must have {n} rows, got {X.shape}")
            object.__setattr__(self, "features", _readonly(X))
        if self.labels is not None:
            y = np.array(self.labels, dtype=np.int64)
            if y.shape != (n,):
                raise ConsistencyError(f"labels must have length {n}, got {y.shape}")
            if y.size and (y.min() < 0 or y.max() >= self.num_classes):
                raise ConsistencyError("label outside 0..num_classes-1")
            object.__setattr__(self, "labels", _readonly(y))
        if self.num_classes < 1:
            raise ConsistencyError("num_classes must be >= 1")
        self.split.check_indices(n)

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @property
    def num_feature_dims(self) -> int:
        return 0 if self.features is None else self.features.shape[1]

    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    def num_edges(self) -> int:
        return int(self.adjacency.sum()) // 2

    def edge_array(self) -> np.ndarray:
        """Canonical (m, 2) array of edges with u < v, lexicographically sorted."""
        iu = np.triu_indices(self.n, k=1)
        mask = self.adjacency[iu] > 0
        return np.stack([iu[0][mask], iu[1][mask]], axis=1)

    def edge_set(self) -> EdgeSet:
        return EdgeSet(frozenset(map(tuple, self.edge_array().tolist())))

    def with_adjacency(self, A: np.ndarray) -> "GraphBundle":
        return GraphBundle(A, self.features, self.labels, self.num_classes, self.split)


@dataclass(frozen=True)
class PoisonRecord:
    """The attacker's edit set: edges inserted into / deleted from the clean graph."""

    inserted: EdgeSet
    deleted: EdgeSet

    def attack_set(self) -> EdgeSet:
        return self.inserted.union(self.deleted)

    def __len__(self) -> int:
        return len(self.inserted) + len(self.deleted)


# ---------------------------------------------------------------------------
# Operators


def normalize_adjacency(A: np.ndarray) -> np.ndarray:
    """Self-loop-augmented symmetric normalization D̃^{-1/2} (A+I) D̃^{-1/2}."""
    A = np.asarray(A, dtype=np.float64)
    A_tilde = A + np.eye(A.shape[0])
    d = A_tilde.sum(axis=1)
    s = 1.0 / np.sqrt(d)
    return A_tilde * np.outer(s, s)


def laplacian(A: np.ndarray) -> np.ndarray:
    """Symmetric normalized Laplacian D^{-1/2} (D - A) D^{-1/2}.

    Degree-zero nodes use the convention 1/sqrt(0) = 0, so their row and
    column are all zero (the graph may disconnect during pruning).
    """
    A = np.asarray(A, dtype=np.float64)
    d = A.sum(axis=1)
    s = np.where(d > 0, 1.0 / np.sqrt(np.where(d > 0, d, 1.0)), 0.0)
    L = np.diag(np.where(d > 0, 1.0, 0.0)) - A * np.outer(s, s)
    return L


def smoothness(X: np.ndarray, L: np.ndarray) -> float:
    """Quadratic form Tr(X^T L X) measuring signal variation over the graph."""
    X = np.asarray(X, dtype=np.float64)
    return float(np.sum((L @ X) * X))


def apply_edits(A: np.ndarray, deletions: EdgeSet, insertions: EdgeSet) -> np.ndarray:
    """Return a copy of A with the given edges deleted then inserted."""
    A = np.asarray(A, dtype=np.float64)
    n = A.shape[0]
    deletions.check_indices(n)
    insertions.check_indices(n)
    for u, v in deletions:
        if A[u, v] != 1:
            raise EditConflict(f"cannot delete non-edge ({u},{v})")
    for u, v in insertions:
        if A[u, v] != 0:
            raise EditConflict(f"cannot insert existing edge ({u},{v})")
    out = A.copy()
    for u, v in deletions:
        out[u, v] = out[v, u] = 0.0
    for u, v in insertions:
        out[u, v] = out[v, u] = 1.0
    return out


def pca_reduce(X: np.ndarray, k: int) -> np.ndarray:
    """Top-k principal-component scores of mean-centered X.

    Eigendecomposition runs on whichever of the d x d covariance or the
    n x n Gram matrix is smaller. Components with (near-)zero variance give
    all-zero score columns. Sign convention: the largest-magnitude entry of
    each loading vector is positive, so scores are reproducible.
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if k > d or k > n:
        raise DimensionError(f"k={k} exceeds min(n={n}, d={d})")
    if k < 1:
        raise DimensionError("k must be >= 1")
    Xc = X - X.mean(axis=0)
    if d <= n:
        evals, evecs = np.linalg.eigh(Xc.T @ Xc / n)
        order = np.argsort(evals)[::-1][:k]
        lam = evals[order]
        V = evecs[:, order]
    else:
        evals, evecs = np.linalg.eigh(Xc @ Xc.T / n)
        order = np.argsort(evals)[::-1][:k]
        lam = evals[order]
        U = evecs[:, order]
        V = np.zeros((d, k))
        for j in range(k):
            if lam[j] > 0:
                V[:, j] = Xc.T @ U[:, j] / np.sqrt(lam[j] * n)
    tol = max(evals.max(initial=0.0), 0.0) * 1e-12 + 1e-300
    for j in range(k):
        if lam[j] <= tol:
            V[:, j] = 0.0
            continue
        i = int(np.argmax(np.abs(V[:, j])))
        if V[i, j] < 0:
            V[:, j] = -V[:, j]
    return Xc @ V


# ---------------------------------------------------------------------------
# Bundle directory I/O
#
# Layout: meta.json {n, num_classes, has_features}; edges.csv "u,v" per line
# (0-indexed, u < v, sorted, no duplicates); features.csv (n rows of
# comma-separated reals, only if has_features); labels.csv (n integer lines,
# optional); splits.json {"train": [...], "val": [...], "test": [...]}.
# Poison sidecar: poison.json {"inserted": [[u,v],...], "deleted": [[u,v],...]}.
# The writer is canonical, so save(load(p)) reproduces p byte-for-byte.


def _fmt(x: float) -> str:
    return repr(float(x))


def _canon_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ": "), indent=2) + "\n"


def save_bundle(bundle: GraphBundle, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "n": bundle.n,
        "num_classes": bundle.num_classes,
        "has_features": bundle.features is not None,
    }
    (path / "meta.json").write_text(_canon_json(meta))
    lines = [f"{u},{v}" for u, v in bundle.edge_array().tolist()]
    (path / "edges.csv").write_text("".join(line + "\n" for line in lines))
    if bundle.features is not None:
        rows = (",".join(_fmt(v) for v in row) for row in bundle.features)
        (path / "features.csv").write_text("".join(r + "\n" for r in rows))
    if bundle.labels is not None:
        (path / "labels.csv").write_text("".join(f"{y}\n" for y in bundle.labels.tolist()))
    splits = {
        "train": bundle.split.train.tolist(),
        "val": bundle.split.val.tolist(),
        "test": bundle.split.test.tolist(),
    }
    (path / "splits.json").write_text(_canon_json(splits))


def _parse_meta(path: Path) -> dict:
    try:
        meta = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}:{e.lineno}: invalid JSON: {e.msg}") from e
    for key in ("n", "num_classes", "has_features"):
        if key not in meta:
            raise FormatError(f"{path}:1: missing key '{key}'")
    return meta


def _parse_edges(path: Path, n: int) -> np.ndarray:
    A = np.zeros((n, n))
    seen = set()
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise FormatError(f"{path}:{lineno}: expected 'u,v', got {line!r}")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-integer endpoint in {line!r}")
            if u >= v:
                raise FormatError(f"{path}:{lineno}: edges must satisfy u < v")
            if (u, v) in seen:
                raise FormatError(f"{path}:{lineno}: duplicate edge ({u},{v})")
            if v >= n or u < 0:
                raise ConsistencyError(f"{path}:{lineno}: edge ({u},{v}) out of range for n={n}")
            seen.add((u, v))
            A[u, v] = A[v, u] = 1.0
    return A


def _parse_features(path: Path, n: int) -> np.ndarray:
    rows = []
    width = None
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = [float(tok) for tok in line.split(",")]
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric feature value")
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise FormatError(f"{path}:{lineno}: expected {width} columns, got {len(row)}")
            rows.append(row)
    if len(rows) != n:
        raise FormatError(f"{path}:{len(rows)}: expected {n} feature rows, got {len(rows)}")
    return np.asarray(rows, dtype=np.float64)


def _parse_labels(path: Path, n: int) -> np.ndarray:
    labels = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                labels.append(int(line))
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-integer label {line!r}")
    if len(labels) != n:
        raise FormatError(f"{path}:{len(labels)}: expected {n} labels, got {len(labels)}")
    return np.asarray(labels, dtype=np.int64)


def load_bundle(path) -> GraphBundle:
    path = Path(path)
    meta = _parse_meta(path / "meta.json")
    n = int(meta["n"])
    A = _parse_edges(path / "edges.csv", n)
    features = None
    if meta["has_features"]:
        features = _parse_features(path / "features.csv", n)
    labels = None
    if (path / "labels.csv").exists():
        labels = _parse_labels(path / "labels.csv", n)
    splits_path = path / "splits.json"
    try:
        raw = json.loads(splits_path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{splits_path}:{e.lineno}: invalid JSON: {e.msg}") from e
    for key in ("train", "val", "test"):
        if key not in raw:
            raise FormatError(f"{splits_path}:1: missing key '{key}'")
    split = Split(np.asarray(raw["train"]), np.asarray(raw["val"]), np.asarray(raw["test"]))
    return GraphBundle(A, features, labels, int(meta["num_classes"]), split)


def save_poison_record(record: PoisonRecord, path) -> None:
    payload = {
        "inserted": [list(p) for p in record.inserted.sorted_pairs()],
        "deleted": [list(p) for p in record.deleted.sorted_pairs()],
    }
    Path(path).write_text(_canon_json(payload))


def load_poison_record(path) -> PoisonRecord:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}:{e.lineno}: invalid JSON: {e.msg}") from e
    for key in ("inserted", "deleted"):
        if key not in raw:
            raise FormatError(f"{path}:1: missing key '{key}'")
    return PoisonRecord(
        inserted=EdgeSet.from_pairs(raw["inserted"]),
        deleted=EdgeSet.from_pairs(raw["deleted"]),
    )
