"""Exact k-d tree over place descriptors and the submap database built on it."""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .descriptors import DESCRIPTOR_DIM
from .geometry import Pose
from .partition import Submap, pack_submaps, unpack_submaps

DB_MAGIC = "lidar-reloc-db"
DB_VERSION = 1


def row_distances(X: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Euclidean distance from ``q`` to every row of ``X``."""
    return np.sqrt(np.sum((X - q) ** 2, axis=1))


class KDTree:
    """Exact k-d tree with cycled split axes and lower-median pivots.

    Internal nodes split on ``axis = depth % dim`` at the lower median of
    their points (ties ordered by row). Leaves hold up to ``leafsize`` rows
    that are scanned exhaustively.
    """

    def __init__(self, data, leafsize: int = 8):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 2 or len(data) == 0:
            raise ValueError("k-d tree needs a non-empty 2-D array")
        self.data = data
        self.n, self.dim = data.shape
        self.leafsize = leafsize
        self.order = np.empty(self.n, dtype=np.int64)
        self._axis: list[int] = []
        self._split: list[float] = []
        self._left: list[int] = []
        self._right: list[int] = []
        self._start: list[int] = []
        self._end: list[int] = []
        self._fill = 0
        self._build(np.arange(self.n), 0)
        self.axis = np.array(self._axis, dtype=np.int64)
        self.split = np.array(self._split)
        self.left = np.array(self._left, dtype=np.int64)
        self.right = np.array(self._right, dtype=np.int64)
        self.start = np.array(self._start, dtype=np.int64)
        self.end = np.array(self._end, dtype=np.int64)
        del self._axis, self._split, self._left, self._right, self._start, self._end

    def _new_node(self) -> int:
        for lst in (self._axis, self._left, self._right, self._start, self._end):
            lst.append(-1)
        self._split.append(0.0)
        return len(self._axis) - 1

    def _build(self, rows: np.ndarray, depth: int) -> int:
        node = self._new_node()
        if len(rows) <= self.leafsize:
            self._start[node] = self._fill
            self.order[self._fill:self._fill + len(rows)] = rows
            self._fill += len(rows)
            self._end[node] = self._fill
            return node
        axis = depth % self.dim
        vals = self.data[rows, axis]
        rows = rows[np.lexsort((rows, vals))]
        m = (len(rows) - 1) // 2
        self._axis[node] = axis
        self._split[node] = float(self.data[rows[m], axis])
        self._left[node] = self._build(rows[: m + 1], depth + 1)
        self._right[node] = self._build(rows[m + 1:], depth + 1)
        return node

    def __len__(self) -> int:
        return self.n

    def structure(self) -> tuple:
        return (self.axis.tobytes(), self.split.tobytes(), self.left.tobytes(),
                self.right.tobytes(), self.order.tobytes())

    def query(self, q, k: int = 1) -> list[tuple[int, float]]:
        """``min(k, n)`` nearest rows as ``(row, distance)``.

        Sorted by distance, ties by row. Results equal a linear scan because
        a subtree is skipped only when its splitting plane is strictly
        farther than the current k-th distance.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        q = np.asarray(q, dtype=np.float64).reshape(-1)
        if q.shape != (self.dim,):
            raise ValueError(f"query has dimension {q.size}, tree has {self.dim}")
        k = min(k, self.n)
        heap: list[tuple[float, int]] = []  # (-dist, -row): worst on top
        stack = [(0, 0.0)]
        while stack:
            node, bound = stack.pop()
            if len(heap) == k and bound > -heap[0][0]:
                continue
            if self.axis[node] < 0:
                rows = self.order[self.start[node]:self.end[node]]
                for r, d in zip(rows.tolist(), row_distances(self.data[rows], q).tolist()):
                    key = (-d, -r)
                    if len(heap) < k:
                        heapq.heappush(heap, key)
                    elif key > heap[0]:
                        heapq.heapreplace(heap, key)
                continue
            diff = q[self.axis[node]] - self.split[node]
            if diff <= 0:
                near, far = self.left[node], self.right[node]
            else:
                near, far = self.right[node], self.left[node]
            stack.append((far, abs(diff)))
            stack.append((near, bound))
        return sorted(((-r, -d) for d, r in heap), key=lambda t: (t[1], t[0]))


@dataclass(frozen=True, eq=False)
class SubmapRecord:
    index: int
    origin: Pose
    q: np.ndarray
    w: np.ndarray
    label: int | None = None
    submap: Submap | None = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("q", "w"):
            v = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            if v.shape != (DESCRIPTOR_DIM,):
                raise ValueError(f"record {self.index}: {name} must have {DESCRIPTOR_DIM} entries")
            object.__setattr__(self, name, v)


class DescriptorDatabase:
    """Immutable set of submap records indexed by their ``q`` vectors."""

    def __init__(self, records, tree: KDTree | None = None):
        records = sorted(records, key=lambda r: r.index)
        if not records:
            raise ValueError("database needs at least one record")
        seen = set()
        for r in records:
            if r.index in seen:
                raise ValueError(f"duplicate record index {r.index}")
            seen.add(r.index)
        self.records = tuple(records)
        self._by_index = {r.index: r for r in self.records}
        Q = np.array([r.q for r in self.records])
        self.tree = tree if tree is not None else KDTree(Q)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, index: int) -> SubmapRecord:
        return self._by_index[index]

    def query_top_k(self, q_t, k: int) -> list[tuple[int, float]]:
        """``(record index, distance)`` of the ``min(k, n)`` nearest places."""
        return [(self.records[row].index, d) for row, d in self.tree.query(q_t, k)]


def build(records) -> DescriptorDatabase:
    return DescriptorDatabase(records)


def brute_force_top_k(Q: np.ndarray, ids, q, k: int) -> list[tuple[int, float]]:
    d = row_distances(np.asarray(Q, dtype=float), np.asarray(q, dtype=float))
    ids = np.asarray(ids)
    order = np.lexsort((ids, d))[:k]
    return [(int(ids[i]), float(d[i])) for i in order]


def save_database(db: DescriptorDatabase, path) -> None:
    recs = db.records
    arrays = dict(
        magic=np.array(DB_MAGIC), version=np.array(DB_VERSION),
        index=np.array([r.index for r in recs], dtype=np.int64),
        origins=np.array([r.origin.matrix() for r in recs]),
        Q=np.array([r.q for r in recs]), W=np.array([r.w for r in recs]),
        labels=np.array([-1 if r.label is None else r.label for r in recs], dtype=np.int64),
        tree_axis=db.tree.axis, tree_split=db.tree.split, tree_left=db.tree.left,
        tree_right=db.tree.right, tree_start=db.tree.start, tree_end=db.tree.end,
        tree_order=db.tree.order, tree_leafsize=np.array(db.tree.leafsize),
    )
    if all(r.submap is not None for r in recs):
        arrays.update(pack_submaps([r.submap for r in recs]))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_database(path) -> DescriptorDatabase:
    with np.load(path) as z:
        if "magic" not in z or str(z["magic"]) != DB_MAGIC:
            raise ValueError(f"{path}: not a descriptor database")
        if int(z["version"]) != DB_VERSION:
            raise ValueError(f"{path}: unsupported database version {int(z['version'])}")
        origins = [Pose.from_matrix(T) for T in z["origins"]]
        submaps = unpack_submaps(z) if "submap_points" in z else [None] * len(origins)
        records = [
            SubmapRecord(int(i), o, q, w, None if l < 0 else int(l), s)
            for i, o, q, w, l, s in zip(z["index"], origins, z["Q"], z["W"], z["labels"], submaps)
        ]
        tree = KDTree.__new__(KDTree)
        tree.data = np.array(z["Q"])
        tree.n, tree.dim = tree.data.shape
        tree.leafsize = int(z["tree_leafsize"])
        for name in ("axis", "split", "left", "right", "start", "end", "order"):
            setattr(tree, name, np.array(z[f"tree_{name}"]))
    return DescriptorDatabase(records, tree)
