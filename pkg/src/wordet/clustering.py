"""Affinity propagation over relative-location vectors.

Similarities are negative squared Euclidean distances. No noise is added to
break ties, so fitting is bit-for-bit deterministic.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

AUTO = "auto"
KINDS = ("window_object", "layout")


@dataclass(frozen=True)
class ClusterModel:
    exemplars: np.ndarray  # (n_clusters, 4)
    kind: str = "window_object"
    preference: float = 0.0
    damping: float = 0.9
    converged: bool = True
    n_iter: int = 0
    # cluster id offset when several per-class models are stacked
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown cluster kind {self.kind!r}")
        ex = np.asarray(self.exemplars, dtype=np.float64)
        if ex.ndim != 2 or len(ex) < 1:
            raise ValueError("a cluster model needs at least one exemplar")
        object.__setattr__(self, "exemplars", ex)

    @property
    def n_clusters(self) -> int:
        return len(self.exemplars)

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "n_clusters": self.n_clusters,
            "exemplars": self.exemplars.tolist(),
            "preference": self.preference,
            "damping": self.damping,
            "converged": self.converged,
            "n_iter": self.n_iter,
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ClusterModel":
        return cls(
            exemplars=np.array(d["exemplars"], dtype=np.float64),
            kind=d["kind"],
            preference=float(d["preference"]),
            damping=float(d["damping"]),
            converged=bool(d["converged"]),
            n_iter=int(d.get("n_iter", 0)),
            meta=d.get("meta", {}),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "ClusterModel":
        return cls.from_json(json.loads(Path(path).read_text()))


def similarity_matrix(points: np.ndarray) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    diff = p[:, None, :] - p[None, :, :]
    return -np.einsum("ijk,ijk->ij", diff, diff)


def median_preference(sim: np.ndarray) -> float:
    n = len(sim)
    if n < 2:
        return 0.0
    off = sim[~np.eye(n, dtype=bool)]
    return float(np.median(off))


def affinity_propagation(sim: np.ndarray, damping: float = 0.9, max_iter: int = 1000,
                         stable_iter: int = 50, noise_seed: int | None = 0):
    """Message passing on a similarity matrix whose diagonal holds the preferences.

    Exactly tied similarities make the messages oscillate between equally good
    exemplar sets, so (unless ``noise_seed`` is None) a seeded perturbation at
    the level of machine precision is added first. After the messages settle,
    each cluster's exemplar is moved to the member with the largest summed
    similarity to the rest of the cluster, and points are reassigned.

    Returns ``(exemplar indices, converged, n_iter)``.
    """
    if not 0.5 <= damping < 1:
        raise ValueError("damping must lie in [0.5, 1)")
    if not max_iter >= stable_iter >= 1:
        raise ValueError("need max_iter >= stable_iter >= 1")
    S = np.array(sim, dtype=np.float64)
    n = len(S)
    if n == 1:
        return np.array([0]), True, 0
    if noise_seed is not None:
        eps, tiny = np.finfo(np.float64).eps, np.finfo(np.float64).tiny
        S = S + (eps * S + tiny * 100) * np.random.default_rng(noise_seed).standard_normal((n, n))
    R = np.zeros_like(S)
    A = np.zeros_like(S)
    rows = np.arange(n)
    last = None
    unchanged = 0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        AS = A + S
        first = np.argmax(AS, axis=1)
        y1 = AS[rows, first]
        AS[rows, first] = -np.inf
        y2 = AS.max(axis=1)
        Rn = S - y1[:, None]
        Rn[rows, first] = S[rows, first] - y2
        R = damping * R + (1 - damping) * Rn

        Rp = np.maximum(R, 0)
        Rp[rows, rows] = R[rows, rows]
        col = Rp.sum(axis=0)
        An = col[None, :] - Rp
        diag = An[rows, rows].copy()
        An = np.minimum(An, 0)
        An[rows, rows] = diag
        A = damping * A + (1 - damping) * An

        ex = tuple(np.flatnonzero(np.diag(R) + np.diag(A) > 0))
        if ex == last:
            unchanged += 1
        else:
            unchanged = 1
            last = ex
        if unchanged >= stable_iter and len(ex) > 0:
            converged = True
            break
    ex = np.array(last if last else (), dtype=np.intp)
    if len(ex) == 0:
        # fully tied inputs (e.g. duplicated points) never produce a positive
        # self-evidence; fall back to the single strongest candidate
        ev = np.diag(R) + np.diag(A)
        ex = np.array([int(np.argmax(ev))])
    return _refine_exemplars(S, ex), converged, it


def _refine_exemplars(S: np.ndarray, ex: np.ndarray) -> np.ndarray:
    labels = np.argmax(S[:, ex], axis=1)
    labels[ex] = np.arange(len(ex))
    out = []
    for k in range(len(ex)):
        members = np.flatnonzero(labels == k)
        out.append(int(members[np.argmax(S[np.ix_(members, members)].sum(axis=0))]))
    return np.array(sorted(set(out)), dtype=np.intp)


def ap_cluster(points, preference=AUTO, damping: float = 0.9, max_iter: int = 1000,
               stable_iter: int = 50, kind: str = "window_object") -> ClusterModel:
    """Fit affinity propagation on ``(n, 4)`` relative-location points."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    if len(p) == 0:
        raise ValueError("ap_cluster needs at least one point")
    S = similarity_matrix(p)
    pref = median_preference(S) if preference == AUTO else float(preference)
    np.fill_diagonal(S, pref)
    ex, converged, n_iter = affinity_propagation(S, damping, max_iter, stable_iter)
    if not converged:
        log.warning("affinity propagation did not converge in %d iterations", max_iter)
    exemplars = _distinct_rows(p[ex])
    return ClusterModel(exemplars, kind=kind, preference=pref, damping=damping,
                        converged=converged, n_iter=n_iter)


def _distinct_rows(a: np.ndarray) -> np.ndarray:
    keep = []
    for i, row in enumerate(a):
        if not any(np.array_equal(row, a[j]) for j in keep):
            keep.append(i)
    return a[keep]


def assign_array(exemplars: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Zero-based nearest-exemplar index; ties go to the lowest index."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    d = ((p[:, None, :] - exemplars[None, :, :]) ** 2).sum(axis=-1)
    return np.argmin(d, axis=1)


def assign(model: ClusterModel, p) -> int:
    """One-based cluster index of the nearest exemplar."""
    a = p.as_array() if hasattr(p, "as_array") else np.asarray(p, dtype=np.float64)
    return int(assign_array(model.exemplars, a[None])[0]) + 1


@dataclass
class ClusterStats:
    counts: np.ndarray
    means: np.ndarray
    mean_distance: np.ndarray


def cluster_stats(model: ClusterModel, points) -> ClusterStats:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    k = model.n_clusters
    counts = np.zeros(k, dtype=np.int64)
    means = np.zeros((k, 4))
    dist = np.zeros(k)
    if len(p):
        lab = assign_array(model.exemplars, p)
        for j in range(k):
            m = lab == j
            counts[j] = m.sum()
            if counts[j]:
                means[j] = p[m].mean(axis=0)
                dist[j] = np.sqrt(((p[m] - model.exemplars[j]) ** 2).sum(axis=1)).mean()
    return ClusterStats(counts, means, dist)


def net_similarity(S: np.ndarray, exemplars) -> float:
    """AP objective: preferences of exemplars plus each other point's best similarity."""
    ex = list(exemplars)
    total = float(S[ex, ex].sum())
    others = [i for i in range(len(S)) if i not in set(ex)]
    if others:
        total += float(S[np.ix_(others, ex)].max(axis=1).sum())
    return total


def brute_force_exemplars(S: np.ndarray) -> tuple[tuple[int, ...], float]:
    """Exhaustive maximisation of :func:`net_similarity` (small n only)."""
    n = len(S)
    best, best_val = None, -np.inf
    for size in range(1, n + 1):
        for ex in combinations(range(n), size):
            v = net_similarity(S, ex)
            if v > best_val:
                best, best_val = ex, v
    return best, best_val


def fit_with_target(points, n_range: tuple[int, int], kind: str, damping: float = 0.9,
                    max_iter: int = 1000, stable_iter: int = 50, max_steps: int = 12) -> ClusterModel:
    """Sweep the preference (as a multiple of the median similarity) until the
    cluster count falls inside ``n_range``; returns the closest fit otherwise."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    S = similarity_matrix(p)
    med = median_preference(S)
    if med == 0.0 or len(p) < 2:
        return ap_cluster(p, AUTO, damping, max_iter, stable_iter, kind)
    lo, hi = n_range
    too_many, too_few = None, None  # multipliers known to over/under-shoot
    mult = 1.0
    best = None
    for _ in range(max_steps):
        model = ap_cluster(p, med * mult, damping, max_iter, stable_iter, kind)
        k = model.n_clusters
        gap = 0 if lo <= k <= hi else min(abs(k - lo), abs(k - hi))
        if best is None or gap < best[0]:
            best = (gap, model)
        if gap == 0:
            break
        if k > hi:
            too_many = mult
            mult = mult * 4 if too_few is None else float(np.sqrt(too_many * too_few))
        else:
            too_few = mult
            mult = mult / 4 if too_many is None else float(np.sqrt(too_many * too_few))
    model = best[1]
    return ClusterModel(model.exemplars, kind, model.preference, damping, model.converged,
                        model.n_iter, {"pref_multiplier": float(model.preference / med)})


def subsample(points: np.ndarray, max_points: int, seed: int) -> np.ndarray:
    if len(points) <= max_points:
        return points
    idx = np.sort(np.random.default_rng(seed).choice(len(points), max_points, replace=False))
    return points[idx]
