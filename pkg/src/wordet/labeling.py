"""Supervision for candidate windows.

Every candidate gets a class (0 = background), a window-object relationship
cluster, the relative location to its matched ground truth and one label per
layout cluster naming the class found there (0 = nothing).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import clustering
from .clustering import ClusterModel
from .geometry import Box, RelLoc, iou_matrix, rel_loc_array

POS_IOU = 0.5


class ConfigurationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SampleLabel:
    class_id: int
    cluster_id: int
    loc_target: Optional[RelLoc]
    layout_labels: tuple[int, ...]

    def __post_init__(self):
        if (self.class_id == 0) != (self.cluster_id == 0):
            raise ValueError("background iff no cluster")
        if self.class_id > 0:
            if self.loc_target is None or not np.all(np.isfinite(self.loc_target.as_array())):
                raise ValueError("positive samples need a finite location target")


# --------------------------------------------------------------------------
# window-object clusters (one AP model per class, or one pooled model)


@dataclass(frozen=True)
class WindowObjectClusters:
    """Cluster ids are 1-based and stacked class by class when fit per class."""

    models: dict  # class id -> ClusterModel, or {0: pooled model}
    pooled: bool = False

    @property
    def offsets(self) -> dict:
        off, acc = {}, 0
        for c in sorted(self.models):
            off[c] = acc
            acc += self.models[c].n_clusters
        return off

    @property
    def n_clusters(self) -> int:
        return sum(m.n_clusters for m in self.models.values())

    def assign(self, class_ids: np.ndarray, locs: np.ndarray) -> np.ndarray:
        class_ids = np.asarray(class_ids)
        locs = np.asarray(locs, dtype=np.float64).reshape(-1, 4)
        out = np.zeros(len(class_ids), dtype=np.int64)
        off = self.offsets
        for c, model in self.models.items():
            m = class_ids > 0 if self.pooled else class_ids == c
            if m.any():
                out[m] = clustering.assign_array(model.exemplars, locs[m]) + 1 + off[c]
        return out

    def to_json(self) -> dict:
        return {"pooled": self.pooled, "models": {str(c): m.to_json() for c, m in self.models.items()}}

    @classmethod
    def from_json(cls, d: dict) -> "WindowObjectClusters":
        return cls({int(c): ClusterModel.from_json(m) for c, m in d["models"].items()}, bool(d["pooled"]))


@dataclass(frozen=True)
class ClassOnlyClusters:
    """Stand-in that uses the class itself as the relationship cluster (one regressor per class)."""

    n_classes: int

    @property
    def n_clusters(self) -> int:
        return self.n_classes

    def assign(self, class_ids: np.ndarray, locs: np.ndarray) -> np.ndarray:
        return np.asarray(class_ids, dtype=np.int64).copy()

    def to_json(self) -> dict:
        return {"class_only": True, "n_classes": self.n_classes}


def clusters_from_json(d: dict):
    if d.get("class_only"):
        return ClassOnlyClusters(int(d["n_classes"]))
    return WindowObjectClusters.from_json(d)


@dataclass(frozen=True)
class ClusterSet:
    window_object: object
    layout: ClusterModel

    def save(self, path) -> None:
        doc = {"window_object": self.window_object.to_json(), "layout": self.layout.to_json()}
        Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "ClusterSet":
        doc = json.loads(Path(path).read_text())
        return cls(clusters_from_json(doc["window_object"]), ClusterModel.from_json(doc["layout"]))


# --------------------------------------------------------------------------
# proposals


def gen_proposals(scene_gts, rng_seed: int, n_jitter: int, n_random: int, scene_size: int,
                  max_offset: float = 0.4, max_log_scale: float = math.log(1.6),
                  min_size: float = 8.0) -> np.ndarray:
    """Jittered copies of each gt plus uniformly random boxes, as an ``(n, 4)`` array."""
    if n_jitter < 0 or n_random < 0:
        raise ValueError("proposal counts must be non-negative")
    gts = np.asarray([g.as_array() if isinstance(g, Box) else g for g in scene_gts], dtype=np.float64).reshape(-1, 4)
    rng = np.random.default_rng(rng_seed)
    out = []
    for g in gts:
        off = rng.uniform(-max_offset, max_offset, (n_jitter, 2)) * g[2:]
        ls = rng.uniform(-max_log_scale, max_log_scale, (n_jitter, 2))
        out.append(np.column_stack([g[:2] + off, g[2:] * np.exp(ls)]))
    if n_random:
        xy = rng.uniform(0, scene_size, (n_random, 2))
        wh = rng.uniform(min_size, scene_size / 2, (n_random, 2))
        out.append(np.column_stack([xy, wh]))
    if not out:
        return np.zeros((0, 4))
    boxes = np.concatenate(out)
    boxes[:, :2] = np.clip(boxes[:, :2], 0, scene_size)
    return boxes


# --------------------------------------------------------------------------
# matching and labels


def match_gt(candidate: Box, gts: Sequence[tuple[Box, int]]):
    """Best-overlapping ground truth with IoU >= 0.5 (first one on ties), else ``None``."""
    if not gts:
        return None
    ious = iou_matrix(candidate.as_array()[None], np.stack([g.as_array() for g, _ in gts]))[0]
    j = int(np.argmax(ious))
    return gts[j] if ious[j] >= POS_IOU else None


def match_array(candidates: np.ndarray, gt_boxes: np.ndarray):
    """Per candidate: index of the matched gt (or -1) and the max IoU."""
    n = len(candidates)
    if len(gt_boxes) == 0 or n == 0:
        return np.full(n, -1), np.zeros(n)
    ious = iou_matrix(candidates, gt_boxes)
    j = np.argmax(ious, axis=1)
    best = ious[np.arange(n), j]
    return np.where(best >= POS_IOU, j, -1), best


def layout_labels_array(candidates: np.ndarray, gt_boxes: np.ndarray, gt_classes: np.ndarray,
                        matched: np.ndarray, layout: ClusterModel) -> np.ndarray:
    """``(n, K)`` layout labels; the matched gt of a window never counts as its neighbour."""
    n, k = len(candidates), layout.n_clusters
    out = np.zeros((n, k), dtype=np.int64)
    if n == 0 or len(gt_boxes) == 0:
        return out
    rel = rel_loc_array(candidates[:, None, :], gt_boxes[None, :, :])  # (n, g, 4)
    d = ((rel[:, :, None, :] - layout.exemplars[None, None, :, :]) ** 2).sum(-1)  # (n, g, K)
    near = np.argmin(d, axis=2)
    dist = np.take_along_axis(d, near[..., None], axis=2)[..., 0]
    best = np.full((n, k), np.inf)
    for g in range(len(gt_boxes)):
        valid = matched != g
        rows = np.flatnonzero(valid)
        cols = near[rows, g]
        dd = dist[rows, g]
        better = dd < best[rows, cols]
        rows, cols = rows[better], cols[better]
        best[rows, cols] = dd[better]
        out[rows, cols] = gt_classes[g]
    return out


@dataclass
class LabelBatch:
    """Array form of many :class:`SampleLabel` records."""

    class_ids: np.ndarray  # (n,)
    cluster_ids: np.ndarray  # (n,)
    loc_targets: np.ndarray  # (n, 4), zeros for background
    layout_labels: np.ndarray  # (n, K)
    max_iou: np.ndarray  # (n,)

    def __len__(self):
        return len(self.class_ids)

    def take(self, idx) -> "LabelBatch":
        return LabelBatch(self.class_ids[idx], self.cluster_ids[idx], self.loc_targets[idx],
                          self.layout_labels[idx], self.max_iou[idx])

    def record(self, i: int) -> SampleLabel:
        c = int(self.class_ids[i])
        return SampleLabel(c, int(self.cluster_ids[i]), RelLoc.from_array(self.loc_targets[i]) if c else None,
                           tuple(int(v) for v in self.layout_labels[i]))

    @classmethod
    def concat(cls, parts: list["LabelBatch"]) -> "LabelBatch":
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                     ("class_ids", "cluster_ids", "loc_targets", "layout_labels", "max_iou")))


def label_candidates(candidates: np.ndarray, gt_boxes: np.ndarray, gt_classes: np.ndarray,
                     wo_model, layout_model: ClusterModel | None) -> LabelBatch:
    if wo_model is None or layout_model is None:
        raise ConfigurationError("labels need fitted window-object and layout cluster models")
    cand = np.asarray(candidates, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=np.int64)
    matched, best = match_array(cand, gt_boxes)
    pos = matched >= 0
    cls = np.where(pos, gt_classes[np.maximum(matched, 0)] if len(gt_classes) else 0, 0)
    loc = np.zeros((len(cand), 4))
    if pos.any():
        loc[pos] = rel_loc_array(cand[pos], gt_boxes[matched[pos]])
    clu = np.zeros(len(cand), dtype=np.int64)
    if pos.any():
        clu[pos] = wo_model.assign(cls[pos], loc[pos])
    lay = layout_labels_array(cand, gt_boxes, gt_classes, matched, layout_model)
    return LabelBatch(cls.astype(np.int64), clu, loc, lay, best)


def make_label(candidate: Box, gts: Sequence[tuple[Box, int]], wo_model, layout_model) -> SampleLabel:
    boxes = np.array([g.as_array() for g, _ in gts]).reshape(-1, 4)
    classes = np.array([c for _, c in gts], dtype=np.int64)
    return label_candidates(candidate.as_array()[None], boxes, classes, wo_model, layout_model).record(0)


# --------------------------------------------------------------------------
# cluster fitting from scenes


def positive_rel_locs(candidates_per_scene, scenes):
    """(class ids, rel locs) of every positive candidate across scenes."""
    cls, locs = [], []
    for cand, s in zip(candidates_per_scene, scenes):
        matched, _ = match_array(cand, s.boxes)
        pos = matched >= 0
        if pos.any():
            cls.append(s.classes[matched[pos]])
            locs.append(rel_loc_array(cand[pos], s.boxes[matched[pos]]))
    if not cls:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 4))
    return np.concatenate(cls), np.concatenate(locs)


def neighbour_rel_locs(scenes) -> np.ndarray:
    """rel_loc of every ordered (gt, other gt) pair in the same scene."""
    out = []
    for s in scenes:
        b = s.boxes
        for i in range(len(b)):
            for j in range(len(b)):
                if i != j:
                    out.append(rel_loc_array(b[i], b[j]))
    return np.array(out).reshape(-1, 4)


def fit_window_object(classes: np.ndarray, locs: np.ndarray, n_classes: int, n_range=(3, 6),
                      min_per_class: int = 50, max_points: int = 300, seed: int = 0,
                      damping: float = 0.9, max_iter: int = 1000, stable_iter: int = 50) -> WindowObjectClusters:
    counts = [int((classes == c).sum()) for c in range(1, n_classes + 1)]
    if min(counts) >= min_per_class:
        models = {}
        for c in range(1, n_classes + 1):
            pts = clustering.subsample(locs[classes == c], max_points, seed + c)
            models[c] = clustering.fit_with_target(pts, n_range, "window_object", damping, max_iter, stable_iter)
        return WindowObjectClusters(models, pooled=False)
    if len(locs) == 0:
        raise ValueError("no positive candidates to cluster")
    pts = clustering.subsample(locs, max_points, seed)
    lo, hi = n_range
    model = clustering.fit_with_target(pts, (lo, hi * 2), "window_object", damping, max_iter, stable_iter)
    return WindowObjectClusters({0: model}, pooled=True)


def fit_layout(scenes, n_range=(3, 6), max_points: int = 300, seed: int = 0, damping: float = 0.9,
               max_iter: int = 1000, stable_iter: int = 50) -> ClusterModel:
    pts = neighbour_rel_locs(scenes)
    if len(pts) == 0:
        # no multi-object scene: a single "nothing around" cluster
        return ClusterModel(np.zeros((1, 4)), kind="layout")
    pts = clustering.subsample(pts, max_points, seed)
    return clustering.fit_with_target(pts, n_range, "layout", damping, max_iter, stable_iter)


# --------------------------------------------------------------------------
# JSON Lines


def write_labels(path, scene_ids: np.ndarray, boxes: np.ndarray, labels: LabelBatch) -> None:
    with open(path, "w") as f:
        for i in range(len(labels)):
            c = int(labels.class_ids[i])
            f.write(json.dumps({
                "scene_id": int(scene_ids[i]),
                "box": [float(v) for v in boxes[i]],
                "class_id": c,
                "cluster_id": int(labels.cluster_ids[i]),
                "loc_target": [float(v) for v in labels.loc_targets[i]] if c else None,
                "layout_labels": [int(v) for v in labels.layout_labels[i]],
                "max_iou": float(labels.max_iou[i]),
            }) + "\n")


def read_labels(path):
    ids, boxes, cls, clu, loc, lay, mi = [], [], [], [], [], [], []
    for line in Path(path).read_text().splitlines():
        r = json.loads(line)
        ids.append(r["scene_id"])
        boxes.append(r["box"])
        cls.append(r["class_id"])
        clu.append(r["cluster_id"])
        loc.append(r["loc_target"] or [0.0] * 4)
        lay.append(r["layout_labels"])
        mi.append(r.get("max_iou", 0.0))
    labels = LabelBatch(np.array(cls, dtype=np.int64), np.array(clu, dtype=np.int64),
                        np.array(loc).reshape(-1, 4), np.array(lay, dtype=np.int64).reshape(len(cls), -1),
                        np.array(mi))
    return np.array(ids, dtype=np.int64), np.array(boxes).reshape(-1, 4), labels
