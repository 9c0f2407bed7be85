"""Scoring proposals, refinement, non-maximum suppression and PASCAL-style AP."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Box, apply_rel_loc_array, iou_matrix
from .labeling import ConfigurationError

EVAL_IOU = 0.5
NMS_IOU = 0.3


@dataclass(frozen=True)
class Detection:
    scene_id: int
    box: Box
    class_id: int
    score: float

    def to_json(self) -> dict:
        return {"scene_id": self.scene_id, "box": [self.box.x, self.box.y, self.box.w, self.box.h],
                "class_id": self.class_id, "score": self.score}

    @classmethod
    def from_json(cls, d: dict) -> "Detection":
        return cls(int(d["scene_id"]), Box(*d["box"]), int(d["class_id"]), float(d["score"]))


@dataclass
class DetectionArrays:
    """Columnar detections: one row per (proposal, class)."""

    scene_ids: np.ndarray
    boxes: np.ndarray
    class_ids: np.ndarray
    scores: np.ndarray

    def __len__(self):
        return len(self.scores)

    def take(self, idx) -> "DetectionArrays":
        return DetectionArrays(self.scene_ids[idx], self.boxes[idx], self.class_ids[idx], self.scores[idx])

    @classmethod
    def concat(cls, parts) -> "DetectionArrays":
        parts = list(parts)
        if not parts:
            return cls(np.zeros(0, np.int64), np.zeros((0, 4)), np.zeros(0, np.int64), np.zeros(0))
        return cls(*(np.concatenate([getattr(p, f) for p in parts])
                     for f in ("scene_ids", "boxes", "class_ids", "scores")))

    def records(self) -> list[Detection]:
        return [Detection(int(s), Box.from_array(b), int(c), float(v))
                for s, b, c, v in zip(self.scene_ids, self.boxes, self.class_ids, self.scores)]

    @classmethod
    def from_records(cls, dets) -> "DetectionArrays":
        dets = list(dets)
        return cls(np.array([d.scene_id for d in dets], dtype=np.int64),
                   np.array([d.box.as_array() for d in dets]).reshape(-1, 4),
                   np.array([d.class_id for d in dets], dtype=np.int64),
                   np.array([d.score for d in dets], dtype=np.float64))


def score_proposals(scene_ids: np.ndarray, proposals: np.ndarray, feats: np.ndarray, svms,
                    regressors=None) -> DetectionArrays:
    """One detection per proposal per active class; boxes refined if regressors are given."""
    if svms is None:
        raise ConfigurationError("scoring needs trained SVMs")
    scores = svms.decision(feats)
    parts = []
    for k in range(svms.n_classes):
        if not svms.active[k]:
            continue
        cls = np.full(len(proposals), k + 1, dtype=np.int64)
        boxes = proposals if regressors is None else refine(proposals, regressors.predict(feats, cls))
        parts.append(DetectionArrays(np.asarray(scene_ids, dtype=np.int64), np.asarray(boxes, dtype=np.float64),
                                     cls, scores[:, k].astype(np.float64)))
    return DetectionArrays.concat(parts)


def refine(boxes: np.ndarray, rel: np.ndarray) -> np.ndarray:
    """Move each box to the target its predicted RelLoc points at; count unchanged."""
    out = apply_rel_loc_array(boxes, rel)
    out[:, 2:] = np.maximum(out[:, 2:], 1e-6)
    return out


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float = NMS_IOU) -> np.ndarray:
    """Greedy suppression; returns kept indices in descending score order.

    Equal scores keep their input order (stable sort).
    """
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError("iou_thresh must lie in (0, 1)")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    if len(order) == 0:
        return order
    ious = iou_matrix(boxes, boxes)
    alive = np.ones(len(boxes), dtype=bool)
    keep = []
    for i in order:
        if not alive[i]:
            continue
        keep.append(i)
        alive &= ious[i] <= iou_thresh
    return np.array(keep, dtype=np.intp)


def nms_per_group(dets: DetectionArrays, iou_thresh: float = NMS_IOU) -> DetectionArrays:
    """NMS separately for every (scene, class) group."""
    keep = []
    key = dets.scene_ids * 1000 + dets.class_ids
    for g in np.unique(key):
        idx = np.flatnonzero(key == g)
        keep.append(idx[nms(dets.boxes[idx], dets.scores[idx], iou_thresh)])
    if not keep:
        return dets.take(np.zeros(0, dtype=np.intp))
    return dets.take(np.sort(np.concatenate(keep)))


# --------------------------------------------------------------------------
# average precision


def match_detections(scene_ids, boxes, scores, gt_scene_ids, gt_boxes, iou_thresh: float = EVAL_IOU):
    """TP flags in descending score order; each gt is claimed by at most one detection."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    tp = np.zeros(len(order), dtype=bool)
    taken = np.zeros(len(gt_boxes), dtype=bool)
    by_scene: dict = {}
    for j, s in enumerate(gt_scene_ids):
        by_scene.setdefault(int(s), []).append(j)
    for r, i in enumerate(order):
        cand = by_scene.get(int(scene_ids[i]))
        if not cand:
            continue
        ious = iou_matrix(boxes[i][None], gt_boxes[cand])[0]
        # best still-unclaimed gt
        ious = np.where(taken[cand], -1.0, ious)
        j = int(np.argmax(ious))
        if ious[j] >= iou_thresh:
            tp[r] = True
            taken[cand[j]] = True
    return tp, order


def precision_recall(tp: np.ndarray, n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    ctp = np.cumsum(tp)
    prec = ctp / np.arange(1, len(tp) + 1)
    rec = ctp / n_gt if n_gt else np.zeros(len(tp))
    return prec, rec


def ap_from_tp(tp: np.ndarray, n_gt: int) -> float:
    """All-point interpolated AP from TP flags sorted by descending score."""
    if n_gt == 0 or len(tp) == 0:
        return 0.0
    prec, rec = precision_recall(np.asarray(tp, dtype=bool), n_gt)
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    step = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(((mrec[step + 1] - mrec[step]) * mpre[step + 1]).sum())


def average_precision(dets: DetectionArrays, gt_scene_ids, gt_boxes, iou_thresh: float = EVAL_IOU) -> float:
    """AP of one class's detections against that class's ground truths."""
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    tp, _ = match_detections(dets.scene_ids, dets.boxes, dets.scores, gt_scene_ids, gt_boxes, iou_thresh)
    return ap_from_tp(tp, len(gt_boxes))


# --------------------------------------------------------------------------
# evaluation reports


@dataclass
class EvalReport:
    class_names: list
    ap: np.ndarray
    curves: dict  # class name -> (precision, recall)

    @property
    def mean_ap(self) -> float:
        return float(np.mean(self.ap))

    @property
    def median_ap(self) -> float:
        return float(np.median(self.ap))

    def ap_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "ap"])
        for name, a in zip(self.class_names, self.ap):
            w.writerow([name, f"{a:.10f}"])
        w.writerow(["mAP", f"{self.mean_ap:.10f}"])
        w.writerow(["medianAP", f"{self.median_ap:.10f}"])
        return buf.getvalue()


def evaluate(dets: DetectionArrays, scenes, class_names, iou_thresh: float = EVAL_IOU) -> EvalReport:
    """Per-class AP over ``scenes``; ``dets`` should already be NMS-filtered."""
    scenes = list(scenes)
    if not scenes:
        raise ValueError("cannot evaluate on an empty dataset")
    gt_ids, gt_boxes, gt_cls = [], [], []
    for s in scenes:
        for o in s.objects:
            gt_ids.append(s.id)
            gt_boxes.append(o.box.as_array())
            gt_cls.append(o.class_id)
    gt_ids = np.array(gt_ids, dtype=np.int64)
    gt_boxes = np.array(gt_boxes).reshape(-1, 4)
    gt_cls = np.array(gt_cls, dtype=np.int64)
    aps, curves = [], {}
    for k, name in enumerate(class_names, start=1):
        d = dets.take(np.flatnonzero(dets.class_ids == k))
        g = gt_cls == k
        tp, _ = match_detections(d.scene_ids, d.boxes, d.scores, gt_ids[g], gt_boxes[g], iou_thresh)
        aps.append(ap_from_tp(tp, int(g.sum())))
        curves[name] = precision_recall(tp, int(g.sum()))
    return EvalReport(list(class_names), np.array(aps), curves)


def pr_csv(prec: np.ndarray, rec: np.ndarray) -> str:
    lines = ["rank,precision,recall"]
    lines += [f"{i + 1},{p:.10f},{r:.10f}" for i, (p, r) in enumerate(zip(prec, rec))]
    return "\n".join(lines) + "\n"


def pr_svg(prec: np.ndarray, rec: np.ndarray, title: str, size: int = 320) -> str:
    """A self-contained SVG precision-recall plot."""
    m = 40
    inner = size - 2 * m

    def xy(r, p):
        return m + r * inner, size - m - p * inner

    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in (xy(r, p) for r, p in zip(rec, prec)))
    ticks = []
    for t in (0.0, 0.5, 1.0):
        x, y0 = xy(t, 0)
        x0, y = xy(0, t)
        ticks.append(f'<text x="{x:.1f}" y="{y0 + 15:.1f}" font-size="10" text-anchor="middle">{t:g}</text>')
        ticks.append(f'<text x="{x0 - 6:.1f}" y="{y + 3:.1f}" font-size="10" text-anchor="end">{t:g}</text>')
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">\n'
        f'<rect x="{m}" y="{m}" width="{inner}" height="{inner}" fill="none" stroke="#444"/>\n'
        f'<polyline points="{pts}" fill="none" stroke="#1f5fbf" stroke-width="1.5"/>\n'
        + "\n".join(ticks) + "\n"
        f'<text x="{size / 2}" y="{m - 12}" font-size="12" text-anchor="middle">{title}</text>\n'
        f'<text x="{size / 2}" y="{size - 6}" font-size="11" text-anchor="middle">recall</text>\n'
        f'<text x="12" y="{size / 2}" font-size="11" text-anchor="middle" '
        f'transform="rotate(-90 12 {size / 2})">precision</text>\n'
        "</svg>\n"
    )


def write_report(report: EvalReport, out_dir, plots: bool = True) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ap.csv").write_text(report.ap_csv())
    for name, (p, r) in report.curves.items():
        (out / f"pr_{name}.csv").write_text(pr_csv(p, r))
        if plots:
            (out / f"pr_{name}.svg").write_text(pr_svg(p, r, f"{name}: AP {report.ap[report.class_names.index(name)]:.3f}"))


def write_detections(path, dets: DetectionArrays) -> None:
    with open(path, "w") as f:
        for d in dets.records():
            f.write(json.dumps(d.to_json()) + "\n")


def read_detections(path) -> DetectionArrays:
    recs = [Detection.from_json(json.loads(line)) for line in Path(path).read_text().splitlines() if line]
    return DetectionArrays.from_records(recs)
