"""Staged training: pretrain (a), window-object (b), multi-object (c), joint
finetune (d), then per-class linear SVMs and box regressors on the
concatenated features.

Everything here works on in-memory arrays; the CLI wraps these functions with
file I/O. Training crops are sampled on the fly from a mean-padded stack of
scene images, so memory stays flat regardless of how many candidates exist.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .geometry import CropSpec, iou_matrix, pad_with_mean, rel_loc_array, sample_crops
from .labeling import LabelBatch, gen_proposals, label_candidates, match_array
from .net import (SGD, Arch, BranchNet, Heads, JointNet, Targets, branch_loss_and_grads,
                  joint_loss_and_grads, lr_at)

log = logging.getLogger(__name__)

STAGES = ("a", "b", "c", "d")
# which checkpoint each stage may warm-start from, in order of preference
PREREQUISITES = {"a": (None,), "b": ("a",), "c": ("b",), "d": ("c", "b", "a")}


class PrerequisiteError(RuntimeError):
    """A stage was asked to start from a checkpoint it cannot follow."""


def check_prerequisite(stage: str, init_stage: str | None) -> None:
    if stage not in PREREQUISITES:
        raise ValueError(f"unknown stage {stage!r}")
    allowed = PREREQUISITES[stage]
    if init_stage not in allowed:
        need = " or ".join("none" if s is None else f"stage {s}" for s in allowed)
        got = "nothing" if init_stage is None else f"stage {init_stage}"
        raise PrerequisiteError(f"stage {stage} must start from {need}, got {got}")


@dataclass(frozen=True)
class StageConfig:
    iterations: int
    lr: float = 0.01
    batch: int = 64
    pos_fraction: float = 0.5

    def __post_init__(self):
        if self.iterations < 0 or self.batch < 1:
            raise ValueError("iterations must be >= 0 and batch >= 1")
        if not 0.0 <= self.pos_fraction <= 1.0:
            raise ValueError("pos_fraction must lie in [0, 1]")


@dataclass(frozen=True)
class StagePlan:
    """One training stage for a set of branches."""

    stage: str
    init_from: str | None  # stage tag of the warm-start checkpoint, None for scratch
    crop_specs: tuple[CropSpec, ...]
    config: StageConfig
    dataset: str = ""

    def __post_init__(self):
        check_prerequisite(self.stage, self.init_from)
        if not self.crop_specs:
            raise ValueError("a stage needs at least one crop spec")


# --------------------------------------------------------------------------
# training data


@dataclass
class ImageStack:
    """Mean-padded scene images, ready for batched crop sampling."""

    padded: np.ndarray  # (S, H + 2, W + 2) float32

    @classmethod
    def from_scenes(cls, scenes, dtype=np.float32) -> "ImageStack":
        return cls(np.stack([pad_with_mean(s.image) for s in scenes]).astype(dtype))

    def crops(self, scene_idx: np.ndarray, boxes: np.ndarray, spec: CropSpec, out_size: int) -> np.ndarray:
        return sample_crops(self.padded, scene_idx, boxes, spec, out_size)


@dataclass
class GroundTruths:
    scene_idx: np.ndarray
    boxes: np.ndarray
    classes: np.ndarray  # 1-based

    @classmethod
    def from_scenes(cls, scenes) -> "GroundTruths":
        idx, boxes, cls_ = [], [], []
        for i, s in enumerate(scenes):
            idx.extend([i] * len(s.objects))
            boxes.append(s.boxes)
            cls_.append(s.classes)
        return cls(np.array(idx, dtype=np.intp), np.concatenate(boxes).reshape(-1, 4),
                   np.concatenate(cls_).astype(np.int64))

    def __len__(self):
        return len(self.classes)


@dataclass
class CandidatePool:
    """Labelled candidate windows over a set of scenes."""

    scene_idx: np.ndarray
    boxes: np.ndarray
    labels: LabelBatch

    def __len__(self):
        return len(self.scene_idx)

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.labels.class_ids > 0)

    @property
    def negatives(self) -> np.ndarray:
        return np.flatnonzero(self.labels.class_ids == 0)


def scene_proposals(scene, seed: int, n_jitter: int, n_random: int, salt: int = 0) -> np.ndarray:
    return gen_proposals(scene.boxes, [seed, scene.id, salt], n_jitter, n_random, scene.size)


def scene_candidates(scenes, seed: int, n_jitter: int = 8, n_random: int = 8,
                     include_gts: bool = True) -> list[np.ndarray]:
    """Per scene: its ground truths (optionally) followed by jittered and random proposals."""
    out = []
    for s in scenes:
        cand = scene_proposals(s, seed, n_jitter, n_random)
        out.append(np.concatenate([s.boxes, cand]) if include_gts else cand)
    return out


def build_pool(scenes, candidates, clusters) -> CandidatePool:
    """Label every candidate window against the fitted ``clusters``."""
    idx, parts = [], []
    for i, (s, cand) in enumerate(zip(scenes, candidates)):
        parts.append(label_candidates(cand, s.boxes, s.classes, clusters.window_object, clusters.layout))
        idx.append(np.full(len(cand), i, dtype=np.intp))
    return CandidatePool(np.concatenate(idx), np.concatenate(candidates).reshape(-1, 4), LabelBatch.concat(parts))


def balanced_batch(rng: np.random.Generator, pos: np.ndarray, neg: np.ndarray, batch: int,
                   pos_fraction: float) -> np.ndarray:
    """Indices with ``round(batch * pos_fraction)`` positives (fewer only if none exist)."""
    n_pos = int(round(batch * pos_fraction)) if len(pos) else 0
    if not len(neg):
        n_pos = batch
    n_neg = batch - n_pos
    parts = []
    if n_pos:
        parts.append(rng.choice(pos, n_pos, replace=True))
    if n_neg:
        parts.append(rng.choice(neg, n_neg, replace=True))
    return np.concatenate(parts)


# --------------------------------------------------------------------------
# generic loops


@dataclass
class History:
    losses: list = field(default_factory=list)

    def append(self, bundle) -> None:
        self.losses.append(bundle.as_dict())

    def totals(self) -> np.ndarray:
        return np.array([d["total"] for d in self.losses])


def train_branch(net: BranchNet, make_batch: Callable, cfg: StageConfig, seed: int) -> History:
    """SGD on a single branch; ``make_batch(rng) -> (images, Targets)``."""
    rng = np.random.default_rng(seed)
    opt = SGD(momentum=0.9)
    hist = History()
    for it in range(cfg.iterations):
        x, t = make_batch(rng)
        bundle, grads = branch_loss_and_grads(net, x, t)
        opt.step(net.params, grads, lr_at(it, cfg.iterations, cfg.lr))
        hist.append(bundle)
    return hist


def _stage_seed(seed: int, stage: str, spec: CropSpec, extra: int = 0) -> list:
    return [seed, STAGES.index(stage), spec.rotation, int(round(spec.scale * 10)), extra]


# --------------------------------------------------------------------------
# stages


def run_stage_a(images: ImageStack, gts: GroundTruths, spec: CropSpec, cfg: StageConfig, seed: int,
                n_classes: int, arch: Arch = Arch(), init_seed: int | None = None,
                dtype=np.float32) -> tuple[BranchNet, History]:
    """C-way classification of ground-truth crops taken at this branch's spec."""
    if len(gts) == 0:
        raise ValueError("stage a needs at least one ground-truth object")
    init = _stage_seed(seed, "a", spec) if init_seed is None else init_seed
    net = BranchNet.init(arch, np.random.default_rng(init).integers(2**63), Heads(pretrain=n_classes),
                         tag=spec.tag, dtype=dtype)
    all_idx = np.arange(len(gts))

    def make_batch(rng):
        i = rng.choice(all_idx, cfg.batch, replace=True)
        x = images.crops(gts.scene_idx[i], gts.boxes[i], spec, arch.in_size)
        return x, Targets(class_ids=gts.classes[i] - 1)

    hist = train_branch(net, make_batch, cfg, _stage_seed(seed, "a", spec, 1))
    return net, hist


def _warm_start(init: BranchNet, heads: Heads) -> BranchNet:
    net = init.copy()
    net.set_heads(heads)
    return net


def _relationship_batches(images, pool, spec, cfg, in_size, with_layout):
    pos, neg = pool.positives, pool.negatives
    lab = pool.labels

    def make_batch(rng):
        i = balanced_batch(rng, pos, neg, cfg.batch, cfg.pos_fraction)
        x = images.crops(pool.scene_idx[i], pool.boxes[i], spec, in_size)
        t = Targets(cluster_ids=lab.cluster_ids[i], loc_targets=lab.loc_targets[i],
                    layout_labels=lab.layout_labels[i] if with_layout else None)
        return x, t

    return make_batch


def run_stage_b(images: ImageStack, pool: CandidatePool, spec: CropSpec, cfg: StageConfig, seed: int,
                init: BranchNet, n_clusters: int) -> tuple[BranchNet, History]:
    """Cluster posterior + per-cluster location regression; background windows carry no loss."""
    net = _warm_start(init, Heads(clusters=n_clusters))
    make_batch = _relationship_batches(images, pool, spec, cfg, net.arch.in_size, False)
    return net, train_branch(net, make_batch, cfg, _stage_seed(seed, "b", spec))


def run_stage_c(images: ImageStack, pool: CandidatePool, spec: CropSpec, cfg: StageConfig, seed: int,
                init: BranchNet, n_clusters: int, n_layout: int, n_classes: int) -> tuple[BranchNet, History]:
    """Stage b losses plus one (C+1)-way head per layout cluster, all with unit weight."""
    net = _warm_start(init, Heads(clusters=n_clusters, layout=n_layout, layout_classes=n_classes + 1))
    make_batch = _relationship_batches(images, pool, spec, cfg, net.arch.in_size, True)
    return net, train_branch(net, make_batch, cfg, _stage_seed(seed, "c", spec))


def run_stage_d(images: ImageStack, pool: CandidatePool, branches: Sequence[BranchNet],
                specs: Sequence[CropSpec], cfg: StageConfig, seed: int, n_classes: int) -> tuple[JointNet, History]:
    """Joint (C+1)-way finetuning of all branches through one head on the concatenated features."""
    if len(branches) != len(specs):
        raise ValueError("one branch per crop spec")
    trunks = []
    for b in branches:
        t = b.copy()
        t.set_heads(Heads())
        trunks.append(t)
    net = JointNet.from_branches(trunks, n_classes + 1)
    params = net.params
    pos, neg = pool.positives, pool.negatives
    rng = np.random.default_rng(_stage_seed(seed, "d", specs[0], len(specs)))
    opt = SGD(momentum=0.9)
    hist = History()
    in_size = trunks[0].arch.in_size
    for it in range(cfg.iterations):
        i = balanced_batch(rng, pos, neg, cfg.batch, cfg.pos_fraction)
        xs = [images.crops(pool.scene_idx[i], pool.boxes[i], s, in_size) for s in specs]
        bundle, grads = joint_loss_and_grads(net, xs, pool.labels.class_ids[i])
        opt.step(params, grads, lr_at(it, cfg.iterations, cfg.lr))
        hist.append(bundle)
    return net, hist


# --------------------------------------------------------------------------
# features


@dataclass
class FeatureExtractor:
    """Branch networks paired with the crop spec each one sees; features are
    concatenated in the given order. A branch may appear under several specs
    (parameter sharing)."""

    branches: list
    specs: list

    def __post_init__(self):
        if len(self.branches) != len(self.specs) or not self.branches:
            raise ValueError("need one branch per crop spec")

    @property
    def dim(self) -> int:
        return sum(b.arch.feature_dim for b in self.branches)

    @classmethod
    def from_joint(cls, net: JointNet, specs) -> "FeatureExtractor":
        return cls(list(net.branches), list(specs))

    def extract(self, images: ImageStack, scene_idx: np.ndarray, boxes: np.ndarray,
                chunk: int = 512) -> np.ndarray:
        n = len(scene_idx)
        out = np.zeros((n, self.dim), dtype=np.float64)
        for start in range(0, n, chunk):
            sl = slice(start, start + chunk)
            col = 0
            for b, s in zip(self.branches, self.specs):
                d = b.arch.feature_dim
                x = images.crops(scene_idx[sl], boxes[sl], s, b.arch.in_size)
                out[sl, col:col + d] = b.features(x)
                col += d
        return out


# --------------------------------------------------------------------------
# SVMs


@dataclass
class LinearSVMs:
    """One linear scorer per class over standardised features."""

    mean: np.ndarray  # (d,)
    scale: np.ndarray  # (d,)
    w: np.ndarray  # (d, C)
    b: np.ndarray  # (C,)
    active: np.ndarray  # (C,) bool; classes without positives never fire

    @property
    def n_classes(self) -> int:
        return len(self.b)

    def standardise(self, feats: np.ndarray) -> np.ndarray:
        return (np.asarray(feats, dtype=np.float64) - self.mean) / self.scale

    def decision(self, feats: np.ndarray) -> np.ndarray:
        return self.standardise(feats) @ self.w + self.b

    def to_json(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("mean", "scale", "w", "b", "active")}

    @classmethod
    def from_json(cls, d: dict) -> "LinearSVMs":
        return cls(*(np.array(d[k], dtype=np.float64) for k in ("mean", "scale", "w", "b")),
                   np.array(d["active"], dtype=bool))


def svm_objective(x: np.ndarray, y: np.ndarray, w: np.ndarray, b: float, lam: float) -> float:
    """``lam / 2 * |w|^2 + mean(max(0, 1 - y (x w + b)))``."""
    m = y * (x @ w + b)
    return 0.5 * lam * float(w @ w) + float(np.maximum(0.0, 1.0 - m).mean())


def fit_linear_svm(x: np.ndarray, y: np.ndarray, lam: float = 1e-3, iterations: int = 300,
                   step: float = 1.0) -> tuple[np.ndarray, float]:
    """Full-batch subgradient descent with step ``step / sqrt(t)``; returns the
    best iterate seen (subgradient steps are not monotone)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, d = x.shape
    w = np.zeros(d)
    b = 0.0
    best = (svm_objective(x, y, w, b, lam), w.copy(), b)
    for t in range(1, iterations + 1):
        m = y * (x @ w + b)
        act = m < 1.0
        gw = lam * w - (y[act] @ x[act]) / n
        gb = -float(y[act].sum()) / n
        eta = step / np.sqrt(t)
        w = w - eta * gw
        b = b - eta * gb
        obj = svm_objective(x, y, w, b, lam)
        if obj < best[0]:
            best = (obj, w.copy(), b)
    return best[1], best[2]


def svm_targets(cand_classes_iou: np.ndarray, is_gt_of: np.ndarray, neg_iou: float = 0.3) -> np.ndarray:
    """Per-class targets in {+1, -1, 0}: +1 for ground truths of the class,
    -1 for windows overlapping every gt of that class by less than ``neg_iou``,
    0 (ignored) otherwise.

    ``cand_classes_iou`` is ``(n, C)``: max IoU with each class's gts.
    ``is_gt_of`` is ``(n,)``: class id if the window is a ground truth, else 0.
    """
    n, c = cand_classes_iou.shape
    y = np.where(cand_classes_iou < neg_iou, -1, 0)
    for k in range(1, c + 1):
        y[is_gt_of == k, k - 1] = 1
    return y


def train_svms(feats: np.ndarray, targets: np.ndarray, lam: float = 1e-3, iterations: int = 300) -> LinearSVMs:
    feats = np.asarray(feats, dtype=np.float64)
    mean = feats.mean(axis=0)
    scale = feats.std(axis=0)
    scale = np.where(scale > 1e-8, scale, 1.0)
    x = (feats - mean) / scale
    n_classes = targets.shape[1]
    w = np.zeros((x.shape[1], n_classes))
    b = np.zeros(n_classes)
    active = np.zeros(n_classes, dtype=bool)
    for k in range(n_classes):
        use = targets[:, k] != 0
        if not (targets[:, k] == 1).any():
            log.warning("class %d has no positive examples; its SVM is skipped", k + 1)
            continue
        w[:, k], b[k] = fit_linear_svm(x[use], targets[use, k], lam, iterations)
        active[k] = True
    return LinearSVMs(mean, scale, w, b, active)


def class_ious(boxes: np.ndarray, gt_boxes: np.ndarray, gt_classes: np.ndarray, n_classes: int) -> np.ndarray:
    """``(n, C)`` max IoU of each window with the gts of each class (0 if none)."""
    out = np.zeros((len(boxes), n_classes))
    if len(gt_boxes) and len(boxes):
        ious = iou_matrix(boxes, gt_boxes)
        for k in range(1, n_classes + 1):
            m = gt_classes == k
            if m.any():
                out[:, k - 1] = ious[:, m].max(axis=1)
    return out


# --------------------------------------------------------------------------
# SVM / test windows


@dataclass
class SvmWindows:
    """Training windows for the SVMs and box regressors: every ground truth plus
    jittered and random proposals, with per-class SVM targets and, for windows
    overlapping a gt by at least the regression threshold, that gt and its class."""

    scene_idx: np.ndarray
    boxes: np.ndarray
    targets: np.ndarray  # (n, C) in {+1, -1, 0}
    bbox_gt: np.ndarray  # (n, 4)
    bbox_cls: np.ndarray  # (n,), 0 = not a regression example


def svm_windows(scenes, seed: int, n_jitter: int, n_random: int, n_classes: int, neg_iou: float = 0.3,
                bbox_iou: float = 0.6, salt: int = 1) -> SvmWindows:
    idx, boxes, gt_of, cls_iou, bbox_gt, bbox_cls = [], [], [], [], [], []
    for i, s in enumerate(scenes):
        prop = scene_proposals(s, seed, n_jitter, n_random, salt=salt)
        cand = np.concatenate([s.boxes, prop])
        idx.append(np.full(len(cand), i, dtype=np.intp))
        boxes.append(cand)
        gt_of.append(np.concatenate([s.classes, np.zeros(len(prop), dtype=np.int64)]))
        cls_iou.append(class_ious(cand, s.boxes, s.classes, n_classes))
        matched, best = match_array(cand, s.boxes)
        j = np.maximum(matched, 0)
        bbox_gt.append(s.boxes[j])
        bbox_cls.append(np.where(best >= bbox_iou, s.classes[j], 0))
    return SvmWindows(np.concatenate(idx), np.concatenate(boxes),
                      svm_targets(np.concatenate(cls_iou), np.concatenate(gt_of), neg_iou),
                      np.concatenate(bbox_gt), np.concatenate(bbox_cls).astype(np.int64))


def detection_windows(scenes, seed: int, n_jitter: int, n_random: int, salt: int = 2):
    """Test-time proposals (no ground truths): ``(scene_idx, boxes, scene_ids)``."""
    idx, boxes = [], []
    for i, s in enumerate(scenes):
        prop = scene_proposals(s, seed, n_jitter, n_random, salt=salt)
        idx.append(np.full(len(prop), i, dtype=np.intp))
        boxes.append(prop)
    idx = np.concatenate(idx) if idx else np.zeros(0, dtype=np.intp)
    boxes = np.concatenate(boxes).reshape(-1, 4) if boxes else np.zeros((0, 4))
    ids = np.array([s.id for s in scenes], dtype=np.int64)
    return idx, boxes, ids[idx]


# --------------------------------------------------------------------------
# box regression


@dataclass
class BoxRegressors:
    """Per-class ridge maps from standardised features (plus bias) to RelLoc."""

    mean: np.ndarray
    scale: np.ndarray
    coef: np.ndarray  # (C, d + 1, 4); last row is the bias
    active: np.ndarray

    def predict(self, feats: np.ndarray, classes: np.ndarray) -> np.ndarray:
        x = (np.asarray(feats, dtype=np.float64) - self.mean) / self.scale
        x = np.hstack([x, np.ones((len(x), 1))])
        out = np.zeros((len(x), 4))
        for k in range(len(self.coef)):
            m = np.asarray(classes) == k + 1
            if m.any() and self.active[k]:
                out[m] = x[m] @ self.coef[k]
        return out

    def to_json(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("mean", "scale", "coef", "active")}

    @classmethod
    def from_json(cls, d: dict) -> "BoxRegressors":
        return cls(*(np.array(d[k], dtype=np.float64) for k in ("mean", "scale", "coef")),
                   np.array(d["active"], dtype=bool))


def ridge(x: np.ndarray, y: np.ndarray, alpha: float, max_tries: int = 8) -> np.ndarray:
    """Closed-form ridge with a bias column appended to ``x`` (penalised too)."""
    xb = np.hstack([x, np.ones((len(x), 1))])
    a = xb.T @ xb
    rhs = xb.T @ y
    for _ in range(max_tries):
        try:
            lower = np.linalg.cholesky(a + alpha * np.eye(len(a)))
            return np.linalg.solve(lower.T, np.linalg.solve(lower, rhs))
        except np.linalg.LinAlgError:
            alpha = max(alpha * 10.0, 1e-8)
            log.warning("singular ridge system; raising the ridge to %g", alpha)
    raise np.linalg.LinAlgError("ridge system stayed singular")


def train_bbox_regressors(feats: np.ndarray, boxes: np.ndarray, gt_boxes: np.ndarray, classes: np.ndarray,
                          n_classes: int, alpha: float = 1.0, mean=None, scale=None) -> BoxRegressors:
    """``feats``/``boxes`` are positive windows (IoU >= 0.6 with ``gt_boxes`` of ``classes``)."""
    feats = np.asarray(feats, dtype=np.float64)
    d = feats.shape[1]
    mean = feats.mean(axis=0) if mean is None else mean
    if scale is None:
        scale = feats.std(axis=0) if len(feats) else np.ones(d)
        scale = np.where(scale > 1e-8, scale, 1.0)
    x = (feats - mean) / scale
    targets = rel_loc_array(boxes, gt_boxes) if len(boxes) else np.zeros((0, 4))
    coef = np.zeros((n_classes, d + 1, 4))
    active = np.zeros(n_classes, dtype=bool)
    for k in range(1, n_classes + 1):
        m = classes == k
        if not m.any():
            log.warning("class %d has no regression examples", k)
            continue
        coef[k - 1] = ridge(x[m], targets[m], alpha)
        active[k - 1] = True
    return BoxRegressors(np.asarray(mean, dtype=np.float64), np.asarray(scale, dtype=np.float64), coef, active)
