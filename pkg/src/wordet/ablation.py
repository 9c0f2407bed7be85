"""Ablation grids: train the requested stage combinations for one seed, sharing
every checkpoint two variants have in common, and evaluate each variant with
its own SVMs.

A variant is described by the crop specs of its branches, the stages it runs
before joint finetuning and a few switches (class-only regression targets,
independent initial seeds, parameter sharing).
"""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import labeling
from .config import RunConfig
from .detection import evaluate, nms_per_group, score_proposals
from .geometry import DETECTION_SPECS, MULTI_SCALE_SPECS, SINGLE_SPEC, CropSpec
from .labeling import ClassOnlyClusters, ClusterSet
from .net import Arch
from .pipeline import (FeatureExtractor, GroundTruths, ImageStack, build_pool, run_stage_a, run_stage_b,
                       run_stage_c, run_stage_d, scene_candidates, detection_windows, svm_windows,
                       train_bbox_regressors, train_svms)
from .synthdata import CLASS_NAMES, generate

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Variant:
    name: str
    specs: tuple
    stages: str = "ad"  # subset of "abcd"; a and d are always present
    clustered: bool = True  # False: one regressor per class instead of per cluster
    independent_seeds: bool = False  # every branch gets its own stage-a initialisation
    shared_from: str = ""  # reuse this variant's first branch at every spec, no retraining

    def __post_init__(self):
        if not self.shared_from and not ({"a", "d"} <= set(self.stages) <= set("abcd")):
            raise ValueError(f"{self.name}: stages must include a and d, got {self.stages!r}")
        if "c" in self.stages and "b" not in self.stages:
            raise ValueError(f"{self.name}: stage c needs stage b")


def _multi(*scales):
    return tuple(CropSpec(0, s) for s in scales)


S12 = (SINGLE_SPEC,)
SIX = DETECTION_SPECS
FOUR = MULTI_SCALE_SPECS

GRIDS = {
    "supervision": (
        Variant("(1) a+d single", S12, "ad"),
        Variant("(2) a+d six independent 1.2", (SINGLE_SPEC,) * 6, "ad", independent_seeds=True),
        Variant("(3) a+d multi", SIX, "ad"),
        Variant("(4) a+b+c+d single", S12, "abcd"),
        Variant("(5) a+b+d multi", SIX, "abd"),
        Variant("(6) a+b+c+d multi", SIX, "abcd"),
    ),
    "clustering": (
        Variant("a+d single", S12, "ad"),
        Variant("a+b+d single no-cluster", S12, "abd", clustered=False),
        Variant("a+b+d single cluster", S12, "abd"),
    ),
    "context": (
        Variant("1.2", S12, "abd"),
        Variant("1.2+0.8", _multi(1.2, 0.8), "abd"),
        Variant("1.2+1.8", _multi(1.2, 1.8), "abd"),
        Variant("1.2+2.7", _multi(1.2, 2.7), "abd"),
        Variant("0.8+1.2+1.8", _multi(0.8, 1.2, 1.8), "abd"),
        Variant("0.8+1.2+1.8+2.7", FOUR, "abd"),
        Variant("shared", FOUR, shared_from="1.2"),
    ),
    "rotation": (
        Variant("r0 s1.2", S12, "abd"),
        Variant("r0,45,90 s1.2", (CropSpec(0, 1.2), CropSpec(45, 1.2), CropSpec(90, 1.2)), "abd"),
        Variant("r0 four scales", FOUR, "abd"),
        Variant("six specs", SIX, "abd"),
    ),
    # exactly what the directional acceptance checks compare
    "acceptance": (
        Variant("a+d single", S12, "ad"),
        Variant("a+d multi", SIX, "ad"),
        Variant("a+b+d multi", SIX, "abd"),
        Variant("a+b+c+d multi", SIX, "abcd"),
        Variant("a+b+d single no-cluster", S12, "abd", clustered=False),
        Variant("a+b+d single cluster", S12, "abd"),
        Variant("a+b+d four scales", FOUR, "abd"),
        Variant("shared four scales", FOUR, shared_from="a+b+d single cluster"),
    ),
}


@dataclass
class VariantResult:
    name: str
    seed: int
    mean_ap: float
    median_ap: float
    ap: list
    seconds: float


# --------------------------------------------------------------------------
# per-seed state


@dataclass
class SeedRun:
    """Data, labels and a checkpoint cache for one seed of an ablation grid."""

    cfg: RunConfig
    seed: int
    refine: bool = False
    cache: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def __post_init__(self):
        t0 = time.perf_counter()
        cfg, seed = self.cfg, self.seed
        d = cfg.data
        data = generate(d.data_config(d.n_train + d.n_test, seed))
        self.train = data.scenes[: d.n_train]
        self.test = data.scenes[d.n_train:]
        self.n_classes = d.n_classes
        self.class_names = list(CLASS_NAMES[: d.n_classes])
        self.train_images = ImageStack.from_scenes(self.train)
        self.test_images = ImageStack.from_scenes(self.test)
        self.gts = GroundTruths.from_scenes(self.train)
        st = cfg.stages
        self.arch = Arch(st.in_size, st.c1, st.c2, st.feature_dim)
        self.dtype = np.dtype(st.dtype)
        self.timings["data"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        self.clusters = fit_clusters(cfg, self.train, seed)
        cc = cfg.cluster
        cands = scene_candidates(self.train, seed, cc.n_jitter, cc.n_random)
        self.pool = build_pool(self.train, cands, self.clusters)
        self.class_pool = build_pool(self.train, cands, ClusterSet(ClassOnlyClusters(self.n_classes),
                                                                    self.clusters.layout))
        self._svm_windows()
        self._test_windows()
        self.timings["labels"] = time.perf_counter() - t0

    # ---- windows for SVMs and testing

    def _svm_windows(self):
        sv = self.cfg.svm
        w = svm_windows(self.train, self.seed, sv.n_jitter, sv.n_random, self.n_classes, sv.neg_iou, sv.bbox_iou)
        self.svm_idx, self.svm_boxes, self.svm_targets = w.scene_idx, w.boxes, w.targets
        self.bbox_gt, self.bbox_cls = w.bbox_gt, w.bbox_cls

    def _test_windows(self):
        dc = self.cfg.detect
        self.test_idx, self.test_boxes, self.test_scene_ids = detection_windows(
            self.test, self.seed, dc.n_jitter, dc.n_random)

    # ---- cached stages

    def _timed(self, key, fn):
        if key not in self.cache:
            t0 = time.perf_counter()
            self.cache[key] = fn()
            self.timings[str(key)] = time.perf_counter() - t0
        return self.cache[key]

    def stage_a(self, spec: CropSpec, init_seed=None):
        st = self.cfg.stages
        return self._timed(("a", spec, init_seed), lambda: run_stage_a(
            self.train_images, self.gts, spec, st.a, self.seed, self.n_classes, self.arch,
            init_seed=init_seed, dtype=self.dtype)[0])

    def stage_b(self, spec: CropSpec, clustered: bool, init_seed=None):
        st = self.cfg.stages
        pool = self.pool if clustered else self.class_pool
        n = self.clusters.window_object.n_clusters if clustered else self.n_classes
        return self._timed(("b", spec, clustered, init_seed), lambda: run_stage_b(
            self.train_images, pool, spec, st.b, self.seed, self.stage_a(spec, init_seed), n)[0])

    def stage_c(self, spec: CropSpec, clustered: bool, init_seed=None):
        st = self.cfg.stages
        pool = self.pool if clustered else self.class_pool
        n = self.clusters.window_object.n_clusters if clustered else self.n_classes
        return self._timed(("c", spec, clustered, init_seed), lambda: run_stage_c(
            self.train_images, pool, spec, st.c, self.seed, self.stage_b(spec, clustered, init_seed), n,
            self.clusters.layout.n_clusters, self.n_classes)[0])

    def branch_inits(self, v: Variant):
        out = []
        for i, spec in enumerate(v.specs):
            init_seed = [self.seed, 7919, i] if v.independent_seeds else None
            init_seed = None if init_seed is None else int(np.random.default_rng(init_seed).integers(2**63))
            if "c" in v.stages:
                out.append(self.stage_c(spec, v.clustered, init_seed))
            elif "b" in v.stages:
                out.append(self.stage_b(spec, v.clustered, init_seed))
            else:
                out.append(self.stage_a(spec, init_seed))
        return out

    def extractor(self, v: Variant, grid: dict) -> FeatureExtractor:
        if v.shared_from:
            base = self.extractor(grid[v.shared_from], grid)
            return FeatureExtractor([base.branches[0]] * len(v.specs), list(v.specs))

        def train():
            joint, _ = run_stage_d(self.train_images, self.pool, self.branch_inits(v), v.specs,
                                   self.cfg.stages.d, self.seed, self.n_classes)
            return FeatureExtractor.from_joint(joint, v.specs)

        return self._timed(("d", v.name), train)

    # ---- evaluation

    def evaluate_variant(self, v: Variant, grid: dict) -> VariantResult:
        t0 = time.perf_counter()
        ext = self.extractor(v, grid)
        sv = self.cfg.svm
        f_train = ext.extract(self.train_images, self.svm_idx, self.svm_boxes)
        svms = train_svms(f_train, self.svm_targets, sv.lam, sv.iterations)
        regs = None
        if self.refine:
            m = self.bbox_cls > 0
            regs = train_bbox_regressors(f_train[m], self.svm_boxes[m], self.bbox_gt[m], self.bbox_cls[m],
                                         self.n_classes, sv.bbox_alpha, svms.mean, svms.scale)
        f_test = ext.extract(self.test_images, self.test_idx, self.test_boxes)
        dets = score_proposals(self.test_scene_ids, self.test_boxes, f_test, svms, regs)
        dets = nms_per_group(dets, self.cfg.detect.nms_iou)
        rep = evaluate(dets, self.test, self.class_names, self.cfg.eval.iou)
        return VariantResult(v.name, self.seed, rep.mean_ap, rep.median_ap, rep.ap.tolist(),
                             time.perf_counter() - t0)


def fit_clusters(cfg: RunConfig, scenes, seed: int) -> ClusterSet:
    cc = cfg.cluster
    cands = scene_candidates(scenes, seed, cc.n_jitter, cc.n_random)
    cls, locs = labeling.positive_rel_locs(cands, scenes)
    wo = labeling.fit_window_object(cls, locs, cfg.data.n_classes, tuple(cc.window_object_range),
                                    cc.min_per_class, cc.max_points, seed, cc.damping, cc.max_iter, cc.stable_iter)
    lay = labeling.fit_layout(scenes, tuple(cc.layout_range), cc.max_points, seed, cc.damping, cc.max_iter,
                              cc.stable_iter)
    return ClusterSet(wo, lay)


def run_grid(cfg: RunConfig, grid: str, seeds, names=None, progress=None) -> list[VariantResult]:
    """Every variant of ``grid`` for every seed; ``names`` restricts the variants."""
    if grid not in GRIDS:
        raise ValueError(f"unknown grid {grid!r}; choose from {', '.join(GRIDS)}")
    variants = {v.name: v for v in GRIDS[grid]}
    chosen = [v for v in GRIDS[grid] if names is None or v.name in names]
    results = []
    for seed in seeds:
        run = SeedRun(cfg.with_seed(seed), seed, refine=cfg.ablate.refine)
        for v in chosen:
            r = run.evaluate_variant(v, variants)
            results.append(r)
            if progress:
                progress(r)
    return results


def summary_rows(results: list[VariantResult]) -> list[dict]:
    """Per variant: mean over seeds of the mAP and of the median AP."""
    order, by = [], {}
    for r in results:
        if r.name not in by:
            order.append(r.name)
            by[r.name] = []
        by[r.name].append(r)
    rows = []
    for name in order:
        rs = by[name]
        rows.append({
            "config": name,
            "seeds": len(rs),
            "mean_ap": float(np.mean([r.mean_ap for r in rs])),
            "median_ap": float(np.mean([r.median_ap for r in rs])),
            "mean_ap_std": float(np.std([r.mean_ap for r in rs])),
        })
    return rows


def summary_csv(results: list[VariantResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["config", "seeds", "mean_ap", "median_ap", "mean_ap_std"])
    for row in summary_rows(results):
        w.writerow([row["config"], row["seeds"], f"{row['mean_ap']:.6f}", f"{row['median_ap']:.6f}",
                    f"{row['mean_ap_std']:.6f}"])
    return buf.getvalue()


def per_seed_csv(results: list[VariantResult], class_names) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["config", "seed", "mean_ap", "median_ap", *[f"ap_{c}" for c in class_names]])
    for r in results:
        w.writerow([r.name, r.seed, f"{r.mean_ap:.6f}", f"{r.median_ap:.6f}", *[f"{a:.6f}" for a in r.ap]])
    return buf.getvalue()
