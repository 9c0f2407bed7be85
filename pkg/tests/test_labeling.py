import json

import numpy as np
import pytest

from wordet.clustering import ClusterModel
from wordet.geometry import Box, apply_rel_loc_array, iou, rel_loc, rel_loc_array
from wordet.labeling import (ClassOnlyClusters, ClusterSet, ConfigurationError, LabelBatch, SampleLabel,
                             WindowObjectClusters, fit_layout, fit_window_object, gen_proposals, label_candidates,
                             make_label, match_array, match_gt, neighbour_rel_locs, positive_rel_locs,
                             read_labels, write_labels)
from wordet.pipeline import build_pool, scene_candidates
from wordet.synthdata import DataConfig, generate

WO = WindowObjectClusters({0: ClusterModel(np.array([[0.0, 0, 0, 0], [0.3, 0, 0, 0], [0, 0.3, 0, 0]]))},
                          pooled=True)
# layout exemplars: neighbour above, below, right
LAYOUT = ClusterModel(np.array([[0.0, 1.0, 0, 0], [0.0, -1.0, 0, 0], [-1.0, 0, 0, 0]]), kind="layout")


def test_sample_label_invariants():
    SampleLabel(0, 0, None, (0, 0))
    with pytest.raises(ValueError):
        SampleLabel(0, 2, None, ())
    with pytest.raises(ValueError):
        SampleLabel(1, 0, None, ())
    with pytest.raises(ValueError):
        SampleLabel(1, 1, None, ())


def test_match_gt_examples():
    a, b = Box(10, 10, 10, 10), Box(40, 40, 10, 10)
    assert match_gt(a, [(a, 2), (b, 3)]) == (a, 2)
    assert match_gt(Box(0, 0, 1, 1), []) is None
    # two overlapping gts, IoU 0.6 vs 0.8 (widths chosen by hand)
    cand = Box(10, 10, 10, 10)
    g6 = Box(10, 10, 10, 6)
    g8 = Box(10, 10, 10, 8)
    assert iou(cand, g6) == pytest.approx(0.6) and iou(cand, g8) == pytest.approx(0.8)
    assert match_gt(cand, [(g6, 1), (g8, 4)]) == (g8, 4)


def test_match_threshold_is_inclusive():
    cand = Box(10, 10, 10, 10)
    assert match_gt(cand, [(Box(10, 10, 10, 4.9), 1)]) is None  # IoU 0.49
    assert match_gt(cand, [(Box(10, 10, 10, 5), 1)]) is not None  # IoU exactly 0.5


def test_match_array_scan_oracle():
    rng = np.random.default_rng(0)
    cands = np.column_stack([rng.uniform(0, 40, (60, 2)), rng.uniform(4, 20, (60, 2))])
    gts = np.column_stack([rng.uniform(0, 40, (5, 2)), rng.uniform(4, 20, (5, 2))])
    matched, best = match_array(cands, gts)
    for i, c in enumerate(cands):
        vals = [iou(Box(*c), Box(*g)) for g in gts]
        j = int(np.argmax(vals))
        assert best[i] == pytest.approx(vals[j], abs=1e-12)
        assert matched[i] == (j if vals[j] >= 0.5 else -1)


def test_single_gt_label():
    g = Box(30, 30, 12, 12)
    lab = make_label(g, [(g, 3)], WO, LAYOUT)
    assert lab.class_id == 3
    assert lab.cluster_id == 1
    assert lab.loc_target.as_array().tolist() == [0, 0, 0, 0]
    assert lab.layout_labels == (0, 0, 0)


def test_neighbour_above_sets_one_layout_label():
    a = Box(30, 40, 10, 10)
    b = Box(30, 30, 10, 10)  # directly above a (y points down)
    lab = make_label(a, [(a, 1), (b, 2)], WO, LAYOUT)
    r = rel_loc(a, b).as_array()
    k = int(np.argmin(((LAYOUT.exemplars - r) ** 2).sum(axis=1)))
    expected = [0, 0, 0]
    expected[k] = 2
    assert list(lab.layout_labels) == expected
    assert k == 0


def test_nearer_neighbour_wins_shared_layout_cluster():
    a = Box(30, 40, 10, 10)
    near = Box(30, 30, 10, 10)  # rel (0, 1, 0, 0), exactly the exemplar
    far = Box(30, 25, 10, 10)  # rel (0, 1.5, 0, 0)
    lab = make_label(a, [(a, 1), (far, 4), (near, 2)], WO, LAYOUT)
    assert lab.layout_labels == (2, 0, 0)
    lab = make_label(a, [(a, 1), (near, 2), (far, 4)], WO, LAYOUT)
    assert lab.layout_labels == (2, 0, 0)


def test_background_candidates_see_all_gts():
    b = Box(30, 30, 10, 10)
    lab = make_label(Box(30, 40, 10, 10), [(b, 2)], WO, LAYOUT)
    assert lab.class_id == 0 and lab.cluster_id == 0 and lab.loc_target is None
    assert lab.layout_labels == (2, 0, 0)


def test_unfitted_models_are_a_configuration_error():
    g = Box(1, 1, 1, 1)
    with pytest.raises(ConfigurationError):
        make_label(g, [(g, 1)], None, LAYOUT)
    with pytest.raises(ConfigurationError):
        make_label(g, [(g, 1)], WO, None)


def test_make_label_is_pure():
    a, b = Box(30, 40, 10, 10), Box(33, 31, 9, 11)
    gts = [(a, 1), (b, 2)]
    assert make_label(Box(31, 41, 11, 9), gts, WO, LAYOUT) == make_label(Box(31, 41, 11, 9), gts, WO, LAYOUT)


def test_proposal_examples():
    g = [Box(20, 20, 10, 10)]
    assert gen_proposals(g, 0, 0, 0, 96).shape == (0, 4)
    copies = gen_proposals(g, 0, 5, 0, 96, max_offset=0.0, max_log_scale=0.0)
    assert np.array_equal(copies, np.tile([20, 20, 10, 10], (5, 1)))
    a = gen_proposals(g, 9, 7, 4, 96)
    assert np.array_equal(a, gen_proposals(g, 9, 7, 4, 96))
    assert np.all((a[:, :2] >= 0) & (a[:, :2] <= 96))
    assert np.all(a[7:, 2:] >= 8) and np.all(a[7:, 2:] <= 48)
    with pytest.raises(ValueError):
        gen_proposals(g, 0, -1, 0, 96)


def test_jitter_positive_supply():
    # Independent estimate for a unit box under the default bounds (offsets
    # +-0.4 of the size, log-scales +-ln 1.6 per axis): about 0.293, a touch
    # under 0.3. Scene clipping barely moves it.
    rng = np.random.default_rng(0)
    n = 400_000
    off = rng.uniform(-0.4, 0.4, (n, 2))
    sc = np.exp(rng.uniform(-np.log(1.6), np.log(1.6), (n, 2)))
    iw = np.clip(np.minimum(off + sc / 2, 0.5) - np.maximum(off - sc / 2, -0.5), 0, None)
    inter = iw[:, 0] * iw[:, 1]
    expected = (inter / (1 + sc[:, 0] * sc[:, 1] - inter) >= 0.5).mean()

    ds = generate(DataConfig(n_scenes=400, seed=1))
    hits = total = 0
    for s in ds.scenes:
        for k, g in enumerate(s.boxes):
            props = gen_proposals([g], [s.id, k], 10, 0, s.size)
            hits += int((np.array([iou(Box(*p), Box(*g)) for p in props]) >= 0.5).sum())
            total += len(props)
    assert abs(hits / total - expected) < 0.02
    assert hits / total > 0.25


@pytest.fixture(scope="module")
def fitted():
    ds = generate(DataConfig(n_scenes=300, seed=2))
    cands = scene_candidates(ds.scenes, 2, 8, 8)
    cls, locs = positive_rel_locs(cands, ds.scenes)
    wo = fit_window_object(cls, locs, 4, seed=2)
    lay = fit_layout(ds.scenes, seed=2)
    return ds, cands, ClusterSet(wo, lay)


def test_labels_over_generated_dataset_satisfy_invariants(fitted):
    ds, cands, clusters = fitted
    pool = build_pool(ds.scenes, cands, clusters)
    k = clusters.layout.n_clusters
    assert pool.labels.layout_labels.shape == (len(pool), k)
    for i in range(len(pool)):
        lab = pool.labels.record(i)  # constructor re-checks the invariants
        assert len(lab.layout_labels) == k
        assert 0 <= lab.cluster_id <= clusters.window_object.n_clusters
    pos = pool.positives
    s_idx = pool.scene_idx[pos]
    back = apply_rel_loc_array(pool.boxes[pos], pool.labels.loc_targets[pos])
    for j, i in enumerate(pos):
        s = ds.scenes[s_idx[j]]
        matched, _ = match_array(pool.boxes[i][None], s.boxes)
        assert np.allclose(back[j], s.boxes[matched[0]], atol=1e-9)


def test_window_object_clusters_fit_per_class(fitted):
    _, _, clusters = fitted
    wo = clusters.window_object
    assert not wo.pooled
    assert set(wo.models) == {1, 2, 3, 4}
    for m in wo.models.values():
        assert 3 <= m.n_clusters <= 6


def test_layout_has_an_above_neighbour_cluster(fitted):
    _, _, clusters = fitted
    # rel_loc(window, neighbour) has positive dy when the neighbour is above;
    # the ordered pairs are symmetric, so the mirrored cluster (dy < 0) exists too
    assert (clusters.layout.exemplars[:, 1] < 0).any()
    assert (clusters.layout.exemplars[:, 1] > 0).any()


def test_small_classes_fall_back_to_pooled():
    rng = np.random.default_rng(0)
    cls = np.repeat([1, 2, 3, 4], [80, 80, 80, 10])
    wo = fit_window_object(cls, rng.standard_normal((250, 4)) * 0.2, 4)
    assert wo.pooled and set(wo.models) == {0}
    ids = wo.assign(cls, rng.standard_normal((250, 4)))
    assert ids.min() >= 1 and ids.max() <= wo.n_clusters


def test_stacked_cluster_ids():
    m1 = ClusterModel(np.zeros((2, 4)) + [[0, 0, 0, 0], [1, 0, 0, 0]])
    m2 = ClusterModel(np.array([[0.0, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0]]))
    wo = WindowObjectClusters({1: m1, 2: m2})
    assert wo.n_clusters == 5
    ids = wo.assign(np.array([1, 1, 2, 2, 0]), np.array([[0, 0, 0, 0], [1, 0, 0, 0], [0, 0, 0, 0], [0, 0, 1, 0],
                                                         [0, 0, 0, 0]], dtype=float))
    assert ids.tolist() == [1, 2, 3, 5, 0]


def test_class_only_clusters():
    co = ClassOnlyClusters(4)
    assert co.n_clusters == 4
    assert co.assign(np.array([0, 3, 1]), np.zeros((3, 4))).tolist() == [0, 3, 1]


def test_neighbour_pairs_are_ordered_both_ways():
    ds = generate(DataConfig(n_scenes=20, seed=3))
    pts = neighbour_rel_locs(ds.scenes)
    assert len(pts) == sum(len(s.objects) * (len(s.objects) - 1) for s in ds.scenes)


def test_cluster_set_round_trip(tmp_path, fitted):
    _, _, clusters = fitted
    clusters.save(tmp_path / "c.json")
    back = ClusterSet.load(tmp_path / "c.json")
    assert back.window_object.n_clusters == clusters.window_object.n_clusters
    assert np.array_equal(back.layout.exemplars, clusters.layout.exemplars)
    co = ClusterSet(ClassOnlyClusters(4), clusters.layout)
    co.save(tmp_path / "co.json")
    assert isinstance(ClusterSet.load(tmp_path / "co.json").window_object, ClassOnlyClusters)


def test_labels_jsonl_round_trip(tmp_path):
    cands = np.array([[30, 40, 10, 10], [80, 80, 5, 5]], dtype=float)
    gts = np.array([[30, 40, 10, 10], [30, 30, 10, 10]], dtype=float)
    labels = label_candidates(cands, gts, np.array([1, 2]), WO, LAYOUT)
    write_labels(tmp_path / "l.jsonl", np.array([7, 7]), cands, labels)
    rec = [json.loads(x) for x in (tmp_path / "l.jsonl").read_text().splitlines()]
    assert rec[0]["class_id"] == 1 and rec[1]["loc_target"] is None
    ids, boxes, back = read_labels(tmp_path / "l.jsonl")
    assert ids.tolist() == [7, 7]
    assert np.array_equal(boxes, cands)
    for f in ("class_ids", "cluster_ids", "loc_targets", "layout_labels"):
        assert np.array_equal(getattr(back, f), getattr(labels, f))
    assert isinstance(back, LabelBatch)
