"""Command-line workflow.

Every subcommand reads and writes inside one run directory (``--out``)::

    data/{train,test}/          gen-data
    clusters.json               cluster
    labels/train.jsonl          make-labels
    ckpt/{a,b,c}/<spec>.ckpt    train --stage a|b|c
    ckpt/d/joint.ckpt           train --stage d
    features/{train,test}/      extract-features
    svm.json, bbox.json         train-svm, train-bbox
    detections.jsonl            detect
    eval/                       eval, plot
    ablate/                     ablate
    manifests/<command>.json    every subcommand

Exit codes: 0 success, 1 usage or configuration error, 2 missing prerequisite,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

log = logging.getLogger("wordet")

EXIT_OK, EXIT_CONFIG, EXIT_PREREQ, EXIT_NUMERIC = 0, 1, 2, 3
VERSION = "0.1.0"


class MissingPrerequisite(RuntimeError):
    """An input artifact is absent; the message names the subcommand that makes it."""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; 2 is reserved for missing prerequisites here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --------------------------------------------------------------------------
# run directory helpers


class RunDir:
    def __init__(self, root):
        self.root = Path(root)

    def __truediv__(self, rel):
        return self.root / rel

    def require(self, rel: str, make: str) -> Path:
        p = self.root / rel
        if not p.exists():
            raise MissingPrerequisite(f"{p} not found; run `wordet {make}` first")
        return p

    def rel(self, p) -> str:
        p = Path(p)
        try:
            return str(p.relative_to(self.root))
        except ValueError:
            return str(p)


def _digest(path: Path) -> str:
    h = hashlib.sha256()
    files = sorted(q for q in path.rglob("*") if q.is_file()) if path.is_dir() else [path]
    for q in files:
        if path.is_dir():
            h.update(str(q.relative_to(path)).encode())
        h.update(q.read_bytes())
    return h.hexdigest()


def write_manifest(run: RunDir, name: str, cfg, args, inputs=(), outputs=(), extra=None) -> Path:
    """Everything needed to re-run ``name``: config (and its hash), seed, options, input digests."""
    options = {k: v for k, v in sorted(vars(args).items()) if k not in ("out", "func", "config", "command")}
    doc = {
        "command": name,
        "tool_version": VERSION,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "options": options,
        "inputs": {run.rel(p): _digest(Path(p)) for p in inputs},
        "outputs": sorted(run.rel(p) for p in outputs),
    }
    if extra:
        doc.update(extra)
    out = run / "manifests" / f"{name}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return out


def _save_arrays(directory: Path, **arrays) -> list:
    import numpy as np
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    for k, v in arrays.items():
        np.save(directory / f"{k}.npy", np.ascontiguousarray(v))
        out.append(directory / f"{k}.npy")
    return out


def _load_arrays(directory: Path, *names) -> list:
    import numpy as np
    return [np.load(directory / f"{k}.npy") for k in names]


def _load_split(run: RunDir, split: str):
    from .synthdata import load_dataset
    return load_dataset(run.require(f"data/{split}", "gen-data")).scenes


def _n_classes(cfg):
    return cfg.data.n_classes


def _arch(cfg):
    from .net import Arch
    st = cfg.stages
    return Arch(st.in_size, st.c1, st.c2, st.feature_dim)


def _selected_specs(cfg, args):
    specs = cfg.stages.specs()
    if getattr(args, "spec", None):
        from .geometry import CropSpec
        want = [CropSpec.from_tag(t) for t in args.spec]
        missing = [s.tag for s in want if s not in specs]
        if missing:
            from .config import ConfigError
            raise ConfigError(f"--spec {', '.join(missing)} not in stages.crop_specs")
        specs = tuple(s for s in specs if s in want)
    return specs


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg, args, run: RunDir) -> int:
    from .synthdata import Dataset, generate, save_dataset
    d = cfg.data
    data = generate(d.data_config(d.n_train + d.n_test, cfg.seed))
    outs = []
    for split, scenes in (("train", data.scenes[: d.n_train]), ("test", data.scenes[d.n_train:])):
        ids = {s.id for s in scenes}
        save_dataset(Dataset(data.config, scenes, [k for k in data.skipped if k["scene"] in ids]),
                     run / "data" / split, {"split": split, "seed": cfg.seed})
        outs.append(run / "data" / split)
    write_manifest(run, "gen-data", cfg, args, outputs=outs)
    log.info("wrote %d train and %d test scenes", d.n_train, d.n_test)
    return EXIT_OK


def cmd_cluster(cfg, args, run: RunDir) -> int:
    from .ablation import fit_clusters
    train = _load_split(run, "train")
    clusters = fit_clusters(cfg, train, cfg.seed)
    clusters.save(run / "clusters.json")
    write_manifest(run, "cluster", cfg, args, [run / "data/train"], [run / "clusters.json"],
                   {"window_object_clusters": clusters.window_object.n_clusters,
                    "layout_clusters": clusters.layout.n_clusters})
    log.info("%d window-object clusters, %d layout clusters", clusters.window_object.n_clusters,
             clusters.layout.n_clusters)
    return EXIT_OK


def cmd_make_labels(cfg, args, run: RunDir) -> int:
    import numpy as np
    from .labeling import ClusterSet, write_labels
    from .pipeline import build_pool, scene_candidates
    train = _load_split(run, "train")
    clusters = ClusterSet.load(run.require("clusters.json", "cluster"))
    cc = cfg.cluster
    pool = build_pool(train, scene_candidates(train, cfg.seed, cc.n_jitter, cc.n_random), clusters)
    out = run / "labels" / "train.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    ids = np.array([s.id for s in train], dtype=np.int64)[pool.scene_idx]
    write_labels(out, ids, pool.boxes, pool.labels)
    write_manifest(run, "make-labels", cfg, args, [run / "data/train", run / "clusters.json"], [out],
                   {"candidates": len(pool), "positives": int(len(pool.positives))})
    log.info("labelled %d candidates (%d positive)", len(pool), len(pool.positives))
    return EXIT_OK


def _load_pool(run: RunDir, train):
    import numpy as np
    from .pipeline import CandidatePool
    from .labeling import read_labels
    ids, boxes, labels = read_labels(run.require("labels/train.jsonl", "make-labels"))
    index = {s.id: i for i, s in enumerate(train)}
    try:
        idx = np.array([index[int(i)] for i in ids], dtype=np.intp)
    except KeyError as e:
        raise MissingPrerequisite(f"labels refer to scene {e} absent from data/train; "
                                  "run `wordet make-labels` again") from e
    return CandidatePool(idx, boxes, labels)


def _write_history(path: Path, hist) -> None:
    keys = ["total", "cls", "loc", "layout", "classify"]
    lines = ["iteration," + ",".join(keys)]
    for i, d in enumerate(hist.losses):
        d = dict(d, layout=sum(d.get("layout", [])))
        lines.append(f"{i}," + ",".join(repr(float(d.get(k, 0.0))) for k in keys))
    path.write_text("\n".join(lines) + "\n")


def cmd_train(cfg, args, run: RunDir) -> int:
    import numpy as np
    from .labeling import ClusterSet
    from .net import load_branch, save_branch, save_joint
    from .pipeline import (PREREQUISITES, GroundTruths, ImageStack, check_prerequisite, run_stage_a,
                           run_stage_b, run_stage_c, run_stage_d)
    stage = args.stage
    st = cfg.stages
    train = _load_split(run, "train")
    images = ImageStack.from_scenes(train, dtype=np.dtype(st.dtype))
    inputs, outputs = [run / "data/train"], []
    specs = _selected_specs(cfg, args)
    n_classes = _n_classes(cfg)

    if stage == "d":
        branches, inits = [], []
        for spec in cfg.stages.specs():
            order = PREREQUISITES["d"] if args.init is None else (args.init,)
            found = next((s for s in order if (run / f"ckpt/{s}/{spec.tag}.ckpt").exists()), None)
            if found is None:
                want = order[-1] if args.init is None else args.init
                raise MissingPrerequisite(f"no stage-{'/'.join(order)} checkpoint for {spec.tag}; "
                                          f"run `wordet train --stage {want}` first")
            check_prerequisite("d", found)
            path = run / f"ckpt/{found}/{spec.tag}.ckpt"
            inputs.append(path)
            inits.append(found)
            branches.append(load_branch(path).astype(np.dtype(st.dtype)))
        pool = _load_pool(run, train)
        inputs.append(run / "labels/train.jsonl")
        joint, hist = run_stage_d(images, pool, branches, cfg.stages.specs(), st.d, cfg.seed, n_classes)
        out = run / "ckpt/d/joint.ckpt"
        out.parent.mkdir(parents=True, exist_ok=True)
        save_joint(out, joint, "d", cfg.seed)
        _write_history(run / "ckpt/d/joint.loss.csv", hist)
        write_manifest(run, "train-d", cfg, args, inputs, [out, run / "ckpt/d/joint.loss.csv"],
                       {"init_stages": dict(zip(st.crop_specs, inits))})
        return EXIT_OK

    prev = {"b": "a", "c": "b"}.get(stage)
    if prev:
        for spec in specs:
            run.require(f"ckpt/{prev}/{spec.tag}.ckpt", f"train --stage {prev}")
        clusters = ClusterSet.load(run.require("clusters.json", "cluster"))
        pool = _load_pool(run, train)
        inputs += [run / "clusters.json", run / "labels/train.jsonl"]
    else:
        gts = GroundTruths.from_scenes(train)
    (run / f"ckpt/{stage}").mkdir(parents=True, exist_ok=True)
    for spec in specs:
        if prev:
            init_path = run.require(f"ckpt/{prev}/{spec.tag}.ckpt", f"train --stage {prev}")
            check_prerequisite(stage, prev)
            init = load_branch(init_path).astype(np.dtype(st.dtype))
            inputs.append(init_path)
            k = clusters.window_object.n_clusters
            if stage == "b":
                net, hist = run_stage_b(images, pool, spec, st.b, cfg.seed, init, k)
            else:
                net, hist = run_stage_c(images, pool, spec, st.c, cfg.seed, init, k, clusters.layout.n_clusters,
                                        n_classes)
        else:
            net, hist = run_stage_a(images, gts, spec, st.a, cfg.seed, n_classes, _arch(cfg),
                                    dtype=np.dtype(st.dtype))
        out = run / f"ckpt/{stage}/{spec.tag}.ckpt"
        save_branch(out, net, stage, cfg.seed)
        _write_history(out.with_suffix(".loss.csv"), hist)
        outputs += [out, out.with_suffix(".loss.csv")]
        log.info("stage %s %s: final loss %.4f", stage, spec.tag, hist.totals()[-1] if hist.losses else float("nan"))
    suffix = "" if len(specs) == len(st.crop_specs) else "-" + "-".join(s.tag for s in specs)
    write_manifest(run, f"train-{stage}{suffix}", cfg, args, inputs, outputs)
    return EXIT_OK


def cmd_extract_features(cfg, args, run: RunDir) -> int:
    from .net import load_joint
    from .pipeline import FeatureExtractor, ImageStack, detection_windows, svm_windows
    import numpy as np
    joint_path = run.require("ckpt/d/joint.ckpt", "train --stage d")
    joint = load_joint(joint_path)
    from .geometry import CropSpec
    specs = [CropSpec.from_tag(b.tag) for b in joint.branches]
    ex = FeatureExtractor.from_joint(joint, specs)
    dtype = np.dtype(cfg.stages.dtype)
    inputs, outputs = [joint_path], []
    splits = ("train", "test") if args.split == "all" else (args.split,)
    for split in splits:
        scenes = _load_split(run, split)
        inputs.append(run / "data" / split)
        images = ImageStack.from_scenes(scenes, dtype=dtype)
        if split == "train":
            sv = cfg.svm
            w = svm_windows(scenes, cfg.seed, sv.n_jitter, sv.n_random, _n_classes(cfg), sv.neg_iou, sv.bbox_iou)
            feats = ex.extract(images, w.scene_idx, w.boxes)
            outputs += _save_arrays(run / "features/train", feats=feats, scene_idx=w.scene_idx, boxes=w.boxes,
                                    targets=w.targets, bbox_gt=w.bbox_gt, bbox_cls=w.bbox_cls)
        else:
            dc = cfg.detect
            idx, boxes, ids = detection_windows(scenes, cfg.seed, dc.n_jitter, dc.n_random)
            feats = ex.extract(images, idx, boxes)
            outputs += _save_arrays(run / "features/test", feats=feats, scene_idx=idx, boxes=boxes, scene_ids=ids)
        log.info("%s: %d windows x %d features", split, *feats.shape)
    write_manifest(run, "extract-features" + ("" if args.split == "all" else f"-{args.split}"), cfg, args,
                   inputs, outputs)
    return EXIT_OK


def _standardiser(feats):
    import numpy as np
    mean = feats.mean(axis=0)
    scale = feats.std(axis=0)
    return mean, np.where(scale > 1e-8, scale, 1.0)


def cmd_train_svm(cfg, args, run: RunDir) -> int:
    from .pipeline import train_svms
    d = run.require("features/train", "extract-features")
    feats, targets = _load_arrays(d, "feats", "targets")
    svms = train_svms(feats, targets, cfg.svm.lam, cfg.svm.iterations)
    (run / "svm.json").write_text(json.dumps(svms.to_json()) + "\n")
    write_manifest(run, "train-svm", cfg, args, [d], [run / "svm.json"],
                   {"active_classes": [int(k + 1) for k in svms.active.nonzero()[0]]})
    return EXIT_OK


def cmd_train_bbox(cfg, args, run: RunDir) -> int:
    from .pipeline import train_bbox_regressors
    d = run.require("features/train", "extract-features")
    feats, boxes, gt, cls = _load_arrays(d, "feats", "boxes", "bbox_gt", "bbox_cls")
    mean, scale = _standardiser(feats)
    m = cls > 0
    regs = train_bbox_regressors(feats[m], boxes[m], gt[m], cls[m], _n_classes(cfg), cfg.svm.bbox_alpha,
                                 mean, scale)
    (run / "bbox.json").write_text(json.dumps(regs.to_json()) + "\n")
    write_manifest(run, "train-bbox", cfg, args, [d], [run / "bbox.json"], {"examples": int(m.sum())})
    return EXIT_OK


def cmd_detect(cfg, args, run: RunDir) -> int:
    from .detection import nms_per_group, score_proposals, write_detections
    from .pipeline import BoxRegressors, LinearSVMs
    d = run.require("features/test", "extract-features --split test")
    svm_path = run.require("svm.json", "train-svm")
    feats, boxes, ids = _load_arrays(d, "feats", "boxes", "scene_ids")
    svms = LinearSVMs.from_json(json.loads(svm_path.read_text()))
    inputs = [d, svm_path]
    regs = None
    if cfg.detect.refine:
        p = run.require("bbox.json", "train-bbox")
        regs = BoxRegressors.from_json(json.loads(p.read_text()))
        inputs.append(p)
    dets = nms_per_group(score_proposals(ids, boxes, feats, svms, regs), cfg.detect.nms_iou)
    write_detections(run / "detections.jsonl", dets)
    write_manifest(run, "detect", cfg, args, inputs, [run / "detections.jsonl"], {"detections": len(dets)})
    log.info("%d detections after NMS", len(dets))
    return EXIT_OK


def cmd_eval(cfg, args, run: RunDir) -> int:
    from .detection import evaluate, read_detections, write_report
    from .synthdata import CLASS_NAMES
    det_path = run.require("detections.jsonl", "detect")
    test = _load_split(run, "test")
    rep = evaluate(read_detections(det_path), test, list(CLASS_NAMES[: _n_classes(cfg)]), cfg.eval.iou)
    out = run / "eval"
    write_report(rep, out, cfg.eval.plots)
    write_manifest(run, "eval", cfg, args, [det_path, run / "data/test"],
                   [p for p in out.iterdir() if p.is_file()], {"mean_ap": rep.mean_ap, "median_ap": rep.median_ap})
    print(rep.ap_csv(), end="")
    return EXIT_OK


def cmd_plot(cfg, args, run: RunDir) -> int:
    from .detection import evaluate, pr_svg, read_detections
    from .synthdata import CLASS_NAMES
    outputs, inputs = [], []
    out = run / "eval"
    out.mkdir(parents=True, exist_ok=True)
    if (run / "detections.jsonl").exists():
        test = _load_split(run, "test")
        rep = evaluate(read_detections(run / "detections.jsonl"), test, list(CLASS_NAMES[: _n_classes(cfg)]),
                       cfg.eval.iou)
        for name, (prec, rec) in rep.curves.items():
            p = out / f"pr_{name}.svg"
            p.write_text(pr_svg(prec, rec, f"{name}  AP {rep.ap[rep.class_names.index(name)]:.3f}"))
            outputs.append(p)
        inputs += [run / "detections.jsonl", run / "data/test"]
    for csv_path in sorted((run / "ablate").glob("*_summary.csv")) if (run / "ablate").exists() else []:
        p = csv_path.with_suffix(".svg")
        p.write_text(summary_svg(csv_path.read_text(), csv_path.stem))
        inputs.append(csv_path)
        outputs.append(p)
    if not outputs:
        raise MissingPrerequisite(f"nothing to plot in {run.root}; run `wordet detect` or `wordet ablate` first")
    write_manifest(run, "plot", cfg, args, inputs, outputs)
    return EXIT_OK


def summary_svg(csv_text: str, title: str, width: int = 560) -> str:
    """Horizontal bar chart of mean mAP per configuration."""
    import csv
    import io
    rows = list(csv.DictReader(io.StringIO(csv_text)))
    bar, left, top = 22, 230, 30
    height = top + bar * len(rows) + 20
    scale = width - left - 60
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" '
             f'font-size="11">', f'<text x="8" y="18" font-size="13">{_esc(title)}: mean mAP</text>']
    for i, r in enumerate(rows):
        y = top + i * bar
        v = float(r["mean_ap"])
        parts.append(f'<text x="{left - 6}" y="{y + 14}" text-anchor="end">{_esc(r["config"])}</text>')
        parts.append(f'<rect x="{left}" y="{y + 3}" width="{v * scale:.1f}" height="{bar - 6}" fill="#4a7bb7"/>')
        parts.append(f'<text x="{left + v * scale + 4:.1f}" y="{y + 14}">{v:.3f}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def cmd_ablate(cfg, args, run: RunDir) -> int:
    from .ablation import GRIDS, per_seed_csv, run_grid, summary_csv
    from .config import ConfigError
    from .synthdata import CLASS_NAMES
    grid = args.grid or cfg.ablate.grid
    if grid not in GRIDS:
        raise ConfigError(f"unknown grid {grid!r}; choose from {', '.join(GRIDS)}")
    n_seeds = args.seeds if args.seeds is not None else cfg.ablate.seeds
    if n_seeds < 1:
        raise ConfigError("--seeds must be at least 1")
    names = None
    if args.variants:
        names = [n.strip() for n in args.variants.split(",")]
        known = {v.name for v in GRIDS[grid]}
        unknown = [n for n in names if n not in known]
        if unknown:
            raise ConfigError(f"unknown variant(s) {unknown}; grid {grid} has {sorted(known)}")
    seeds = [cfg.seed + i for i in range(n_seeds)]

    def progress(r):
        log.info("seed %d  %-32s mAP %.4f  median AP %.4f  (%.0fs)", r.seed, r.name, r.mean_ap, r.median_ap,
                 r.seconds)

    results = run_grid(cfg, grid, seeds, names, progress)
    out = run / "ablate"
    out.mkdir(parents=True, exist_ok=True)
    summary = summary_csv(results)
    (out / f"{grid}_summary.csv").write_text(summary)
    (out / f"{grid}_per_seed.csv").write_text(per_seed_csv(results, CLASS_NAMES[: _n_classes(cfg)]))
    write_manifest(run, f"ablate-{grid}", cfg, args, outputs=[out / f"{grid}_summary.csv",
                                                             out / f"{grid}_per_seed.csv"],
                   extra={"seeds": seeds})
    print(summary, end="")
    return EXIT_OK


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic train/test scenes"),
    "cluster": (cmd_cluster, "fit window-object and layout clusters on the training scenes"),
    "make-labels": (cmd_make_labels, "label training candidate windows against the clusters"),
    "train": (cmd_train, "train one stage (a, b, c or d) of the branch networks"),
    "extract-features": (cmd_extract_features, "concatenated branch features for SVM and test windows"),
    "train-svm": (cmd_train_svm, "per-class linear SVMs on the training features"),
    "train-bbox": (cmd_train_bbox, "per-class box regressors on the training features"),
    "detect": (cmd_detect, "score test proposals, refine boxes and apply NMS"),
    "eval": (cmd_eval, "per-class AP, mAP and median AP with PR curves"),
    "plot": (cmd_plot, "SVG precision-recall plots and ablation bar charts"),
    "ablate": (cmd_ablate, "run an ablation grid over several seeds"),
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run config (defaults for every missing field)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", default="run", help="run directory (default: ./run)")
    common.add_argument("--threads", type=int, help="cap on BLAS worker threads (default: all cores)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=JSON",
                        help="override one config field, e.g. --set stages.a.iterations=50 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = _Parser(prog="wordet", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"wordet {VERSION}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    subs = {}
    for name, (func, help_) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_, description=help_)
        p.set_defaults(func=func)
        subs[name] = p
    subs["train"].add_argument("--stage", required=True, choices=["a", "b", "c", "d"])
    subs["train"].add_argument("--spec", action="append",
                               help="train only this branch (tag such as r0_s1.2; repeatable)")
    subs["train"].add_argument("--init", choices=["a", "b", "c"],
                               help="stage d only: warm-start stage (default: latest available of c, b, a)")
    subs["extract-features"].add_argument("--split", choices=["train", "test", "all"], default="all")
    subs["ablate"].add_argument("--grid", help="supervision | clustering | context | rotation | acceptance")
    subs["ablate"].add_argument("--seeds", type=int, help="number of seeds, counting up from --seed")
    subs["ablate"].add_argument("--variants", help="comma-separated subset of the grid's variant names")
    return parser


def _apply_overrides(doc: dict, sets) -> dict:
    from .config import ConfigError
    for item in sets:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {p} is not a section")
        node[parts[-1]] = value
    return doc


def _load_cfg(args):
    from .config import ConfigError, from_dict
    doc = {}
    if args.config:
        p = Path(args.config)
        try:
            doc = json.loads(p.read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"{p}: config file not found") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{p}: invalid JSON ({e})") from e
    cfg = from_dict(_apply_overrides(doc, args.set))
    return cfg if args.seed is None else cfg.with_seed(args.seed)


def _limit_threads(n):
    if not n:
        return
    if n < 1:
        raise UsageError("--threads must be positive")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    try:  # takes effect even when numpy is already loaded
        from threadpoolctl import threadpool_limits
        threadpool_limits(n)
    except ImportError:
        pass


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _limit_threads(args.threads)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")

    import numpy as np
    from .config import ConfigError
    from .labeling import ConfigurationError
    from .net import NumericalError
    from .pipeline import PrerequisiteError

    try:
        cfg = _load_cfg(args)
        run = RunDir(args.out)
        run.root.mkdir(parents=True, exist_ok=True)
        with np.errstate(over="raise", invalid="raise", divide="raise"):
            return args.func(cfg, args, run)
    except (ConfigError, ConfigurationError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingPrerequisite, PrerequisiteError) as e:
        print(f"missing prerequisite: {e}", file=sys.stderr)
        return EXIT_PREREQ
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
