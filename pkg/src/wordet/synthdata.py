"""Deterministic synthetic detection scenes.

Four shape classes on a noisy grayscale background. Two placement rules make
neighbour layout informative: a triangle ("helmet") sitting on top of a square
("person"), and a cross to the right of a disk.
"""
from __future__ import annotations

import json
import logging
import re
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from .geometry import Box, to_corners

log = logging.getLogger(__name__)

CLASS_NAMES = ("disk", "square", "triangle", "cross")
DISK, SQUARE, TRIANGLE, CROSS = 1, 2, 3, 4
FORMAT_VERSION = 1


@dataclass(frozen=True)
class SceneObject:
    box: Box
    class_id: int
    occluded_fraction: float = 0.0


@dataclass
class Scene:
    id: int
    size: int
    image: np.ndarray
    objects: list[SceneObject]

    @property
    def boxes(self) -> np.ndarray:
        return np.array([o.box.as_array() for o in self.objects]).reshape(-1, 4)

    @property
    def classes(self) -> np.ndarray:
        return np.array([o.class_id for o in self.objects], dtype=np.int64)


@dataclass(frozen=True)
class DataConfig:
    n_scenes: int = 100
    n_classes: int = 4
    size: int = 96
    min_size: float = 12.0
    max_size: float = 40.0
    noise: float = 0.05
    p_helmet: float = 0.6
    p_cross_right: float = 0.5
    max_objects: int = 4
    max_tries: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.n_scenes < 1:
            raise ValueError("n_scenes must be >= 1")
        if not 1 <= self.n_classes <= len(CLASS_NAMES):
            raise ValueError(f"n_classes must lie in [1, {len(CLASS_NAMES)}]")


@dataclass
class Dataset:
    config: DataConfig
    scenes: list[Scene]
    skipped: list[dict] = field(default_factory=list)

    def __len__(self):
        return len(self.scenes)

    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.scenes])


# --------------------------------------------------------------------------
# rendering


def shape_mask(cls: int, box: np.ndarray, size: int) -> np.ndarray:
    cx, cy, w, h = box
    px = np.arange(size) + 0.5
    u = (px[None, :] - cx) / (w / 2)
    v = (px[:, None] - cy) / (h / 2)
    inside = (np.abs(u) <= 1) & (np.abs(v) <= 1)
    if cls == DISK:
        return u**2 + v**2 <= 1
    if cls == SQUARE:
        return inside
    if cls == TRIANGLE:
        # apex at the top edge
        return inside & (np.abs(u) <= (v + 1) / 2)
    if cls == CROSS:
        return inside & ((np.abs(u) <= 1 / 3) | (np.abs(v) <= 1 / 3))
    raise ValueError(f"unknown class {cls}")


def _union_area_in(box: np.ndarray, others: list[np.ndarray]) -> float:
    """Exact area of ``box`` covered by the union of ``others`` (inclusion-exclusion)."""
    clipped = []
    b = to_corners(box)
    for o in others:
        c = to_corners(o)
        x0, y0 = max(b[0], c[0]), max(b[1], c[1])
        x1, y1 = min(b[2], c[2]), min(b[3], c[3])
        if x1 > x0 and y1 > y0:
            clipped.append((x0, y0, x1, y1))
    total = 0.0
    for r in range(1, len(clipped) + 1):
        for sub in combinations(clipped, r):
            x0 = max(s[0] for s in sub)
            y0 = max(s[1] for s in sub)
            x1 = min(s[2] for s in sub)
            y1 = min(s[3] for s in sub)
            if x1 > x0 and y1 > y0:
                total += (-1) ** (r + 1) * (x1 - x0) * (y1 - y0)
    return total


def _pair_iou(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    ca, cb = to_corners(a), to_corners(b)
    iw = min(ca[2], cb[2]) - max(ca[0], cb[0])
    ih = min(ca[3], cb[3]) - max(ca[1], cb[1])
    if iw <= 0 or ih <= 0:
        return 0.0, 0.0
    inter = iw * ih
    return inter / (a[2] * a[3] + b[2] * b[3] - inter), inter / (a[2] * a[3])


def _unit_layout(rng: np.random.Generator, cls: int, companion: bool, cfg: DataConfig):
    """Relative geometry of a placement unit: list of (class, box around origin)."""
    lo, hi = cfg.min_size, cfg.max_size
    w = rng.uniform(lo, hi)
    h = float(np.clip(w * np.exp(rng.uniform(-0.3, 0.3)), lo, hi))
    objs = [(cls, np.array([0.0, 0.0, w, h]))]
    if companion and cls == SQUARE:
        hw = float(np.clip(w * rng.uniform(0.7, 1.0), lo, hi))
        hh = rng.uniform(lo, min(hi, 24.0))
        gap = rng.uniform(0.0, 2.0)
        objs.append((TRIANGLE, np.array([rng.uniform(-0.1, 0.1) * w, -h / 2 - gap - hh / 2, hw, hh])))
    elif companion and cls == DISK:
        cw = rng.uniform(lo, min(hi, 30.0))
        ch = float(np.clip(cw * np.exp(rng.uniform(-0.2, 0.2)), lo, hi))
        gap = rng.uniform(0.0, 4.0)
        objs.append((CROSS, np.array([w / 2 + gap + cw / 2, rng.uniform(-0.2, 0.2) * h, cw, ch])))
    return objs


def _is_helmet(square: np.ndarray, tri: np.ndarray, slack: float = 0.0) -> bool:
    top = square[1] - square[3] / 2
    return abs(tri[0] - square[0]) <= 0.25 * square[2] + slack and abs(top - (tri[1] + tri[3] / 2)) <= 2.5 + slack


def _is_cross_right(disk: np.ndarray, cross: np.ndarray, slack: float = 0.0) -> bool:
    gap = (cross[0] - cross[2] / 2) - (disk[0] + disk[2] / 2)
    return abs(cross[1] - disk[1]) <= 0.25 * disk[3] + slack and -0.5 - slack <= gap <= 4.5 + slack


def _accidental_pair(ca: int, a: np.ndarray, cb: int, b: np.ndarray) -> bool:
    pairs = {(SQUARE, TRIANGLE): _is_helmet, (DISK, CROSS): _is_cross_right}
    for (x, y), test in pairs.items():
        if (ca, cb) == (x, y) and test(a, b, slack=2.0):
            return True
        if (cb, ca) == (x, y) and test(b, a, slack=2.0):
            return True
    return False


def _try_place(rng, unit, placed: list[tuple[int, np.ndarray]], cfg: DataConfig):
    c = to_corners(np.stack([b for _, b in unit]))
    x0, y0 = c[:, 0].min(), c[:, 1].min()
    x1, y1 = c[:, 2].max(), c[:, 3].max()
    if x1 - x0 > cfg.size or y1 - y0 > cfg.size:
        return None
    for _ in range(cfg.max_tries):
        dx = rng.uniform(-x0, cfg.size - x1)
        dy = rng.uniform(-y0, cfg.size - y1)
        boxes = [b + np.array([dx, dy, 0.0, 0.0]) for _, b in unit]
        ok = True
        for (cb, b) in zip((c for c, _ in unit), boxes):
            for cp, p in placed:
                ov, cover = _pair_iou(p, b)
                # layout pairs only come from the placement rules
                if ov > 0.3 or cover > 0.5 or _accidental_pair(cp, p, cb, b):
                    ok = False
                    break
            if not ok:
                break
        if ok:
            return boxes
    return None


def generate_scene(index: int, cfg: DataConfig) -> tuple[Scene, list[dict]]:
    rng = np.random.default_rng([cfg.seed, index])
    skipped = []
    while True:
        objs: list[tuple[int, np.ndarray]] = []
        n_units = int(rng.integers(1, 3))
        units = []
        for _ in range(n_units):
            cls = int(rng.integers(1, cfg.n_classes + 1))
            roll = rng.uniform()
            companion = (cls == SQUARE and roll < cfg.p_helmet and TRIANGLE <= cfg.n_classes) or (
                cls == DISK and roll < cfg.p_cross_right and CROSS <= cfg.n_classes
            )
            units.append(_unit_layout(rng, cls, companion, cfg))
        # filler objects of the non-anchor classes keep scenes busier
        if rng.uniform() < 0.5 and cfg.n_classes >= 3:
            filler = int(rng.choice([c for c in (TRIANGLE, CROSS) if c <= cfg.n_classes]))
            units.append(_unit_layout(rng, filler, False, cfg))
        for unit in units:
            if len(objs) + len(unit) > cfg.max_objects:
                continue
            boxes = _try_place(rng, unit, objs, cfg)
            if boxes is None:
                skipped.append({"scene": index, "classes": [c for c, _ in unit]})
                continue
            objs.extend((c, b) for (c, _), b in zip(unit, boxes))
        if objs:
            break
    bg = rng.uniform(0.1, 0.4)
    image = np.full((cfg.size, cfg.size), bg)
    for c, b in objs:
        image[shape_mask(c, b, cfg.size)] = rng.uniform(0.55, 0.95)
    image += rng.normal(0.0, cfg.noise, image.shape)
    # quantise now so the 8-bit image files round-trip exactly
    image = np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
    objects = []
    for i, (c, b) in enumerate(objs):
        later = [ob for _, ob in objs[i + 1:]]
        occ = _union_area_in(b, later) / (b[2] * b[3])
        objects.append(SceneObject(Box.from_array(b), c, float(occ)))
    return Scene(index, cfg.size, image, objects), skipped


def generate(config: DataConfig) -> Dataset:
    scenes, skipped = [], []
    for i in range(config.n_scenes):
        s, sk = generate_scene(i, config)
        scenes.append(s)
        skipped.extend(sk)
    if skipped:
        log.info("%d placement units skipped", len(skipped))
    return Dataset(config, scenes, skipped)


# --------------------------------------------------------------------------
# statistics


def triangle_above_square(scene: Scene) -> tuple[int, int]:
    """(number of squares, number of squares with a triangle sitting on top)."""
    squares = [o.box.as_array() for o in scene.objects if o.class_id == SQUARE]
    tris = [o.box.as_array() for o in scene.objects if o.class_id == TRIANGLE]
    hits = sum(any(_is_helmet(s, t) for t in tris) for s in squares)
    return len(squares), hits


def cross_right_of_disk(scene: Scene) -> tuple[int, int]:
    disks = [o.box.as_array() for o in scene.objects if o.class_id == DISK]
    crosses = [o.box.as_array() for o in scene.objects if o.class_id == CROSS]
    hits = sum(any(_is_cross_right(d, c) for c in crosses) for d in disks)
    return len(disks), hits


def render_stats(dataset: Dataset | list[Scene], n_classes: int = 4, bins=(12, 16, 20, 24, 28, 32, 36, 40)) -> dict:
    scenes = dataset.scenes if isinstance(dataset, Dataset) else dataset
    counts = np.zeros(n_classes, dtype=np.int64)
    co = np.zeros((n_classes, n_classes), dtype=np.int64)
    edges = np.asarray(bins, dtype=np.float64)
    hist = np.zeros((n_classes, len(edges) - 1), dtype=np.int64)
    for s in scenes:
        present = set()
        for o in s.objects:
            counts[o.class_id - 1] += 1
            present.add(o.class_id - 1)
            side = np.sqrt(o.box.w * o.box.h)
            hist[o.class_id - 1] += np.histogram([side], bins=edges)[0]
        for i in present:
            for j in present:
                co[i, j] += 1
    return {"class_counts": counts, "size_hist": hist, "size_bins": edges, "co_occurrence": co}


# --------------------------------------------------------------------------
# dataset files


def write_pgm(path: Path, image: np.ndarray) -> None:
    data = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    # header: magic, width, height, maxval, then exactly one whitespace byte before the pixels
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM file")
    w, h, maxval = (int(g) for g in m.groups())
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=m.end()).reshape(h, w)
    return data.astype(np.float64) / maxval


def scene_record(s: Scene) -> dict:
    return {
        "id": s.id,
        "size": s.size,
        "image": f"images/{s.id:06d}.pgm",
        "objects": [
            {"box": [o.box.x, o.box.y, o.box.w, o.box.h], "class_id": o.class_id,
             "occluded_fraction": o.occluded_fraction}
            for o in s.objects
        ],
    }


def save_dataset(dataset: Dataset, out_dir, extra: dict | None = None) -> None:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    with open(out / "scenes.jsonl", "w") as f:
        for s in dataset.scenes:
            f.write(json.dumps(scene_record(s), sort_keys=True) + "\n")
            write_pgm(out / "images" / f"{s.id:06d}.pgm", s.image)
    manifest = {"version": FORMAT_VERSION, "config": asdict(dataset.config), "skipped": dataset.skipped}
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_dataset(path) -> Dataset:
    root = Path(path)
    if not (root / "scenes.jsonl").is_file() or not (root / "manifest.json").is_file():
        raise FileNotFoundError(f"{root}: not a dataset directory (scenes.jsonl/manifest.json missing)")
    try:
        manifest = json.loads((root / "manifest.json").read_text())
        cfg = DataConfig(**manifest["config"])
        scenes = []
        for line in (root / "scenes.jsonl").read_text().splitlines():
            rec = json.loads(line)
            objs = [SceneObject(Box(*o["box"]), int(o["class_id"]), float(o["occluded_fraction"]))
                    for o in rec["objects"]]
            scenes.append(Scene(int(rec["id"]), int(rec["size"]), read_pgm(root / rec["image"]), objs))
    except (KeyError, ValueError, TypeError) as e:
        raise ValueError(f"{root}: corrupt dataset ({e})") from e
    return Dataset(cfg, scenes, manifest.get("skipped", []))
