"""A tiny convolutional branch network with hand-written backprop.

Layout is NHWC throughout. A branch maps ``(B, S, S)`` crops to a
``(B, feature_dim)`` feature matrix:

    conv3x3(c1) -> relu -> maxpool2 -> conv3x3(c2) -> relu -> maxpool2 -> fc -> relu

Output heads are plain linear layers on the features and can be swapped
between training stages without touching the feature layers.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"WORNET\x00\x01"


class ShapeError(ValueError):
    pass


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class Arch:
    in_size: int = 32
    c1: int = 8
    c2: int = 16
    feature_dim: int = 64

    @property
    def pooled_size(self) -> int:
        s = (self.in_size - 2) // 2
        return (s - 2) // 2

    @property
    def flat_dim(self) -> int:
        return self.c2 * self.pooled_size**2

    def __post_init__(self):
        if self.pooled_size < 1:
            raise ValueError(f"input size {self.in_size} too small for two conv/pool stages")


@dataclass(frozen=True)
class Heads:
    """Output heads attached to a branch; 0 means absent."""

    pretrain: int = 0  # C-way whole-object classifier (stage a)
    clusters: int = 0  # N-way cluster posterior + N x 4 location regression (stages b, c)
    layout: int = 0  # K layout heads ...
    layout_classes: int = 0  # ... each (C+1)-way


# --------------------------------------------------------------------------
# layers


def im2col(x):
    """(B,H,W,C) -> (B*(H-2)*(W-2), 9*C), columns ordered (row, col, channel)."""
    B, H, W, C = x.shape
    cols = np.concatenate([x[:, i:i + H - 2, j:j + W - 2, :] for i in range(3) for j in range(3)], axis=-1)
    return cols.reshape(-1, 9 * C)


def conv_forward(x, w, b):
    """x (B,H,W,C), w (3,3,C,O) -> (B,H-2,W-2,O); returns output and im2col matrix."""
    B, H, W, C = x.shape
    cols = im2col(x)
    out = cols @ w.reshape(9 * C, -1) + b
    return out.reshape(B, H - 2, W - 2, -1), cols


def conv_backward(dout, cols, x_shape, w, need_dx=True):
    B, H, W, C = x_shape
    O = w.shape[-1]
    d2 = dout.reshape(-1, O)
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (d2 @ w.reshape(9 * C, O).T).reshape(B, H - 2, W - 2, 9 * C)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for k in range(9):
        i, j = divmod(k, 3)
        dx[:, i:i + H - 2, j:j + W - 2, :] += dcols[..., k * C:(k + 1) * C]
    return dx, dw, db


def _quads(x):
    B, H, W, C = x.shape
    h, w = H // 2, W // 2
    return [x[:, a:2 * h:2, b:2 * w:2, :] for a in (0, 1) for b in (0, 1)]


def pool_forward(x):
    """2x2 max pool, stride 2, odd edges dropped. Returns output and per-quadrant winner masks."""
    q = _quads(x)
    out = np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))
    # first maximum wins ties
    taken = q[0] == out
    masks = [taken]
    for k in (1, 2):
        m = (q[k] == out) & ~taken
        taken = taken | m
        masks.append(m)
    masks.append(~taken)
    return out, masks


def pool_backward(dout, masks, x_shape):
    dx = np.zeros(x_shape, dtype=dout.dtype)
    B, H, W, C = x_shape
    h, w = H // 2, W // 2
    for k, m in enumerate(masks):
        a, b = divmod(k, 2)
        dx[:, a:2 * h:2, b:2 * w:2, :] = dout * m
    return dx


def log_softmax(z):
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def softmax(z):
    return np.exp(log_softmax(z))


# --------------------------------------------------------------------------
# branch network


def _uniform(rng, shape, fan_in):
    lim = np.sqrt(6.0 / fan_in)
    return rng.uniform(-lim, lim, shape)


@dataclass
class BranchNet:
    arch: Arch
    params: dict  # name -> array, declaration order matters for checkpoints
    heads: Heads = field(default_factory=Heads)
    tag: str = ""

    TRUNK = ("conv1.w", "conv1.b", "conv2.w", "conv2.b", "fc.w", "fc.b")

    @classmethod
    def init(cls, arch: Arch, seed: int, heads: Heads | None = None, tag: str = "",
             dtype=np.float64) -> "BranchNet":
        rng = np.random.default_rng(seed)
        p = {
            "conv1.w": _uniform(rng, (3, 3, 1, arch.c1), 9),
            "conv1.b": np.zeros(arch.c1),
            "conv2.w": _uniform(rng, (3, 3, arch.c1, arch.c2), 9 * arch.c1),
            "conv2.b": np.zeros(arch.c2),
            "fc.w": _uniform(rng, (arch.flat_dim, arch.feature_dim), arch.flat_dim),
            "fc.b": np.zeros(arch.feature_dim),
        }
        p = {k: v.astype(dtype) for k, v in p.items()}
        net = cls(arch, p, Heads(), tag)
        net.set_heads(heads or Heads())
        return net

    def set_heads(self, heads: Heads) -> None:
        """Replace all output heads with zero-initialised ones; feature layers are kept."""
        for k in [k for k in self.params if k.startswith("head.")]:
            del self.params[k]
        d, dt = self.arch.feature_dim, self.dtype
        z = lambda *shape: np.zeros(shape, dtype=dt)  # noqa: E731
        if heads.pretrain:
            self.params["head.pretrain.w"] = z(d, heads.pretrain)
            self.params["head.pretrain.b"] = z(heads.pretrain)
        if heads.clusters:
            n = heads.clusters
            self.params["head.cluster.w"] = z(d, n)
            self.params["head.cluster.b"] = z(n)
            self.params["head.location.w"] = z(d, 4 * n)
            self.params["head.location.b"] = z(4 * n)
        if heads.layout:
            if heads.layout_classes < 2:
                raise ValueError("layout heads need at least two classes")
            m = heads.layout * heads.layout_classes
            self.params["head.layout.w"] = z(d, m)
            self.params["head.layout.b"] = z(m)
        self.heads = heads

    @property
    def dtype(self):
        return self.params["conv1.w"].dtype

    def astype(self, dtype) -> "BranchNet":
        return BranchNet(self.arch, {k: v.astype(dtype) for k, v in self.params.items()}, self.heads, self.tag)

    def trunk_params(self) -> dict:
        return {k: self.params[k] for k in self.TRUNK}

    def copy(self) -> "BranchNet":
        return BranchNet(self.arch, {k: v.copy() for k, v in self.params.items()}, self.heads, self.tag)

    # ------------------------------------------------------------------

    def features(self, x):
        """Features only (no cache), for extraction."""
        return self._trunk(x)[0]

    def _trunk(self, x):
        x = np.asarray(x, dtype=self.dtype)
        s = self.arch.in_size
        if x.ndim != 3 or x.shape[1:] != (s, s):
            raise ShapeError(f"conv1: expected input (batch, {s}, {s}), got {x.shape}")
        p = self.params
        x = x - x.mean(axis=(1, 2), keepdims=True)
        x = x[..., None]
        z1, cols1 = conv_forward(x, p["conv1.w"], p["conv1.b"])
        a1 = np.maximum(z1, 0)
        p1, i1 = pool_forward(a1)
        z2, cols2 = conv_forward(p1, p["conv2.w"], p["conv2.b"])
        a2 = np.maximum(z2, 0)
        p2, i2 = pool_forward(a2)
        flat = p2.reshape(len(x), -1)
        if flat.shape[1] != p["fc.w"].shape[0]:
            raise ShapeError(f"fc: expected {p['fc.w'].shape[0]} inputs, got {flat.shape[1]}")
        zf = flat @ p["fc.w"] + p["fc.b"]
        f = np.maximum(zf, 0)
        cache = (x.shape, z1, cols1, a1.shape, i1, p1.shape, z2, cols2, a2.shape, i2, p2.shape, flat, zf)
        return f, cache

    def _trunk_backward(self, cache, df):
        (xs, z1, cols1, a1s, i1, p1s, z2, cols2, a2s, i2, p2s, flat, zf) = cache
        p = self.params
        g = {}
        dzf = df * (zf > 0)
        g["fc.w"] = flat.T @ dzf
        g["fc.b"] = dzf.sum(axis=0)
        dp2 = (dzf @ p["fc.w"].T).reshape(p2s)
        da2 = pool_backward(dp2, i2, a2s)
        dz2 = da2 * (z2 > 0)
        dp1, g["conv2.w"], g["conv2.b"] = conv_backward(dz2, cols2, p1s, p["conv2.w"])
        da1 = pool_backward(dp1, i1, a1s)
        dz1 = da1 * (z1 > 0)
        _, g["conv1.w"], g["conv1.b"] = conv_backward(dz1, cols1, xs, p["conv1.w"], need_dx=False)
        return g

    def head_outputs(self, f) -> dict:
        p, h = self.params, self.heads
        out = {}
        if h.pretrain:
            out["pretrain_logits"] = f @ p["head.pretrain.w"] + p["head.pretrain.b"]
        if h.clusters:
            out["cluster_logits"] = f @ p["head.cluster.w"] + p["head.cluster.b"]
            out["location"] = (f @ p["head.location.w"] + p["head.location.b"]).reshape(len(f), h.clusters, 4)
        if h.layout:
            z = f @ p["head.layout.w"] + p["head.layout.b"]
            out["layout_logits"] = z.reshape(len(f), h.layout, h.layout_classes)
        for k in [k for k in out if k.endswith("_logits")]:
            out[k.replace("_logits", "_post")] = softmax(out[k])
        return out

    def forward(self, x):
        """Features plus head outputs (posteriors for softmax heads, raw N x 4 locations)."""
        f, _ = self._trunk(x)
        return f, self.head_outputs(f)


# --------------------------------------------------------------------------
# losses


@dataclass
class LossBundle:
    cls: float | None = None
    loc: float | None = None
    layout: list | None = None
    classify: float | None = None

    @property
    def total(self) -> float:
        t = 0.0
        for v in (self.cls, self.loc, self.classify):
            if v is not None:
                t += v
        if self.layout is not None:
            t += sum(self.layout)
        return t

    def as_dict(self) -> dict:
        d = {"total": self.total}
        for k in ("cls", "loc", "classify"):
            if getattr(self, k) is not None:
                d[k] = getattr(self, k)
        if self.layout is not None:
            d["layout"] = list(self.layout)
        return d


def _check_normalized(post, name):
    s = post.sum(axis=-1)
    if not np.all(np.abs(s - 1.0) <= 1e-6):
        raise ValueError(f"{name}: posteriors must sum to 1 (max deviation {np.abs(s - 1).max():.3g})")


def _cross_entropy(post, labels, log_post=None, mask=None):
    """Mean CE over masked samples and d(loss)/d(logits)."""
    n = len(labels)
    idx = np.arange(n)
    if mask is None:
        mask = np.ones(n, dtype=bool)
    count = int(mask.sum())
    grad = np.zeros_like(post)
    if count == 0:
        return 0.0, grad
    lp = log_post if log_post is not None else np.log(np.maximum(post, np.finfo(float).tiny))
    loss = -lp[idx[mask], labels[mask]].sum() / count
    grad[mask] = post[mask]
    grad[idx[mask], labels[mask]] -= 1.0
    grad /= count
    return float(loss), grad


def loss_window_object(cluster_post, loc_pred, cluster_ids, loc_targets, log_post=None):
    """Cluster cross-entropy plus squared location error on the true cluster's row only.

    ``cluster_ids`` are 1-based; 0 (background) takes part in neither term.
    Returns ``(cls, loc, d cls / d logits, d loc / d loc_pred)``.
    """
    cluster_post = np.asarray(cluster_post)
    _check_normalized(cluster_post, "cluster head")
    ids = np.asarray(cluster_ids)
    pos = ids > 0
    tgt = np.maximum(ids - 1, 0)
    cls, dlogits = _cross_entropy(cluster_post, tgt, log_post, pos)
    dloc = np.zeros(loc_pred.shape, dtype=cluster_post.dtype)
    count = int(pos.sum())
    if count == 0:
        return cls, 0.0, dlogits, dloc
    rows = np.flatnonzero(pos)
    diff = loc_pred[rows, tgt[rows], :] - np.asarray(loc_targets)[rows]
    loc = float((diff**2).sum() / count)
    dloc[rows, tgt[rows], :] = 2.0 * diff / count
    return cls, loc, dlogits, dloc


def loss_layout(layout_posts, layout_labels, log_posts=None):
    """Sum over layout heads of mean cross-entropy; per-head values and logit grads."""
    posts = np.asarray(layout_posts)  # (B, K, C+1)
    _check_normalized(posts, "layout heads")
    labels = np.asarray(layout_labels)
    losses, grads = [], np.zeros_like(posts)
    for k in range(posts.shape[1]):
        lp = None if log_posts is None else log_posts[:, k]
        l, g = _cross_entropy(posts[:, k], labels[:, k], lp)
        losses.append(l)
        grads[:, k] = g
    return losses, grads


def loss_classify(post, class_ids, log_post=None):
    post = np.asarray(post)
    _check_normalized(post, "classifier")
    return _cross_entropy(post, np.asarray(class_ids), log_post)


# --------------------------------------------------------------------------
# combined objectives


@dataclass
class Targets:
    """Per-sample supervision; fields unused by the attached heads may be None."""

    class_ids: np.ndarray | None = None  # for pretrain (0-based C-way) or classify ((C+1)-way)
    cluster_ids: np.ndarray | None = None
    loc_targets: np.ndarray | None = None
    layout_labels: np.ndarray | None = None


def branch_loss_and_grads(net: BranchNet, x, t: Targets):
    """Loss bundle and gradients for every parameter of a single branch."""
    f, cache = net._trunk(x)
    out = net.head_outputs(f)
    p, h = net.params, net.heads
    bundle = LossBundle()
    g = {}
    df = np.zeros_like(f)
    if h.pretrain:
        lp = log_softmax(out["pretrain_logits"])
        bundle.classify, dz = _cross_entropy(np.exp(lp), np.asarray(t.class_ids), lp)
        g["head.pretrain.w"] = f.T @ dz
        g["head.pretrain.b"] = dz.sum(axis=0)
        df += dz @ p["head.pretrain.w"].T
    if h.clusters:
        lp = log_softmax(out["cluster_logits"])
        bundle.cls, bundle.loc, dz, dloc = loss_window_object(np.exp(lp), out["location"], t.cluster_ids,
                                                              t.loc_targets, lp)
        g["head.cluster.w"] = f.T @ dz
        g["head.cluster.b"] = dz.sum(axis=0)
        df += dz @ p["head.cluster.w"].T
        dl = dloc.reshape(len(f), -1)
        g["head.location.w"] = f.T @ dl
        g["head.location.b"] = dl.sum(axis=0)
        df += dl @ p["head.location.w"].T
    if h.layout:
        lp = log_softmax(out["layout_logits"])
        bundle.layout, dz = loss_layout(np.exp(lp), t.layout_labels, lp)
        dz = dz.reshape(len(f), -1)
        g["head.layout.w"] = f.T @ dz
        g["head.layout.b"] = dz.sum(axis=0)
        df += dz @ p["head.layout.w"].T
    g.update(net._trunk_backward(cache, df))
    return bundle, g


@dataclass
class JointNet:
    """Several branches whose features are concatenated and fed to one (C+1)-way head."""

    branches: list
    head_w: np.ndarray
    head_b: np.ndarray

    @classmethod
    def from_branches(cls, branches, n_out: int) -> "JointNet":
        d = sum(b.arch.feature_dim for b in branches)
        dt = branches[0].dtype
        return cls(list(branches), np.zeros((d, n_out), dtype=dt), np.zeros(n_out, dtype=dt))

    @property
    def params(self) -> dict:
        p = {}
        for i, b in enumerate(self.branches):
            for k in BranchNet.TRUNK:
                p[f"branch{i}.{k}"] = b.params[k]
        p["head.classify.w"] = self.head_w
        p["head.classify.b"] = self.head_b
        return p

    def features(self, xs) -> np.ndarray:
        return concat_features([b.features(x) for b, x in zip(self.branches, xs)])

    def forward(self, xs):
        f = self.features(xs)
        z = f @ self.head_w + self.head_b
        return f, softmax(z)


def joint_loss_and_grads(net: JointNet, xs, class_ids):
    """Cross-entropy over concatenated branch features; gradients keyed like ``JointNet.params``."""
    feats, caches = [], []
    for b, x in zip(net.branches, xs):
        f, c = b._trunk(x)
        feats.append(f)
        caches.append(c)
    F = concat_features(feats)
    lp = log_softmax(F @ net.head_w + net.head_b)
    loss, dz = _cross_entropy(np.exp(lp), np.asarray(class_ids), lp)
    g = {"head.classify.w": F.T @ dz, "head.classify.b": dz.sum(axis=0)}
    dF = dz @ net.head_w.T
    start = 0
    for i, (b, c) in enumerate(zip(net.branches, caches)):
        d = b.arch.feature_dim
        gb = b._trunk_backward(c, dF[:, start:start + d])
        start += d
        for k, v in gb.items():
            g[f"branch{i}.{k}"] = v
    return LossBundle(classify=loss), g


def concat_features(branch_features) -> np.ndarray:
    feats = [np.asarray(f) for f in branch_features]
    if not feats:
        raise ValueError("no branch features to concatenate")
    n = {len(f) for f in feats}
    if len(n) != 1:
        raise ShapeError(f"branch features disagree on batch size: {[len(f) for f in feats]}")
    return np.concatenate(feats, axis=1)


# --------------------------------------------------------------------------
# optimisation


class SGD:
    """Momentum SGD: ``v <- momentum * v - lr * grad``, ``p <- p + v``."""

    def __init__(self, momentum: float = 0.9, weight_decay: float = 0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict = {}

    def step(self, params: dict, grads: dict, lr: float) -> None:
        for k, gk in grads.items():
            if not np.all(np.isfinite(gk)):
                bad = int((~np.isfinite(gk)).sum())
                raise NumericalError(f"non-finite gradient for {k} ({bad} entries)")
        for k, gk in grads.items():
            if self.weight_decay and k.endswith(".w"):
                gk = gk + self.weight_decay * params[k]
            v = self.velocity.get(k)
            v = -lr * gk if v is None else self.momentum * v - lr * gk
            self.velocity[k] = v
            params[k] += v


def lr_at(iteration: int, total: int, base_lr: float) -> float:
    """Base rate, dropped tenfold for the last third of training."""
    return base_lr * (0.1 if iteration >= (2 * total) // 3 else 1.0)


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: dict, header: dict) -> None:
    """JSON header followed by little-endian float64 parameters in declaration order."""
    names = list(params)
    meta = dict(header)
    meta["params"] = [[k, list(params[k].shape)] for k in names]
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for k in names:
            f.write(np.ascontiguousarray(params[k], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict, dict]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<I", raw[len(MAGIC): len(MAGIC) + 4])
    start = len(MAGIC) + 4
    header = json.loads(raw[start: start + n].decode("utf-8"))
    off = start + n
    params = {}
    for k, shape in header["params"]:
        size = int(np.prod(shape)) if shape else 1
        params[k] = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes after parameters")
    return header, params


def save_branch(path, net: BranchNet, stage: str, seed: int) -> None:
    save_checkpoint(path, net.params, {"kind": "branch", "arch": asdict(net.arch), "heads": asdict(net.heads),
                                       "tag": net.tag, "stage": stage, "seed": seed,
                                       "dtype": np.dtype(net.dtype).name})


def load_branch(path) -> BranchNet:
    header, params = load_checkpoint(path)
    if header.get("kind") != "branch":
        raise ValueError(f"{path}: not a branch checkpoint")
    dt = np.dtype(header.get("dtype", "float64"))
    params = {k: v.astype(dt) for k, v in params.items()}
    return BranchNet(Arch(**header["arch"]), params, Heads(**header["heads"]), header.get("tag", ""))


def save_joint(path, net: JointNet, stage: str, seed: int) -> None:
    save_checkpoint(path, net.params, {
        "kind": "joint", "stage": stage, "seed": seed, "dtype": np.dtype(net.head_w.dtype).name,
        "branches": [{"arch": asdict(b.arch), "tag": b.tag} for b in net.branches],
    })


def load_joint(path) -> JointNet:
    header, params = load_checkpoint(path)
    if header.get("kind") != "joint":
        raise ValueError(f"{path}: not a joint checkpoint")
    dt = np.dtype(header.get("dtype", "float64"))
    params = {k: v.astype(dt) for k, v in params.items()}
    branches = []
    for i, bh in enumerate(header["branches"]):
        p = {k: params[f"branch{i}.{k}"] for k in BranchNet.TRUNK}
        branches.append(BranchNet(Arch(**bh["arch"]), p, Heads(), bh["tag"]))
    return JointNet(branches, params["head.classify.w"], params["head.classify.b"])
