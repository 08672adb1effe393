"""A small fully-convolutional encoder-decoder with analytic gradients.

Layout (``w1 < w2 < w3`` are the channel widths)::

    enc1: conv3x3(Cin->w1), lrelu, conv3x3(w1->w1), lrelu        HxW
    pool -> enc2: conv3x3(w1->w2), lrelu                         H/2
    pool -> bottleneck: conv3x3(w2->w3), lrelu                   H/4
    up, concat enc2 -> dec2: conv3x3(w3+w2->w2), lrelu           H/2
    up, concat enc1 -> dec1: conv3x3(w2+w1->w1), lrelu           HxW
    dropout -> head: conv1x1(w1->C)

Pooling is 2x2 averaging and upsampling is nearest-neighbour, so image sides
must be divisible by 4. Everything runs in float64 on channels-last arrays. Each convolution is
lowered to matrix products whose summation order depends only on array
shapes, never on values or thread scheduling.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .errors import FormatError
from .grid import Mask, ShapeError

__all__ = [
    "Architecture",
    "SegmenterParams",
    "FormatError",
    "init_params",
    "forward",
    "backward",
    "forward_backward",
    "supervised_loss",
    "supervised_loss_and_grad",
    "save_checkpoint",
    "load_checkpoint",
    "params_digest",
]

LEAK = 0.01

CKPT_MAGIC = b"PSEG"
CKPT_VERSION = 1


@dataclass(frozen=True)
class Architecture:
    in_channels: int = 1
    num_classes: int = 4
    widths: tuple = (8, 16, 32)
    dropout: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) != 3 or min(self.widths) <= 0:
            raise ValueError("widths must be three positive channel counts")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")

    def layer_shapes(self) -> dict:
        """``name -> (out_ch, in_ch, k)`` in parameter order."""
        w1, w2, w3 = self.widths
        return {
            "enc1a": (w1, self.in_channels, 3),
            "enc1b": (w1, w1, 3),
            "enc2": (w2, w1, 3),
            "bott": (w3, w2, 3),
            "dec2": (w2, w3 + w2, 3),
            "dec1": (w1, w2 + w1, 3),
            "head": (self.num_classes, w1, 1),
        }

    def param_shapes(self) -> dict:
        shapes = {}
        for name, (co, ci, k) in self.layer_shapes().items():
            shapes[f"{name}.w"] = (co, ci, k, k)
            shapes[f"{name}.b"] = (co,)
        return shapes

    def to_json(self) -> str:
        return json.dumps(
            {
                "in_channels": self.in_channels,
                "num_classes": self.num_classes,
                "widths": list(self.widths),
                "dropout": self.dropout,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "Architecture":
        d = json.loads(text)
        return cls(d["in_channels"], d["num_classes"], tuple(d["widths"]), d["dropout"])


@dataclass
class SegmenterParams:
    arch: Architecture
    arrays: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = self.arch.param_shapes()
        if set(expected) != set(self.arrays):
            raise ValueError(f"parameter names {sorted(self.arrays)} do not match architecture")
        for name, shape in expected.items():
            arr = np.asarray(self.arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
            self.arrays[name] = arr

    def copy(self) -> "SegmenterParams":
        return SegmenterParams(self.arch, {k: v.copy() for k, v in self.arrays.items()})

    def names(self) -> list:
        return list(self.arch.param_shapes())

    def zeros_like(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}

    @property
    def num_params(self) -> int:
        return sum(v.size for v in self.arrays.values())


def init_params(arch: Architecture, seed: int = 0) -> SegmenterParams:
    """He-normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, (co, ci, k) in arch.layer_shapes().items():
        fan_in = ci * k * k
        arrays[f"{name}.w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(co, ci, k, k))
        arrays[f"{name}.b"] = np.zeros(co)
    return SegmenterParams(arch, arrays)


def params_digest(params: SegmenterParams) -> str:
    import hashlib

    h = hashlib.sha256()
    for name in params.names():
        h.update(name.encode())
        h.update(np.ascontiguousarray(params.arrays[name]).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# layers


def _shifts(k):
    return [(i, j) for i in range(k) for j in range(k)]


def _conv_forward(x, w, b):
    """3x3 (or 1x1) same-padded convolution on ``(N, H, W, Ci)`` input.

    Two exact lowerings, picked by shape only: im2col when the layer widens
    (``Co > Ci``), otherwise one product on the padded grid followed by a sum
    of shifted output slices, which moves far less memory.
    """
    N, H, W, Ci = x.shape
    Co, _, k, _ = w.shape
    if k == 1:
        cols = x.reshape(N * H * W, Ci)
        out = cols @ w[:, :, 0, 0].T + b
        return out.reshape(N, H, W, Co), ("cols", cols)
    p = k // 2
    xp = np.zeros((N, H + 2 * p, W + 2 * p, Ci))
    xp[:, p:-p, p:-p] = x
    if Co > Ci:
        cols = np.empty((N, H, W, k * k * Ci))
        for s, (i, j) in enumerate(_shifts(k)):
            cols[..., s * Ci : (s + 1) * Ci] = xp[:, i : i + H, j : j + W]
        cols = cols.reshape(N * H * W, k * k * Ci)
        wmat = w.transpose(0, 2, 3, 1).reshape(Co, -1)
        out = cols @ wmat.T + b
        return out.reshape(N, H, W, Co), ("cols", cols)
    # wcat[:, s*Co:(s+1)*Co] is the Ci x Co kernel tap for shift s
    wcat = w.transpose(1, 2, 3, 0).reshape(Ci, k * k * Co)
    y = (xp.reshape(-1, Ci) @ wcat).reshape(N, H + 2 * p, W + 2 * p, k * k, Co)
    out = np.broadcast_to(b, (N, H, W, Co)).copy()
    for s, (i, j) in enumerate(_shifts(k)):
        out += y[:, i : i + H, j : j + W, s]
    return out, ("padded", xp)


def _conv_backward(dout, saved, w, x_shape):
    N, H, W, Ci = x_shape
    Co, _, k, _ = w.shape
    kind, data = saved
    db = dout.reshape(-1, Co).sum(axis=0)
    if k == 1:
        d2 = dout.reshape(-1, Co)
        dw = (d2.T @ data).reshape(Co, Ci, 1, 1)
        return (d2 @ w[:, :, 0, 0]).reshape(N, H, W, Ci), dw, db
    p = k // 2
    if kind == "cols":
        d2 = dout.reshape(-1, Co)
        wmat = w.transpose(0, 2, 3, 1).reshape(Co, -1)
        dw = (d2.T @ data).reshape(Co, k, k, Ci).transpose(0, 3, 1, 2)
        dcols = (d2 @ wmat).reshape(N, H, W, k * k * Ci)
        dxp = np.zeros((N, H + 2 * p, W + 2 * p, Ci))
        for s, (i, j) in enumerate(_shifts(k)):
            dxp[:, i : i + H, j : j + W] += dcols[..., s * Ci : (s + 1) * Ci]
        return dxp[:, p:-p, p:-p], dw, db
    xp = data
    dy = np.zeros((N, H + 2 * p, W + 2 * p, k * k, Co))
    for s, (i, j) in enumerate(_shifts(k)):
        dy[:, i : i + H, j : j + W, s] = dout
    dy = dy.reshape(-1, k * k * Co)
    wcat = w.transpose(1, 2, 3, 0).reshape(Ci, k * k * Co)
    dw = (xp.reshape(-1, Ci).T @ dy).reshape(Ci, k, k, Co).transpose(3, 0, 1, 2)
    dxp = (dy @ wcat.T).reshape(N, H + 2 * p, W + 2 * p, Ci)
    return dxp[:, p:-p, p:-p], dw, db


def _lrelu(x):
    return np.where(x > 0, x, LEAK * x)


def _lrelu_grad(pre, dout):
    return np.where(pre > 0, dout, LEAK * dout)


def _pool(x):
    N, H, W, C = x.shape
    return x.reshape(N, H // 2, 2, W // 2, 2, C).mean(axis=(2, 4))


def _pool_backward(dout):
    return np.repeat(np.repeat(dout, 2, axis=1), 2, axis=2) * 0.25


def _up(x):
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def _up_backward(dout):
    N, H, W, C = dout.shape
    return dout.reshape(N, H // 2, 2, W // 2, 2, C).sum(axis=(2, 4))


DropoutArg = Union[None, int, Sequence]


def dropout_keep_mask(arch: Architecture, dropout: DropoutArg, n: int, height: int, width: int):
    """Per-sample inverted-dropout multipliers, or ``None`` when dropout is off.

    ``dropout`` is either one integer seed (sample ``i`` then draws from the
    stream ``[seed, i]``) or a sequence of ``n`` per-sample seeds, where a
    ``None`` entry switches dropout off for that sample. A sample's mask depends
    only on its own seed, never on the batch it is evaluated in.
    """
    if dropout is None or dropout is False:
        return None
    if isinstance(dropout, (int, np.integer)):
        seeds = [[int(dropout), i] for i in range(n)]
    else:
        seeds = list(dropout)
        if len(seeds) != n:
            raise ValueError(f"need {n} dropout seeds, got {len(seeds)}")
    rate = arch.dropout
    shape = (height, width, arch.widths[0])
    keep = np.empty((n,) + shape)
    for i, s in enumerate(seeds):
        if s is None:
            keep[i] = 1.0 - rate
        else:
            keep[i] = np.random.default_rng(s).random(shape) >= rate
    return keep / (1.0 - rate)


def _as_batch(params: SegmenterParams, image):
    x = np.asarray(image, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise ShapeError(f"image must be HxWxCin or NxHxWxCin, got {np.shape(image)}")
    if x.shape[3] != params.arch.in_channels:
        raise ShapeError(f"expected {params.arch.in_channels} input channels, got {x.shape[3]}")
    if x.shape[1] % 4 or x.shape[2] % 4:
        raise ShapeError(f"image sides must be divisible by 4, got {x.shape[1:3]}")
    return x, single


def _forward(params: SegmenterParams, x, keep):
    a = params.arrays
    cache = {}

    def conv(name, inp, act=True):
        out, saved = _conv_forward(inp, a[f"{name}.w"], a[f"{name}.b"])
        cache[name] = (saved, inp.shape, out if act else None)
        return _lrelu(out) if act else out

    e1 = conv("enc1b", conv("enc1a", x))
    e2 = conv("enc2", _pool(e1))
    bt = conv("bott", _pool(e2))
    d2 = conv("dec2", np.concatenate([_up(bt), e2], axis=3))
    d1 = conv("dec1", np.concatenate([_up(d2), e1], axis=3))
    if keep is not None:
        d1 = d1 * keep
    cache["keep"] = keep
    cache["widths"] = params.arch.widths
    z = conv("head", d1, act=False)
    return z.transpose(0, 3, 1, 2), cache


def _backward(params: SegmenterParams, cache, dz):
    a = params.arrays
    grads = {}
    w1, w2, w3 = cache["widths"]

    def conv_back(name, dout):
        saved, in_shape, pre = cache[name]
        if pre is not None:
            dout = _lrelu_grad(pre, dout)
        dx, grads[f"{name}.w"], grads[f"{name}.b"] = _conv_backward(dout, saved, a[f"{name}.w"], in_shape)
        return dx

    dd1 = conv_back("head", np.ascontiguousarray(dz.transpose(0, 2, 3, 1)))
    if cache["keep"] is not None:
        dd1 = dd1 * cache["keep"]
    dcat1 = conv_back("dec1", dd1)
    dd2, de1 = _up_backward(dcat1[..., :w2]), dcat1[..., w2:]
    dcat2 = conv_back("dec2", dd2)
    dbt, de2 = _up_backward(dcat2[..., :w3]), dcat2[..., w3:]
    de2 = de2 + _pool_backward(conv_back("bott", dbt))
    de1 = de1 + _pool_backward(conv_back("enc2", de2))
    conv_back("enc1a", conv_back("enc1b", de1))
    return grads


def forward(params: SegmenterParams, image, dropout: DropoutArg = None) -> np.ndarray:
    """Logits for one image ``(H, W, Cin) -> (C, H, W)`` or a batch ``(N, H, W, Cin) -> (N, C, H, W)``."""
    x, single = _as_batch(params, image)
    keep = dropout_keep_mask(params.arch, dropout, x.shape[0], x.shape[1], x.shape[2])
    z, _ = _forward(params, x, keep)
    return z[0] if single else z


def forward_backward(params: SegmenterParams, image, loss_grad_fn, dropout: DropoutArg = None):
    """Run forward, hand the logits to ``loss_grad_fn`` and back-propagate.

    ``loss_grad_fn(logits) -> (loss, dlogits)`` receives logits in the same
    single/batch layout as :func:`forward`. Returns ``(loss, logits, grads)``.
    """
    x, single = _as_batch(params, image)
    keep = dropout_keep_mask(params.arch, dropout, x.shape[0], x.shape[1], x.shape[2])
    z, cache = _forward(params, x, keep)
    loss, dz = loss_grad_fn(z[0] if single else z)
    dz = np.asarray(dz, dtype=np.float64)
    if single:
        dz = dz[None]
    if dz.shape != z.shape:
        raise ShapeError(f"upstream gradient {dz.shape} does not match logits {z.shape}")
    return loss, (z[0] if single else z), _backward(params, cache, dz)


def backward(params: SegmenterParams, image, upstream: np.ndarray, dropout: DropoutArg = None) -> dict:
    """Parameter gradient of ``<forward(params, image), upstream>``.

    For a batch the per-image gradients are summed.
    """
    _, _, grads = forward_backward(params, image, lambda z: (0.0, upstream), dropout)
    return grads


# ---------------------------------------------------------------------------
# supervised objective


def supervised_loss(logits: np.ndarray, target: Mask):
    """Mean cross-entropy (multi-class) or mean per-channel BCE (multi-label).

    Returns ``(loss, dloss/dlogits)`` for one ``(C, H, W)`` logit map.
    """
    z = np.asarray(logits, dtype=np.float64)
    C, H, W = z.shape
    if target.num_classes != C or target.labels.shape[:2] != (H, W):
        raise ShapeError(f"target {target.labels.shape} does not match logits {z.shape}")
    if target.multilabel:
        y = target.labels.transpose(2, 0, 1).astype(np.float64)
        loss = np.logaddexp(0.0, np.where(y > 0, -z, z)).mean()
        p = 0.5 * (1.0 + np.tanh(0.5 * z))
        return float(loss), (p - y) / z.size
    flat = z.reshape(C, -1)
    zmax = flat.max(axis=0, keepdims=True)
    e = np.exp(flat - zmax)
    s = e.sum(axis=0, keepdims=True)
    idx = target.labels.reshape(-1)
    cols = np.arange(idx.size)
    logp_t = flat[idx, cols] - zmax[0] - np.log(s[0])
    grad = e / s
    grad[idx, cols] -= 1.0
    return float(-logp_t.mean()), (grad / idx.size).reshape(C, H, W)


def batch_supervised_loss(targets: Sequence[Mask]):
    """``loss_grad_fn`` for :func:`forward_backward`: batch mean of supervised losses."""

    def fn(z):
        n = len(targets)
        dz = np.empty_like(z)
        total = 0.0
        for i, t in enumerate(targets):
            li, dz[i] = supervised_loss(z[i], t)
            total += li
        return total / n, dz / n

    return fn


def supervised_loss_and_grad(params: SegmenterParams, image, target: Mask, dropout: DropoutArg = None):
    """Supervised loss of one image and its gradient with respect to the logits."""
    return supervised_loss(forward(params, image, dropout), target)


# ---------------------------------------------------------------------------
# checkpoint format


def save_checkpoint(params: SegmenterParams, path) -> None:
    desc = params.arch.to_json().encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(desc)), desc]
    for name in params.names():
        arr = params.arrays[name]
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def _take(buf: bytes, pos: int, n: int, what: str):
    if pos + n > len(buf):
        raise FormatError(f"truncated file while reading {what}", pos)
    return buf[pos : pos + n], pos + n


def load_checkpoint(path) -> SegmenterParams:
    with open(path, "rb") as fh:
        buf = fh.read()
    return checkpoint_from_bytes(buf)


def checkpoint_from_bytes(buf: bytes) -> SegmenterParams:
    magic, pos = _take(buf, 0, 4, "magic")
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CKPT_MAGIC!r}", 0)
    raw, pos = _take(buf, pos, 8, "header")
    version, dlen = struct.unpack("<II", raw)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    raw, pos2 = _take(buf, pos, dlen, "architecture descriptor")
    try:
        arch = Architecture.from_json(raw.decode("utf-8"))
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"invalid architecture descriptor: {exc}", pos) from None
    pos = pos2
    arrays = {}
    for name, shape in arch.param_shapes().items():
        raw, p2 = _take(buf, pos, 4, f"{name} rank")
        (rank,) = struct.unpack("<I", raw)
        if rank != len(shape):
            raise FormatError(f"{name}: rank {rank} does not match architecture", pos)
        raw, p3 = _take(buf, p2, 4 * rank, f"{name} dims")
        dims = struct.unpack(f"<{rank}I", raw)
        if tuple(dims) != shape:
            raise FormatError(f"{name}: dims {dims} do not match architecture {shape}", p2)
        count = int(np.prod(dims))
        raw, pos = _take(buf, p3, 8 * count, f"{name} data")
        arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes", pos)
    return SegmenterParams(arch, arrays)
