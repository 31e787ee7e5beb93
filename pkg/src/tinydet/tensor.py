"""Dense-tensor autodiff core.

A small reverse-mode engine over numpy arrays: each operation returns a new
``Tensor`` carrying a backward closure, and ``Tensor.backward()`` on a scalar
replays the recorded tape in reverse topological order.  Storage defaults to
float32; reductions accumulate in float64 before casting back, and the whole
graph can be run in float64 (used by the finite-difference checks).

Also owns the parameter store (seeded, order-deterministic initialization)
and the "EFBT" binary tensor file format used for checkpoints and dataset
fixtures.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "ParamStore",
    "conv2d",
    "relu",
    "sigmoid",
    "add",
    "hadamard",
    "mul_mask",
    "scale",
    "shift",
    "broadcast_add_channel",
    "adaptive_max_pool_1x1",
    "max_pool_2x2",
    "bilinear_upsample",
    "reshape",
    "tensor_sum",
    "tensor_mean",
    "gather_hw",
    "concat_columns",
    "weighted_bce_with_logits",
    "write_tensor_file",
    "read_tensor_file",
]


class Tensor:
    """N-dimensional real array with an optional gradient buffer.

    ``data`` is a numpy array (float32 by default).  ``grad`` is allocated
    lazily on the first backward pass and always matches ``data``'s shape.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(self.data.dtype, copy=False)

    def backward(self):
        """Populate grad buffers of every reachable requires_grad tensor.

        Only valid on a scalar (0-d) tensor produced by this module's ops.
        """
        if self.data.shape != ():
            raise ValueError(
                f"backward() requires a scalar loss, got shape {self.data.shape}"
            )
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    """Build a Tensor, coercing to the given dtype (float32 default)."""
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _check_same_shape(a: Tensor, b: Tensor, opname: str):
    if a.data.shape != b.data.shape:
        raise ValueError(f"{opname}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def backward(g):
        if a.requires_grad or a._parents:
            a._accumulate(g)
        if b.requires_grad or b._parents:
            b._accumulate(g)

    return _make(a.data + b.data, (a, b), backward)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "hadamard")

    def backward(g):
        if a.requires_grad or a._parents:
            a._accumulate(g * b.data)
        if b.requires_grad or b._parents:
            b._accumulate(g * a.data)

    return _make(a.data * b.data, (a, b), backward)


def mul_mask(x: Tensor, mask: Tensor) -> Tensor:
    """Elementwise product of a [C,H,W] map with a [1,H,W] or [C,H,W] mask."""
    if x.data.ndim != 3 or mask.data.ndim != 3:
        raise ValueError("mul_mask expects [C,H,W] inputs")
    if mask.data.shape[1:] != x.data.shape[1:]:
        raise ValueError(
            f"mul_mask: spatial mismatch {x.data.shape} vs {mask.data.shape}"
        )
    if mask.data.shape[0] not in (1, x.data.shape[0]):
        raise ValueError(
            f"mul_mask: mask channels {mask.data.shape[0]} incompatible with {x.data.shape[0]}"
        )

    def backward(g):
        if x.requires_grad or x._parents:
            x._accumulate(g * mask.data)
        if mask.requires_grad or mask._parents:
            gm = g * x.data
            if mask.data.shape[0] == 1 and x.data.shape[0] != 1:
                gm = gm.sum(axis=0, keepdims=True, dtype=np.float64)
            mask._accumulate(gm)

    return _make(x.data * mask.data, (x, mask), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        a._accumulate(g * s)

    return _make(a.data * a.data.dtype.type(s), (a,), backward)


def shift(a: Tensor, c: float) -> Tensor:
    """Add the scalar ``c`` to every element; the gradient passes through."""

    def backward(g):
        a._accumulate(g)

    return _make(a.data + a.data.dtype.type(float(c)), (a,), backward)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0

    def backward(g):
        x._accumulate(g * pos)

    return _make(np.where(pos, x.data, x.data.dtype.type(0)), (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    # piecewise form avoids overflow for large |x|
    d = x.data
    out = np.empty_like(d)
    p = d >= 0
    out[p] = 1.0 / (1.0 + np.exp(-d[p]))
    e = np.exp(d[~p])
    out[~p] = e / (1.0 + e)

    def backward(g):
        x._accumulate(g * out * (1.0 - out))

    return _make(out, (x,), backward)


def broadcast_add_channel(feature_map: Tensor, vec: Tensor) -> Tensor:
    """Add a per-channel vector [C] to every spatial position of a [C,H,W] map."""
    if feature_map.data.ndim != 3 or vec.data.ndim != 1:
        raise ValueError("broadcast_add_channel expects map [C,H,W] and vec [C]")
    if feature_map.data.shape[0] != vec.data.shape[0]:
        raise ValueError(
            f"broadcast_add_channel: channel mismatch {feature_map.data.shape[0]} vs {vec.data.shape[0]}"
        )

    def backward(g):
        if feature_map.requires_grad or feature_map._parents:
            feature_map._accumulate(g)
        if vec.requires_grad or vec._parents:
            vec._accumulate(g.sum(axis=(1, 2), dtype=np.float64))

    return _make(feature_map.data + vec.data[:, None, None], (feature_map, vec), backward)


# ---------------------------------------------------------------------------
# pooling / resampling


def adaptive_max_pool_1x1(x: Tensor) -> Tensor:
    """Collapse the spatial dimensions of a [C,H,W] map to a [C] vector of maxima.

    The gradient routes to the first argmax per channel in row-major order,
    so the backward pass is deterministic under ties.
    """
    if x.data.ndim != 3:
        raise ValueError(f"adaptive_max_pool_1x1 expects [C,H,W], got {x.data.shape}")
    c = x.data.shape[0]
    flat = x.data.reshape(c, -1)
    idx = flat.argmax(axis=1)  # first max in row-major order
    out = flat[np.arange(c), idx]

    def backward(g):
        gx = np.zeros_like(flat)
        gx[np.arange(c), idx] = g
        x._accumulate(gx.reshape(x.data.shape))

    return _make(out, (x,), backward)


def max_pool_2x2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 over a [C,H,W] map (H, W even)."""
    if x.data.ndim != 3:
        raise ValueError(f"max_pool_2x2 expects [C,H,W], got {x.data.shape}")
    c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"max_pool_2x2 requires even spatial dims, got {h}x{w}")
    win = x.data.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4)
    win = win.reshape(c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)  # first max within each window
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4)
        x._accumulate(gx.reshape(c, h, w))

    return _make(out, (x,), backward)


def _bilinear_axis(src: int, dst: int):
    """Half-pixel-center sample positions: lo index, hi index, hi weight."""
    s = src / dst
    pos = (np.arange(dst, dtype=np.float64) + 0.5) * s - 0.5
    pos = np.clip(pos, 0.0, src - 1.0)
    lo = np.floor(pos).astype(np.int64)
    lo = np.minimum(lo, src - 1)
    hi = np.minimum(lo + 1, src - 1)
    w_hi = pos - lo
    return lo, hi, w_hi


def bilinear_upsample(x: Tensor, target) -> Tensor:
    """Resize a [C,h,w] map to [C,H,W] with half-pixel-center bilinear sampling.

    Output values are convex combinations of the four nearest source samples,
    so per-channel min/max never overshoot the source range.  Downsampling is
    rejected.
    """
    if x.data.ndim != 3:
        raise ValueError(f"bilinear_upsample expects [C,h,w], got {x.data.shape}")
    th, tw = int(target[0]), int(target[1])
    c, h, w = x.data.shape
    if th < h or tw < w:
        raise ValueError(
            f"bilinear_upsample: target {th}x{tw} smaller than source {h}x{w}"
        )
    y0, y1, wy = _bilinear_axis(h, th)
    x0, x1, wx = _bilinear_axis(w, tw)
    wy = wy[:, None]
    wx = wx[None, :]
    dt = x.data.dtype
    w00 = ((1 - wy) * (1 - wx)).astype(dt)
    w01 = ((1 - wy) * wx).astype(dt)
    w10 = (wy * (1 - wx)).astype(dt)
    w11 = (wy * wx).astype(dt)
    d = x.data
    out = (
        d[:, y0[:, None], x0[None, :]] * w00
        + d[:, y0[:, None], x1[None, :]] * w01
        + d[:, y1[:, None], x0[None, :]] * w10
        + d[:, y1[:, None], x1[None, :]] * w11
    )

    def backward(g):
        gx = np.zeros_like(d)
        yy0 = np.broadcast_to(y0[:, None], (th, tw))
        yy1 = np.broadcast_to(y1[:, None], (th, tw))
        xx0 = np.broadcast_to(x0[None, :], (th, tw))
        xx1 = np.broadcast_to(x1[None, :], (th, tw))
        for ch in range(c):
            np.add.at(gx[ch], (yy0, xx0), g[ch] * w00)
            np.add.at(gx[ch], (yy0, xx1), g[ch] * w01)
            np.add.at(gx[ch], (yy1, xx0), g[ch] * w10)
            np.add.at(gx[ch], (yy1, xx1), g[ch] * w11)
        x._accumulate(gx)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------------------
# convolution


def _im2col(padded, kh, kw, stride, oh, ow):
    # padded: [C, Hp, Wp] -> [C*kh*kw, oh*ow]
    view = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(1, 2))
    view = view[:, ::stride, ::stride]  # [C, oh, ow, kh, kw]
    return view.transpose(0, 3, 4, 1, 2).reshape(padded.shape[0] * kh * kw, oh * ow)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """2-D cross-correlation with bias over a single [C_in,H,W] image.

    Kernels are 1x1 or 3x3, padded so that stride-1 convolution preserves the
    spatial size; stride s > 1 yields ceil(H/s) x ceil(W/s) outputs.
    """
    if x.data.ndim != 3:
        raise ValueError(f"conv2d expects input [C,H,W], got {x.data.shape}")
    if weight.data.ndim != 4:
        raise ValueError(f"conv2d expects weight [Co,Ci,kh,kw], got {weight.data.shape}")
    co, ci, kh, kw = weight.data.shape
    if kh not in (1, 3) or kw not in (1, 3):
        raise ValueError(f"conv2d supports 1x1/3x3 kernels, got {kh}x{kw}")
    if x.data.shape[0] != ci:
        raise ValueError(
            f"conv2d: input has {x.data.shape[0]} channels, weight expects {ci}"
        )
    if bias.data.shape != (co,):
        raise ValueError(f"conv2d: bias shape {bias.data.shape} != ({co},)")
    c, h, w = x.data.shape
    ph, pw = kh // 2, kw // 2
    oh = (h + 2 * ph - kh) // stride + 1
    ow = (w + 2 * pw - kw) // stride + 1
    padded = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw)))
    cols = _im2col(padded, kh, kw, stride, oh, ow)
    wmat = weight.data.reshape(co, ci * kh * kw)
    out = (wmat @ cols + bias.data[:, None]).reshape(co, oh, ow)

    def backward(g):
        gmat = g.reshape(co, oh * ow)
        if weight.requires_grad or weight._parents:
            weight._accumulate((gmat @ cols.T).reshape(weight.data.shape))
        if bias.requires_grad or bias._parents:
            bias._accumulate(gmat.sum(axis=1, dtype=np.float64))
        if x.requires_grad or x._parents:
            gcols = (wmat.T @ gmat).reshape(ci, kh, kw, oh, ow)
            gpad = np.zeros_like(padded)
            for i in range(kh):
                for j in range(kw):
                    gpad[:, i : i + oh * stride : stride, j : j + ow * stride : stride] += gcols[:, i, j]
            if ph or pw:
                gpad = gpad[:, ph : ph + h, pw : pw + w]
            x._accumulate(gpad)

    return _make(out, (x, weight, bias), backward)


# ---------------------------------------------------------------------------
# shape / reduction / selection


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)

    def backward(g):
        x._accumulate(g.reshape(x.data.shape))

    return _make(x.data.reshape(shape), (x,), backward)


def tensor_sum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(dtype=np.float64)).astype(x.data.dtype)

    def backward(g):
        x._accumulate(np.full_like(x.data, g))

    return _make(out, (x,), backward)


def tensor_mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.sum(dtype=np.float64) / n).astype(x.data.dtype)

    def backward(g):
        x._accumulate(np.full_like(x.data, g / n))

    return _make(out, (x,), backward)


def gather_hw(x: Tensor, flat_idx) -> Tensor:
    """Select spatial positions from a [C,H,W] map: returns [C,N].

    ``flat_idx`` holds row-major positions into the HxW plane.
    """
    if x.data.ndim != 3:
        raise ValueError(f"gather_hw expects [C,H,W], got {x.data.shape}")
    idx = np.asarray(flat_idx, dtype=np.int64)
    c = x.data.shape[0]
    flat = x.data.reshape(c, -1)
    if idx.size and (idx.min() < 0 or idx.max() >= flat.shape[1]):
        raise ValueError("gather_hw: index out of range")

    def backward(g):
        gx = np.zeros_like(flat)
        np.add.at(gx, (slice(None), idx), g)
        x._accumulate(gx.reshape(x.data.shape))

    return _make(flat[:, idx], (x,), backward)


def concat_columns(tensors) -> Tensor:
    """Concatenate a list of [C,Ni] tensors along the column axis."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat_columns: empty input")
    c = tensors[0].data.shape[0]
    for t in tensors:
        if t.data.ndim != 2 or t.data.shape[0] != c:
            raise ValueError("concat_columns: inputs must be [C,N] with equal C")
    sizes = [t.data.shape[1] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad or t._parents:
                t._accumulate(g[:, lo:hi])

    return _make(np.concatenate([t.data for t in tensors], axis=1), tuple(tensors), backward)


def weighted_bce_with_logits(logits: Tensor, targets, weights) -> Tensor:
    """Weighted binary cross-entropy from logits, summed over all entries.

    ``targets`` and ``weights`` are plain arrays broadcastable to the logits'
    shape; entries with zero weight do not contribute to value or gradient.
    """
    t = np.broadcast_to(np.asarray(targets, dtype=np.float64), logits.data.shape)
    w = np.broadcast_to(np.asarray(weights, dtype=np.float64), logits.data.shape)
    z = logits.data.astype(np.float64)
    # stable: max(z,0) - z*t + log1p(exp(-|z|))
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray((per * w).sum()).astype(logits.data.dtype)
    sig = 1.0 / (1.0 + np.exp(-np.abs(z)))
    sig = np.where(z >= 0, sig, 1.0 - sig)

    def backward(g):
        logits._accumulate(g * (w * (sig - t)))

    return _make(out, (logits,), backward)


# ---------------------------------------------------------------------------
# parameter store


class ParamStore:
    """Named map of trainable tensors with order-deterministic initialization.

    The same seed and the same registration order give bitwise-identical
    initial values.  Weights use symmetric uniform(-a, a) initialization with
    a = sqrt(6 / (fan_in + fan_out)); biases start at zero.
    """

    def __init__(self, seed: int = 0, dtype=np.float32):
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self._rng = np.random.default_rng(self.seed)
        self.params: dict[str, Tensor] = {}

    def register(self, name: str, shape, fan_in: int | None = None,
                 fan_out: int | None = None, zero: bool = False) -> Tensor:
        if name in self.params:
            raise ValueError(f"parameter {name!r} already registered")
        shape = tuple(int(s) for s in shape)
        if zero:
            data = np.zeros(shape, dtype=self.dtype)
        else:
            if fan_in is None or fan_out is None:
                raise ValueError(f"parameter {name!r}: fan_in/fan_out required")
            a = float(np.sqrt(6.0 / (fan_in + fan_out)))
            data = self._rng.uniform(-a, a, size=shape).astype(self.dtype)
        t = Tensor(data, requires_grad=True)
        self.params[name] = t
        return t

    def register_conv(self, name: str, c_out: int, c_in: int, k: int):
        """Register a conv weight/bias pair; returns (weight, bias)."""
        w = self.register(f"{name}.w", (c_out, c_in, k, k),
                          fan_in=c_in * k * k, fan_out=c_out * k * k)
        b = self.register(f"{name}.b", (c_out,), zero=True)
        return w, b

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def items(self):
        return self.params.items()

    def tensors(self):
        return list(self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def save(self, directory: str):
        """Checkpoint: one EFBT file per tensor plus a JSON manifest."""
        os.makedirs(os.path.join(directory, "params"), exist_ok=True)
        entries = []
        for i, (name, t) in enumerate(self.params.items()):
            fname = f"params/p{i:04d}.efbt"
            write_tensor_file(os.path.join(directory, fname), t.data)
            entries.append({"name": name, "shape": list(t.data.shape), "file": fname})
        manifest = {"format": "tinydet-checkpoint-v1", "seed": self.seed,
                    "params": entries}
        with open(os.path.join(directory, "manifest.json"), "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, directory: str) -> "ParamStore":
        with open(os.path.join(directory, "manifest.json")) as f:
            manifest = json.load(f)
        store = cls(seed=manifest.get("seed", 0))
        for e in manifest["params"]:
            data = read_tensor_file(os.path.join(directory, e["file"]))
            if list(data.shape) != e["shape"]:
                raise ValueError(
                    f"checkpoint {e['file']}: shape {list(data.shape)} != manifest {e['shape']}"
                )
            store.params[e["name"]] = Tensor(data.astype(store.dtype), requires_grad=True)
        return store


# ---------------------------------------------------------------------------
# EFBT binary tensor format

_EFBT_MAGIC = b"EFBT"


def write_tensor_file(path: str, array: np.ndarray):
    """Write an array as EFBT: magic, version, dtype code, ndim, u32 dims, f32 LE payload."""
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    if arr.ndim > 255:
        raise ValueError("EFBT supports at most 255 dims")
    with open(path, "wb") as f:
        f.write(_EFBT_MAGIC)
        f.write(struct.pack("<BBB", 1, 0, arr.ndim))
        for d in arr.shape:
            f.write(struct.pack("<I", d))
        f.write(arr.tobytes())


def read_tensor_file(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _EFBT_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected 'EFBT'")
        version, dtype_code, ndim = struct.unpack("<BBB", f.read(3))
        if version != 1:
            raise ValueError(f"{path}: unsupported version {version}")
        if dtype_code != 0:
            raise ValueError(f"{path}: unsupported dtype code {dtype_code}")
        dims = struct.unpack(f"<{ndim}I", f.read(4 * ndim)) if ndim else ()
        count = int(np.prod(dims)) if dims else 1
        payload = f.read(4 * count)
        if len(payload) != 4 * count:
            raise ValueError(f"{path}: truncated payload")
        arr = np.frombuffer(payload, dtype="<f4", count=count)
        return arr.reshape(dims).copy()
