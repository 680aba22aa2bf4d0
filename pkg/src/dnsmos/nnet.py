"""A small numpy CNN library sized for the DNSMOS regressor.

Layout is channels-last: a batch of features is ``(B, frames, mels, 1)``.
The default :data:`TABLE1` architecture is

    conv 32 -> maxpool 2x2 -> dropout 0.3
    conv 32 -> maxpool 2x2 -> dropout 0.3
    conv 32 -> maxpool 2x2 -> dropout 0.3
    conv 64 -> global max pool
    dense 64 -> dense 64 -> dense 1 (linear)

with 3x3 same-padded stride-1 convolutions and ReLU everywhere except the
head. There is no batch normalization and no input normalization.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numba
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from dnsmos.errors import (
    ChecksumMismatch,
    EmptyDataset,
    LengthMismatch,
    NonFiniteActivation,
    ShapeMismatch,
    ShapeTableMismatch,
    StaleTrace,
    VersionMismatch,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Architecture:
    input_shape: tuple = (900, 120)
    conv_filters: tuple = (32, 32, 32, 64)
    # whether each conv block is followed by 2x2 max pool + dropout
    conv_pooled: tuple = (True, True, True, False)
    dense_units: tuple = (64, 64)
    dropout: float = 0.3
    name: str = "dnsmos-table1"
    revision: int = 1

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "conv_filters", tuple(int(v) for v in self.conv_filters))
        object.__setattr__(self, "conv_pooled", tuple(bool(v) for v in self.conv_pooled))
        object.__setattr__(self, "dense_units", tuple(int(v) for v in self.dense_units))
        if len(self.conv_filters) != len(self.conv_pooled):
            raise ValueError("conv_filters and conv_pooled must have equal length")
        if not self.conv_filters:
            raise ValueError("at least one conv layer is required")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def arch_version(self) -> str:
        return f"{self.name}/r{self.revision}"

    def param_shapes(self) -> dict:
        shapes = {}
        c_in = 1
        for k, f in enumerate(self.conv_filters, 1):
            shapes[f"conv{k}.kernel"] = (3, 3, c_in, f)
            shapes[f"conv{k}.bias"] = (f,)
            c_in = f
        for k, units in enumerate(self.dense_units, 1):
            shapes[f"dense{k}.kernel"] = (c_in, units)
            shapes[f"dense{k}.bias"] = (units,)
            c_in = units
        shapes["head.kernel"] = (c_in, 1)
        shapes["head.bias"] = (1,)
        return shapes

    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes().values())

    def output_shapes(self) -> list:
        """Per-item (label, shape) rows, mirroring the layer table."""
        h, w = self.input_shape
        rows = [("input", (h, w, 1))]
        for k, (f, pooled) in enumerate(zip(self.conv_filters, self.conv_pooled), 1):
            rows.append((f"conv{k}", (h, w, f)))
            if pooled:
                h, w = h // 2, w // 2
                rows.append((f"pool{k}", (h, w, f)))
        rows.append(("global_max_pool", (1, self.conv_filters[-1])))
        for k, units in enumerate(self.dense_units, 1):
            rows.append((f"dense{k}", (1, units)))
        rows.append(("head", (1, 1)))
        return rows

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(**d)


TABLE1 = Architecture()

# typical magnitude of log-mel features in dB (the floor is -120 dB)
INPUT_SCALE_DB = 60.0


class DnsmosModel:
    """Parameters plus architecture. ``generation`` counts in-place updates."""

    def __init__(self, arch: Architecture, params: dict):
        expected = arch.param_shapes()
        if list(params) != list(expected):
            raise ShapeMismatch(f"parameter names {list(params)} != {list(expected)}")
        for name, shape in expected.items():
            if tuple(params[name].shape) != shape:
                raise ShapeMismatch(f"{name}: {params[name].shape} != {shape}")
        self.arch = arch
        self.params = params
        self.generation = 0

    @property
    def arch_version(self) -> str:
        return self.arch.arch_version

    @property
    def dropout_rate(self) -> float:
        return self.arch.dropout

    @property
    def dtype(self):
        return self.params["head.bias"].dtype

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "DnsmosModel":
        return DnsmosModel(self.arch, {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> "DnsmosModel":
        return DnsmosModel(self.arch, {k: v.astype(dtype) for k, v in self.params.items()})

    def content_hash(self) -> str:
        """SHA-256 over the shape table and little-endian float32 parameter blobs."""
        h = hashlib.sha256(_shape_table_bytes(self.arch))
        for p in self.params.values():
            h.update(np.ascontiguousarray(p, dtype="<f4").tobytes())
        return h.hexdigest()


def init_model(arch: Architecture = TABLE1, seed: int = 0, dtype=np.float32,
               input_scale: float = INPUT_SCALE_DB) -> DnsmosModel:
    """He-uniform kernels (limit sqrt(6 / fan_in)) and zero biases.

    Features are raw dB values of magnitude ~``input_scale``, so the first
    conv kernel is additionally divided by it to start with O(1) activations.
    The inputs themselves are never rescaled.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[:-1]))
            limit = np.sqrt(6.0 / fan_in)
            if name == "conv1.kernel":
                limit /= input_scale
            params[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return DnsmosModel(arch, params)


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class Trace:
    mode: str
    generation: int
    model_id: int
    batch_size: int
    shapes: list = field(default_factory=list)
    caches: list = field(default_factory=list)
    predictions: np.ndarray | None = None


def _im2col(x: np.ndarray) -> np.ndarray:
    """(B, H, W, C) -> (B*H*W, 9*C) patches of a same-padded 3x3 window."""
    b, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    patches = sliding_window_view(xp, (3, 3), axis=(1, 2))  # B, H, W, C, 3, 3
    return patches.transpose(0, 1, 2, 4, 5, 3).reshape(b * h * w, 9 * c)


def _flip_kernel(kernel: np.ndarray) -> np.ndarray:
    """(3, 3, C, F) kernel -> (9*F, C) matrix that maps output grads to input grads."""
    f = kernel.shape[-1]
    return kernel[::-1, ::-1].transpose(0, 1, 3, 2).reshape(9 * f, -1)


@numba.njit(cache=True)
def _maxpool2(a):
    """2x2 stride-2 max pool with floor semantics; returns (out, argmax-in-window).

    Window positions are numbered 0..3 row-major; ties go to the lowest index.
    """
    nb, h, w, c = a.shape
    h2, w2 = h // 2, w // 2
    out = np.empty((nb, h2, w2, c), a.dtype)
    idx = np.empty((nb, h2, w2, c), np.uint8)
    for b in range(nb):
        for i in range(h2):
            for j in range(w2):
                for ch in range(c):
                    best = a[b, 2 * i, 2 * j, ch]
                    k = 0
                    v = a[b, 2 * i, 2 * j + 1, ch]
                    if v > best:
                        best = v
                        k = 1
                    v = a[b, 2 * i + 1, 2 * j, ch]
                    if v > best:
                        best = v
                        k = 2
                    v = a[b, 2 * i + 1, 2 * j + 1, ch]
                    if v > best:
                        best = v
                        k = 3
                    out[b, i, j, ch] = best
                    idx[b, i, j, ch] = k
    return out, idx


@numba.njit(cache=True)
def _maxpool2_backward(dout, idx, h, w):
    nb, h2, w2, c = dout.shape
    da = np.zeros((nb, h, w, c), dout.dtype)
    for b in range(nb):
        for i in range(h2):
            for j in range(w2):
                for ch in range(c):
                    k = idx[b, i, j, ch]
                    da[b, 2 * i + k // 2, 2 * j + k % 2, ch] = dout[b, i, j, ch]
    return da


def _as_batch(model: DnsmosModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=model.dtype)
    if x.ndim == 3:
        x = x[..., None]
    h, w = model.arch.input_shape
    if x.ndim != 4 or x.shape[1:] != (h, w, 1):
        raise ShapeMismatch(f"expected batch of shape (B, {h}, {w}, 1), got {x.shape}")
    if x.shape[0] == 0:
        raise ShapeMismatch("empty batch")
    return x


def dropout(a: np.ndarray, rate: float, rng: np.random.Generator):
    """Inverted dropout: zero each unit with probability ``rate`` and rescale the
    survivors by 1/(1-rate), so the expectation equals the eval-mode activation."""
    keep = 1.0 - rate
    mask = rng.random(a.shape) < keep
    return a * (mask / keep).astype(a.dtype), mask


def forward(model: DnsmosModel, x, mode: str = "eval", rng_seed=None):
    """Run the network on ``x`` of shape (B, H, W) or (B, H, W, 1).

    Returns ``(predictions, trace)``. Only a train-mode trace keeps the
    caches needed by :func:`backward`; dropout masks are drawn from
    ``np.random.default_rng(rng_seed)``.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    arch = model.arch
    p = model.params
    h = _as_batch(model, x)
    b = h.shape[0]
    rng = np.random.default_rng(rng_seed) if train and arch.dropout > 0 else None
    trace = Trace(mode, model.generation, id(model), b)
    trace.shapes.append(("input", h.shape[1:]))

    for k, pooled in enumerate(arch.conv_pooled, 1):
        kernel = p[f"conv{k}.kernel"]
        _, hh, ww, c = h.shape
        f = kernel.shape[-1]
        cols = _im2col(h)
        z = (cols @ kernel.reshape(9 * c, f)).reshape(b, hh, ww, f)
        z += p[f"conv{k}.bias"]
        trace.shapes.append((f"conv{k}", z.shape[1:]))
        cache = {"kind": "conv", "k": k, "in_shape": h.shape}
        if train:
            cache["cols"] = cols
        del cols
        if pooled:
            # max pooling commutes with ReLU, so pool first and rectify the smaller map
            z, cache["pool_idx"] = _maxpool2(z)
            cache["pre_pool_hw"] = (hh, ww)
        cache["active"] = z > 0
        a = np.maximum(z, 0, out=z)
        if pooled:
            trace.shapes.append((f"pool{k}", a.shape[1:]))
            if train and arch.dropout > 0:
                a, cache["dropout_mask"] = dropout(a, arch.dropout, rng)
        if train:
            trace.caches.append(cache)
        h = a

    _, hh, ww, c = h.shape
    flat = h.reshape(b, hh * ww, c)
    gidx = flat.argmax(axis=1)
    h = np.take_along_axis(flat, gidx[:, None, :], axis=1)[:, 0, :]
    trace.shapes.append(("global_max_pool", (1, c)))
    if train:
        trace.caches.append({"kind": "gmp", "idx": gidx, "in_shape": (b, hh, ww, c)})

    for k in range(1, len(arch.dense_units) + 1):
        z = h @ p[f"dense{k}.kernel"] + p[f"dense{k}.bias"]
        if train:
            trace.caches.append({"kind": "dense", "k": k, "x": h, "active": z > 0})
        h = np.maximum(z, 0)
        trace.shapes.append((f"dense{k}", (1, h.shape[1])))

    out = (h @ p["head.kernel"] + p["head.bias"])[:, 0]
    trace.shapes.append(("head", (1, 1)))
    if train:
        trace.caches.append({"kind": "head", "x": h})
    if not np.all(np.isfinite(out)):
        raise NonFiniteActivation("non-finite prediction in forward pass")
    trace.predictions = out
    return out, trace


def mse_loss(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 1:
        raise LengthMismatch(f"pred {pred.shape} vs target {target.shape}")
    if pred.shape[0] == 0:
        raise LengthMismatch("empty batch")
    return float(np.mean((pred - target) ** 2))


def backward(model: DnsmosModel, trace: Trace, target) -> dict:
    """Gradients of ``mse_loss(trace.predictions, target)`` w.r.t. every parameter."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != (trace.batch_size,):
        raise LengthMismatch(f"target shape {target.shape} vs batch {trace.batch_size}")
    dpred = 2.0 * (trace.predictions - target) / trace.batch_size
    return backward_from_output(model, trace, dpred)


def backward_from_output(model: DnsmosModel, trace: Trace, dpred) -> dict:
    """Backpropagate an upstream gradient ``dL/dprediction`` of shape (B,)."""
    if trace.mode != "train" or not trace.caches:
        raise StaleTrace("backward needs a train-mode trace")
    if trace.model_id != id(model) or trace.generation != model.generation:
        raise StaleTrace("model changed since the forward pass")
    p = model.params
    dtype = model.dtype
    grads = {}
    caches = list(trace.caches)

    head = caches.pop()
    d = np.asarray(dpred, dtype=dtype)[:, None]
    grads["head.kernel"] = head["x"].T @ d
    grads["head.bias"] = d.sum(axis=0)
    d = d @ p["head.kernel"].T

    while caches and caches[-1]["kind"] == "dense":
        c = caches.pop()
        k = c["k"]
        d = d * c["active"]
        grads[f"dense{k}.kernel"] = c["x"].T @ d
        grads[f"dense{k}.bias"] = d.sum(axis=0)
        d = d @ p[f"dense{k}.kernel"].T

    gmp = caches.pop()
    b, hh, ww, ch = gmp["in_shape"]
    dflat = np.zeros((b, hh * ww, ch), dtype=dtype)
    np.put_along_axis(dflat, gmp["idx"][:, None, :], d[:, None, :], axis=1)
    d = dflat.reshape(b, hh, ww, ch)

    while caches:
        c = caches.pop()
        k = c["k"]
        if "dropout_mask" in c:
            d = d * (c["dropout_mask"] / (1.0 - model.arch.dropout)).astype(dtype)
        d = d * c["active"]
        if "pool_idx" in c:
            d = _maxpool2_backward(d, c["pool_idx"], *c["pre_pool_hw"])
        f = d.shape[-1]
        d2 = d.reshape(-1, f)
        kernel = p[f"conv{k}.kernel"]
        grads[f"conv{k}.kernel"] = (c["cols"].T @ d2).reshape(kernel.shape)
        grads[f"conv{k}.bias"] = d2.sum(axis=0)
        if k > 1:
            d = (_im2col(d) @ _flip_kernel(kernel)).reshape(c["in_shape"])

    return {name: grads[name] for name in p}


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(model: DnsmosModel, grads: dict, state: AdamState):
    """One bias-corrected Adam update, applied in place."""
    if set(grads) != set(model.params):
        raise ShapeMismatch("gradient names do not match model parameters")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, param in model.params.items():
        g = grads[name]
        if g.shape != param.shape:
            raise ShapeMismatch(f"{name}: gradient {g.shape} vs parameter {param.shape}")
        m = state.m.setdefault(name, np.zeros_like(param))
        v = state.v.setdefault(name, np.zeros_like(param))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        param -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    model.generation += 1
    return model, state


# ---------------------------------------------------------------------------
# training loop


@dataclass
class FitConfig:
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    lr: float = 1e-4
    # early stop once (loss[e-window] - loss[e]) / loss[e-window] < min_rel_improvement
    window: int = 5
    min_rel_improvement: float = 1e-4
    # optional absolute stop: end training once an epoch's mean loss falls below it
    target_loss: float | None = None
    # items per forward/backward chunk; gradients are summed over a batch's chunks
    chunk_size: int = 8


def as_dataset(pairs):
    """Stack ``(FeatureMatrix | array, target)`` pairs into (X, y) arrays."""
    pairs = list(pairs)
    if not pairs:
        raise EmptyDataset("dataset has no items")
    xs = [getattr(f, "values", f) for f, _ in pairs]
    return np.stack(xs).astype(np.float32), np.array([t for _, t in pairs], dtype=np.float64)


def _saturated(history, window, min_rel) -> bool:
    if len(history) <= window:
        return False
    ref, cur = history[-1 - window], history[-1]
    if ref <= 0.0:
        return True
    return (ref - cur) / ref < min_rel


def fit(model: DnsmosModel, dataset, config: FitConfig | None = None, progress=None):
    """Minibatch Adam on MSE. ``dataset`` is ``(X, y)`` or a list of pairs.

    Returns ``(model, history)`` where history holds each epoch's mean
    train-mode loss. Training is deterministic given ``config.seed``.
    """
    config = config or FitConfig()
    if isinstance(dataset, tuple) and len(dataset) == 2 and isinstance(dataset[1], np.ndarray):
        x, y = dataset
        x = np.asarray(x, dtype=model.dtype)
    else:
        x, y = as_dataset(dataset)
        x = x.astype(model.dtype)
    y = np.asarray(y, dtype=np.float64)
    n = x.shape[0]
    if n == 0:
        raise EmptyDataset("dataset has no items")
    if y.shape != (n,):
        raise LengthMismatch(f"{n} inputs but targets of shape {y.shape}")

    state = AdamState(lr=config.lr)
    order_rng = np.random.default_rng(config.seed)
    history = []
    for epoch in range(config.epochs):
        perm = order_rng.permutation(n)
        total = 0.0
        for step, start in enumerate(range(0, n, config.batch_size)):
            batch = perm[start:start + config.batch_size]
            bsz = batch.shape[0]
            grads = None
            for ci, cstart in enumerate(range(0, bsz, config.chunk_size)):
                idx = batch[cstart:cstart + config.chunk_size]
                pred, trace = forward(model, x[idx], "train", rng_seed=(config.seed, epoch, step, ci))
                err = pred - y[idx]
                total += float(np.sum(err ** 2))
                g = backward_from_output(model, trace, 2.0 * err / bsz)
                del trace
                if grads is None:
                    grads = g
                else:
                    for name in grads:
                        grads[name] += g[name]
            for name, g in grads.items():
                if not np.all(np.isfinite(g)):
                    raise NonFiniteActivation(f"non-finite gradient for {name} at epoch {epoch}")
            adam_step(model, grads, state)
        history.append(total / n)
        if progress is not None:
            progress(epoch, history[-1])
        log.debug("epoch %d mean loss %.6f", epoch, history[-1])
        if config.target_loss is not None and history[-1] < config.target_loss:
            break
        if _saturated(history, config.window, config.min_rel_improvement):
            break
    return model, history


def write_loss_history(history, path) -> None:
    lines = ["epoch,mean_loss"] + [f"{i},{loss!r}" for i, loss in enumerate(history)]
    Path(path).write_text("\n".join(lines) + "\n")


def predict_batch(model: DnsmosModel, inputs, clamp: bool = False, chunk_size: int = 16) -> np.ndarray:
    """Eval-mode MOS estimates for feature arrays, FeatureMatrix or AudioClip items."""
    x = _stack_inputs(inputs)
    out = np.empty(x.shape[0], dtype=np.float64)
    for start in range(0, x.shape[0], chunk_size):
        pred, _ = forward(model, x[start:start + chunk_size], "eval")
        out[start:start + chunk_size] = pred
    if clamp:
        np.clip(out, 1.0, 5.0, out=out)
    return out


def _stack_inputs(inputs) -> np.ndarray:
    if isinstance(inputs, np.ndarray):
        return inputs if inputs.ndim == 4 else inputs[..., None] if inputs.ndim == 3 else inputs[None, ..., None]
    from dnsmos.audio import AudioClip
    from dnsmos.features import extract_features

    rows = []
    for item in inputs:
        if isinstance(item, AudioClip):
            item = extract_features(item)
        rows.append(np.asarray(getattr(item, "values", item), dtype=np.float32))
    if not rows:
        raise ShapeMismatch("no inputs to score")
    return np.stack(rows)[..., None]


# ---------------------------------------------------------------------------
# serialization
#
# layout (little-endian):
#   magic "DNSMOSM1" | u32 format version | u32 len + arch JSON
#   | u32 len + shape table | float32 parameter blobs | 32-byte SHA-256 of all preceding bytes

MODEL_MAGIC = b"DNSMOSM1"
MODEL_FORMAT_VERSION = 1


def _shape_table_bytes(arch: Architecture) -> bytes:
    rows = [f"{name}:{'x'.join(map(str, shape))}" for name, shape in arch.param_shapes().items()]
    return "\n".join(rows).encode()


def save_model(model: DnsmosModel, path) -> str:
    """Write the model file and return its content hash."""
    arch_json = json.dumps(model.arch.to_dict(), sort_keys=True).encode()
    table = _shape_table_bytes(model.arch)
    parts = [
        MODEL_MAGIC,
        struct.pack("<I", MODEL_FORMAT_VERSION),
        struct.pack("<I", len(arch_json)), arch_json,
        struct.pack("<I", len(table)), table,
    ]
    parts += [np.ascontiguousarray(p, dtype="<f4").tobytes() for p in model.params.values()]
    body = b"".join(parts)
    Path(path).write_bytes(body + hashlib.sha256(body).digest())
    return model.content_hash()


def load_model(path) -> DnsmosModel:
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise ChecksumMismatch(f"model file {path} is truncated")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(len(MODEL_MAGIC)) != MODEL_MAGIC:
        raise VersionMismatch(f"{path} is not a model file (bad magic)")
    (fmt_version,) = struct.unpack("<I", take(4))
    if fmt_version != MODEL_FORMAT_VERSION:
        raise VersionMismatch(f"model format {fmt_version}, expected {MODEL_FORMAT_VERSION}")
    (n,) = struct.unpack("<I", take(4))
    try:
        arch = Architecture.from_dict(json.loads(take(n)))
    except (ValueError, TypeError) as exc:
        raise VersionMismatch(f"unreadable architecture header: {exc}") from exc
    if arch.name != TABLE1.name and arch.name != "surrogate":
        raise VersionMismatch(f"unknown architecture {arch.arch_version}")
    (n,) = struct.unpack("<I", take(4))
    table = take(n)
    if table != _shape_table_bytes(arch):
        raise ShapeTableMismatch(f"shape table in {path} does not match {arch.arch_version}")

    params = {}
    for name, shape in arch.param_shapes().items():
        size = int(np.prod(shape))
        params[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    digest = data[pos:]
    if len(digest) != 32 or hashlib.sha256(data[:pos]).digest() != digest:
        raise ChecksumMismatch(f"checksum mismatch in {path}")
    return DnsmosModel(arch, params)
