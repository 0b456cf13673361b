"""Configurable 3-D convolutional encoder with manual forward/backward
passes, an SGD(+momentum) optimizer, and versioned checkpoints.

The architecture is conv blocks (same-padded conv, ReLU, floor max-pool)
followed by a dense hidden layer and a final dense embedding layer whose
output is either L2-normalized (metric heads) or raw logits (classifier
heads). All math is float64 numpy; gradients are exact and are verified
against finite differences in the tests.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .numcore import DEGENERATE_NORM_EPS, l2_normalize_rows

CHECKPOINT_MAGIC = b"VOLMCKPT"
CHECKPOINT_VERSION = 1

HEAD_L2 = "l2_normalized"
HEAD_LOGITS = "logits"


@dataclass(frozen=True)
class EncoderConfig:
    input_shape: tuple          # (H, W, D)
    conv_blocks: tuple          # ((out_channels, kernel, pool), ...)
    hidden_dim: int = 128
    embed_dim: int = 6
    head_mode: str = HEAD_L2

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "conv_blocks",
                           tuple(tuple(int(v) for v in blk) for blk in self.conv_blocks))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError(f"bad input_shape {self.input_shape}")
        if self.embed_dim < 2:
            raise ValueError("embed_dim must be >= 2")
        if self.hidden_dim < self.embed_dim:
            raise ValueError("hidden_dim must be >= embed_dim")
        if self.head_mode not in (HEAD_L2, HEAD_LOGITS):
            raise ValueError(f"unknown head_mode {self.head_mode!r}")
        shape = self.input_shape
        for out_ch, kernel, pool in self.conv_blocks:
            if out_ch < 1 or pool < 1:
                raise ValueError("conv block channels and pool must be >= 1")
            if kernel < 1 or kernel % 2 == 0:
                raise ValueError("conv kernel must be odd (same padding)")
            shape = tuple(s // pool for s in shape)
            if min(shape) < 1:
                raise ValueError(
                    f"pooling collapses spatial dims below 1 (reached {shape})")

    def spatial_shapes(self):
        """Spatial shape after each block, starting from the input."""
        shapes = [self.input_shape]
        for _, _, pool in self.conv_blocks:
            shapes.append(tuple(s // pool for s in shapes[-1]))
        return shapes

    def flatten_dim(self):
        ch = self.conv_blocks[-1][0] if self.conv_blocks else 1
        return ch * int(np.prod(self.spatial_shapes()[-1]))

    def digest(self):
        payload = json.dumps(
            {"input_shape": list(self.input_shape),
             "conv_blocks": [list(b) for b in self.conv_blocks],
             "hidden_dim": self.hidden_dim,
             "embed_dim": self.embed_dim,
             "head_mode": self.head_mode},
            sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()


def param_count(config):
    """Closed-form number of trainable scalars for a config."""
    total = 0
    in_ch = 1
    for out_ch, kernel, _ in config.conv_blocks:
        total += out_ch * in_ch * kernel ** 3 + out_ch
        in_ch = out_ch
    flat = config.flatten_dim()
    total += flat * config.hidden_dim + config.hidden_dim
    total += config.hidden_dim * config.embed_dim + config.embed_dim
    return total


class EncoderParams:
    """All trainable weights, addressable as named arrays or one flat vector."""

    def __init__(self, config, arrays):
        self.config = config
        self.arrays = arrays  # name -> ndarray, insertion order is canonical
        self.revision = 0

    @property
    def names(self):
        return list(self.arrays.keys())

    def flat(self):
        return np.concatenate([self.arrays[k].ravel() for k in self.arrays])

    def set_flat(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (param_count(self.config),):
            raise ValueError("flat vector length mismatch")
        off = 0
        for k, a in self.arrays.items():
            a[...] = vec[off:off + a.size].reshape(a.shape)
            off += a.size
        self.revision += 1

    def get_index(self, i):
        for a in self.arrays.values():
            if i < a.size:
                return a.flat[i]
            i -= a.size
        raise IndexError(i)

    def set_index(self, i, value):
        for a in self.arrays.values():
            if i < a.size:
                a.flat[i] = value
                self.revision += 1
                return
            i -= a.size
        raise IndexError(i)

    def size(self):
        return sum(a.size for a in self.arrays.values())

    def copy(self):
        return EncoderParams(self.config,
                             {k: a.copy() for k, a in self.arrays.items()})

    def zeros_like(self):
        return {k: np.zeros_like(a) for k, a in self.arrays.items()}


def init_params(config, rng):
    """He-style fan-in scaled normal weights, zero biases; deterministic."""
    arrays = {}
    in_ch = 1
    for i, (out_ch, kernel, _) in enumerate(config.conv_blocks):
        fan_in = in_ch * kernel ** 3
        arrays[f"conv{i}_w"] = rng.normal(
            0.0, np.sqrt(2.0 / fan_in), size=(out_ch, in_ch, kernel, kernel, kernel))
        arrays[f"conv{i}_b"] = np.zeros(out_ch)
        in_ch = out_ch
    flat = config.flatten_dim()
    arrays["dense_w"] = rng.normal(0.0, np.sqrt(2.0 / flat),
                                   size=(flat, config.hidden_dim))
    arrays["dense_b"] = np.zeros(config.hidden_dim)
    arrays["embed_w"] = rng.normal(0.0, np.sqrt(2.0 / config.hidden_dim),
                                   size=(config.hidden_dim, config.embed_dim))
    arrays["embed_b"] = np.zeros(config.embed_dim)
    return EncoderParams(config, arrays)


def _conv3d_same(x, w, b):
    # x: (n, Cin, H, W, D), w: (Cout, Cin, k, k, k) -> (n, Cout, H, W, D)
    k = w.shape[2]
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    return np.einsum("nchwdijk,ocijk->nohwd", win, w, optimize=True) + \
        b[None, :, None, None, None]


def _conv3d_backward(x, w, dy):
    k = w.shape[2]
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    dw = np.einsum("nchwdijk,nohwd->ocijk", win, dy, optimize=True)
    db = dy.sum(axis=(0, 2, 3, 4))
    dyp = np.pad(dy, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    win_dy = sliding_window_view(dyp, (k, k, k), axis=(2, 3, 4))
    w_flip = w[:, :, ::-1, ::-1, ::-1]
    dx = np.einsum("nohwdijk,ocijk->nchwd", win_dy, w_flip, optimize=True)
    return dx, dw, db


def _maxpool(x, pool):
    # floor pooling: trailing remainder voxels are dropped
    n, c, H, W, D = x.shape
    H2, W2, D2 = H // pool, W // pool, D // pool
    xc = x[:, :, :H2 * pool, :W2 * pool, :D2 * pool]
    win = xc.reshape(n, c, H2, pool, W2, pool, D2, pool)
    win = win.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(n, c, H2, W2, D2, pool ** 3)
    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg


def _maxpool_backward(x_shape, pool, arg, dy):
    n, c, H, W, D = x_shape
    H2, W2, D2 = H // pool, W // pool, D // pool
    dwin = np.zeros((n, c, H2, W2, D2, pool ** 3))
    np.put_along_axis(dwin, arg[..., None], dy[..., None], axis=-1)
    dwin = dwin.reshape(n, c, H2, W2, D2, pool, pool, pool)
    dwin = dwin.transpose(0, 1, 2, 5, 3, 6, 4, 7)
    dx = np.zeros(x_shape)
    dx[:, :, :H2 * pool, :W2 * pool, :D2 * pool] = dwin.reshape(
        n, c, H2 * pool, W2 * pool, D2 * pool)
    return dx


@dataclass
class ForwardCache:
    revision: int
    block_inputs: list = field(default_factory=list)   # conv inputs per block
    block_preact: list = field(default_factory=list)   # pre-ReLU conv outputs
    block_relu: list = field(default_factory=list)     # post-ReLU (pre-pool)
    pool_args: list = field(default_factory=list)      # argmax per pool window
    flat: np.ndarray = None
    hidden_pre: np.ndarray = None
    hidden: np.ndarray = None
    embed_pre: np.ndarray = None                       # pre-head output


def forward(params, batch, want_cache=True):
    """Encode a batch of volumes; returns (output n x L, ForwardCache).

    batch is (n, H, W, D) float64 matching the config's input shape.
    """
    cfg = params.config
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 4 or x.shape[1:] != cfg.input_shape:
        raise ValueError(
            f"batch shape {x.shape} incompatible with input {cfg.input_shape}")
    cache = ForwardCache(revision=params.revision)
    h = x[:, None]  # channel axis
    for i, (_, _, pool) in enumerate(cfg.conv_blocks):
        w = params.arrays[f"conv{i}_w"]
        b = params.arrays[f"conv{i}_b"]
        pre = _conv3d_same(h, w, b)
        relu = np.maximum(pre, 0.0)
        pooled, arg = _maxpool(relu, pool)
        if want_cache:
            cache.block_inputs.append(h)
            cache.block_preact.append(pre)
            cache.block_relu.append(relu)
            cache.pool_args.append(arg)
        h = pooled
    flat = h.reshape(h.shape[0], -1)
    hidden_pre = flat @ params.arrays["dense_w"] + params.arrays["dense_b"]
    hidden = np.maximum(hidden_pre, 0.0)
    embed_pre = hidden @ params.arrays["embed_w"] + params.arrays["embed_b"]
    if want_cache:
        cache.flat = flat
        cache.hidden_pre = hidden_pre
        cache.hidden = hidden
        cache.embed_pre = embed_pre
    if cfg.head_mode == HEAD_L2:
        out = l2_normalize_rows(embed_pre)
    else:
        out = embed_pre
    return out, cache


def backward(params, cache, grad_output):
    """Backpropagate grad_output (n x L) through the cached forward pass.

    Returns a dict of parameter gradients keyed like params.arrays.
    """
    if cache.revision != params.revision:
        raise ValueError("stale forward cache: params changed since forward()")
    cfg = params.config
    grads = {}
    g = np.asarray(grad_output, dtype=np.float64)

    if cfg.head_mode == HEAD_L2:
        e = cache.embed_pre
        norms = np.linalg.norm(e, axis=1, keepdims=True)
        ok = norms[:, 0] >= DEGENERATE_NORM_EPS
        u = np.zeros_like(e)
        u[ok] = e[ok] / norms[ok]
        de = np.zeros_like(e)
        inner = np.sum(g * u, axis=1, keepdims=True)
        de[ok] = (g[ok] - inner[ok] * u[ok]) / norms[ok]
        # degenerate rows emit a constant fallback vector: zero gradient
    else:
        de = g

    grads["embed_w"] = cache.hidden.T @ de
    grads["embed_b"] = de.sum(axis=0)
    dh = de @ params.arrays["embed_w"].T
    dh *= cache.hidden_pre > 0
    grads["dense_w"] = cache.flat.T @ dh
    grads["dense_b"] = dh.sum(axis=0)
    dflat = dh @ params.arrays["dense_w"].T

    shapes = cfg.spatial_shapes()
    last_ch = cfg.conv_blocks[-1][0] if cfg.conv_blocks else 1
    dcur = dflat.reshape(dflat.shape[0], last_ch, *shapes[-1])
    for i in range(len(cfg.conv_blocks) - 1, -1, -1):
        pool = cfg.conv_blocks[i][2]
        relu = cache.block_relu[i]
        dpost = _maxpool_backward(relu.shape, pool, cache.pool_args[i], dcur)
        dpost *= cache.block_preact[i] > 0
        dx, dw, db = _conv3d_backward(
            cache.block_inputs[i], params.arrays[f"conv{i}_w"], dpost)
        grads[f"conv{i}_w"] = dw
        grads[f"conv{i}_b"] = db
        dcur = dx
    return grads


def sgd_step(params, grads, lr, momentum=0.0, velocity=None):
    """In-place SGD update: v <- momentum*v + g; p <- p - lr*v.

    Returns the velocity state (created on first call). Aborts on
    non-finite gradients so a diverging run fails loudly.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must be in [0, 1)")
    if velocity is None:
        velocity = params.zeros_like()
    for k, a in params.arrays.items():
        g = grads[k]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {k}")
        velocity[k] = momentum * velocity[k] + g
        a -= lr * velocity[k]
    params.revision += 1
    return velocity


def save_checkpoint(params, path):
    """Versioned binary container: magic, version, config digest, config
    JSON, then the flat little-endian float64 parameter vector."""
    cfg = params.config
    cfg_json = json.dumps(
        {"input_shape": list(cfg.input_shape),
         "conv_blocks": [list(b) for b in cfg.conv_blocks],
         "hidden_dim": cfg.hidden_dim,
         "embed_dim": cfg.embed_dim,
         "head_mode": cfg.head_mode},
        sort_keys=True, separators=(",", ":")).encode()
    flat = params.flat()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(cfg.digest().encode())
        f.write(struct.pack("<I", len(cfg_json)))
        f.write(cfg_json)
        f.write(struct.pack("<Q", flat.size))
        f.write(flat.astype("<f8").tobytes())


def load_checkpoint(path, expect_config=None):
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        digest = f.read(64).decode()
        (cfg_len,) = struct.unpack("<I", f.read(4))
        cfg_dict = json.loads(f.read(cfg_len))
        config = EncoderConfig(
            input_shape=tuple(cfg_dict["input_shape"]),
            conv_blocks=tuple(tuple(b) for b in cfg_dict["conv_blocks"]),
            hidden_dim=cfg_dict["hidden_dim"],
            embed_dim=cfg_dict["embed_dim"],
            head_mode=cfg_dict["head_mode"])
        if config.digest() != digest:
            raise ValueError(f"{path}: config digest mismatch")
        if expect_config is not None and expect_config.digest() != digest:
            raise ValueError(f"{path}: checkpoint config does not match expected")
        (count,) = struct.unpack("<Q", f.read(8))
        if count != param_count(config):
            raise ValueError(f"{path}: parameter count mismatch")
        flat = np.frombuffer(f.read(count * 8), dtype="<f8").astype(np.float64)
    params = init_zero(config)
    params.set_flat(flat)
    return params


def init_zero(config):
    """All-zero parameters with the right shapes (loading scaffold)."""
    class _Zero:
        def normal(self, loc, scale, size):
            return np.zeros(size)
    return init_params(config, _Zero())
