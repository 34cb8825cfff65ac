"""From-scratch 3D U-Net: forward, backward, Adam, checkpoints.

Tensors are channels-last (nx, ny, nz, c). Convolutions are 3x3x3 with
same-zero-padding, lowered to one BLAS matmul per layer through an explicit
patch matrix (27 shifted slice copies, no fancy indexing). Down is 2x
max-pool with cached argmax; up is nearest-neighbor 2x whose adjoint is a
block sum; skips concatenate skip-first. Heads are 1x1x1 convolutions:
1 feature linear (sdt) or 2 features + softmax (dice).

Training runs in float32; float64 models exist for gradient verification and
cannot be checkpointed (the file format is 32-bit).
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np

CHECKPOINT_MAGIC = b"CRTC"
CHECKPOINT_VERSION = 1

# kernel tap order matches w.reshape(27*cin, cout): x outer, z inner
_OFFSETS = [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)]


class StaleCacheError(RuntimeError):
    """Backward called with a cache from before a parameter update."""


class NonFiniteGradientError(RuntimeError):
    pass


@dataclass(frozen=True)
class UNetConfig:
    levels: int = 3
    filters: tuple = (8, 16, 32)
    convs_per_level: int = 2
    leaky_slope: float = 0.2
    head: str = "sdt"
    in_shape: tuple = (32, 32, 32)
    in_channels: int = 1

    def __post_init__(self):
        filters = tuple(int(f) for f in self.filters)
        in_shape = tuple(int(d) for d in self.in_shape)
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if len(filters) != self.levels:
            raise ValueError(f"filters list length {len(filters)} != levels {self.levels}")
        if any(f < 1 for f in filters):
            raise ValueError("filter counts must be positive")
        if self.convs_per_level < 1:
            raise ValueError("convs_per_level must be >= 1")
        if not (0.0 < self.leaky_slope < 1.0):
            raise ValueError("leaky_slope must lie in (0, 1)")
        if self.head not in ("sdt", "dice"):
            raise ValueError(f"head must be 'sdt' or 'dice', got {self.head!r}")
        div = 2 ** (self.levels - 1)
        if len(in_shape) != 3 or any(d % div != 0 or d < div for d in in_shape):
            raise ValueError(f"in_shape {in_shape} must be positive multiples of {div}")
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        object.__setattr__(self, "filters", filters)
        object.__setattr__(self, "in_shape", in_shape)

    @property
    def out_channels(self) -> int:
        return 1 if self.head == "sdt" else 2

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def _conv_specs(cfg: UNetConfig):
    """Yield (name, cin, cout) for every 3x3x3 conv in forward order."""
    specs = []
    for l in range(cfg.levels):
        for i in range(cfg.convs_per_level):
            if i == 0:
                cin = cfg.in_channels if l == 0 else cfg.filters[l - 1]
            else:
                cin = cfg.filters[l]
            specs.append((f"enc{l}_conv{i}", cin, cfg.filters[l]))
    for l in range(cfg.levels - 2, -1, -1):
        for i in range(cfg.convs_per_level):
            cin = cfg.filters[l] + cfg.filters[l + 1] if i == 0 else cfg.filters[l]
            specs.append((f"dec{l}_conv{i}", cin, cfg.filters[l]))
    return specs


class UNetModel:
    """Parameters plus Adam state; mutated in place by adam_step."""

    def __init__(self, config: UNetConfig, params, dtype):
        self.config = config
        self.params = params
        self.dtype = np.dtype(dtype)
        self.adam_m = {k: np.zeros_like(v) for k, v in params.items()}
        self.adam_v = {k: np.zeros_like(v) for k, v in params.items()}
        self.adam_t = 0
        self._version = 0

    @classmethod
    def create(cls, config: UNetConfig, seed: int = 0, dtype=np.float32):
        """He fan-in initialized kernels, zero biases, seeded."""
        rng = np.random.default_rng(seed)
        dtype = np.dtype(dtype)
        params = {}
        for name, cin, cout in _conv_specs(config):
            std = np.sqrt(2.0 / (27.0 * cin))
            params[name + "_w"] = (rng.standard_normal((3, 3, 3, cin, cout)) * std).astype(dtype)
            params[name + "_b"] = np.zeros(cout, dtype=dtype)
        cin = config.filters[0]
        cout = config.out_channels
        std = np.sqrt(2.0 / cin)
        params["head_w"] = (rng.standard_normal((cin, cout)) * std).astype(dtype)
        params["head_b"] = np.zeros(cout, dtype=dtype)
        return cls(config, params, dtype)

    def num_params(self) -> int:
        return sum(int(v.size) for v in self.params.values())


def _conv3d_fwd(x, w, b):
    nx, ny, nz, cin = x.shape
    cout = w.shape[-1]
    xp = np.zeros((nx + 2, ny + 2, nz + 2, cin), dtype=x.dtype)
    xp[1:-1, 1:-1, 1:-1] = x
    n = nx * ny * nz
    col = np.empty((n, 27 * cin), dtype=x.dtype)
    for k, (dx, dy, dz) in enumerate(_OFFSETS):
        col[:, k * cin:(k + 1) * cin] = xp[
            1 + dx:1 + dx + nx, 1 + dy:1 + dy + ny, 1 + dz:1 + dz + nz
        ].reshape(n, cin)
    y = col @ w.reshape(27 * cin, cout) + b
    return y.reshape(nx, ny, nz, cout), col


def _conv3d_bwd(col, w, gy, x_shape):
    nx, ny, nz, cin = x_shape
    cout = w.shape[-1]
    g = gy.reshape(-1, cout)
    gw = (col.T @ g).reshape(w.shape)
    gb = g.sum(axis=0)
    gcol = g @ w.reshape(27 * cin, cout).T
    gxp = np.zeros((nx + 2, ny + 2, nz + 2, cin), dtype=gy.dtype)
    for k, (dx, dy, dz) in enumerate(_OFFSETS):
        gxp[1 + dx:1 + dx + nx, 1 + dy:1 + dy + ny, 1 + dz:1 + dz + nz] += gcol[
            :, k * cin:(k + 1) * cin
        ].reshape(nx, ny, nz, cin)
    gx = gxp[1:-1, 1:-1, 1:-1].copy()
    return gx, gw, gb


def _maxpool2_fwd(x):
    n0, n1, n2, c = x.shape[0] // 2, x.shape[1] // 2, x.shape[2] // 2, x.shape[3]
    r = (
        x.reshape(n0, 2, n1, 2, n2, 2, c)
        .transpose(0, 2, 4, 6, 1, 3, 5)
        .reshape(n0, n1, n2, c, 8)
    )
    am = r.argmax(axis=4)
    y = np.take_along_axis(r, am[..., None], axis=4)[..., 0]
    return y, am


def _maxpool2_bwd(gy, am, x_shape):
    n0, n1, n2, c = gy.shape
    gr = np.zeros((n0, n1, n2, c, 8), dtype=gy.dtype)
    np.put_along_axis(gr, am[..., None], gy[..., None], axis=4)
    gx = (
        gr.reshape(n0, n1, n2, c, 2, 2, 2)
        .transpose(0, 4, 1, 5, 2, 6, 3)
        .reshape(x_shape)
    )
    return gx


def _upsample2_fwd(x):
    n0, n1, n2, c = x.shape
    out = np.broadcast_to(
        x[:, None, :, None, :, None, :], (n0, 2, n1, 2, n2, 2, c)
    ).reshape(2 * n0, 2 * n1, 2 * n2, c)
    return np.ascontiguousarray(out)


def _upsample2_bwd(gy):
    n0, n1, n2, c = gy.shape[0] // 2, gy.shape[1] // 2, gy.shape[2] // 2, gy.shape[3]
    return gy.reshape(n0, 2, n1, 2, n2, 2, c).sum(axis=(1, 3, 5))


def _softmax_ch(z):
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=-1, keepdims=True)


def unet_forward(model: UNetModel, x, train: bool = False):
    """Run the network; returns (prediction, cache).

    x is a ScalarVolume or an (nx, ny, nz[, c]) array matching the configured
    input shape. The sdt head returns an (nx, ny, nz) array; the dice head
    returns softmax probabilities (nx, ny, nz, 2). The cache holds patch
    matrices and routing state for unet_backward and is None unless train.
    """
    cfg = model.config
    data = np.asarray(getattr(x, "data", x))
    if data.ndim == 3:
        data = data[..., None]
    if data.shape != cfg.in_shape + (cfg.in_channels,):
        raise ValueError(f"input shape {data.shape[:3]} != configured {cfg.in_shape}")
    h = data.astype(model.dtype, copy=False)
    entries = []
    slope = model.dtype.type(cfg.leaky_slope)

    def record(kind, **kw):
        if train:
            entries.append((kind, kw))

    skips = []
    for l in range(cfg.levels):
        for i in range(cfg.convs_per_level):
            name = f"enc{l}_conv{i}"
            y, col = _conv3d_fwd(h, model.params[name + "_w"], model.params[name + "_b"])
            record("conv", name=name, col=col, x_shape=h.shape)
            pos = y > 0
            h = np.where(pos, y, slope * y)
            record("leaky", pos=pos)
        if l < cfg.levels - 1:
            skips.append(h)
            y, am = _maxpool2_fwd(h)
            record("pool", am=am, x_shape=h.shape)
            h = y
    for l in range(cfg.levels - 2, -1, -1):
        h = _upsample2_fwd(h)
        record("up")
        skip = skips[l]
        h = np.concatenate([skip, h], axis=-1)
        record("concat", c_skip=skip.shape[-1], skip_level=l)
        for i in range(cfg.convs_per_level):
            name = f"dec{l}_conv{i}"
            y, col = _conv3d_fwd(h, model.params[name + "_w"], model.params[name + "_b"])
            record("conv", name=name, col=col, x_shape=h.shape)
            pos = y > 0
            h = np.where(pos, y, slope * y)
            record("leaky", pos=pos)
    flat = h.reshape(-1, cfg.filters[0])
    z = flat @ model.params["head_w"] + model.params["head_b"]
    record("head", flat=flat)
    z = z.reshape(cfg.in_shape + (cfg.out_channels,))
    if cfg.head == "sdt":
        out = z[..., 0]
        cache = None
    else:
        out = _softmax_ch(z)
        record("softmax", probs=out)
        cache = None
    if train:
        cache = {"version": model._version, "entries": entries, "out_shape": out.shape}
    return out, cache


def unet_backward(model: UNetModel, cache, gout):
    """Backpropagate d(loss)/d(prediction) to parameter gradients.

    For the dice head, gout is the gradient with respect to the softmax
    probabilities; the softmax Jacobian is applied here. The cache must come
    from a forward run with the current parameters.
    """
    if cache is None:
        raise StaleCacheError("no cache: forward must run with train=True")
    if cache["version"] != model._version:
        raise StaleCacheError("stale activation cache: parameters changed since forward")
    cfg = model.config
    gout = np.asarray(gout, dtype=model.dtype)
    if gout.shape != cache["out_shape"]:
        raise ValueError(f"gradient shape {gout.shape} != output shape {cache['out_shape']}")
    grads = {}
    entries = cache["entries"]
    i = len(entries) - 1
    # peel head-side entries
    if cfg.head == "dice":
        kind, kw = entries[i]
        assert kind == "softmax"
        y = kw["probs"]
        dot = (gout * y).sum(axis=-1, keepdims=True)
        gz = y * (gout - dot)
        i -= 1
    else:
        gz = gout[..., None]
    kind, kw = entries[i]
    assert kind == "head"
    flat = kw["flat"]
    gz2 = gz.reshape(-1, cfg.out_channels)
    grads["head_w"] = flat.T @ gz2
    grads["head_b"] = gz2.sum(axis=0)
    gh = (gz2 @ model.params["head_w"].T).reshape(cfg.in_shape + (cfg.filters[0],))
    i -= 1

    slope = model.dtype.type(cfg.leaky_slope)
    skip_grads = {}
    while i >= 0:
        kind, kw = entries[i]
        if kind == "leaky":
            gh = np.where(kw["pos"], gh, slope * gh)
        elif kind == "conv":
            name = kw["name"]
            gh, gw, gb = _conv3d_bwd(kw["col"], model.params[name + "_w"], gh, kw["x_shape"])
            grads[name + "_w"] = gw
            grads[name + "_b"] = gb
        elif kind == "concat":
            c_skip = kw["c_skip"]
            skip_grads[kw["skip_level"]] = gh[..., :c_skip]
            gh = np.ascontiguousarray(gh[..., c_skip:])
        elif kind == "up":
            gh = _upsample2_bwd(gh)
        elif kind == "pool":
            gh = _maxpool2_bwd(gh, kw["am"], kw["x_shape"])
            # gradients flowing into the skip branch join here
            lvl = _level_of_pool(kw["x_shape"], cfg)
            gh = gh + skip_grads.pop(lvl)
        else:
            raise AssertionError(f"unknown cache entry {kind}")
        i -= 1
    assert not skip_grads
    return grads


def _level_of_pool(x_shape, cfg: UNetConfig):
    # encoder level is recoverable from the spatial extent of the pooled tensor
    factor = cfg.in_shape[0] // x_shape[0]
    level = int(round(np.log2(factor)))
    assert cfg.in_shape[0] == x_shape[0] * (2**level)
    return level


def adam_step(model: UNetModel, grads, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """Standard Adam with bias correction, in place; halts on non-finite grads."""
    for name in model.params:
        g = grads.get(name)
        if g is None:
            raise KeyError(f"missing gradient for {name}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(
                f"non-finite gradient in {name} at step {model.adam_t + 1}"
            )
    model.adam_t += 1
    t = model.adam_t
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in model.params.items():
        g = grads[name].astype(p.dtype, copy=False)
        m = model.adam_m[name]
        v = model.adam_v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
    model._version += 1
    return model


def save_checkpoint(model: UNetModel, path, train_state=None):
    """Versioned binary container; all arrays little-endian float32."""
    if model.dtype != np.float32:
        raise ValueError("only float32 models are checkpointed")
    meta = {
        "config": model.config.to_dict(),
        "adam_t": model.adam_t,
        "train_state": train_state,
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    arrays = {}
    for k, v in model.params.items():
        arrays[k] = v
        arrays["m." + k] = model.adam_m[k]
        arrays["v." + k] = model.adam_v[k]
    out = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    out.append(struct.pack("<I", len(blob)))
    out.append(blob)
    out.append(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        nb = name.encode()
        out.append(struct.pack("<H", len(nb)))
        out.append(nb)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    from .fileio import _atomic_write

    _atomic_write(path, b"".join(out))


def load_checkpoint(path):
    """Returns (model, train_state or None)."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (jlen,) = struct.unpack_from("<I", data, 8)
    meta = json.loads(data[12:12 + jlen].decode())
    off = 12 + jlen
    (n_arrays,) = struct.unpack_from("<I", data, off)
    off += 4
    arrays = {}
    for _ in range(n_arrays):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        arrays[name] = arr.astype(np.float32)
    config = UNetConfig.from_dict(meta["config"])
    params = {k: v for k, v in arrays.items() if not k.startswith(("m.", "v."))}
    model = UNetModel(config, params, np.float32)
    for k in params:
        model.adam_m[k] = arrays["m." + k]
        model.adam_v[k] = arrays["v." + k]
    model.adam_t = int(meta["adam_t"])
    return model, meta.get("train_state")
