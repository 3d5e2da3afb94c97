"""From-scratch convolutional dueling Q network.

Three stride-2 same-padded 3x3 conv stages (16/32/64 features, relu), a
256-unit trunk, and two 128-unit branches producing the state value and the
five action advantages. All parameters live in one flat array with named
views, so the optimizer, checkpointing, and distance diagnostics operate on
a single contiguous vector with a deterministic layout.

The convolution gathers (im2col / col2im) are numba-jitted serial loops;
everything else is plain numpy on BLAS matmuls. Forward and backward are
bitwise deterministic for fixed inputs. float32 is the training dtype;
float64 is supported throughout for finite-difference verification.
"""

from __future__ import annotations

import hashlib
import json
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numba import njit

N_ACTIONS = 5


class InputShapeError(ValueError):
    pass


class ArchitectureMismatchError(ValueError):
    pass


class NumericsError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class ArchSpec:
    """Network architecture; the default matches the production observation."""

    in_frames: int = 4
    in_long: int = 80
    in_lat: int = 45
    conv_features: tuple[int, ...] = (16, 32, 64)
    kernel: int = 3
    stride: int = 2
    trunk_units: int = 256
    branch_units: int = 128
    n_actions: int = N_ACTIONS

    def conv_shapes(self) -> list[tuple[int, int, int]]:
        """Per conv stage (out_h, out_w, out_c) under ceil-division same padding."""
        h, w = self.in_long, self.in_lat
        shapes = []
        for feats in self.conv_features:
            h = -(-h // self.stride)
            w = -(-w // self.stride)
            shapes.append((h, w, feats))
        return shapes

    @property
    def flat_dim(self) -> int:
        h, w, c = self.conv_shapes()[-1]
        return h * w * c

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        """Deterministic (name, shape) parameter order defining the flat vector."""
        entries: list[tuple[str, tuple[int, ...]]] = []
        in_c = self.in_frames
        k = self.kernel
        for i, feats in enumerate(self.conv_features):
            entries.append((f"conv{i}.w", (k * k * in_c, feats)))
            entries.append((f"conv{i}.b", (feats,)))
            in_c = feats
        entries.append(("trunk.w", (self.flat_dim, self.trunk_units)))
        entries.append(("trunk.b", (self.trunk_units,)))
        entries.append(("value1.w", (self.trunk_units, self.branch_units)))
        entries.append(("value1.b", (self.branch_units,)))
        entries.append(("value2.w", (self.branch_units, 1)))
        entries.append(("value2.b", (1,)))
        entries.append(("adv1.w", (self.trunk_units, self.branch_units)))
        entries.append(("adv1.b", (self.branch_units,)))
        entries.append(("adv2.w", (self.branch_units, self.n_actions)))
        entries.append(("adv2.b", (self.n_actions,)))
        return entries

    @property
    def param_count(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.layout())

    def to_dict(self) -> dict:
        return {
            "in_frames": self.in_frames,
            "in_long": self.in_long,
            "in_lat": self.in_lat,
            "conv_features": list(self.conv_features),
            "kernel": self.kernel,
            "stride": self.stride,
            "trunk_units": self.trunk_units,
            "branch_units": self.branch_units,
            "n_actions": self.n_actions,
        }

    @staticmethod
    def from_dict(d: dict) -> "ArchSpec":
        d = dict(d)
        d["conv_features"] = tuple(d["conv_features"])
        return ArchSpec(**d)


DEFAULT_ARCH = ArchSpec()


def arch_hash(arch: ArchSpec) -> str:
    return hashlib.sha256(json.dumps(arch.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


class NetworkParams:
    """One network's parameters: a flat vector plus named views per layer."""

    def __init__(self, arch: ArchSpec, vector: np.ndarray, dueling_mean: bool = True):
        expected = arch.param_count
        if vector.shape != (expected,):
            raise ArchitectureMismatchError(f"expected {expected} parameters, got {vector.shape}")
        self.arch = arch
        self.vector = vector
        self.dueling_mean = dueling_mean
        self.views: dict[str, np.ndarray] = {}
        offset = 0
        for name, shape in arch.layout():
            size = int(np.prod(shape))
            self.views[name] = vector[offset : offset + size].reshape(shape)
            offset += size

    @property
    def dtype(self) -> np.dtype:
        return self.vector.dtype

    def __getitem__(self, name: str) -> np.ndarray:
        return self.views[name]


def init_params(
    seed: int,
    arch: ArchSpec = DEFAULT_ARCH,
    dtype=np.float32,
    dueling_mean: bool = True,
) -> NetworkParams:
    """He-uniform weights (limit sqrt(6/fan_in), relu-appropriate), zero biases."""
    rng = np.random.default_rng(seed)
    vector = np.zeros(arch.param_count, dtype=dtype)
    params = NetworkParams(arch, vector, dueling_mean)
    for name, shape in arch.layout():
        if name.endswith(".w"):
            fan_in = shape[0]
            limit = np.sqrt(6.0 / fan_in)
            params.views[name][...] = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return params


def copy_params(params: NetworkParams) -> NetworkParams:
    return NetworkParams(params.arch, params.vector.copy(), params.dueling_mean)


def param_distance(p1: NetworkParams, p2: NetworkParams) -> float:
    if p1.arch != p2.arch:
        raise ArchitectureMismatchError("parameter sets have different architectures")
    return float(np.linalg.norm(p1.vector.astype(np.float64) - p2.vector.astype(np.float64)))


@njit(cache=True)
def _im2col(x, Ho, Wo, k, s, pad_top, pad_left, out):
    """Gather conv windows of NHWC input into (B*Ho*Wo, k*k*C) rows.

    Out-of-bounds taps read as zero (implicit same padding). Row r belongs to
    (b, ho, wo); within a row the column order is (ki, kj, c).
    """
    B, H, W, C = x.shape
    for b in range(B):
        base = b * Ho * Wo
        for ho in range(Ho):
            hi0 = ho * s - pad_top
            for wo in range(Wo):
                wi0 = wo * s - pad_left
                r = base + ho * Wo + wo
                col = 0
                for ki in range(k):
                    hi = hi0 + ki
                    inside_h = 0 <= hi < H
                    for kj in range(k):
                        wi = wi0 + kj
                        if inside_h and 0 <= wi < W:
                            for c in range(C):
                                out[r, col + c] = x[b, hi, wi, c]
                        else:
                            for c in range(C):
                                out[r, col + c] = 0.0
                        col += C
    return out


@njit(cache=True)
def _col2im(dcols, B, H, W, C, Ho, Wo, k, s, pad_top, pad_left, dx):
    """Scatter-add column gradients back onto the NHWC input (serial, deterministic)."""
    for b in range(B):
        base = b * Ho * Wo
        for ho in range(Ho):
            hi0 = ho * s - pad_top
            for wo in range(Wo):
                wi0 = wo * s - pad_left
                r = base + ho * Wo + wo
                col = 0
                for ki in range(k):
                    hi = hi0 + ki
                    inside_h = 0 <= hi < H
                    for kj in range(k):
                        wi = wi0 + kj
                        if inside_h and 0 <= wi < W:
                            for c in range(C):
                                dx[b, hi, wi, c] += dcols[r, col + c]
                        col += C
    return dx


def _same_pad(in_size: int, out_size: int, k: int, s: int) -> int:
    """Leading pad under ceil-division same padding (trailing pad is implicit)."""
    total = max((out_size - 1) * s + k - in_size, 0)
    return total // 2


_scratch = threading.local()


def _scratch_buf(tag: str, shape: tuple, dtype) -> np.ndarray:
    """Reused per-thread work buffer; avoids re-faulting fresh pages each step.

    Buffers are only valid until the next forward/backward on the same
    thread, which is exactly how the internal caches consume them. Nothing
    returned from the public API aliases the pool.
    """
    pool = getattr(_scratch, "pool", None)
    if pool is None:
        pool = _scratch.pool = {}
    key = (tag, shape, np.dtype(dtype).str)
    buf = pool.get(key)
    if buf is None:
        buf = pool[key] = np.empty(shape, dtype)
    return buf


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, k: int, s: int, out_hw, layer: int):
    B, H, W, C = x.shape
    Ho, Wo = out_hw
    pad_top = _same_pad(H, Ho, k, s)
    pad_left = _same_pad(W, Wo, k, s)
    cols = _scratch_buf(f"cols{layer}", (B * Ho * Wo, k * k * C), x.dtype)
    _im2col(x, Ho, Wo, k, s, pad_top, pad_left, cols)
    z = _scratch_buf(f"convz{layer}", (B * Ho * Wo, w.shape[1]), x.dtype)
    np.matmul(cols, w, out=z)
    z += b
    np.maximum(z, 0.0, out=z)
    return z.reshape(B, Ho, Wo, w.shape[1]), cols, (pad_top, pad_left)


def dueling_combine(v: np.ndarray, a: np.ndarray, mean_subtract: bool) -> np.ndarray:
    """Q = V + A, with the advantage mean removed when the flag is on.

    Mean subtraction makes the V/A split identifiable; with it on, adding a
    constant to every advantage leaves Q unchanged.
    """
    if mean_subtract:
        return v + a - a.mean(axis=-1, keepdims=True)
    return v + a


def _as_batch(obs: np.ndarray, arch: ArchSpec) -> tuple[np.ndarray, bool]:
    obs = np.asarray(obs)
    single_shape = (arch.in_frames, arch.in_long, arch.in_lat)
    if obs.shape == single_shape:
        return obs[None], True
    if obs.ndim == 4 and obs.shape[1:] == single_shape:
        return obs, False
    raise InputShapeError(f"expected observation shape {single_shape} or (B,)+{single_shape}, got {obs.shape}")


def _forward_impl(params: NetworkParams, batch: np.ndarray, need_cache: bool):
    arch = params.arch
    dtype = params.dtype
    nhwc = _scratch_buf("input", (batch.shape[0], arch.in_long, arch.in_lat, arch.in_frames), dtype)
    np.copyto(nhwc, batch.transpose(0, 2, 3, 1))
    x = nhwc
    cache: dict = {"inputs": [], "cols": [], "pads": []} if need_cache else None

    for i, (ho, wo, _feats) in enumerate(arch.conv_shapes()):
        w = params[f"conv{i}.w"]
        b = params[f"conv{i}.b"]
        if need_cache:
            cache["inputs"].append(x)
        x, cols, pads = _conv_forward(x, w, b, arch.kernel, arch.stride, (ho, wo), i)
        if need_cache:
            cache["cols"].append(cols)
            cache["pads"].append(pads)

    flat = x.reshape(x.shape[0], -1)
    trunk = flat @ params["trunk.w"] + params["trunk.b"]
    np.maximum(trunk, 0.0, out=trunk)
    hv = trunk @ params["value1.w"] + params["value1.b"]
    np.maximum(hv, 0.0, out=hv)
    v = hv @ params["value2.w"] + params["value2.b"]
    ha = trunk @ params["adv1.w"] + params["adv1.b"]
    np.maximum(ha, 0.0, out=ha)
    a = ha @ params["adv2.w"] + params["adv2.b"]
    q = dueling_combine(v, a, params.dueling_mean)
    if need_cache:
        cache.update({"conv_out": x, "flat": flat, "trunk": trunk, "hv": hv, "ha": ha, "q": q})
    return q, cache


def forward(params: NetworkParams, obs: np.ndarray) -> np.ndarray:
    """Q values for one observation (5,) or a batch (B, 5)."""
    batch, single = _as_batch(obs, params.arch)
    q, _ = _forward_impl(params, batch, need_cache=False)
    return q[0] if single else q


def loss_and_gradients(
    params: NetworkParams,
    obs: np.ndarray,
    actions: np.ndarray,
    td_targets: np.ndarray,
    weights: Optional[np.ndarray] = None,
) -> tuple[float, np.ndarray]:
    """Weighted squared TD error and its gradient as one flat vector.

    With the default uniform weights the loss is (1/n) * sum of squared
    errors. td_targets are constants: no gradient flows through them.
    """
    batch, _ = _as_batch(obs, params.arch)
    n = batch.shape[0]
    if n == 0:
        raise ValueError("batch must be non-empty")
    actions = np.asarray(actions, dtype=np.int64)
    dtype = params.dtype
    td = np.asarray(td_targets, dtype=dtype)
    if weights is None:
        w = np.full(n, 1.0 / n, dtype=dtype)
    else:
        w = np.asarray(weights, dtype=dtype)

    q, cache = _forward_impl(params, batch, need_cache=True)
    taken = q[np.arange(n), actions]
    residual = td - taken
    loss = float(np.sum(w * residual * residual))
    if not np.isfinite(loss):
        raise NumericsError(
            f"non-finite loss: max|q|={np.max(np.abs(q))}, max|target|={np.max(np.abs(td))}"
        )

    dq = np.zeros_like(q)
    dq[np.arange(n), actions] = -2.0 * w * residual
    grads = _backward_impl(params, cache, dq)
    return loss, grads


def backward(
    params: NetworkParams,
    obs: np.ndarray,
    actions: np.ndarray,
    td_targets: np.ndarray,
    weights: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Gradient of the (optionally weighted) squared TD error, flat layout."""
    _, grads = loss_and_gradients(params, obs, actions, td_targets, weights)
    return grads


def backward_from_dq(params: NetworkParams, obs: np.ndarray, dq: np.ndarray) -> np.ndarray:
    """Gradient given an upstream d(loss)/d(Q) matrix; used by the cloning head."""
    batch, _ = _as_batch(obs, params.arch)
    _, cache = _forward_impl(params, batch, need_cache=True)
    return _backward_impl(params, cache, np.asarray(dq, dtype=params.dtype))


def _backward_impl(params: NetworkParams, cache: dict, dq: np.ndarray) -> np.ndarray:
    arch = params.arch
    grads = np.zeros(arch.param_count, dtype=params.dtype)
    g = NetworkParams(arch, grads, params.dueling_mean)

    if params.dueling_mean:
        dv = dq.sum(axis=1, keepdims=True)
        da = dq - dq.mean(axis=1, keepdims=True)
    else:
        dv = dq.sum(axis=1, keepdims=True)
        da = dq

    hv, ha, trunk, flat = cache["hv"], cache["ha"], cache["trunk"], cache["flat"]
    g["value2.w"][...] = hv.T @ dv
    g["value2.b"][...] = dv.sum(axis=0)
    dhv = dv @ params["value2.w"].T
    dhv *= hv > 0
    g["adv2.w"][...] = ha.T @ da
    g["adv2.b"][...] = da.sum(axis=0)
    dha = da @ params["adv2.w"].T
    dha *= ha > 0

    g["value1.w"][...] = trunk.T @ dhv
    g["value1.b"][...] = dhv.sum(axis=0)
    g["adv1.w"][...] = trunk.T @ dha
    g["adv1.b"][...] = dha.sum(axis=0)
    dtrunk = dhv @ params["value1.w"].T
    dtrunk += dha @ params["adv1.w"].T
    dtrunk *= trunk > 0

    g["trunk.w"][...] = flat.T @ dtrunk
    g["trunk.b"][...] = dtrunk.sum(axis=0)
    dx_flat = _scratch_buf("dflat", flat.shape, flat.dtype)
    np.matmul(dtrunk, params["trunk.w"].T, out=dx_flat)

    conv_shapes = arch.conv_shapes()
    dx = dx_flat.reshape(cache["conv_out"].shape)
    k, s = arch.kernel, arch.stride
    for i in reversed(range(len(conv_shapes))):
        ho, wo, feats = conv_shapes[i]
        out_act = cache["conv_out"] if i == len(conv_shapes) - 1 else cache["inputs"][i + 1]
        dx *= out_act > 0
        dz2 = dx.reshape(-1, feats)
        cols = cache["cols"][i]
        g[f"conv{i}.w"][...] = cols.T @ dz2
        g[f"conv{i}.b"][...] = dz2.sum(axis=0)
        if i > 0:
            x_in = cache["inputs"][i]
            dcols = _scratch_buf(f"dcols{i}", (dz2.shape[0], params[f"conv{i}.w"].shape[0]), dz2.dtype)
            np.matmul(dz2, params[f"conv{i}.w"].T, out=dcols)
            dx = _scratch_buf(f"dx{i}", x_in.shape, x_in.dtype)
            dx.fill(0.0)
            pad_top, pad_left = cache["pads"][i]
            _col2im(
                dcols, x_in.shape[0], x_in.shape[1], x_in.shape[2], x_in.shape[3],
                ho, wo, k, s, pad_top, pad_left, dx,
            )
    return grads


@dataclass
class OptimizerState:
    """Adam over the flat parameter vector."""

    learning_rate: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None


def optimize_step(
    params: NetworkParams, grads: np.ndarray, opt: OptimizerState
) -> tuple[NetworkParams, OptimizerState]:
    """One Adam update (in place on the parameter vector); returns both states."""
    if grads.shape != params.vector.shape:
        raise ArchitectureMismatchError("gradient vector does not match the parameter layout")
    if opt.m is None:
        opt.m = np.zeros_like(params.vector)
        opt.v = np.zeros_like(params.vector)
    opt.step += 1
    scalar = np.dtype(params.dtype).type
    b1, b2 = scalar(opt.beta1), scalar(opt.beta2)
    opt.m *= b1
    opt.m += (scalar(1.0) - b1) * grads
    opt.v *= b2
    opt.v += (scalar(1.0) - b2) * (grads * grads)
    corr1 = scalar(1.0 - opt.beta1 ** opt.step)
    corr2 = scalar(1.0 - opt.beta2 ** opt.step)
    denom = np.sqrt(opt.v / corr2)
    denom += scalar(opt.eps)
    update = opt.m / denom
    update *= scalar(opt.learning_rate) / corr1
    params.vector -= update
    return params, opt


def finite_difference_gradient(
    params: NetworkParams, loss_fn: Callable[[NetworkParams], float], h: float = 1e-4
) -> np.ndarray:
    """Central-difference gradient of loss_fn over every parameter (verification)."""
    base = params.vector
    grad = np.zeros(base.shape, dtype=np.float64)
    for i in range(base.size):
        orig = base[i]
        base[i] = orig + h
        up = loss_fn(params)
        base[i] = orig - h
        down = loss_fn(params)
        base[i] = orig
        grad[i] = (up - down) / (2.0 * h)
    return grad


CHECKPOINT_MAGIC = b"LCQN"
CHECKPOINT_VERSION = 1


def save_checkpoint(params: NetworkParams, path, step: int = 0, extra: Optional[dict] = None) -> None:
    """Versioned header + raw little-endian parameter array; round-trips bit-exactly."""
    header = {
        "arch": params.arch.to_dict(),
        "arch_hash": arch_hash(params.arch),
        "dueling_mean": params.dueling_mean,
        "dtype": np.dtype(params.dtype).str.lstrip("<>="),
        "step": step,
        "param_count": params.arch.param_count,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(params.vector.astype(f"<{header['dtype']}", copy=False).tobytes())


def load_checkpoint(path) -> tuple[NetworkParams, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r}")
        version, header_len = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(header_len).decode())
        arch = ArchSpec.from_dict(header["arch"])
        if header.get("arch_hash") != arch_hash(arch):
            raise CheckpointError("architecture hash mismatch (corrupt header)")
        raw = fh.read()
    expected = arch.param_count * np.dtype(header["dtype"]).itemsize
    if len(raw) != expected:
        raise CheckpointError(f"parameter payload is {len(raw)} bytes, expected {expected}")
    vector = np.frombuffer(raw, dtype=f"<{header['dtype']}").copy()
    return NetworkParams(arch, vector, header["dueling_mean"]), header
