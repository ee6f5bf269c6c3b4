"""Point network with iterative voxel/point recurrent refinement.

Per-point coordinates are encoded by a two-layer tanh MLP, then refined for
K rounds: a voxel-level gated recurrent cell consumes the mean feature of
each occupied cell, and a point-level cell consumes its voxel's fresh
hidden state. First and final point features fuse into a shared embedding
feeding two linear heads. The flow head reads the embedding alone; the
mask head reads the embedding concatenated with the scaled coordinates,
because instance identity is largely positional and the tanh trunk
compresses position heavily. Forward and reverse passes are written out
by hand in float64 numpy so gradients are exact and every reduction has a
fixed summation order (ascending point index within each voxel).

Checkpoints are a flat named-tensor file: magic ``SFCK``, u32 version,
then repeated (u32 name length, UTF-8 name, u32 rank, u32 dims, float64
little-endian data) records until end of file.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .data import (
    BadMagic,
    IoFailure,
    MaskLogits,
    FlowField,
    PointCloud,
    TruncatedFile,
    UnsupportedVersion,
)
from .coarse import PseudoLabels
from .neighbors import VoxelGrid

CHECKPOINT_MAGIC = b"SFCK"
CHECKPOINT_VERSION = 1

DEFAULT_WIDTH = 64
DEFAULT_ITERS = 4
DEFAULT_CHANNELS = 32
DEFAULT_CELL = 0.3
INPUT_SCALE = 0.05
# Per-axis gain on the scaled coordinates. Outdoor scenes span tens of
# metres horizontally but only a few metres vertically; without the extra
# z gain the height contrast between ground clutter and elevated objects
# is nearly invisible to the encoder at a scale chosen for x and y.
AXIS_GAIN = (1.0, 1.0, 4.0)

_META_NAMES = ("meta_d", "meta_k", "meta_c", "meta_input_scale", "meta_delta")


class ShapeMismatch(ValueError):
    pass


class TraceMismatch(ValueError):
    pass


def _sigmoid(t: np.ndarray) -> np.ndarray:
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _tensor_shapes(d: int, c: int) -> dict:
    g = 3 * d
    return {
        "enc_w1": (d, 3),
        "enc_b1": (d,),
        "enc_w2": (d, d),
        "enc_b2": (d,),
        "gru_v_wi": (g, d),
        "gru_v_wh": (g, d),
        "gru_v_bi": (g,),
        "gru_v_bh": (g,),
        "gru_p_wi": (g, d),
        "gru_p_wh": (g, d),
        "gru_p_bi": (g,),
        "gru_p_bh": (g,),
        "fuse_w": (d, 2 * d),
        "fuse_b": (d,),
        "head_flow_w": (3, d),
        "head_flow_b": (3,),
        "head_seg_w": (c, d + 3),
        "head_seg_b": (c,),
    }


@dataclass
class ModelParams:
    """Named float64 tensors plus the dimensions that fix their shapes."""

    tensors: dict
    d: int = DEFAULT_WIDTH
    k_iters: int = DEFAULT_ITERS
    channels: int = DEFAULT_CHANNELS
    input_scale: float = INPUT_SCALE
    cell_size: float = DEFAULT_CELL

    def __post_init__(self):
        if self.d < 1 or self.channels < 2 or self.k_iters < 0:
            raise ShapeMismatch(
                f"invalid dims d={self.d} K={self.k_iters} C={self.channels}"
            )
        expected = _tensor_shapes(self.d, self.channels)
        if set(self.tensors) != set(expected):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ShapeMismatch(f"tensor names missing={missing} extra={extra}")
        ordered = {}
        for name, shape in expected.items():
            arr = np.ascontiguousarray(self.tensors[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeMismatch(f"{name}: expected {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ShapeMismatch(f"{name} contains non-finite values")
            ordered[name] = arr
        self.tensors = ordered

    @classmethod
    def init(cls, d: int = DEFAULT_WIDTH, k_iters: int = DEFAULT_ITERS,
             channels: int = DEFAULT_CHANNELS, seed: int = 0,
             input_scale: float = INPUT_SCALE,
             cell_size: float = DEFAULT_CELL) -> "ModelParams":
        """Seeded uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)].

        Tensors are drawn in a fixed order so a seed pins every value.
        The flow head starts at zero: a fresh model predicts zero
        residual, so on a static pair the warped cloud equals the target
        and the Chamfer term starts at 0. The mask head must NOT start
        at zero: equal logits across channels 1..C-1 are a stationary
        point of every mask loss (their gradients are channel-symmetric),
        and argmax segmentation would never split instances apart.
        """
        rng = np.random.default_rng(seed)
        fan_in = {
            "enc_w1": 3, "enc_b1": 3, "enc_w2": d, "enc_b2": d,
            "gru_v_wi": d, "gru_v_wh": d, "gru_v_bi": d, "gru_v_bh": d,
            "gru_p_wi": d, "gru_p_wh": d, "gru_p_bi": d, "gru_p_bh": d,
            "fuse_w": 2 * d, "fuse_b": 2 * d,
            "head_seg_w": d + 3, "head_seg_b": d + 3,
        }
        tensors = {}
        for name, shape in _tensor_shapes(d, channels).items():
            if name.startswith("head_flow"):
                tensors[name] = np.zeros(shape)
            else:
                bound = 1.0 / math.sqrt(fan_in[name])
                tensors[name] = rng.uniform(-bound, bound, size=shape)
        return cls(tensors, d, k_iters, channels, input_scale, cell_size)

    def copy(self) -> "ModelParams":
        return ModelParams(
            {k: v.copy() for k, v in self.tensors.items()},
            self.d, self.k_iters, self.channels, self.input_scale, self.cell_size,
        )

    def _entries(self):
        metas = (self.d, self.k_iters, self.channels, self.input_scale,
                 self.cell_size)
        for name, value in zip(_META_NAMES, metas):
            yield name, np.asarray(float(value))
        yield from self.tensors.items()

    def save(self, path):
        chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
        for name, arr in self._entries():
            raw = name.encode("utf-8")
            chunks.append(struct.pack("<I", len(raw)))
            chunks.append(raw)
            chunks.append(struct.pack("<I", arr.ndim))
            if arr.ndim:
                chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            chunks.append(arr.astype("<f8").tobytes())
        try:
            with open(path, "wb") as fh:
                fh.write(b"".join(chunks))
        except OSError as exc:
            raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc

    @classmethod
    def load(cls, path) -> "ModelParams":
        try:
            with open(path, "rb") as fh:
                buf = fh.read()
        except OSError as exc:
            raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc
        named = _read_tensor_stream(buf)
        for meta in _META_NAMES:
            if meta not in named:
                raise TruncatedFile(f"checkpoint lacks {meta}", len(buf))
        d = int(named["meta_d"])
        return cls(
            {k: v for k, v in named.items() if k not in _META_NAMES},
            d=d,
            k_iters=int(named["meta_k"]),
            channels=int(named["meta_c"]),
            input_scale=float(named["meta_input_scale"]),
            cell_size=float(named["meta_delta"]),
        )


def _read_tensor_stream(buf: bytes) -> dict:
    if buf[:4] != CHECKPOINT_MAGIC:
        raise BadMagic(f"expected {CHECKPOINT_MAGIC!r}, got {buf[:4]!r}", 0)
    if len(buf) < 8:
        raise TruncatedFile("header cut short", len(buf))
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersion(f"version {version}", 4)
    named = {}
    off = 8
    while off < len(buf):
        try:
            (name_len,) = struct.unpack_from("<I", buf, off)
            name = buf[off + 4 : off + 4 + name_len].decode("utf-8")
            off += 4 + name_len
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", buf, off) if rank else ()
            off += 4 * rank
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            data = np.frombuffer(buf, dtype="<f8", count=count, offset=off)
            off += 8 * count
        except (struct.error, ValueError) as exc:
            raise TruncatedFile(f"tensor record cut short: {exc}", off) from exc
        named[name] = data.reshape(dims).astype(np.float64)
    return named


@dataclass
class _GruStep:
    """Everything the reverse pass needs from one recurrent update."""

    h_prev: np.ndarray
    x: np.ndarray
    r: np.ndarray
    z: np.ndarray
    n: np.ndarray
    u: np.ndarray  # candidate's hidden-path preactivation, bias included


@dataclass
class ForwardTrace:
    """Intermediate activations captured for the manual reverse pass."""

    scaled_points: np.ndarray
    slots: np.ndarray
    order: np.ndarray
    starts: np.ndarray
    counts: np.ndarray
    enc_hidden: np.ndarray
    f0: np.ndarray
    gru_v_steps: list = field(default_factory=list)
    gru_p_steps: list = field(default_factory=list)
    f_final: np.ndarray | None = None
    f_shared: np.ndarray | None = None
    residual: np.ndarray | None = None
    logits: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.f0)


@dataclass
class ParamGradients:
    """Gradient tensor per parameter, keyed identically to ModelParams."""

    tensors: dict

    def scaled(self, factor: float) -> "ParamGradients":
        return ParamGradients({k: v * factor for k, v in self.tensors.items()})

    def add_(self, other: "ParamGradients"):
        for name, arr in other.tensors.items():
            self.tensors[name] += arr

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "ParamGradients":
        return cls({k: np.zeros_like(v) for k, v in params.tensors.items()})


def _gru_forward(wi, wh, bi, bh, h, x, d):
    gx = x @ wi.T + bi
    gh = h @ wh.T + bh
    r = _sigmoid(gx[:, :d] + gh[:, :d])
    z = _sigmoid(gx[:, d : 2 * d] + gh[:, d : 2 * d])
    u = gh[:, 2 * d :]
    n = np.tanh(gx[:, 2 * d :] + r * u)
    h_new = (1.0 - z) * n + z * h
    return h_new, _GruStep(h, x, r, z, n, u)


def _gru_backward(grads, prefix, params, step: _GruStep, g_out):
    """Reverse one recurrent update; returns (grad hidden, grad input)."""
    dz = g_out * (step.h_prev - step.n)
    dn = g_out * (1.0 - step.z)
    dh = g_out * step.z
    dan = dn * (1.0 - step.n * step.n)
    dr = dan * step.u
    dar = dr * step.r * (1.0 - step.r)
    daz = dz * step.z * (1.0 - step.z)
    da = np.concatenate([dar, daz, dan], axis=1)
    # The candidate's hidden path is gated by r before the nonlinearity.
    da_h = np.concatenate([dar, daz, dan * step.r], axis=1)
    grads[prefix + "_wi"] += da.T @ step.x
    grads[prefix + "_bi"] += da.sum(axis=0)
    grads[prefix + "_wh"] += da_h.T @ step.h_prev
    grads[prefix + "_bh"] += da_h.sum(axis=0)
    g_hidden = dh + da_h @ params.tensors[prefix + "_wh"]
    g_input = da @ params.tensors[prefix + "_wi"]
    return g_hidden, g_input


def forward(params: ModelParams, cloud: PointCloud, grid: VoxelGrid):
    """Run the network once: (residual FlowField, MaskLogits, ForwardTrace)."""
    if grid.n != cloud.n:
        raise ShapeMismatch(
            f"grid holds {grid.n} points but the cloud has {cloud.n}"
        )
    if not math.isclose(grid.cell_size, params.cell_size, rel_tol=1e-12):
        raise ShapeMismatch(
            f"grid cell {grid.cell_size} differs from model cell {params.cell_size}"
        )
    t = params.tensors
    d = params.d

    order = grid._order
    starts = grid._starts[:-1]
    counts = np.diff(grid._starts)
    n_voxels = len(starts)
    slots = np.empty(cloud.n, dtype=np.int64)
    slots[order] = np.repeat(np.arange(n_voxels, dtype=np.int64), counts)

    scaled = params.input_scale * np.asarray(AXIS_GAIN) * cloud.points
    enc_hidden = np.tanh(scaled @ t["enc_w1"].T + t["enc_b1"])
    f0 = np.tanh(enc_hidden @ t["enc_w2"].T + t["enc_b2"])

    trace = ForwardTrace(scaled, slots, order, starts, counts, enc_hidden, f0)
    f = f0
    h = np.zeros((n_voxels, d))
    for _ in range(params.k_iters):
        means = np.add.reduceat(f[order], starts, axis=0) / counts[:, None]
        h, step_v = _gru_forward(
            t["gru_v_wi"], t["gru_v_wh"], t["gru_v_bi"], t["gru_v_bh"],
            h, means, d,
        )
        f, step_p = _gru_forward(
            t["gru_p_wi"], t["gru_p_wh"], t["gru_p_bi"], t["gru_p_bh"],
            f, h[slots], d,
        )
        trace.gru_v_steps.append(step_v)
        trace.gru_p_steps.append(step_p)

    f_shared = np.tanh(
        np.concatenate([f0, f], axis=1) @ t["fuse_w"].T + t["fuse_b"]
    )
    residual = f_shared @ t["head_flow_w"].T + t["head_flow_b"]
    seg_in = np.concatenate([f_shared, scaled], axis=1)
    logits = seg_in @ t["head_seg_w"].T + t["head_seg_b"]

    trace.f_final = f
    trace.f_shared = f_shared
    trace.residual = residual
    trace.logits = logits
    return FlowField(residual, "residual"), MaskLogits(logits), trace


def backward(params: ModelParams, trace: ForwardTrace,
             grad_flow: np.ndarray, grad_logits: np.ndarray) -> ParamGradients:
    """Exact parameter gradients for upstream (grad_flow, grad_logits)."""
    grad_flow = np.asarray(grad_flow, dtype=np.float64)
    grad_logits = np.asarray(grad_logits, dtype=np.float64)
    n = trace.n
    if trace.f_shared is None or len(trace.gru_p_steps) != params.k_iters:
        raise TraceMismatch("trace does not come from a completed forward")
    if grad_flow.shape != (n, 3):
        raise TraceMismatch(f"grad_flow shape {grad_flow.shape} != ({n}, 3)")
    if grad_logits.shape != (n, params.channels):
        raise TraceMismatch(
            f"grad_logits shape {grad_logits.shape} != ({n}, {params.channels})"
        )

    t = params.tensors
    d = params.d
    g = {name: np.zeros_like(arr) for name, arr in t.items()}

    fs = trace.f_shared
    g["head_flow_w"] += grad_flow.T @ fs
    g["head_flow_b"] += grad_flow.sum(axis=0)
    seg_in = np.concatenate([fs, trace.scaled_points], axis=1)
    g["head_seg_w"] += grad_logits.T @ seg_in
    g["head_seg_b"] += grad_logits.sum(axis=0)
    # Coordinates are constants; only the embedding slice flows back.
    g_shared = grad_flow @ t["head_flow_w"] + grad_logits @ t["head_seg_w"][:, :d]

    da_fuse = g_shared * (1.0 - fs * fs)
    cat = np.concatenate([trace.f0, trace.f_final], axis=1)
    g["fuse_w"] += da_fuse.T @ cat
    g["fuse_b"] += da_fuse.sum(axis=0)
    g_cat = da_fuse @ t["fuse_w"]
    g_f0_fuse = g_cat[:, :d]
    g_f = g_cat[:, d:].copy()

    g_h_carry = np.zeros((len(trace.starts), d))
    for k in range(params.k_iters - 1, -1, -1):
        step_p = trace.gru_p_steps[k]
        step_v = trace.gru_v_steps[k]
        g_f_prev, g_xp = _gru_backward(g, "gru_p", params, step_p, g_f)
        g_h = g_h_carry + np.add.reduceat(g_xp[trace.order], trace.starts, axis=0)
        g_h_carry, g_means = _gru_backward(g, "gru_v", params, step_v, g_h)
        g_f = g_f_prev + g_means[trace.slots] / trace.counts[trace.slots, None]
    # The initial voxel hidden state is the zero constant; its grad drops.

    g_f0 = g_f + g_f0_fuse
    da2 = g_f0 * (1.0 - trace.f0 * trace.f0)
    g["enc_w2"] += da2.T @ trace.enc_hidden
    g["enc_b2"] += da2.sum(axis=0)
    g_hidden = da2 @ t["enc_w2"]
    da1 = g_hidden * (1.0 - trace.enc_hidden * trace.enc_hidden)
    g["enc_w1"] += da1.T @ trace.scaled_points
    g["enc_b1"] += da1.sum(axis=0)
    return ParamGradients(g)


def predict_labels(logits: MaskLogits, source_frame: int = 0) -> PseudoLabels:
    """Per-point argmax channel; ties resolve to the lower channel index."""
    return PseudoLabels(np.argmax(logits.logits, axis=1), source_frame)
