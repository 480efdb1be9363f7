"""Per-frame feature production: sampling, augmentation, a small trainable
convolutional extractor, and the binary feature-file format.

The extractor is a stack of stride-2 conv stages with tanh activations,
followed by a 1x1 convolution to `output_dim` channels whose per-channel
global average is the frame's feature vector. The pre-pool channel maps can
be retained for attention-map reconstruction.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Parameter, Tensor, record_op, tanh_op, _ensure_finite
from .errors import ContractError, DimensionError, FormatError

FEATURE_MAGIC = b"ASTF"
FEATURE_VERSION = 1
_WIDTH_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


@dataclass
class FrameVolume:
    """Stack of frames [N, H, W, 3], channels real-valued in [0, 1]."""

    frames: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.frames)
        if arr.ndim != 4 or arr.shape[-1] != 3:
            raise DimensionError(f"frame volume must be [N,H,W,3], got {arr.shape}")
        self.frames = arr

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    @property
    def frame_size(self):
        return self.frames.shape[1], self.frames.shape[2]


@dataclass
class FeatureSequence:
    """Ordered per-frame feature vectors [N, m].

    spatial_maps, when retained, is [N, m, h', w'] with vectors[t, i] equal
    to the mean of spatial_maps[t, i]. step_tensors is set when the
    sequence was produced by the extractor under a tape, so gradients can
    flow back into the conv weights.
    """

    vectors: np.ndarray
    spatial_maps: np.ndarray | None = None
    step_tensors: list | None = None

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors)
        if self.vectors.ndim != 2:
            raise DimensionError(f"feature vectors must be [N,m], got {self.vectors.shape}")
        if self.spatial_maps is not None:
            sm = np.asarray(self.spatial_maps)
            if sm.shape[:2] != self.vectors.shape:
                raise DimensionError(
                    f"maps {sm.shape} do not match vectors {self.vectors.shape}")
            self.spatial_maps = sm

    @property
    def num_frames(self) -> int:
        return self.vectors.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class ExtractorConfig:
    kind: str = "tiny-conv"   # or "file" for precomputed features
    output_dim: int = 1024
    stage_widths: tuple = (8, 16, 32)
    kernel_size: int = 3
    stride: int = 2

    def __post_init__(self):
        if self.kind not in ("tiny-conv", "file"):
            raise ContractError(f"unknown extractor kind {self.kind!r}")


# ---------------------------------------------------------------------------
# frame sampling and augmentation

def sample_frames(volume: FrameVolume, n: int, rng: np.random.Generator) -> FrameVolume:
    """Pick n frames uniformly, sorted to preserve temporal order.

    Without replacement when the clip has at least n frames, with
    replacement otherwise.
    """
    if n < 1:
        raise ContractError("cannot sample zero frames")
    count = volume.frame_count
    if count >= n:
        idx = np.sort(rng.choice(count, size=n, replace=False))
    else:
        idx = np.sort(rng.integers(0, count, size=n))
    return FrameVolume(volume.frames[idx])


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize of [H,W] or [H,W,C]; constant in, constant out."""
    in_h, in_w = img.shape[:2]
    ys = np.linspace(0.0, in_h - 1.0, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0.0, in_w - 1.0, out_w) if out_w > 1 else np.zeros(1)
    if in_h == 1:
        ys = np.zeros(out_h)
    if in_w == 1:
        xs = np.zeros(out_w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0).astype(img.dtype if np.issubdtype(img.dtype, np.floating) else np.float64)
    wx = (xs - x0).astype(wy.dtype)
    if img.ndim == 3:
        wy = wy[:, None, None]
        wx = wx[None, :, None]
    else:
        wy = wy[:, None]
        wx = wx[None, :]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


RESIZE_SHORT = 245
CROP = 224


def augment(volume: FrameVolume, train: bool, rng: np.random.Generator) -> FrameVolume:
    """Resize the shorter edge to 245 px, then cut one 224x224 crop.

    Training uses a random crop offset shared across all frames of the
    volume; evaluation uses the center crop.
    """
    h, w = volume.frame_size
    if h <= w:
        nh, nw = RESIZE_SHORT, int(round(w * RESIZE_SHORT / h))
    else:
        nh, nw = int(round(h * RESIZE_SHORT / w)), RESIZE_SHORT
    if (nh, nw) != (h, w):
        frames = np.stack([resize_bilinear(f, nh, nw) for f in volume.frames])
    else:
        frames = volume.frames
    if train:
        oy = int(rng.integers(0, nh - CROP + 1))
        ox = int(rng.integers(0, nw - CROP + 1))
    else:
        oy, ox = (nh - CROP) // 2, (nw - CROP) // 2
    return FrameVolume(frames[:, oy:oy + CROP, ox:ox + CROP, :])


# ---------------------------------------------------------------------------
# differentiable conv ops (tape-recorded via autodiff.record_op)

def conv2d(x: Tensor, kernel, bias, stride: int = 1) -> Tensor:
    """Valid-padding 2-d convolution of [B,C,H,W] with kernels [O,C,kh,kw]."""
    k = kernel.value if isinstance(kernel, Parameter) else kernel
    b = bias.value if isinstance(bias, Parameter) else bias
    xd, kd, bd = x.data, k.data, b.data
    if xd.ndim != 4 or kd.ndim != 4 or xd.shape[1] != kd.shape[1]:
        raise DimensionError(f"conv2d: input {xd.shape} does not match kernels {kd.shape}")
    out_c, in_c, kh, kw = kd.shape
    if bd.shape != (out_c,):
        raise DimensionError(f"conv2d: bias {bd.shape} does not match {out_c} kernels")
    if xd.shape[2] < kh or xd.shape[3] < kw:
        raise DimensionError(f"conv2d: input {xd.shape} smaller than kernel {kd.shape}")
    win = np.lib.stride_tricks.sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    y = np.einsum("bchwij,ocij->bohw", win, kd, optimize=True) + bd[None, :, None, None]
    out = Tensor(y)
    _ensure_finite("conv2d", y)
    ho, wo = y.shape[2], y.shape[3]

    def back(g):
        pairs = [
            (k, np.einsum("bohw,bchwij->ocij", g, win, optimize=True)),
            (b, g.sum(axis=(0, 2, 3))),
        ]
        if x.param is not None or x._op_out:
            dx = np.zeros_like(xd)
            for a in range(kh):
                for bb in range(kw):
                    dx[:, :, a:a + stride * ho:stride, bb:bb + stride * wo:stride] += \
                        np.einsum("bohw,oc->bchw", g, kd[:, :, a, bb], optimize=True)
            pairs.append((x, dx))
        return pairs

    record_op(out, back)
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """[B,C,H,W] -> [B,C] per-channel spatial mean."""
    xd = x.data
    if xd.ndim != 4:
        raise DimensionError(f"global_avg_pool: expected [B,C,H,W], got {xd.shape}")
    area = xd.shape[2] * xd.shape[3]
    out = Tensor(xd.mean(axis=(2, 3)))

    def back(g):
        return [(x, np.broadcast_to((g / area)[:, :, None, None], xd.shape).copy())]

    record_op(out, back)
    return out


class TinyConvExtractor:
    """Trainable conv feature extractor standing in for a large pretrained one."""

    def __init__(self, cfg: ExtractorConfig, rng: np.random.Generator, dtype, in_channels: int = 3):
        if cfg.kind != "tiny-conv":
            raise ContractError("file-backed features do not need an extractor")
        self.cfg = cfg
        self.dtype = dtype
        self.stages = []
        c_in = in_channels
        k = cfg.kernel_size
        for s, width in enumerate(cfg.stage_widths):
            limit = np.sqrt(6.0 / (c_in * k * k + width * k * k))
            kern = Parameter(f"extractor/stage{s}/kernel",
                             rng.uniform(-limit, limit, size=(width, c_in, k, k)).astype(dtype))
            bias = Parameter(f"extractor/stage{s}/bias", np.zeros(width, dtype=dtype))
            self.stages.append((kern, bias))
            c_in = width
        limit = np.sqrt(6.0 / (c_in + cfg.output_dim))
        self.proj_kernel = Parameter("extractor/proj1x1/kernel",
                                     rng.uniform(-limit, limit, size=(cfg.output_dim, c_in, 1, 1)).astype(dtype))
        self.proj_bias = Parameter("extractor/proj1x1/bias", np.zeros(cfg.output_dim, dtype=dtype))

    def parameters(self) -> list[Parameter]:
        out = []
        for kern, bias in self.stages:
            out += [kern, bias]
        return out + [self.proj_kernel, self.proj_bias]

    def _maps(self, frames: np.ndarray) -> Tensor:
        """Frames [B,H,W,3] (or one [H,W,3]) to channel maps [B,m,h',w']."""
        arr = np.asarray(frames, dtype=self.dtype)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4 or arr.shape[-1] != 3:
            raise DimensionError(f"extractor input must be [B,H,W,3], got {arr.shape}")
        t = Tensor(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))
        for kern, bias in self.stages:
            t = tanh_op(conv2d(t, kern, bias, stride=self.cfg.stride))
        return conv2d(t, self.proj_kernel, self.proj_bias, stride=1)

    def step(self, frames: np.ndarray) -> Tensor:
        """Pooled feature vectors: [B,H,W,3] -> [B,m], or [H,W,3] -> [m]."""
        single = np.asarray(frames).ndim == 3
        maps = self._maps(frames)
        pooled = global_avg_pool(maps)
        return _take_row0(pooled) if single else pooled

    def extract(self, volume: FrameVolume, keep_maps: bool = False) -> FeatureSequence:
        """Whole-clip features; differentiable through step_tensors."""
        tensors = [self.step(volume.frames[t]) for t in range(volume.frame_count)]
        vectors = np.stack([t.data for t in tensors])
        maps = None
        if keep_maps:
            maps = np.stack([self._maps(volume.frames[t]).data[0] for t in range(volume.frame_count)])
        return FeatureSequence(vectors=vectors, spatial_maps=maps, step_tensors=tensors)


def _take_row0(x: Tensor) -> Tensor:
    """Row 0 of a [1, m] tensor as [m], keeping the gradient path."""
    out = Tensor(x.data[0])

    def back(g):
        return [(x, g[None, :])]

    record_op(out, back)
    return out


# ---------------------------------------------------------------------------
# feature file format
#
# Fixed 32-byte little-endian header:
#   magic "ASTF" | u32 version | u32 N | u32 m | u32 element width (4 or 8)
#   | u32 maps flag (0 or 1) | u32 h' | u32 w'
# then N*m elements row-major, then (flag set) N*m*h'*w' map elements.

def save_features(seq: FeatureSequence, path):
    vec = np.asarray(seq.vectors)
    if vec.dtype.kind != "f" or vec.dtype.itemsize not in _WIDTH_DTYPES:
        vec = vec.astype(np.float32)
    width = vec.dtype.itemsize
    dt = _WIDTH_DTYPES[width]
    n, m = vec.shape
    flag = 1 if seq.spatial_maps is not None else 0
    hp = wp = 0
    blob = vec.astype(dt, copy=False).tobytes()
    if flag:
        maps = np.asarray(seq.spatial_maps)
        hp, wp = maps.shape[2], maps.shape[3]
        blob += maps.astype(dt, copy=False).tobytes()
    header = struct.pack("<4sIIIIIII", FEATURE_MAGIC, FEATURE_VERSION, n, m, width, flag, hp, wp)
    with open(path, "wb") as f:
        f.write(header + blob)


def load_features(path) -> FeatureSequence:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 32:
        raise FormatError(f"feature file truncated at byte {len(raw)}: header needs 32 bytes")
    magic, version, n, m, width, flag, hp, wp = struct.unpack("<4sIIIIIII", raw[:32])
    if magic != FEATURE_MAGIC:
        raise FormatError(f"bad magic {magic!r} at byte 0")
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported version {version} at byte 4")
    if width not in _WIDTH_DTYPES:
        raise FormatError(f"bad element width {width} at byte 16")
    if flag not in (0, 1):
        raise FormatError(f"bad maps flag {flag} at byte 20")
    if flag == 0 and (hp or wp):
        raise FormatError("map extents set but maps flag clear (byte 24)")
    dt = _WIDTH_DTYPES[width]
    need = 32 + n * m * width + (n * m * hp * wp * width if flag else 0)
    if len(raw) != need:
        raise FormatError(f"feature file length {len(raw)} != expected {need}: "
                          f"error at byte {min(len(raw), need)}")
    off = 32
    vec = np.frombuffer(raw, dtype=dt, count=n * m, offset=off).reshape(n, m).copy()
    maps = None
    if flag:
        off += n * m * width
        maps = np.frombuffer(raw, dtype=dt, count=n * m * hp * wp, offset=off) \
            .reshape(n, m, hp, wp).copy()
    return FeatureSequence(vectors=vec, spatial_maps=maps)
