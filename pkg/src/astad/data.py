"""Input handling: depth preprocessing, foreground masks, positional encoding,
synthetic corpora for desk-scale verification, and tensor/corpus file I/O.

Depth maps are measured in centimeters.  The preprocessing chain for 3D data
is: fill missing values from valid neighbors, fit a background plane through
the four corners, threshold against the plane to get a foreground mask,
dilate the mask, subtract the mean foreground depth, then resize and
pixel-unshuffle the depth so it aligns with the feature-map resolution.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import (
    DimensionError,
    EmptyForegroundError,
    FormatError,
    InvalidCornerError,
)
from .tensor import Tensor


@dataclass
class DepthMap:
    """Depth values in centimeters plus a validity map (1 = sensor value present).

    Invalid pixels carry the value 0 by convention.
    """

    values: Tensor
    validity: Tensor

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape != self.validity.shape:
            raise DimensionError(
                f"depth map needs matching 2-D values/validity, got {self.values.shape} vs {self.validity.shape}")

    @classmethod
    def from_arrays(cls, values, validity=None):
        values = np.asarray(values, dtype=np.float32)
        if validity is None:
            validity = np.ones_like(values)
        validity = (np.asarray(validity) > 0).astype(np.float32)
        values = np.where(validity > 0, values, 0.0).astype(np.float32)
        return cls(Tensor(values), Tensor(validity))


@dataclass
class ForegroundMask:
    """Binary mask with a resolution tag ('full' sensor grid or 'feature' grid)."""

    values: Tensor
    resolution: str = "full"

    def __post_init__(self):
        v = self.values.data
        if not np.all((v == 0) | (v == 1)):
            raise ValueError("foreground mask must be binary")
        if self.resolution not in ("full", "feature"):
            raise ValueError(f"unknown mask resolution tag {self.resolution!r}")

    def array(self):
        return self.values.data


@dataclass
class Sample:
    """One instance: feature map, optional depth channels, masks and label."""

    features: Tensor
    depth: Optional[Tensor] = None
    mask: Optional[ForegroundMask] = None
    label: str = "normal"
    gt_mask: Optional[Tensor] = None
    raw_depth: Optional[DepthMap] = None

    def __post_init__(self):
        if self.features.ndim != 3:
            raise DimensionError(f"features must be [C,H,W], got {self.features.shape}")
        h, w = self.features.shape[1:]
        if self.depth is not None and self.depth.shape[1:] != (h, w):
            raise DimensionError(
                f"depth channels {self.depth.shape} do not match feature grid {h}x{w}")
        if self.mask is not None:
            if self.mask.resolution != "feature":
                raise DimensionError("sample masks must be at feature resolution")
            if self.mask.values.shape != (h, w):
                raise DimensionError(
                    f"mask shape {self.mask.values.shape} does not match feature grid {h}x{w}")
        if self.gt_mask is not None and self.gt_mask.shape != (h, w):
            raise DimensionError(
                f"gt_mask shape {self.gt_mask.shape} does not match feature grid {h}x{w}")
        if self.label not in ("normal", "anomalous"):
            raise ValueError(f"unknown label {self.label!r}")

    def model_input(self):
        """Teacher/student input: features with depth channels appended."""
        if self.depth is None:
            return self.features
        return T.concat([self.features, self.depth])

    def mask_array(self):
        return None if self.mask is None else self.mask.array()


def assemble_sample(features, depth=None, mask=None, label="normal", gt_mask=None, raw_depth=None):
    """Bundle preprocessed pieces into a Sample (features first, depth second)."""
    return Sample(features=features, depth=depth, mask=mask, label=label,
                  gt_mask=gt_mask, raw_depth=raw_depth)


# ---------------------------------------------------------------------------
# depth preprocessing
# ---------------------------------------------------------------------------

_NEIGHBOR_SHIFTS = [(di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1) if (di, dj) != (0, 0)]


def fill_missing_depth(d, iterations=3):
    """Fill invalid pixels from the mean of valid 8-neighbors, 3 iterations.

    Each iteration updates all pixels simultaneously against the validity
    state at the start of the iteration; pixels still unreachable afterwards
    stay invalid with value 0.
    """
    vals = d.values.data.astype(np.float64)
    valid = d.validity.data > 0
    h, w = vals.shape
    for _ in range(iterations):
        vp = np.pad(np.where(valid, vals, 0.0), 1)
        mp = np.pad(valid.astype(np.float64), 1)
        nsum = np.zeros_like(vals)
        ncnt = np.zeros_like(vals)
        for di, dj in _NEIGHBOR_SHIFTS:
            nsum += vp[1 + di:1 + di + h, 1 + dj:1 + dj + w]
            ncnt += mp[1 + di:1 + di + h, 1 + dj:1 + dj + w]
        fillable = (~valid) & (ncnt > 0)
        vals = np.where(fillable, np.divide(nsum, np.maximum(ncnt, 1.0)), vals)
        valid = valid | fillable
    vals = np.where(valid, vals, 0.0)
    return DepthMap(Tensor(vals.astype(np.float32)), Tensor(valid.astype(np.float32)))


def background_plane(d):
    """Bilinear plane through the four corner depths (corners must be valid)."""
    vals = d.values.data
    valid = d.validity.data
    h, w = vals.shape
    corners = [(0, 0), (0, w - 1), (h - 1, 0), (h - 1, w - 1)]
    for (i, j) in corners:
        if valid[i, j] <= 0:
            raise InvalidCornerError(f"corner pixel ({i},{j}) is invalid; fill the depth map first")
    c00, c01, c10, c11 = (float(vals[i, j]) for (i, j) in corners)
    u = (np.arange(h, dtype=np.float64) / (h - 1) if h > 1 else np.zeros(1))[:, None]
    v = (np.arange(w, dtype=np.float64) / (w - 1) if w > 1 else np.zeros(1))[None, :]
    plane = (1 - u) * ((1 - v) * c00 + v * c01) + u * ((1 - v) * c10 + v * c11)
    return Tensor(plane.astype(np.float32))


def _dilate_square8(mask):
    """Binary dilation with an 8x8 square element (window offsets -3..+4)."""
    h, w = mask.shape
    padded = np.pad(mask.astype(bool), ((3, 4), (3, 4)))
    out = np.zeros((h, w), dtype=bool)
    for a in range(8):
        for b in range(8):
            out |= padded[a:a + h, b:b + w]
    return out


def extract_foreground(d, plane, threshold_cm=0.7):
    """Pixels further than threshold_cm from the plane, dilated by an 8x8 square."""
    plane_arr = plane.data if isinstance(plane, Tensor) else np.asarray(plane)
    if plane_arr.shape != d.values.shape:
        raise DimensionError(f"plane shape {plane_arr.shape} != depth shape {d.values.shape}")
    base = np.abs(d.values.data.astype(np.float64) - plane_arr.astype(np.float64)) > threshold_cm
    dilated = _dilate_square8(base)
    return ForegroundMask(Tensor(dilated.astype(np.float32)), "full")


def normalize_depth(d, mask):
    """Subtract the mean foreground depth; background pixels become 0."""
    if mask.values.shape != d.values.shape:
        raise DimensionError(f"mask shape {mask.values.shape} != depth shape {d.values.shape}")
    fg = mask.array() > 0
    if not fg.any():
        raise EmptyForegroundError("normalize_depth: empty foreground")
    vals = d.values.data.astype(np.float64)
    mean = vals[fg].mean(dtype=np.float64)
    out = np.where(fg, vals - mean, 0.0).astype(np.float32)
    return DepthMap(Tensor(out), Tensor(d.validity.data.copy()))


def bilinear_resize(arr, out_h, out_w):
    """Bilinear resampling with half-pixel-center alignment and edge clamping."""
    arr = np.asarray(arr, dtype=np.float64)
    h, w = arr.shape
    src_r = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    src_c = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    r0 = np.floor(src_r)
    c0 = np.floor(src_c)
    fr = (src_r - r0)[:, None]
    fc = (src_c - c0)[None, :]
    r0i = np.clip(r0, 0, h - 1).astype(np.intp)
    r1i = np.clip(r0 + 1, 0, h - 1).astype(np.intp)
    c0i = np.clip(c0, 0, w - 1).astype(np.intp)
    c1i = np.clip(c0 + 1, 0, w - 1).astype(np.intp)
    a00 = arr[np.ix_(r0i, c0i)]
    a01 = arr[np.ix_(r0i, c1i)]
    a10 = arr[np.ix_(r1i, c0i)]
    a11 = arr[np.ix_(r1i, c1i)]
    return (1 - fr) * ((1 - fc) * a00 + fc * a01) + fr * ((1 - fc) * a10 + fc * a11)


def depth_to_model_input(d, target_size=192, unshuffle_factor=8):
    """Resize depth to target_size^2 and pixel-unshuffle it to factor^2 channels."""
    if target_size % unshuffle_factor != 0:
        raise DimensionError(
            f"target size {target_size} not divisible by unshuffle factor {unshuffle_factor}")
    resized = bilinear_resize(d.values.data, target_size, target_size).astype(np.float32)
    return T.pixel_unshuffle(Tensor(resized[None]), unshuffle_factor).detach()


def downsample_mask(mask, out_h, out_w):
    """Bilinear-downsample a mask; any cell with weight > 0 becomes foreground."""
    low = bilinear_resize(mask.array(), out_h, out_w)
    binary = (low > 0).astype(np.float32)
    return ForegroundMask(Tensor(binary), "feature")


# ---------------------------------------------------------------------------
# positional encoding
# ---------------------------------------------------------------------------

_PE_CACHE = {}


def positional_encoding(height, width, channels=32):
    """Sinusoidal 2-D positional encoding: first half encodes rows, second columns.

    For k = 0..channels/4-1 with frequency 1/10000^(4k/channels), channel 2k
    is sin(freq*i) and channel 2k+1 is cos(freq*i); the second half repeats
    the ladder for the column index j.  Deterministic and cached per
    resolution; treat the returned tensor as read-only.
    """
    if channels % 4 != 0:
        raise DimensionError(f"positional encoding channels must be divisible by 4, got {channels}")
    key = (height, width, channels)
    if key not in _PE_CACHE:
        quarter = channels // 4
        freqs = 1.0 / (10000.0 ** (4.0 * np.arange(quarter) / channels))
        rows = np.arange(height, dtype=np.float64)[None, :, None] * freqs[:, None, None]
        cols = np.arange(width, dtype=np.float64)[None, None, :] * freqs[:, None, None]
        pe = np.empty((channels, height, width), dtype=np.float32)
        pe[0:channels // 2:2] = np.broadcast_to(np.sin(rows), (quarter, height, width))
        pe[1:channels // 2:2] = np.broadcast_to(np.cos(rows), (quarter, height, width))
        pe[channels // 2::2] = np.broadcast_to(np.sin(cols), (quarter, height, width))
        pe[channels // 2 + 1::2] = np.broadcast_to(np.cos(cols), (quarter, height, width))
        _PE_CACHE[key] = Tensor(pe)
    return _PE_CACHE[key]


# ---------------------------------------------------------------------------
# synthetic corpora
# ---------------------------------------------------------------------------

@dataclass
class SynthSpec:
    """Fully determines a synthetic corpus bit-exactly from its seed."""

    seed: int = 0
    train_samples: int = 200
    test_normal: int = 40
    test_anomalous: int = 40
    feature_channels: int = 16
    height: int = 12
    width: int = 12
    kind: str = "3d"                 # "rgb" (features only) or "3d" (features + depth + mask)
    depth_factor: int = 2
    patch_size: int = 3
    feature_amplitude: float = 2.5
    depth_amplitude_cm: float = 1.2
    threshold_cm: float = 0.7
    smoothing_kernel: int = 5

    def __post_init__(self):
        if self.kind not in ("rgb", "3d"):
            raise ValueError(f"unknown corpus kind {self.kind!r}")
        if self.patch_size > min(self.height, self.width):
            raise ValueError("anomaly patch larger than the feature map")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _smooth(arr, kernel):
    """'same' correlation of a 2-D array with a small kernel (edge zero-pad)."""
    k = kernel.shape[0]
    pad = k // 2
    padded = np.pad(arr, pad)
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k))
    return np.einsum("ijab,ab->ij", windows, kernel)


class _SynthGenerator:
    def __init__(self, spec):
        self.spec = spec
        rng = np.random.default_rng([spec.seed, 0])
        kshape = (spec.smoothing_kernel, spec.smoothing_kernel)
        self.kernels = [
            (lambda m: m / m.sum())(rng.uniform(0.2, 1.0, kshape))
            for _ in range(spec.feature_channels)
        ]
        self.offsets = np.stack([
            _smooth(rng.normal(0.0, 1.0, (spec.height, spec.width)), self.kernels[c]) * 3.0
            for c in range(spec.feature_channels)
        ])
        self.depth_h = spec.height * spec.depth_factor
        self.depth_w = spec.width * spec.depth_factor

    def normal_features(self, rng):
        spec = self.spec
        feats = np.stack([
            _smooth(rng.normal(0.0, 1.0, (spec.height, spec.width)), self.kernels[c])
            for c in range(spec.feature_channels)
        ])
        return feats + self.offsets

    def raw_depth(self, rng):
        """Tilted background plane, a raised central object, holes and sensor noise."""
        h, w = self.depth_h, self.depth_w
        corners = 10.0 + rng.normal(0.0, 0.3, 4)
        u = np.linspace(0.0, 1.0, h)[:, None]
        v = np.linspace(0.0, 1.0, w)[None, :]
        plane = (1 - u) * ((1 - v) * corners[0] + v * corners[1]) + u * ((1 - v) * corners[2] + v * corners[3])
        ci, cj = (h - 1) / 2.0, (w - 1) / 2.0
        ry, rx = 0.62 * h / 2.0, 0.62 * w / 2.0
        ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        inside = ((ii - ci) / ry) ** 2 + ((jj - cj) / rx) ** 2 <= 1.0
        bump = np.where(inside, 2.0 + 0.2 * rng.normal(0.0, 1.0, (h, w)), 0.0)
        vals = plane + bump + 0.05 * rng.normal(0.0, 1.0, (h, w))
        validity = rng.uniform(size=(h, w)) >= 0.03
        validity[0, 0] = validity[0, -1] = validity[-1, 0] = validity[-1, -1] = True
        return DepthMap.from_arrays(vals, validity)

    def patch_position(self, rng):
        """Square patch placed in the central region so it lies in the foreground."""
        spec = self.spec
        k = spec.patch_size
        lo_r, hi_r = spec.height // 4, spec.height - spec.height // 4 - k
        lo_c, hi_c = spec.width // 4, spec.width - spec.width // 4 - k
        if hi_r < lo_r:
            lo_r, hi_r = 0, spec.height - k
        if hi_c < lo_c:
            lo_c, hi_c = 0, spec.width - k
        return int(rng.integers(lo_r, hi_r + 1)), int(rng.integers(lo_c, hi_c + 1))

    def build(self, rng, anomalous):
        spec = self.spec
        feats = self.normal_features(rng)
        raw = self.raw_depth(rng) if spec.kind == "3d" else None
        gt = None
        if anomalous:
            r, c = self.patch_position(rng)
            k = spec.patch_size
            target = rng.choice(["features", "depth", "both"]) if spec.kind == "3d" else "features"
            sign = 1.0 if rng.uniform() < 0.5 else -1.0
            if target in ("features", "both"):
                feats[:, r:r + k, c:c + k] += sign * spec.feature_amplitude
            if raw is not None and target in ("depth", "both"):
                f = spec.depth_factor
                vals = raw.values.data.copy()
                vals[r * f:(r + k) * f, c * f:(c + k) * f] += sign * spec.depth_amplitude_cm
                raw = DepthMap(Tensor(vals), raw.validity)
            gt = np.zeros((spec.height, spec.width), dtype=np.float32)
            gt[r:r + k, c:c + k] = 1.0

        features = Tensor(feats.astype(np.float32))
        depth = mask = None
        if raw is not None:
            filled = fill_missing_depth(raw)
            plane = background_plane(filled)
            fg = extract_foreground(filled, plane, spec.threshold_cm)
            normalized = normalize_depth(filled, fg)
            depth = depth_to_model_input(normalized, self.depth_h, spec.depth_factor)
            mask = downsample_mask(fg, spec.height, spec.width)
        return assemble_sample(
            features, depth=depth, mask=mask,
            label="anomalous" if anomalous else "normal",
            gt_mask=None if gt is None else Tensor(gt),
            raw_depth=raw,
        )


def synth_corpus(spec):
    """Deterministically generate (train, test) sample lists from a SynthSpec."""
    gen = _SynthGenerator(spec)
    rng_train = np.random.default_rng([spec.seed, 1])
    rng_test = np.random.default_rng([spec.seed, 2])
    train = [gen.build(rng_train, False) for _ in range(spec.train_samples)]
    test = [gen.build(rng_test, False) for _ in range(spec.test_normal)]
    test += [gen.build(rng_test, True) for _ in range(spec.test_anomalous)]
    return train, test


# ---------------------------------------------------------------------------
# tensor file format (magic "ASTT")
# ---------------------------------------------------------------------------

_MAGIC = b"ASTT"
_VERSION = 1
_DTYPE_F32 = 1


def tensor_to_bytes(arr):
    arr = np.ascontiguousarray(np.asarray(arr, dtype=np.float32))
    header = _MAGIC + struct.pack("<I", _VERSION) + struct.pack("BB", _DTYPE_F32, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.astype("<f4").tobytes()


def tensor_from_bytes(buf, base_offset=0):
    """Parse one serialized tensor; raises FormatError with the failing byte offset."""
    def fail(msg, off):
        raise FormatError(f"{msg} at byte offset {base_offset + off}")

    if len(buf) < 10:
        fail("truncated header", len(buf))
    if buf[0:4] != _MAGIC:
        fail(f"bad magic {buf[0:4]!r}", 0)
    version = struct.unpack_from("<I", buf, 4)[0]
    if version != _VERSION:
        fail(f"unsupported version {version}", 4)
    dtype_code, ndims = struct.unpack_from("BB", buf, 8)
    if dtype_code != _DTYPE_F32:
        fail(f"unsupported dtype code {dtype_code}", 8)
    if ndims > 8:
        fail(f"implausible ndims {ndims}", 9)
    need = 10 + 4 * ndims
    if len(buf) < need:
        fail("truncated extents", len(buf))
    shape = struct.unpack_from(f"<{ndims}I", buf, 10)
    if any(e == 0 for e in shape):
        fail(f"zero extent in shape {shape}", 10)
    count = int(np.prod(shape, dtype=np.int64)) if ndims else 1
    end = need + 4 * count
    if len(buf) < end:
        fail(f"truncated payload (need {end} bytes, have {len(buf)})", len(buf))
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=need)
    return data.astype(np.float32).reshape(shape), end


def _atomic_write(path, payload):
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def save_tensor(path, t):
    """Write a tensor (or array) to an ASTT file atomically."""
    arr = t.data if isinstance(t, Tensor) else t
    _atomic_write(path, tensor_to_bytes(arr))


def load_tensor(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise FormatError(f"trailing garbage at byte offset {end}")
    return Tensor(arr)


# ---------------------------------------------------------------------------
# corpus manifests
# ---------------------------------------------------------------------------

def save_corpus(out_dir, samples, meta=None):
    """Write samples plus a manifest.json into out_dir.

    Depth is stored raw (values stacked with validity) and re-preprocessed at
    load time, so the manifest needs only the preprocessing parameters in its
    meta block.
    """
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        stem = f"sample_{i:05d}"
        feat_name = f"{stem}_features.astt"
        save_tensor(os.path.join(out_dir, feat_name), s.features)
        entry = {"features": feat_name, "depth": None, "label": s.label, "gt_mask": None}
        if s.raw_depth is not None:
            depth_name = f"{stem}_depth.astt"
            stacked = np.stack([s.raw_depth.values.data, s.raw_depth.validity.data])
            save_tensor(os.path.join(out_dir, depth_name), stacked)
            entry["depth"] = depth_name
        if s.gt_mask is not None:
            gt_name = f"{stem}_gt.astt"
            save_tensor(os.path.join(out_dir, gt_name), s.gt_mask)
            entry["gt_mask"] = gt_name
        entries.append(entry)
    manifest = {"samples": entries, "meta": dict(meta or {})}
    payload = json.dumps(manifest, indent=2, sort_keys=True).encode("utf-8")
    _atomic_write(os.path.join(out_dir, "manifest.json"), payload)


def load_corpus(manifest_path):
    """Load samples from a manifest, re-running depth preprocessing."""
    if os.path.isdir(manifest_path):
        manifest_path = os.path.join(manifest_path, "manifest.json")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    base = os.path.dirname(os.path.abspath(manifest_path))
    meta = doc.get("meta", {})
    threshold = float(meta.get("threshold_cm", 0.7))
    factor = int(meta.get("depth_factor", 8))
    target = int(meta.get("depth_resize", 192))

    samples = []
    for entry in doc["samples"]:
        features = load_tensor(os.path.join(base, entry["features"]))
        h, w = features.shape[1:]
        depth = mask = raw = None
        if entry.get("depth"):
            stacked = load_tensor(os.path.join(base, entry["depth"])).data
            if stacked.ndim != 3 or stacked.shape[0] != 2:
                raise FormatError(f"depth file {entry['depth']} must hold [2,H,W] values+validity")
            raw = DepthMap.from_arrays(stacked[0], stacked[1])
            filled = fill_missing_depth(raw)
            plane = background_plane(filled)
            fg = extract_foreground(filled, plane, threshold)
            normalized = normalize_depth(filled, fg)
            depth = depth_to_model_input(normalized, target, factor)
            mask = downsample_mask(fg, h, w)
        gt = load_tensor(os.path.join(base, entry["gt_mask"])) if entry.get("gt_mask") else None
        samples.append(assemble_sample(
            features, depth=depth, mask=mask, label=entry.get("label", "normal"),
            gt_mask=gt, raw_depth=raw))
    return samples
