"""Volumetric scans: ingestion, normalization, smoothing, model input.

A ``Volume`` stores its scalar field as a (Z, Y, X) float32 array, x
varying fastest, which is also the payload order of the native file
format. ``dims`` reports (X, Y, Z) to match how scan dimensions are
conventionally quoted. Volumes are treated as immutable: every operation
returns a new instance.

Native format layout, little-endian:
  magic "NVOL" | u32 x,y,z | f32 voxel mm per axis | u8 tissue
  | u8 smoothed | u8 label | float32 payload (x fastest)
Tissue codes 0=whole 1=gm 2=wm; label codes 0=unlabeled 1=pd 2=hc.
"""

import gzip
import math
import struct
from dataclasses import dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError, FormatError
from .tensor import Tensor

MAGIC = b"NVOL"
TISSUES = ("whole", "gm", "wm")
LABELS = ("unlabeled", "pd", "hc")

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))


@dataclass(frozen=True)
class Volume:
    values: np.ndarray
    voxel_mm: tuple = (1.5, 1.5, 1.5)
    tissue: str = "whole"
    smoothed: bool = False
    label: str = "unlabeled"

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float32)
        if arr.ndim != 3:
            raise DataError(f"volume needs a 3-d field, got shape {arr.shape}")
        object.__setattr__(self, "values", arr)
        vm = tuple(float(s) for s in self.voxel_mm)
        if len(vm) != 3 or any(s <= 0 for s in vm):
            raise DataError(f"voxel_mm must be 3 positive scalars, got {self.voxel_mm}")
        object.__setattr__(self, "voxel_mm", vm)
        if self.tissue not in TISSUES:
            raise DataError(f"tissue must be one of {TISSUES}, got '{self.tissue}'")
        if self.label not in LABELS:
            raise DataError(f"label must be one of {LABELS}, got '{self.label}'")

    @property
    def dims(self):
        z, y, x = self.values.shape
        return (x, y, z)


def normalize_intensity(v: Volume) -> Volume:
    """Affine map of [min, max] onto [0, 1]; a constant field becomes zeros."""
    vals = v.values
    bad = ~np.isfinite(vals)
    if bad.any():
        z, y, x = np.argwhere(bad)[0]
        raise DataError(
            f"non-finite value {vals[z, y, x]} at voxel (x={x}, y={y}, z={z})"
        )
    lo, hi = float(vals.min()), float(vals.max())
    if hi == lo:
        out = np.zeros_like(vals)
    else:
        out = (vals - lo) / (hi - lo)
    return replace(v, values=out)


def clip_artifacts(v: Volume) -> Volume:
    """Clamp to [0, 1]; scanner artifacts can overshoot past 1."""
    return replace(v, values=np.clip(v.values, 0.0, 1.0))


def fwhm_to_sigma(fwhm_mm, voxel_mm):
    """Width of the equivalent Gaussian in voxel units."""
    if fwhm_mm < 0:
        raise ConfigError(f"fwhm must be >= 0, got {fwhm_mm}")
    if voxel_mm <= 0:
        raise ConfigError(f"voxel size must be > 0, got {voxel_mm}")
    return fwhm_mm / FWHM_PER_SIGMA / voxel_mm


def gaussian_taps(sigma):
    """Symmetric 1-d kernel truncated at radius ceil(4 sigma), sum 1."""
    if sigma == 0:
        return np.ones(1, dtype=np.float64)
    radius = math.ceil(4.0 * sigma)
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    taps = np.exp(-0.5 * (offsets / sigma) ** 2)
    return taps / taps.sum()


@dataclass(frozen=True)
class SmoothingKernel:
    fwhm_mm: float
    sigma_voxels: tuple
    radius: tuple
    weights: tuple


def build_smoothing_kernel(fwhm_mm, voxel_mm) -> SmoothingKernel:
    """Per-axis separable kernel; axis order (x, y, z) like voxel_mm."""
    sigmas = tuple(fwhm_to_sigma(fwhm_mm, s) for s in voxel_mm)
    weights = tuple(gaussian_taps(s) for s in sigmas)
    return SmoothingKernel(
        fwhm_mm=float(fwhm_mm),
        sigma_voxels=sigmas,
        radius=tuple(len(w) // 2 for w in weights),
        weights=weights,
    )


def _smooth_axis(data, taps, axis):
    """1-d correlation along one axis, renormalized over in-bounds taps."""
    radius = len(taps) // 2
    if radius == 0:
        return data
    moved = np.moveaxis(data, axis, -1)
    length = moved.shape[-1]
    pad = [(0, 0)] * (moved.ndim - 1) + [(radius, radius)]
    padded = np.pad(moved, pad)
    out = sliding_window_view(padded, len(taps), axis=-1) @ taps
    # positions near the border see only part of the kernel; dividing by the
    # in-bounds tap mass keeps constants constant instead of darkening edges
    norm = sliding_window_view(np.pad(np.ones(length), radius), len(taps)) @ taps
    return np.moveaxis(out / norm, -1, axis)


def gaussian_smooth(v: Volume, fwhm_mm) -> Volume:
    """Separable truncated-Gaussian smoothing; fwhm 0 is the identity."""
    kernel = build_smoothing_kernel(fwhm_mm, v.voxel_mm)
    out = v.values.astype(np.float64)
    # values are (Z, Y, X): kernel axis 0 (x) is array axis 2, and so on
    for kernel_axis, array_axis in ((0, 2), (1, 1), (2, 0)):
        out = _smooth_axis(out, kernel.weights[kernel_axis], array_axis)
    return replace(v, values=out.astype(np.float32), smoothed=True)


def slice_to_input(v: Volume, k: int) -> Tensor:
    """k evenly spaced axial slices stacked as channels, shape (1, k, Y, X)."""
    z = v.values.shape[0]
    if k < 1:
        raise ConfigError(f"slice count must be >= 1, got {k}")
    if k > z:
        raise ConfigError(f"cannot take {k} slices from {z} available")
    if k == 1:
        indices = [0]
    else:
        step = (z - 1) / (k - 1)
        indices = [int(math.floor(i * step + 0.5)) for i in range(k)]
    stack = v.values[indices].astype(np.float32)
    return Tensor(stack[np.newaxis])


def volume_bytes(v: Volume) -> bytes:
    x, y, z = v.dims
    header = MAGIC + struct.pack(
        "<3I3f3B",
        x, y, z, *v.voxel_mm,
        TISSUES.index(v.tissue), int(v.smoothed), LABELS.index(v.label),
    )
    return header + v.values.astype("<f4").tobytes()


def volume_from_bytes(blob: bytes) -> Volume:
    header_size = 4 + 12 + 12 + 3
    if len(blob) < header_size:
        raise FormatError(
            f"truncated volume header: need {header_size} bytes, got {len(blob)}"
        )
    if blob[:4] != MAGIC:
        raise FormatError(f"bad volume magic {blob[:4]!r}, expected {MAGIC!r}")
    x, y, z, sx, sy, sz, tissue, smoothed, label = struct.unpack(
        "<3I3f3B", blob[4:header_size]
    )
    if min(x, y, z) < 1:
        raise FormatError(f"non-positive dims ({x}, {y}, {z})")
    if tissue >= len(TISSUES) or label >= len(LABELS):
        raise FormatError(f"unknown tissue/label codes ({tissue}, {label})")
    expected = header_size + 4 * x * y * z
    if len(blob) < expected:
        raise FormatError(
            f"truncated volume payload: dims ({x}, {y}, {z}) need "
            f"{expected} bytes, file has {len(blob)}"
        )
    if len(blob) > expected:
        raise FormatError(f"{len(blob) - expected} trailing bytes after payload")
    values = np.frombuffer(blob[header_size:], dtype="<f4").reshape(z, y, x)
    return Volume(
        values=values.copy(), voxel_mm=(sx, sy, sz), tissue=TISSUES[tissue],
        smoothed=bool(smoothed), label=LABELS[label],
    )


def write_volume(path, v: Volume):
    with open(path, "wb") as f:
        f.write(volume_bytes(v))


def read_volume(path) -> Volume:
    """Read a native volume or a single-frame float32 neuroimaging file."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] == MAGIC:
        return volume_from_bytes(blob)
    if blob[:2] == b"\x1f\x8b":
        blob = gzip.decompress(blob)
    return _parse_nifti(blob)


def _parse_nifti(blob: bytes) -> Volume:
    """Minimal single-frame float32 reader for the standard header layout."""
    if len(blob) < 348:
        raise FormatError(f"truncated header: need 348 bytes, got {len(blob)}")
    order = None
    for candidate in ("<", ">"):
        if struct.unpack(candidate + "i", blob[:4])[0] == 348:
            order = candidate
            break
    if order is None:
        raise FormatError("unrecognized volume file: no known magic")
    if blob[344:347] not in (b"n+1", b"ni1"):
        raise FormatError(f"bad header magic field {blob[344:348]!r}")
    dim = struct.unpack(order + "8h", blob[40:56])
    if dim[0] < 3:
        raise FormatError(f"need a 3-d image, header says {dim[0]}-d")
    if any(d > 1 for d in dim[4 : dim[0] + 1]):
        raise FormatError(f"multi-frame images unsupported, dim={dim}")
    x, y, z = dim[1], dim[2], dim[3]
    if min(x, y, z) < 1:
        raise FormatError(f"non-positive dims ({x}, {y}, {z})")
    (datatype,) = struct.unpack(order + "h", blob[70:72])
    if datatype != 16:
        raise FormatError(f"unsupported datatype code {datatype}, only float32 (16)")
    pixdim = struct.unpack(order + "8f", blob[76:108])
    voxel = tuple(abs(s) if s else 1.0 for s in pixdim[1:4])
    (vox_offset,) = struct.unpack(order + "f", blob[108:112])
    offset = int(vox_offset)
    if offset < 348:
        raise FormatError(f"payload offset {offset} inside the header")
    expected = offset + 4 * x * y * z
    if len(blob) < expected:
        raise FormatError(
            f"truncated payload: dims ({x}, {y}, {z}) need {expected} bytes, "
            f"file has {len(blob)}"
        )
    values = np.frombuffer(blob[offset:expected], dtype=order + "f4")
    return Volume(values=values.reshape(z, y, x).astype(np.float32),
                  voxel_mm=voxel)
