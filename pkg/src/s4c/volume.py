"""Volume types, boxes, cropping, and the ``.s4cvol`` file format.

Coordinates are ``(x, y, z)`` and dims are ``(W, H, L)``.  The backing numpy
array is stored as ``data[z, y, x]`` so that x is the fastest-varying index in
memory, which is also the on-disk voxel order.
"""

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"S4CVOLUME\x00\x00\x00"
VERSION = 1
_HEADER = MAGIC + struct.pack("<I", VERSION)

_DTYPES = {"i16": np.dtype("<i2"), "u8": np.dtype("u1"), "f32": np.dtype("<f4")}


class VolumeFormatError(ValueError):
    """Raised for unreadable or inconsistent volume files."""


class _Volume:
    dtype = None
    channels = 1

    def __init__(self, data):
        arr = np.asarray(data)
        # copy unless already an immutable contiguous array of the right dtype,
        # so freezing it below never touches the caller's buffer
        if arr.flags.writeable or arr.dtype != self.dtype or not arr.flags.c_contiguous:
            arr = np.array(arr, dtype=self.dtype, order="C")
        data = arr
        want = 4 if self.channels > 1 else 3
        if data.ndim != want or min(data.shape[:3]) < 1:
            raise ValueError(f"{type(self).__name__} needs a {want}-d array with positive dims, got {data.shape}")
        if self.channels > 1 and data.shape[3] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {data.shape[3]}")
        data.setflags(write=False)
        self.data = data
        self._check()

    def _check(self):
        pass

    @property
    def dims(self):
        """Voxel counts ``(W, H, L)``."""
        L, H, W = self.data.shape[:3]
        return (W, H, L)

    def __eq__(self, other):
        return (
            type(self) is type(other)
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    def __repr__(self):
        return f"{type(self).__name__}(dims={self.dims})"


class CtVolume(_Volume):
    """Hounsfield-unit intensities, signed 16-bit."""

    dtype = np.int16


class LabelVolume(_Volume):
    """Per-voxel class: 0 background, 1 pancreas, 2 tumor."""

    dtype = np.uint8

    def _check(self):
        if self.data.size and self.data.max() > 2:
            raise ValueError("label values must be in {0, 1, 2}")


class ProbVolume(_Volume):
    """Per-voxel 3-class probability vectors, shape ``(L, H, W, 3)``."""

    dtype = np.float32
    channels = 3

    def _check(self):
        d = self.data
        if not np.all(np.isfinite(d)) or d.min() < 0 or d.max() > 1:
            raise ValueError("probabilities must lie in [0, 1]")
        if np.abs(d.sum(axis=-1) - 1).max() > 1e-5:
            raise ValueError("per-voxel probabilities must sum to 1")


_KINDS = {"i16": CtVolume, "u8": LabelVolume, "f32": ProbVolume}
_TAGS = {CtVolume: "i16", LabelVolume: "u8", ProbVolume: "f32"}


@dataclass(frozen=True)
class Box3:
    """Axis-aligned box with inclusive ``lo``/``hi`` corners in ``(x, y, z)``."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(int(v) for v in self.lo))
        object.__setattr__(self, "hi", tuple(int(v) for v in self.hi))
        if any(a > b for a, b in zip(self.lo, self.hi)):
            raise ValueError(f"box lo {self.lo} exceeds hi {self.hi}")

    @property
    def shape(self):
        return tuple(b - a + 1 for a, b in zip(self.lo, self.hi))

    def slices(self):
        """numpy index for a ``[z, y, x]`` array."""
        return tuple(slice(self.lo[ax], self.hi[ax] + 1) for ax in (2, 1, 0))

    def contains(self, x, y, z):
        return all(a <= v <= b for a, v, b in zip(self.lo, (x, y, z), self.hi))


def bounding_box(mask, classes):
    """Tightest box around voxels whose class is in ``classes``; ``None`` if there are none."""
    classes = set(classes)
    if not classes or not classes <= {0, 1, 2}:
        raise ValueError(f"classes must be a non-empty subset of {{0, 1, 2}}, got {classes}")
    data = mask.data if isinstance(mask, LabelVolume) else np.asarray(mask)
    hit = np.isin(data, sorted(classes))
    if not hit.any():
        return None
    lo, hi = [], []
    for ax in (2, 1, 0):  # x, y, z
        other = tuple(a for a in range(3) if a != ax)
        idx = np.flatnonzero(hit.any(axis=other))
        lo.append(idx[0])
        hi.append(idx[-1])
    return Box3(tuple(lo), tuple(hi))


def pad_box(box, margin, dims):
    """Grow ``box`` by ``margin`` voxels on every side, clamped to ``[0, dim-1]``."""
    lo = tuple(max(a - margin, 0) for a in box.lo)
    hi = tuple(min(b + margin, d - 1) for b, d in zip(box.hi, dims))
    return Box3(lo, hi)


def crop(volume, box):
    if any(b >= d for b, d in zip(box.hi, volume.dims)) or min(box.lo) < 0:
        raise ValueError(f"box {box} exceeds volume dims {volume.dims}")
    return type(volume)(volume.data[box.slices()].copy())


def full_box(dims):
    return Box3((0, 0, 0), tuple(d - 1 for d in dims))


def save_volume(volume, path):
    tag = _TAGS[type(volume)]
    header = json.dumps({"dims": list(volume.dims), "dtype": tag, "channels": volume.channels}).encode()
    payload = volume.data.astype(_DTYPES[tag], copy=False).tobytes()
    path = Path(path)
    with open(path, "wb") as f:
        f.write(_HEADER)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(payload)
    return path


def load_volume(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 20 or raw[:16] != _HEADER:
        raise VolumeFormatError(f"{path}: not an s4cvol file (bad magic/version)")
    (n,) = struct.unpack_from("<I", raw, 16)
    try:
        header = json.loads(raw[20:20 + n].decode())
        dims = [int(v) for v in header["dims"]]
        tag = header["dtype"]
        channels = int(header["channels"])
        kind = _KINDS[tag]
    except (ValueError, KeyError, TypeError) as exc:
        raise VolumeFormatError(f"{path}: malformed header") from exc
    if len(dims) != 3 or min(dims) < 1 or channels != kind.channels:
        raise VolumeFormatError(f"{path}: header dims/channels invalid: {header}")
    dt = _DTYPES[tag]
    body = raw[20 + n:]
    expected = dims[0] * dims[1] * dims[2] * channels
    if len(body) != expected * dt.itemsize:
        raise VolumeFormatError(
            f"{path}: payload holds {len(body) / dt.itemsize:g} elements, header declares {expected}"
        )
    shape = (dims[2], dims[1], dims[0]) + ((channels,) if channels > 1 else ())
    data = np.frombuffer(body, dtype=dt).reshape(shape)
    try:
        return kind(data)
    except ValueError as exc:
        raise VolumeFormatError(f"{path}: {exc}") from exc


def save_manifest(entries, path):
    """Write a case manifest: list of ``{"id", "image", "mask", "label"}`` records."""
    for e in entries:
        if set(e) != {"id", "image", "mask", "label"} or e["label"] not in (0, 1):
            raise ValueError(f"bad manifest entry: {e}")
    Path(path).write_text(json.dumps(entries, indent=1))
    return Path(path)


def load_manifest(path):
    path = Path(path)
    entries = json.loads(path.read_text())
    if not isinstance(entries, list):
        raise ValueError(f"{path}: manifest must be a JSON array")
    out = []
    for e in entries:
        if not {"id", "image", "mask", "label"} <= set(e) or e["label"] not in (0, 1):
            raise ValueError(f"{path}: bad manifest entry {e}")
        rec = dict(e)
        # relative paths resolve against the manifest's directory
        for key in ("image", "mask"):
            if rec[key] is not None and not Path(rec[key]).is_absolute():
                rec[key] = str(path.parent / rec[key])
        out.append(rec)
    return out
