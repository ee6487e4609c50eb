"""Synthetic abdominal phantoms: a warped-ellipsoid pancreas with an optional tumor blob."""

import heapq
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume import CtVolume, LabelVolume, save_manifest, save_volume

MARGIN = 8
_CUBE = np.ones((3, 3, 3), bool)
_FACES = ndimage.generate_binary_structure(3, 1)


class InfeasibleTumor(ValueError):
    """The requested tumor size cannot be placed strictly inside the pancreas."""


@dataclass
class PhantomSpec:
    dims: tuple = (96, 96, 96)
    # (lo, hi) semi-axis ranges in voxels along x, y, z
    pancreas_radii_range: tuple = ((20.0, 28.0), (11.0, 15.0), (10.0, 13.0))
    tumor_volume_range: tuple = (100, 4000)
    background_hu: tuple = (30.0, 20.0)
    pancreas_hu: tuple = (100.0, 15.0)
    tumor_hu: tuple = (75.0, 15.0)
    warp_amplitude: float = 0.12
    abnormal: bool = False

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.pancreas_radii_range = tuple(tuple(float(v) for v in r) for r in self.pancreas_radii_range)
        self.tumor_volume_range = tuple(int(v) for v in self.tumor_volume_range)
        self.validate()

    def max_extent(self):
        """Conservative half-extent per axis after rotation about z and warping."""
        (_, rx), (_, ry), (_, rz) = self.pancreas_radii_range
        grow = 1 + 3 * self.warp_amplitude
        rxy = float(np.hypot(rx, ry * grow))
        return [rxy, rxy, rz * grow]

    def validate(self):
        lo, hi = self.tumor_volume_range
        if lo < 1 or hi < lo:
            raise ValueError(f"tumor_volume_range must satisfy 1 <= min <= max, got {self.tumor_volume_range}")
        for r in self.pancreas_radii_range:
            if not 0 < r[0] <= r[1]:
                raise ValueError(f"bad radius range {r}")
        for ext, d in zip(self.max_extent(), self.dims):
            if 2 * (ext + MARGIN) > d:
                raise ValueError(f"pancreas extent {ext:.1f} does not fit in dim {d} with {MARGIN}-voxel margin")
        for _, sd in (self.background_hu, self.pancreas_hu, self.tumor_hu):
            if sd < 0:
                raise ValueError("intensity standard deviations must be >= 0")

    def with_(self, **kw):
        d = asdict(self)
        d.update(kw)
        return PhantomSpec(**d)


def _pancreas_mask(rng, spec):
    W, H, L = spec.dims
    radii = np.array([rng.uniform(lo, hi) for lo, hi in spec.pancreas_radii_range])
    ext = np.array(spec.max_extent())
    slack = np.array(spec.dims) / 2 - ext - MARGIN
    center = np.array(spec.dims) / 2 + rng.uniform(-1, 1, 3) * np.maximum(slack, 0)
    theta = rng.uniform(-np.pi / 6, np.pi / 6)

    z, y, x = np.meshgrid(np.arange(L), np.arange(H), np.arange(W), indexing="ij")
    dx, dy, dz = x - center[0], y - center[1], z - center[2]
    # rotate about z, then bend with low-frequency sinusoids
    u = np.cos(theta) * dx + np.sin(theta) * dy
    v = -np.sin(theta) * dx + np.cos(theta) * dy
    w = dz.astype(float)
    amp = spec.warp_amplitude
    ph = rng.uniform(0, 2 * np.pi, 3)
    v = v + amp * radii[1] * 2 * np.sin(np.pi * u / radii[0] + ph[0])
    w = w + amp * radii[2] * 2 * np.sin(np.pi * u / radii[0] + ph[1])
    scale = 1 + amp * np.sin(2 * np.pi * u / radii[0] + ph[2])
    r2 = (u / radii[0]) ** 2 + (v / (radii[1] * scale)) ** 2 + (w / (radii[2] * scale)) ** 2
    mask = r2 <= 1.0
    lab, n = ndimage.label(mask, structure=_FACES)
    if n > 1:
        sizes = np.bincount(lab.ravel())
        sizes[0] = 0
        mask = lab == sizes.argmax()
    return mask


def _grow_tumor(rng, pancreas, target):
    """Region-grow a 6-connected blob of exactly ``target`` voxels inside the pancreas interior."""
    allowed = ndimage.binary_erosion(pancreas, structure=_CUBE)
    if allowed.sum() < target:
        raise InfeasibleTumor(f"pancreas interior holds {allowed.sum()} voxels, tumor needs {target}")
    depth = ndimage.distance_transform_edt(pancreas)
    cand = np.flatnonzero(allowed)
    wts = depth.ravel()[cand] ** 4
    seed = np.unravel_index(cand[rng.choice(len(cand), p=wts / wts.sum())], pancreas.shape)

    # key = jittered distance from the seed, so the blob is compact but irregular
    jitter = rng.uniform(0.6, 1.4, size=pancreas.shape)
    tumor = np.zeros_like(pancreas)
    seen = np.zeros_like(pancreas)
    heap = [(0.0, seed)]
    seen[seed] = True
    count = 0
    shape = pancreas.shape
    while heap and count < target:
        _, p = heapq.heappop(heap)
        tumor[p] = True
        count += 1
        for ax in range(3):
            for step in (-1, 1):
                q = list(p)
                q[ax] += step
                if not 0 <= q[ax] < shape[ax]:
                    continue
                q = tuple(q)
                if allowed[q] and not seen[q]:
                    seen[q] = True
                    dist = np.sqrt(sum((a - b) ** 2 for a, b in zip(q, seed)))
                    heapq.heappush(heap, (dist * jitter[q], q))
    if count < target:
        raise InfeasibleTumor(f"connected interior around the seed holds {count} voxels, tumor needs {target}")
    return tumor


def sample_tumor_size(rng, size_range):
    lo, hi = size_range
    return int(round(np.exp(rng.uniform(np.log(lo), np.log(hi))))) if hi > lo else lo


def generate_case(seed, spec):
    """One phantom: ``(CtVolume, LabelVolume, label)``; bit-identical for identical ``(seed, spec)``."""
    spec.validate()
    rng = np.random.default_rng(seed)
    pancreas = _pancreas_mask(rng, spec)
    labels = pancreas.astype(np.uint8)
    if spec.abnormal:
        target = sample_tumor_size(rng, spec.tumor_volume_range)
        tumor = _grow_tumor(rng, pancreas, target)
        labels[tumor] = 2

    means = np.array([spec.background_hu[0], spec.pancreas_hu[0], spec.tumor_hu[0]])
    sds = np.array([spec.background_hu[1], spec.pancreas_hu[1], spec.tumor_hu[1]])
    noise = rng.standard_normal(labels.shape)
    hu = means[labels] + sds[labels] * noise
    hu = np.clip(np.rint(hu), -32768, 32767).astype(np.int16)
    return CtVolume(hu), LabelVolume(labels), int(spec.abnormal)


def case_seed(master_seed, index):
    return int(np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1)[0])


def generate_dataset(seed, n_normal, n_abnormal, spec, out_dir):
    """Write ``n_normal + n_abnormal`` cases plus ``manifest.json``; returns the manifest entries."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    plan = [("n", i, False) for i in range(n_normal)] + [("a", i, True) for i in range(n_abnormal)]
    for index, (prefix, i, abnormal) in enumerate(plan):
        case_id = f"{prefix}{i:03d}"
        ct, mask, label = generate_case(case_seed(seed, index), spec.with_(abnormal=abnormal))
        save_volume(ct, out / "images" / f"{case_id}.s4cvol")
        save_volume(mask, out / "masks" / f"{case_id}.s4cvol")
        entries.append({"id": case_id, "image": f"images/{case_id}.s4cvol", "mask": f"masks/{case_id}.s4cvol", "label": label})
    save_manifest(entries, out / "manifest.json")
    return entries
