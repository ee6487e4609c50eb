"""Connected-component outlier filtering and the tumor-voxel-count decision rule."""

import json
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from ._accel import USE_NUMBA, njit
from .volume import LabelVolume

DEFAULT_K = 50
DEFAULT_RATIO = 0.2
CONFIDENCE_WEIGHT = 0.5
CONFIDENCE_SATURATION = 1500


@dataclass
class ComponentSet:
    ids: np.ndarray  # int32 [z, y, x]; -1 on background, dense ids from 0 in scan order
    sizes: np.ndarray  # voxels per component id

    @property
    def count(self):
        return len(self.sizes)

    @property
    def max_size(self):
        return int(self.sizes.max()) if len(self.sizes) else 0


@njit(cache=True, nogil=True)
def _find(parent, i):
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


@njit(cache=True, nogil=True)
def _union(parent, a, b):
    ra = _find(parent, a)
    rb = _find(parent, b)
    # the smaller linear index becomes the root
    if ra < rb:
        parent[rb] = ra
    elif rb < ra:
        parent[ra] = rb


@njit(cache=True, nogil=True)
def _label_nb(fg, L, H, W):
    n = L * H * W
    plane = H * W
    parent = np.arange(n)
    for i in range(n):
        if not fg[i]:
            continue
        x = i % W
        y = (i // W) % H
        if x > 0 and fg[i - 1]:
            _union(parent, i, i - 1)
        if y > 0 and fg[i - W]:
            _union(parent, i, i - W)
        if i >= plane and fg[i - plane]:
            _union(parent, i, i - plane)
    ids = np.full(n, -1, np.int32)
    root_id = np.full(n, -1, np.int32)
    nxt = 0
    for i in range(n):
        if fg[i]:
            r = _find(parent, i)
            if root_id[r] < 0:
                root_id[r] = nxt
                nxt += 1
            ids[i] = root_id[r]
    return ids, nxt


def _label_np(fg):
    """Min-label propagation with pointer jumping; ids come out ordered by first voxel."""
    shape = fg.shape
    n = fg.size
    lab = np.where(fg, np.arange(n).reshape(shape), n)
    while True:
        prev = lab
        cur = lab.copy()
        for ax in range(3):
            for step in (1, -1):
                shifted = np.full_like(cur, n)
                src = [slice(None)] * 3
                dst = [slice(None)] * 3
                if step == 1:
                    src[ax], dst[ax] = slice(None, -1), slice(1, None)
                else:
                    src[ax], dst[ax] = slice(1, None), slice(None, -1)
                shifted[tuple(dst)] = cur[tuple(src)]
                np.minimum(cur, shifted, out=cur, where=fg)
        flat = np.append(cur.ravel(), n)
        while True:
            jumped = flat[flat]
            if np.array_equal(jumped, flat):
                break
            flat = jumped
        lab = flat[:-1].reshape(shape)
        if np.array_equal(lab, prev):
            break
    ids = np.full(shape, -1, np.int32)
    roots, inverse = np.unique(lab[fg], return_inverse=True)
    ids[fg] = inverse.astype(np.int32)
    return ids, len(roots)


def connected_components(labels):
    """6-connected components of the pancreas-or-tumor foreground."""
    data = labels.data if isinstance(labels, LabelVolume) else np.asarray(labels)
    fg = data > 0
    if USE_NUMBA:
        L, H, W = fg.shape
        ids, count = _label_nb(np.ascontiguousarray(fg).ravel(), L, H, W)
        ids = ids.reshape(fg.shape)
    else:
        ids, count = _label_np(fg)
    sizes = np.bincount(ids[fg], minlength=count).astype(np.int64)
    return ComponentSet(ids, sizes)


def filter_components(labels, components=None, ratio=DEFAULT_RATIO):
    """Zero every component not strictly larger than ``ratio`` times the largest one."""
    if components is None:
        components = connected_components(labels)
    if components.count == 0:
        return LabelVolume(labels.data)
    # exact decimal comparison, so 20 voxels against 0.2 * 100 is not "larger"
    limit = Fraction(repr(float(ratio))) * components.max_size
    keep = np.array([Fraction(int(s)) > limit for s in components.sizes] + [False])
    out = np.array(labels.data)
    out[~keep[components.ids]] = 0  # id -1 indexes the trailing False
    return LabelVolume(out)


def tumor_voxel_count(labels):
    return int(np.count_nonzero(labels.data == 2))


def classify(filtered, K=DEFAULT_K):
    return int(tumor_voxel_count(filtered) >= K)


def confidence_score(filtered, prob, weight=CONFIDENCE_WEIGHT, saturation=CONFIDENCE_SATURATION):
    """``weight * min(1, n_t / saturation) + (1 - weight) * mean tumor probability over predicted tumor``."""
    if filtered.dims != prob.dims:
        raise ValueError(f"mask dims {filtered.dims} and probability dims {prob.dims} differ")
    tumor = filtered.data == 2
    n_t = int(np.count_nonzero(tumor))
    if n_t == 0:
        return 0.0
    p_bar = float(prob.data[..., 2][tumor].astype(np.float64).mean())
    score = weight * min(1.0, n_t / saturation) + (1.0 - weight) * p_bar
    return float(min(max(score, 0.0), 1.0))


@dataclass
class ScreeningResult:
    case_id: str
    tumor_voxel_count: int
    confidence: float
    predicted_label: int
    dsc_tumor: float = None
    dsc_pancreas: float = None

    def __post_init__(self):
        if self.tumor_voxel_count < 0 or not 0.0 <= self.confidence <= 1.0 or self.predicted_label not in (0, 1):
            raise ValueError(f"inconsistent screening result {self}")

    def with_K(self, K):
        """Re-apply the count rule at a different ``K`` without touching anything else."""
        d = asdict(self)
        d["predicted_label"] = int(self.tumor_voxel_count >= K)
        return ScreeningResult(**d)

    def to_json(self):
        return json.dumps(asdict(self))

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def save_results(results, path):
    Path(path).write_text(json.dumps([asdict(r) for r in results], indent=1))
    return Path(path)


def load_results(path):
    return [ScreeningResult.from_dict(d) for d in json.loads(Path(path).read_text())]
