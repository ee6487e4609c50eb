"""Coarse-to-fine sliding-window inference with probability fusion."""

import itertools
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .nn.layers import softmax
from .training import HU_WINDOW, normalize_hu
from .volume import Box3, LabelVolume, ProbVolume, bounding_box, pad_box

SCALES = (64, 32, 16)
DEFAULT_STRIDES = {64: 20, 32: 10, 16: 5}
ROI_MARGIN = 32


@dataclass
class WindowPlan:
    dims: tuple  # (W, H, L) of the scanned region
    size: int
    stride: int
    origins: list  # (x, y, z), x fastest

    def __len__(self):
        return len(self.origins)


def axis_origins(dim, size, stride):
    if size > dim:
        raise ValueError(f"window {size} does not fit in dimension {dim}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    out = list(range(0, dim - size + 1, stride))
    if out[-1] + size < dim:
        out.append(dim - size)
    return out


def enumerate_windows(dims, size, stride):
    """Regular grid of cubic windows whose union covers ``dims``; the last origin per axis is snapped to the edge."""
    xs, ys, zs = (axis_origins(d, size, stride) for d in dims)
    origins = [(x, y, z) for z, y, x in itertools.product(zs, ys, xs)]
    return WindowPlan(tuple(int(d) for d in dims), int(size), int(stride), origins)


@dataclass
class Accumulator:
    dims: tuple
    sums: np.ndarray = None  # [z, y, x, class]
    counts: np.ndarray = None

    def __post_init__(self):
        W, H, L = self.dims
        if self.sums is None:
            self.sums = np.zeros((L, H, W, 3), np.float64)
        if self.counts is None:
            self.counts = np.zeros((L, H, W), np.int32)

    def add(self, origin, prob):
        """Add one window's ``(s, s, s, 3)`` probabilities at ``origin`` = (x, y, z)."""
        x, y, z = origin
        s = prob.shape[0]
        sl = (slice(z, z + s), slice(y, y + s), slice(x, x + s))
        self.sums[sl] += prob
        self.counts[sl] += 1

    def merge(self, other):
        self.sums += other.sums
        self.counts += other.counts

    def result(self):
        if self.counts.min() < 1:
            raise ValueError("accumulator has uncovered voxels")
        return ProbVolume((self.sums / self.counts[..., None]).astype(np.float32))


def _window_probs(net, image, origins, size):
    batch = np.stack([image[z:z + size, y:y + size, x:x + size] for x, y, z in origins])[:, None]
    logits, _ = net.forward(batch, with_aux=False)
    return np.moveaxis(softmax(logits, axis=1), 1, -1)


def sliding_predict(net, image, plan, batch=4, workers=1, deterministic=True):
    """Eval-mode scan of a normalized ``[z, y, x]`` image; returns the averaged softmax field.

    With several workers and ``deterministic`` set, window batches are computed
    concurrently but accumulated in plan order, so the sums are bit-identical
    to a sequential run.  Otherwise each worker sums into a private buffer
    and the buffers are merged in worker order.
    """
    if net.config.input_size != plan.size:
        raise ValueError(f"network takes {net.config.input_size}^3 windows, plan uses {plan.size}^3")
    L, H, W = image.shape
    if (W, H, L) != plan.dims:
        raise ValueError(f"image dims {(W, H, L)} do not match plan dims {plan.dims}")
    net.eval()
    image = np.ascontiguousarray(image, np.float32)
    chunks = [plan.origins[i:i + batch] for i in range(0, len(plan), batch)]
    acc = Accumulator(plan.dims)
    if workers <= 1:
        for chunk in chunks:
            for o, p in zip(chunk, _window_probs(net, image, chunk, plan.size)):
                acc.add(o, p)
        return acc.result()
    if deterministic:
        with ThreadPoolExecutor(workers) as pool:
            for chunk, probs in zip(chunks, pool.map(lambda c: _window_probs(net, image, c, plan.size), chunks)):
                for o, p in zip(chunk, probs):
                    acc.add(o, p)
        return acc.result()

    def run(part):
        private = Accumulator(plan.dims)
        for chunk in part:
            for o, p in zip(chunk, _window_probs(net, image, chunk, plan.size)):
                private.add(o, p)
        return private

    with ThreadPoolExecutor(workers) as pool:
        for private in pool.map(run, [chunks[w::workers] for w in range(workers)]):
            acc.merge(private)
    return acc.result()


def testing_roi(coarse_labels, margin=ROI_MARGIN):
    """Padded box around the coarse pancreas-or-tumor prediction, or None when there is none."""
    box = bounding_box(coarse_labels, {1, 2})
    return None if box is None else pad_box(box, margin, coarse_labels.dims)


def fuse(prob64, prob32, prob16, roi, weights=(1.0, 1.0, 1.0)):
    """Weighted mean of the scale probabilities inside ``roi``; the coarse field elsewhere."""
    out = np.array(prob64.data, dtype=np.float32)
    if roi is None:
        return ProbVolume(out)
    sl = roi.slices()
    parts = [(prob64.data[sl], weights[0])]
    for p, w in ((prob32, weights[1]), (prob16, weights[2])):
        if p is None:
            continue
        if p.dims != roi.shape:
            raise ValueError(f"fine probability dims {p.dims} do not match ROI {roi.shape}")
        parts.append((p.data, w))
    total = sum(w for _, w in parts)
    if total <= 0:
        raise ValueError("fusion weights of the present scales sum to zero")
    mixed = sum(np.float64(w) * d.astype(np.float64) for d, w in parts if w > 0) / total
    out[sl] = mixed.astype(np.float32)
    return ProbVolume(out)


def argmax_labels(prob):
    # np.argmax returns the first maximum, i.e. the lowest class on ties
    return LabelVolume(np.argmax(prob.data, axis=-1).astype(np.uint8))


@dataclass
class CascadeConfig:
    strides: dict = field(default_factory=lambda: dict(DEFAULT_STRIDES))
    roi_margin: int = ROI_MARGIN
    fusion_weights: tuple = (1.0, 1.0, 1.0)
    hu_window: tuple = HU_WINDOW
    window_batch: dict = field(default_factory=lambda: {64: 1, 32: 4, 16: 16})
    workers: int = 1
    deterministic: bool = True

    def __post_init__(self):
        self.strides = {int(k): int(v) for k, v in self.strides.items()}
        self.window_batch = {int(k): int(v) for k, v in self.window_batch.items()}
        self.fusion_weights = tuple(float(w) for w in self.fusion_weights)
        if len(self.fusion_weights) != 3 or min(self.fusion_weights) < 0:
            raise ValueError("fusion_weights needs three non-negative entries")

    @classmethod
    def single_scale(cls, scale, **kw):
        """Configuration for a one-network run: the 64^3 net still locates the ROI."""
        weights = tuple(1.0 if s == scale else 0.0 for s in SCALES)
        return cls(fusion_weights=weights, **kw)


@dataclass
class CascadeOutput:
    labels: LabelVolume
    prob: ProbVolume
    roi: Box3 = None
    windows: dict = field(default_factory=dict)
    seconds: dict = field(default_factory=dict)

    def info(self):
        return {
            "roi": None if self.roi is None else [list(self.roi.lo), list(self.roi.hi)],
            "windows": {str(k): v for k, v in self.windows.items()},
            "seconds": {str(k): round(v, 4) for k, v in self.seconds.items()},
        }


def run_cascade(nets, volume, config=None):
    """Coarse scan, ROI, fine scans on the ROI crop, fusion and argmax.

    ``nets`` maps window size to network; the 64^3 net is always required.
    Scales with zero fusion weight are not scanned.
    """
    config = config or CascadeConfig()
    if 64 not in nets:
        raise ValueError("the coarse 64^3 network is required")
    if min(volume.dims) < 64:
        raise ValueError(f"volume dims {volume.dims} are smaller than the 64^3 coarse window")
    image = normalize_hu(volume.data, config.hu_window)
    out = CascadeOutput(None, None)

    def scan(size, img):
        t0 = time.perf_counter()
        L, H, W = img.shape
        plan = enumerate_windows((W, H, L), size, config.strides[size])
        prob = sliding_predict(nets[size], img, plan, config.window_batch.get(size, 1), config.workers, config.deterministic)
        out.windows[size] = len(plan)
        out.seconds[size] = time.perf_counter() - t0
        return prob

    prob64 = scan(64, image)
    roi = testing_roi(argmax_labels(prob64), config.roi_margin)
    fine = {}
    if roi is not None:
        crop = image[roi.slices()]
        for k, size in enumerate(SCALES[1:], start=1):
            if config.fusion_weights[k] > 0:
                if size not in nets:
                    raise ValueError(f"fusion weight set for the {size}^3 scale but no network given")
                fine[size] = scan(size, crop)
    prob = fuse(prob64, fine.get(32), fine.get(16), roi, config.fusion_weights)
    out.prob = prob
    out.labels = argmax_labels(prob)
    out.roi = roi
    return out

