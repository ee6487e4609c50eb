"""Balanced patch sampling, augmentation, deep-supervision loss and the SGD loop."""

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn.layers import softmax_cross_entropy
from .nn.network import DEFAULT_LOSS_WEIGHTS, NetworkConfig, build_network
from .volume import bounding_box, load_volume, pad_box

log = logging.getLogger(__name__)

ROI_MARGIN = 32
HU_WINDOW = (-125.0, 275.0)
CATEGORIES = ("background", "pancreas", "tumor")
PAPER_BATCH = {64: 16, 32: 32, 16: 128}
DESK_BATCH = {64: 1, 32: 2, 16: 8}


@dataclass
class TrainConfig:
    scale: int = 64
    base_lr: float = 0.01
    lr_power: float = 0.9
    total_iters: int = 2000
    batch_size: int = None
    weight_decay: float = 0.0005
    momentum: float = 0.9
    loss_weights: tuple = None
    tumor_fraction: float = 0.001
    pancreas_fraction: float = 0.01
    attempts_per_patch: int = 400
    hu_window: tuple = HU_WINDOW
    log_every: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.batch_size is None:
            self.batch_size = DESK_BATCH[self.scale]
        if self.loss_weights is None:
            self.loss_weights = DEFAULT_LOSS_WEIGHTS[self.scale]
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        if self.batch_size < 1 or self.total_iters < 1:
            raise ValueError("batch_size and total_iters must be >= 1")
        if min(self.loss_weights) <= 0:
            raise ValueError("loss weights must be positive")

    @property
    def head_weights(self):
        """Loss weights normalized to sum to 1, ordered (aux #1, ..., main)."""
        total = sum(self.loss_weights)
        return tuple(w / total for w in self.loss_weights)


@dataclass
class TrainCase:
    id: str
    image: np.ndarray  # normalized intensities, [z, y, x]
    labels: np.ndarray  # uint8 class ids, [z, y, x]
    roi: object = None  # Box3 or None


@dataclass
class PatchSample:
    image: np.ndarray
    labels: np.ndarray
    category: str
    case_id: str
    origin: tuple  # (x, y, z)


def normalize_hu(data, window=HU_WINDOW):
    lo, hi = window
    return np.clip((np.asarray(data, np.float32) - lo) / (hi - lo), 0.0, 1.0).astype(np.float32)


def training_roi(mask, margin=ROI_MARGIN):
    """Pancreas-and-tumor bounding box padded by ``margin`` and clamped to the volume."""
    box = bounding_box(mask, {1, 2})
    if box is None:
        raise ValueError("mask has no pancreas or tumor voxels")
    return pad_box(box, margin, mask.dims)


def load_training_cases(entries, window=HU_WINDOW):
    cases = []
    for e in entries:
        if e.get("mask") is None:
            continue
        ct = load_volume(e["image"])
        mask = load_volume(e["mask"])
        cases.append(TrainCase(e["id"], normalize_hu(ct.data, window), mask.data, training_roi(mask)))
    if not cases:
        raise ValueError("no training case carries a mask")
    return cases


def categorize_patch(label_patch, tumor_fraction=0.001, pancreas_fraction=0.01):
    n = label_patch.size
    tumor = np.count_nonzero(label_patch == 2)
    if tumor >= tumor_fraction * n:
        return "tumor"
    if np.count_nonzero(label_patch) >= pancreas_fraction * n:
        return "pancreas"
    return "background"


def category_quotas(batch_size, offset=0):
    """Equal split over the three categories; the remainder goes round-robin from ``offset``."""
    quota = [batch_size // 3] * 3
    for j in range(batch_size % 3):
        quota[(offset + j) % 3] += 1
    return dict(zip(CATEGORIES, quota))


def _origin_range(case, size, scale_uses_roi):
    L, H, W = case.labels.shape
    dims = (W, H, L)
    if scale_uses_roi and case.roi is not None:
        lo, hi = case.roi.lo, case.roi.hi
    else:
        lo, hi = (0, 0, 0), tuple(d - 1 for d in dims)
    out = []
    for a, b, d in zip(lo, hi, dims):
        first = min(a, d - size)
        last = max(first, min(b - size + 1, d - size))
        out.append((first, last))
    return out


def _draw(cases, size, use_roi, rng):
    case = cases[rng.integers(len(cases))]
    ranges = _origin_range(case, size, use_roi)
    x, y, z = (int(rng.integers(a, b + 1)) for a, b in ranges)
    sl = (slice(z, z + size), slice(y, y + size), slice(x, x + size))
    return case, (x, y, z), sl


def sample_balanced_batch(cases, config, rng, offset=0):
    """Draw ``batch_size`` patches with roughly equal background/pancreas/tumor counts.

    The 64^3 scale samples whole volumes; smaller scales sample only inside
    each case's training ROI.  A category that cannot be found within the
    attempt cap hands its quota to the remaining categories.
    """
    if not cases:
        raise ValueError("no cases to sample from")
    size = config.scale
    use_roi = size < 64
    quota = category_quotas(config.batch_size, offset)
    out = []
    available = list(CATEGORIES)
    pending = dict(quota)
    while sum(pending.values()) > 0:
        progressed = False
        for cat in CATEGORIES:
            if pending[cat] == 0 or cat not in available:
                continue
            for _ in range(config.attempts_per_patch):
                case, origin, sl = _draw(cases, size, use_roi, rng)
                lab = case.labels[sl]
                if categorize_patch(lab, config.tumor_fraction, config.pancreas_fraction) == cat:
                    out.append(PatchSample(case.image[sl].copy(), lab.copy(), cat, case.id, origin))
                    pending[cat] -= 1
                    progressed = True
                    break
            else:
                available.remove(cat)
                if not available:
                    raise RuntimeError("no patch category is obtainable from these cases")
                # hand this category's remaining quota round-robin to the others
                left = pending[cat]
                pending[cat] = 0
                for j in range(left):
                    pending[available[(offset + j) % len(available)]] += 1
        if not progressed and not available:
            raise RuntimeError("no patch category is obtainable from these cases")
    return out


def apply_augmentation(sample, flips, axis, k):
    """Flip along each array axis where ``flips`` is set, then rotate ``k`` quarter turns about ``axis``."""
    img, lab = sample.image, sample.labels
    for ax, f in enumerate(flips):
        if f:
            img = np.flip(img, ax)
            lab = np.flip(lab, ax)
    plane = tuple(a for a in range(3) if a != axis)
    img = np.rot90(img, k, axes=plane)
    lab = np.rot90(lab, k, axes=plane)
    return PatchSample(np.ascontiguousarray(img), np.ascontiguousarray(lab), sample.category, sample.case_id, sample.origin)


def augment(sample, rng):
    if len(set(sample.image.shape)) != 1 or sample.image.ndim != 3:
        raise ValueError(f"augmentation needs a cubic patch, got {sample.image.shape}")
    flips = tuple(bool(f) for f in rng.integers(0, 2, 3))
    axis = int(rng.integers(3))
    k = int(rng.integers(4))
    return apply_augmentation(sample, flips, axis, k)


def lr_schedule(it, config):
    if not 0 <= it < config.total_iters:
        raise ValueError(f"iteration {it} outside [0, {config.total_iters})")
    return config.base_lr * (1.0 - it / config.total_iters) ** config.lr_power


def _no_decay(name):
    return name.endswith(".gamma") or name.endswith(".beta")


def sgd_step(net, grads, lr, config, velocity):
    """Momentum SGD with L2 weight decay (batch-norm scale/shift exempt); updates in place.

    ``velocity`` maps parameter names to momentum buffers and is filled lazily.
    """
    for name, p in net.parameters().items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        d = g if _no_decay(name) else g + config.weight_decay * p
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p)
        v *= config.momentum
        v += d
        p -= (lr * v).astype(p.dtype, copy=False)
    return velocity


def deep_supervision_loss(main, aux, targets, weights):
    """Weighted sum of per-head cross-entropies. Returns total, per-head losses and head gradients."""
    heads = list(aux) + [main]
    losses, grads = [], []
    for logits, w in zip(heads, weights):
        loss, g = softmax_cross_entropy(logits, targets)
        losses.append(loss)
        grads.append(g * np.asarray(w, g.dtype))
    total = float(sum(w * l for w, l in zip(weights, losses)))
    return total, losses, grads[-1], grads[:-1]


@dataclass
class TrainResult:
    net: object
    trace: list = field(default_factory=list)


def warm_start(net, source):
    """Copy every ``source`` tensor whose name and shape match into ``net``; returns the count copied.

    All scales share one topology apart from input size and the number of aux
    heads, so a smaller-scale network initializes everything but the extra heads.
    """
    src = source.state()
    n = 0
    for name, arr in net.state().items():
        if name in src and src[name].shape == arr.shape:
            arr[...] = src[name]
            n += 1
    return n


def train_scale(cases, train_config, net_config=None, on_log=None, init=None):
    """Train one scale; returns the network and a per-iteration loss trace.

    ``init`` optionally names a trained network whose matching tensors replace
    the random initialization (see :func:`warm_start`).
    """
    cfg = train_config
    if net_config is None:
        net_config = NetworkConfig.for_scale(cfg.scale)
    if net_config.input_size != cfg.scale:
        raise ValueError("network input size and training scale differ")
    if len(cfg.loss_weights) != net_config.num_aux + 1:
        raise ValueError("loss weights do not match the number of heads")
    net = build_network(net_config, seed=cfg.seed)
    if init is not None:
        copied = warm_start(net, init)
        log.info("scale %d: warm start copied %d tensors", cfg.scale, copied)
    net.train()
    rng = np.random.default_rng(cfg.seed)
    velocity = {}
    weights = cfg.head_weights
    trace = []
    for it in range(cfg.total_iters):
        lr = lr_schedule(it, cfg)
        batch = [augment(s, rng) for s in sample_balanced_batch(cases, cfg, rng, offset=it)]
        x = np.stack([s.image for s in batch])[:, None]
        t = np.stack([s.labels for s in batch])
        main, aux = net.forward(x)
        total, losses, g_main, g_aux = deep_supervision_loss(main, aux, t, weights)
        if not math.isfinite(total):
            raise FloatingPointError(f"scale {cfg.scale}: non-finite loss at iteration {it} (head losses {losses})")
        net.backward(g_main, g_aux)
        sgd_step(net, net.gradients(), lr, cfg, velocity)
        row = {"iter": it, "lr": lr, "loss": total, "heads": losses}
        trace.append(row)
        if cfg.log_every and (it % cfg.log_every == 0 or it == cfg.total_iters - 1):
            recent = [r["loss"] for r in trace[-cfg.log_every:]]
            log.info("scale %d iter %d lr %.5f loss %.4f (mean %.4f)", cfg.scale, it, lr, total, np.mean(recent))
            if on_log is not None:
                on_log(row)
    net.eval()
    return TrainResult(net, trace)


def write_trace(trace, path):
    n_heads = len(trace[0]["heads"]) if trace else 0
    names = [f"aux{k + 1}" for k in range(n_heads - 1)] + ["main"]
    with open(Path(path), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iter", "lr", "loss"] + [f"loss_{n}" for n in names])
        for r in trace:
            w.writerow([r["iter"], repr(r["lr"]), repr(r["loss"])] + [repr(v) for v in r["heads"]])
