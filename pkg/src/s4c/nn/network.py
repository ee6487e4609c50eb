"""Deeply-supervised 3D encoder-decoder and its weight file format."""

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .layers import Conv1x1, MaxPool, Sequential, conv_bn_relu, deconv_bn_relu

CLASSES = 3
WEIGHT_MAGIC = b"S4CWEIGHTS\x00\x00"
WEIGHT_VERSION = 1

# relative weights of (aux #1, [aux #2,] main) per input scale
DEFAULT_LOSS_WEIGHTS = {64: (1.0, 2.0, 5.0), 32: (1.0, 3.0), 16: (1.0, 3.0)}


class WeightFileError(ValueError):
    pass


@dataclass
class NetworkConfig:
    input_size: int = 64
    base_channels: int = 8
    levels: int = 3
    num_aux: int = 2
    loss_weights: tuple = (1.0, 2.0, 5.0)
    classes: int = CLASSES

    def __post_init__(self):
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        self.validate()

    def validate(self):
        if self.input_size < 1 or self.input_size % (2 ** self.levels):
            raise ValueError(f"input_size {self.input_size} not divisible by 2**levels ({2 ** self.levels})")
        if self.base_channels < 1 or self.levels < 1:
            raise ValueError("base_channels and levels must be positive")
        if not 0 <= self.num_aux <= self.levels - 1:
            raise ValueError(f"num_aux must be in [0, levels-1], got {self.num_aux}")
        if len(self.loss_weights) != self.num_aux + 1 or min(self.loss_weights) <= 0:
            raise ValueError("loss_weights needs num_aux + 1 positive entries")
        if self.classes != CLASSES:
            raise ValueError("only 3-class output is supported")

    @classmethod
    def for_scale(cls, size, **overrides):
        weights = DEFAULT_LOSS_WEIGHTS[size]
        kw = dict(input_size=size, num_aux=len(weights) - 1, loss_weights=weights)
        kw.update(overrides)
        return cls(**kw)


@dataclass
class Network:
    """Encoder-decoder with additive encoder-to-decoder skips and auxiliary heads.

    Aux head ``k`` (1-based) taps the decoder at resolution ``1 / 2**(levels - k)``
    and upsamples back to full size before its 1x1x1 classifier.
    """

    config: NetworkConfig
    dtype: np.dtype = np.float32
    mode: str = "train"
    encoder: list = field(default_factory=list)
    bottleneck: Sequential = None
    ups: list = field(default_factory=list)
    decoder: list = field(default_factory=list)
    aux_heads: list = field(default_factory=list)
    main_head: Conv1x1 = None
    pools: list = field(default_factory=list)

    def channels(self, level):
        return self.config.base_channels * 2 ** level

    def named_layers(self):
        groups = [(f"enc{k}", blk) for k, blk in enumerate(self.encoder)]
        groups.append(("bottleneck", self.bottleneck))
        groups += [(f"up{k}", blk) for k, blk in enumerate(self.ups)]
        groups += [(f"dec{k}", blk) for k, blk in enumerate(self.decoder)]
        groups += [(f"aux{k + 1}", blk) for k, blk in enumerate(self.aux_heads)]
        for name, blk in groups:
            yield from blk.named_layers(name + ".")
        yield "head", self.main_head

    def parameters(self):
        """Ordered ``{name: array}`` of trainable parameters (live references)."""
        return {f"{ln}.{pn}": arr for ln, layer in self.named_layers() for pn, arr in layer.params.items()}

    def gradients(self):
        return {f"{ln}.{pn}": layer.grads[pn] for ln, layer in self.named_layers() for pn in layer.params}

    def buffers(self):
        return {f"{ln}.{bn}": arr for ln, layer in self.named_layers() for bn, arr in layer.buffers.items()}

    def state(self):
        """Parameters and buffers together, in a fixed order."""
        out = {}
        for ln, layer in self.named_layers():
            for pn, arr in layer.params.items():
                out[f"{ln}.{pn}"] = arr
            for bn, arr in layer.buffers.items():
                out[f"{ln}.{bn}"] = arr
        return out

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    def forward(self, x, with_aux=True):
        cfg = self.config
        if x.ndim != 5 or x.shape[1] != 1 or x.shape[2:] != (cfg.input_size,) * 3:
            raise ValueError(f"expected (N, 1, {cfg.input_size}, {cfg.input_size}, {cfg.input_size}), got {x.shape}")
        train = self.mode == "train"
        x = np.ascontiguousarray(x, dtype=self.dtype)
        skips = []
        h = x
        for blk in self.encoder:
            h = blk.forward(h, train)
            skips.append(h)
            h = self.pools[len(skips) - 1].forward(h, train)
        h = self.bottleneck.forward(h, train)
        dec_out = [None] * cfg.levels
        for k in reversed(range(cfg.levels)):
            h = self.ups[k].forward(h, train) + skips[k]
            h = self.decoder[k].forward(h, train)
            dec_out[k] = h
        main = self.main_head.forward(dec_out[0], train)
        aux = []
        if with_aux:
            for k, head in enumerate(self.aux_heads, start=1):
                aux.append(head.forward(dec_out[cfg.levels - k], train))
        return main, aux

    def backward(self, g_main, g_aux):
        """Backpropagate head gradients; fills every layer's ``grads``. Returns grad wrt input."""
        cfg = self.config
        g_dec = [None] * cfg.levels
        g_dec[0] = self.main_head.backward(g_main)
        for k, (head, g) in enumerate(zip(self.aux_heads, g_aux), start=1):
            tap = cfg.levels - k
            gh = head.backward(g)
            g_dec[tap] = gh if g_dec[tap] is None else g_dec[tap] + gh
        g_skip = [None] * cfg.levels
        g = None
        for k in range(cfg.levels):
            gk = g_dec[k] if g is None else (g if g_dec[k] is None else g + g_dec[k])
            gk = self.decoder[k].backward(gk)
            g_skip[k] = gk
            # ups[k] consumed the next-coarser decoder output (or the bottleneck)
            g = self.ups[k].backward(gk)
        g = self.bottleneck.backward(g)
        for k in reversed(range(cfg.levels)):
            g = self.pools[k].backward(g) + g_skip[k]
            g = self.encoder[k].backward(g)
        return g


def build_network(config, seed=0, dtype=np.float32):
    """Fresh network with fan-in-scaled Gaussian weights drawn deterministically from ``seed``."""
    config.validate()
    rng = np.random.default_rng(seed)
    net = Network(config=config, dtype=np.dtype(dtype))
    ch = net.channels
    cin = 1
    for k in range(config.levels):
        net.encoder.append(Sequential(("0", conv_bn_relu(cin, ch(k), rng, dtype)), ("1", conv_bn_relu(ch(k), ch(k), rng, dtype))))
        cin = ch(k)
    L = config.levels
    net.bottleneck = Sequential(("0", conv_bn_relu(ch(L - 1), ch(L), rng, dtype)), ("1", conv_bn_relu(ch(L), ch(L), rng, dtype)))
    net.ups = [deconv_bn_relu(ch(k + 1), ch(k), rng, dtype) for k in range(L)]
    net.decoder = [
        Sequential(("0", conv_bn_relu(ch(k), ch(k), rng, dtype)), ("1", conv_bn_relu(ch(k), ch(k), rng, dtype)))
        for k in range(L)
    ]
    for k in range(1, config.num_aux + 1):
        tap = L - k
        steps = [(f"up{j}", deconv_bn_relu(ch(j), ch(j - 1), rng, dtype)) for j in range(tap, 0, -1)]
        steps.append(("cls", Conv1x1(ch(0), CLASSES, rng, dtype, gain=0.1)))
        net.aux_heads.append(Sequential(*steps))
    net.main_head = Conv1x1(ch(0), CLASSES, rng, dtype, gain=0.1)
    net.pools = [MaxPool() for _ in range(L)]
    return net


def network_forward(net, patch, with_aux=True):
    """``(main_logits, [aux_logits, ...])``, every output at full input resolution."""
    return net.forward(patch, with_aux=with_aux)


def _config_dict(config):
    d = asdict(config)
    d["loss_weights"] = list(d["loss_weights"])
    return d


def save_weights(net, path):
    """Weight file: magic+version, JSON config block, then named float32 tensors."""
    cfg = json.dumps(_config_dict(net.config)).encode()
    state = net.state()
    with open(path, "wb") as f:
        f.write(WEIGHT_MAGIC + struct.pack("<I", WEIGHT_VERSION))
        f.write(struct.pack("<I", len(cfg)))
        f.write(cfg)
        f.write(struct.pack("<I", len(state)))
        for name, arr in state.items():
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return Path(path)


def load_weights(path, expect=None):
    """Rebuild a network from a weight file.

    ``expect`` optionally names a :class:`NetworkConfig` (or an ``input_size``)
    the file must match.
    """
    raw = Path(path).read_bytes()
    head = WEIGHT_MAGIC + struct.pack("<I", WEIGHT_VERSION)
    if raw[:16] != head:
        raise WeightFileError(f"{path}: not a weight file")
    try:
        pos = 16
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        cfg = json.loads(raw[pos:pos + n].decode())
        pos += n
        config = NetworkConfig(**cfg)
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + ln].decode()
            pos += ln
            (nd,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{nd}I", raw, pos)
            pos += 4 * nd
            size = int(np.prod(shape)) * 4
            if pos + size > len(raw):
                raise WeightFileError(f"{path}: truncated tensor {name}")
            tensors[name] = np.frombuffer(raw[pos:pos + size], dtype="<f4").reshape(shape)
            pos += size
    except (struct.error, ValueError, TypeError, UnicodeDecodeError) as exc:
        raise WeightFileError(f"{path}: corrupt weight file ({exc})") from exc
    if pos != len(raw):
        raise WeightFileError(f"{path}: trailing bytes")
    if expect is not None:
        size = expect if isinstance(expect, int) else expect.input_size
        if size != config.input_size or (not isinstance(expect, int) and expect != config):
            raise WeightFileError(f"{path}: holds a {config.input_size}^3 network, expected {expect}")
    net = build_network(config)
    state = net.state()
    if set(state) != set(tensors):
        raise WeightFileError(f"{path}: tensor names do not match the configured topology")
    for name, arr in state.items():
        if arr.shape != tensors[name].shape:
            raise WeightFileError(f"{path}: shape mismatch for {name}")
        arr[...] = tensors[name]
    return net
