"""Small-CNN embedding encoder with manual forward/backward passes.

Implements the DS-CNN family (stem conv -> depthwise/pointwise blocks ->
global average pool -> dense), a residual variant, and a tiny desk-scale
network.  Everything runs on numpy; the backward pass is written by hand so
gradients can be verified against finite differences.

Layer activations live in (N, H, W, C) layout; the 47x10 MFCC map enters as
a single-channel image.
"""

import struct
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .frontend import MFCC_COLS, MFCC_ROWS, MfccMap


class EncoderError(ValueError):
    pass


def _same_pad(size, k, s):
    out = -(-size // s)  # ceil division
    total = max((out - 1) * s + k - size, 0)
    return out, total // 2, total - total // 2


# ---------------------------------------------------------------------------
# Layers


class Conv2d:
    """Full 2-D convolution with bias, 'same' padding."""

    is_conv = True

    def __init__(self, kh, kw, cin, cout, stride=(1, 1)):
        self.kh, self.kw, self.cin, self.cout = kh, kw, cin, cout
        self.stride = stride

    def param_shapes(self):
        return [(self.kh, self.kw, self.cin, self.cout), (self.cout,)]

    def fan_in(self):
        return self.kh * self.kw * self.cin

    def out_shape(self, shape):
        h, w, c = shape
        if c != self.cin:
            raise EncoderError(f"conv expects {self.cin} channels, got {c}")
        ho, _, _ = _same_pad(h, self.kh, self.stride[0])
        wo, _, _ = _same_pad(w, self.kw, self.stride[1])
        return (ho, wo, self.cout)

    def _pad(self, x):
        n, h, w, _ = x.shape
        ho, ph0, ph1 = _same_pad(h, self.kh, self.stride[0])
        wo, pw0, pw1 = _same_pad(w, self.kw, self.stride[1])
        xpad = np.pad(x, ((0, 0), (ph0, ph1), (pw0, pw1), (0, 0)))
        return xpad, ho, wo, (ph0, pw0)

    def forward(self, x, params, tape=None):
        weight, bias = params
        xpad, ho, wo, _ = self._pad(x)
        sh, sw = self.stride
        y = np.zeros((x.shape[0], ho, wo, self.cout), dtype=x.dtype)
        for di in range(self.kh):
            for dj in range(self.kw):
                xs = xpad[:, di : di + (ho - 1) * sh + 1 : sh, dj : dj + (wo - 1) * sw + 1 : sw, :]
                y += np.tensordot(xs, weight[di, dj], axes=([3], [0]))
        y += bias
        if tape is not None:
            tape.append((xpad, x.shape))
        return y

    def backward(self, gy, cache, params):
        weight, _ = params
        xpad, x_shape = cache
        sh, sw = self.stride
        ho, wo = gy.shape[1], gy.shape[2]
        g_weight = np.zeros_like(weight)
        g_xpad = np.zeros_like(xpad)
        for di in range(self.kh):
            for dj in range(self.kw):
                sl_h = slice(di, di + (ho - 1) * sh + 1, sh)
                sl_w = slice(dj, dj + (wo - 1) * sw + 1, sw)
                xs = xpad[:, sl_h, sl_w, :]
                g_weight[di, dj] = np.tensordot(xs, gy, axes=([0, 1, 2], [0, 1, 2]))
                g_xpad[:, sl_h, sl_w, :] += np.tensordot(gy, weight[di, dj], axes=([3], [1]))
        g_bias = gy.sum(axis=(0, 1, 2))
        _, h, w, _ = x_shape
        _, ph0, _ = _same_pad(h, self.kh, sh)
        _, pw0, _ = _same_pad(w, self.kw, sw)
        gx = g_xpad[:, ph0 : ph0 + h, pw0 : pw0 + w, :]
        return gx, [g_weight, g_bias]


class DepthwiseConv2d:
    """Per-channel 2-D convolution with bias, 'same' padding."""

    is_conv = True

    def __init__(self, k, channels, stride=(1, 1)):
        self.k = k
        self.channels = channels
        self.stride = stride

    def param_shapes(self):
        return [(self.k, self.k, self.channels), (self.channels,)]

    def fan_in(self):
        return self.k * self.k

    def out_shape(self, shape):
        h, w, c = shape
        if c != self.channels:
            raise EncoderError(f"depthwise conv expects {self.channels} channels, got {c}")
        ho, _, _ = _same_pad(h, self.k, self.stride[0])
        wo, _, _ = _same_pad(w, self.k, self.stride[1])
        return (ho, wo, c)

    def forward(self, x, params, tape=None):
        weight, bias = params
        n, h, w, c = x.shape
        sh, sw = self.stride
        ho, ph0, ph1 = _same_pad(h, self.k, sh)
        wo, pw0, pw1 = _same_pad(w, self.k, sw)
        xpad = np.pad(x, ((0, 0), (ph0, ph1), (pw0, pw1), (0, 0)))
        y = np.zeros((n, ho, wo, c), dtype=x.dtype)
        for di in range(self.k):
            for dj in range(self.k):
                xs = xpad[:, di : di + (ho - 1) * sh + 1 : sh, dj : dj + (wo - 1) * sw + 1 : sw, :]
                y += xs * weight[di, dj]
        y += bias
        if tape is not None:
            tape.append((xpad, x.shape))
        return y

    def backward(self, gy, cache, params):
        weight, _ = params
        xpad, x_shape = cache
        sh, sw = self.stride
        ho, wo = gy.shape[1], gy.shape[2]
        g_weight = np.zeros_like(weight)
        g_xpad = np.zeros_like(xpad)
        for di in range(self.k):
            for dj in range(self.k):
                sl_h = slice(di, di + (ho - 1) * sh + 1, sh)
                sl_w = slice(dj, dj + (wo - 1) * sw + 1, sw)
                xs = xpad[:, sl_h, sl_w, :]
                g_weight[di, dj] = (xs * gy).sum(axis=(0, 1, 2))
                g_xpad[:, sl_h, sl_w, :] += gy * weight[di, dj]
        g_bias = gy.sum(axis=(0, 1, 2))
        _, h, w, _ = x_shape
        _, ph0, _ = _same_pad(h, self.k, sh)
        _, pw0, _ = _same_pad(w, self.k, sw)
        gx = g_xpad[:, ph0 : ph0 + h, pw0 : pw0 + w, :]
        return gx, [g_weight, g_bias]


class ReLU:
    is_conv = False

    def param_shapes(self):
        return []

    def out_shape(self, shape):
        return shape

    def forward(self, x, params, tape=None):
        y = np.maximum(x, 0)
        if tape is not None:
            tape.append(x > 0)
        return y

    def backward(self, gy, cache, params):
        return gy * cache, []


class ResidualPair:
    """Two 3x3 same-channel convolutions with an identity skip connection:
    y = relu(conv2(relu(conv1(x))) + x)."""

    is_conv = True

    def __init__(self, channels):
        self.channels = channels
        self.conv1 = Conv2d(3, 3, channels, channels)
        self.conv2 = Conv2d(3, 3, channels, channels)

    def param_shapes(self):
        return self.conv1.param_shapes() + self.conv2.param_shapes()

    def fan_in(self):
        return self.conv1.fan_in()

    def out_shape(self, shape):
        return self.conv1.out_shape(shape)

    def forward(self, x, params, tape=None):
        sub = [] if tape is not None else None
        h = self.conv1.forward(x, params[:2], sub)
        mask1 = h > 0
        h = np.maximum(h, 0)
        z = self.conv2.forward(h, params[2:], sub)
        mask2 = (z + x) > 0
        y = np.maximum(z + x, 0)
        if tape is not None:
            tape.append((sub, mask1, mask2))
        return y

    def backward(self, gy, cache, params):
        sub, mask1, mask2 = cache
        g = gy * mask2
        gh, g2 = self.conv2.backward(g, sub[1], params[2:])
        gh *= mask1
        gx, g1 = self.conv1.backward(gh, sub[0], params[:2])
        return gx + g, g1 + g2


class GlobalAvgPool:
    is_conv = False

    def param_shapes(self):
        return []

    def out_shape(self, shape):
        return (shape[2],)

    def forward(self, x, params, tape=None):
        if tape is not None:
            tape.append(x.shape)
        return x.mean(axis=(1, 2))

    def backward(self, gy, cache, params):
        _, h, w, _ = cache
        gx = np.broadcast_to(gy[:, None, None, :] / (h * w), cache).copy()
        return gx, []


class Dense:
    is_conv = False

    def __init__(self, cin, cout):
        self.cin, self.cout = cin, cout

    def param_shapes(self):
        return [(self.cin, self.cout), (self.cout,)]

    def fan_in(self):
        return self.cin

    def out_shape(self, shape):
        if shape != (self.cin,):
            raise EncoderError(f"dense expects ({self.cin},), got {shape}")
        return (self.cout,)

    def forward(self, x, params, tape=None):
        weight, bias = params
        if tape is not None:
            tape.append(x)
        return x @ weight + bias

    def backward(self, gy, cache, params):
        weight, _ = params
        return gy @ weight.T, [cache.T @ gy, gy.sum(axis=0)]


# ---------------------------------------------------------------------------
# Architecture descriptors


@dataclass
class ArchDescriptor:
    name: str
    layers: list
    embedding_dim: int
    input_shape: tuple = (MFCC_ROWS, MFCC_COLS, 1)
    param_count: int = field(init=False)
    per_layer_activation_elems: list = field(init=False)
    param_offsets: list = field(init=False)

    def __post_init__(self):
        offsets = []
        total = 0
        activ = []
        shape = self.input_shape
        for layer in self.layers:
            layer_offsets = []
            for ps in layer.param_shapes():
                size = int(np.prod(ps))
                layer_offsets.append((total, ps))
                total += size
            offsets.append(layer_offsets)
            shape = layer.out_shape(shape)
            if layer.is_conv:
                if isinstance(layer, ResidualPair):
                    elems = int(np.prod(shape))
                    activ.extend([elems, elems])
                else:
                    activ.append(int(np.prod(shape)))
        if shape != (self.embedding_dim,):
            raise EncoderError(
                f"{self.name}: network output {shape} != embedding dim ({self.embedding_dim},)"
            )
        self.param_count = total
        self.per_layer_activation_elems = activ
        self.param_offsets = offsets

    def param_views(self, flat):
        views = []
        for layer_offsets in self.param_offsets:
            layer_params = []
            for off, ps in layer_offsets:
                size = int(np.prod(ps))
                layer_params.append(flat[off : off + size].reshape(ps))
            views.append(layer_params)
        return views


def _dscnn(name, channels, block_strides, embedding_dim):
    layers = [Conv2d(3, 3, 1, channels, stride=(2, 2)), ReLU()]
    for stride in block_strides:
        layers += [
            DepthwiseConv2d(3, channels, stride=stride),
            ReLU(),
            Conv2d(1, 1, channels, channels),
            ReLU(),
        ]
    layers += [GlobalAvgPool(), Dense(channels, embedding_dim)]
    return ArchDescriptor(name=name, layers=layers, embedding_dim=embedding_dim)


def _resnet15():
    channels = 64
    layers = [Conv2d(3, 3, 1, channels, stride=(2, 2)), ReLU()]
    layers += [ResidualPair(channels) for _ in range(6)]
    layers += [Conv2d(3, 3, channels, channels), ReLU(), GlobalAvgPool()]
    return ArchDescriptor(name="resnet15", layers=layers, embedding_dim=channels)


def _tiny():
    layers = [
        Conv2d(3, 3, 1, 8, stride=(2, 2)),
        ReLU(),
        DepthwiseConv2d(3, 8),
        ReLU(),
        Conv2d(1, 1, 8, 16),
        ReLU(),
        GlobalAvgPool(),
        Dense(16, 16),
    ]
    return ArchDescriptor(name="tiny", layers=layers, embedding_dim=16)


_BUILDERS = {
    "dscnn_s": lambda: _dscnn("dscnn_s", 60, [(1, 1)] * 4, 64),
    "dscnn_m": lambda: _dscnn("dscnn_m", 156, [(1, 1), (1, 1), (1, 2), (2, 1)], 172),
    "dscnn_l": lambda: _dscnn("dscnn_l", 254, [(1, 1), (1, 1), (1, 2), (2, 1), (1, 1)], 256),
    "resnet15": _resnet15,
    "tiny": _tiny,
}

ARCH_NAMES = tuple(_BUILDERS)


def build_arch(name: str) -> ArchDescriptor:
    if name not in _BUILDERS:
        raise EncoderError(f"unknown architecture {name!r}; known: {ARCH_NAMES}")
    return _BUILDERS[name]()


# ---------------------------------------------------------------------------
# Encoder state and forward/backward


def _cast(x, precision):
    if precision == "f16_emulated":
        return x.astype(np.float16).astype(np.float32)
    return x


@dataclass
class EncoderState:
    arch: ArchDescriptor
    weights: np.ndarray
    precision: str = "f32"
    rng_seed: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float32)
        if self.weights.shape != (self.arch.param_count,):
            raise EncoderError(
                f"weight vector length {self.weights.shape} != {self.arch.param_count}"
            )
        if not np.all(np.isfinite(self.weights)):
            raise EncoderError("non-finite weights")
        if self.precision not in ("f32", "f16_emulated"):
            raise EncoderError(f"unknown precision {self.precision!r}")


def init_encoder(arch_name: str, rng_seed: int = 0, precision: str = "f32") -> EncoderState:
    """Kaiming-uniform fan-in initialization; biases start at zero."""
    arch = build_arch(arch_name)
    rng = np.random.default_rng(rng_seed)
    flat = np.zeros(arch.param_count, dtype=np.float32)
    views = arch.param_views(flat)
    for layer, params in zip(arch.layers, views):
        shapes = layer.param_shapes()
        for p, ps in zip(params, shapes):
            if len(ps) > 1:  # weight tensor, not bias
                limit = np.sqrt(6.0 / layer.fan_in())
                p[...] = rng.uniform(-limit, limit, size=ps).astype(np.float32)
    return EncoderState(arch=arch, weights=flat, precision=precision, rng_seed=rng_seed)


@dataclass
class ActivationTape:
    """Per-layer caches from a training forward pass, plus the bookkeeping
    needed to report activation storage."""

    arch_name: str
    batch_size: int
    caches: list
    activation_elems: list

    def activation_bytes(self, bytes_per_elem: int = 2) -> int:
        return sum(self.activation_elems) * self.batch_size * bytes_per_elem


def _forward_batch(enc: EncoderState, x, tape=None):
    # weights are stored in f32 but the arithmetic runs in f64 so that
    # finite-difference gradient verification is not drowned in rounding
    views = enc.arch.param_views(enc.weights)
    views = [[_cast(p.astype(np.float64), enc.precision) for p in lp] for lp in views]
    x = _cast(x.astype(np.float64), enc.precision)
    for layer, params in zip(enc.arch.layers, views):
        x = layer.forward(x, params, tape)
        x = _cast(x, enc.precision)
    return x


def _stack_maps(maps):
    batch = np.stack([m.values for m in maps]).astype(np.float32)
    return batch[..., None]  # single input channel


def forward(enc: EncoderState, mfcc: MfccMap) -> np.ndarray:
    """Embedding of a single MFCC map."""
    return _forward_batch(enc, _stack_maps([mfcc]))[0]


def forward_batch(enc: EncoderState, maps) -> np.ndarray:
    """Embeddings of a list of MFCC maps, stacked as (N, embedding_dim)."""
    if not maps:
        return np.zeros((0, enc.arch.embedding_dim), dtype=np.float32)
    return _forward_batch(enc, _stack_maps(maps))


def forward_training(enc: EncoderState, maps):
    """Forward pass recording the activation tape needed for backward."""
    if not maps:
        raise EncoderError("empty batch")
    caches = []
    emb = _forward_batch(enc, _stack_maps(maps), tape=caches)
    tape = ActivationTape(
        arch_name=enc.arch.name,
        batch_size=len(maps),
        caches=caches,
        activation_elems=list(enc.arch.per_layer_activation_elems),
    )
    return emb, tape


def backward(enc: EncoderState, tape: ActivationTape, grad_embeddings) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. the flat weight vector, given the
    loss gradient w.r.t. the output embeddings."""
    if tape.arch_name != enc.arch.name:
        raise EncoderError(f"tape from {tape.arch_name!r} does not match {enc.arch.name!r}")
    grad = np.asarray(grad_embeddings, dtype=np.float64)
    views = enc.arch.param_views(enc.weights.astype(np.float64))
    flat_grad = np.zeros(enc.arch.param_count, dtype=np.float64)
    grad_views = enc.arch.param_views(flat_grad)
    for layer, cache, params, gparams in zip(
        reversed(enc.arch.layers), reversed(tape.caches), reversed(views), reversed(grad_views)
    ):
        grad, layer_grads = layer.backward(grad, cache, params)
        for gp, lg in zip(gparams, layer_grads):
            gp[...] += lg
    if not np.all(np.isfinite(flat_grad)):
        raise EncoderError("non-finite gradient")
    return flat_grad


# ---------------------------------------------------------------------------
# Checkpoints: magic + version + arch name + f32 weight payload + CRC32.

_CKPT_MAGIC = b"SKWENC1\x00"
_CKPT_VERSION = 1


def save_checkpoint(path, enc: EncoderState):
    name = enc.arch.name.encode()
    payload = enc.weights.astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<HH", _CKPT_VERSION, len(name)))
        f.write(name)
        f.write(struct.pack("<IIi", enc.arch.param_count, zlib.crc32(payload), enc.rng_seed))
        f.write(payload)


def load_checkpoint(path, expect_arch: Optional[str] = None, precision: str = "f32") -> EncoderState:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < len(_CKPT_MAGIC) + 4 or data[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise EncoderError(f"corrupt checkpoint: {path}")
    pos = len(_CKPT_MAGIC)
    version, name_len = struct.unpack_from("<HH", data, pos)
    pos += 4
    if version != _CKPT_VERSION:
        raise EncoderError(f"checkpoint version mismatch: {version}")
    name = data[pos : pos + name_len].decode()
    pos += name_len
    if len(data) < pos + 12:
        raise EncoderError(f"corrupt checkpoint: {path}")
    param_count, crc, rng_seed = struct.unpack_from("<IIi", data, pos)
    pos += 12
    if expect_arch is not None and name != expect_arch:
        raise EncoderError(f"arch mismatch: checkpoint holds {name!r}, expected {expect_arch!r}")
    payload = data[pos:]
    if len(payload) != 4 * param_count or zlib.crc32(payload) != crc:
        raise EncoderError(f"corrupt checkpoint: {path}")
    weights = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    arch = build_arch(name)
    if arch.param_count != param_count:
        raise EncoderError(f"corrupt checkpoint: param count {param_count} != {arch.param_count}")
    return EncoderState(arch=arch, weights=weights, precision=precision, rng_seed=rng_seed)
