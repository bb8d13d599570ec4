"""Post-training int8 quantization with asymmetric per-channel weight ranges.

Weights are quantized per output channel; activation ranges are observed by
feeding calibration samples (4 by default) through the float network at the
same quantization points used by the integer forward pass.  The quantized
forward uses integer accumulation and per-channel dequantization.
"""

from dataclasses import dataclass, field

import numpy as np

from .encoder import (
    Conv2d,
    Dense,
    DepthwiseConv2d,
    EncoderError,
    EncoderState,
    GlobalAvgPool,
    ReLU,
    ResidualPair,
    _same_pad,
    _stack_maps,
)
from .frontend import MfccMap

SCALE_FLOOR = 1e-8


@dataclass
class QuantParams:
    scale: np.ndarray  # per-channel for weights, scalar array for activations
    zero_point: np.ndarray


@dataclass
class QuantizedEncoder:
    arch: "ArchDescriptor"
    int8_weights: dict  # layer key -> int8 weight tensor
    weight_qparams: dict  # layer key -> QuantParams (per output channel)
    biases: dict  # layer key -> float bias
    activation_qparams: list  # QuantParams per quantization point, in walk order
    degenerate_channels: list = field(default_factory=list)


def _quantize_weight_per_channel(weight, channel_axis):
    """Asymmetric per-output-channel int8 quantization.  Zero is always
    representable; constant channels get a floored scale."""
    w = np.moveaxis(weight, channel_axis, -1)
    flat = w.reshape(-1, w.shape[-1])
    wmin = np.minimum(flat.min(axis=0), 0.0)
    wmax = np.maximum(flat.max(axis=0), 0.0)
    degenerate = np.nonzero(wmax - wmin < SCALE_FLOOR)[0]
    scale = np.maximum((wmax - wmin) / 255.0, SCALE_FLOOR)
    zp = np.round(-128.0 - wmin / scale).astype(np.int64)
    scale_full = np.moveaxis(np.broadcast_to(scale, w.shape).copy(), -1, channel_axis)
    zp_full = np.moveaxis(np.broadcast_to(zp, w.shape).copy(), -1, channel_axis)
    q = np.clip(np.round(weight / scale_full) + zp_full, -128, 127).astype(np.int8)
    return q, QuantParams(scale=scale, zero_point=zp), list(degenerate)


def _act_qparams(vmin, vmax):
    vmin = min(float(vmin), 0.0)
    vmax = max(float(vmax), 0.0)
    scale = max((vmax - vmin) / 255.0, SCALE_FLOOR)
    zp = int(round(-128.0 - vmin / scale))
    return QuantParams(scale=np.float64(scale), zero_point=np.int64(zp))


def _quantize_act(x, qp):
    return np.clip(np.round(x / float(qp.scale)) + int(qp.zero_point), -128, 127).astype(np.int64)


def _dequantize_act(xq, qp):
    return (xq - int(qp.zero_point)) * float(qp.scale)


def _int_conv(layer, xq, zpx, wq, zpw):
    """Integer-accumulated convolution of (xq - zpx) with (wq - zpw)."""
    xc = xq - zpx
    if isinstance(layer, Dense):
        return xc @ (wq.astype(np.int64) - zpw[None, :])
    sh, sw = layer.stride
    if isinstance(layer, Conv2d):
        kh, kw = layer.kh, layer.kw
        wc = wq.astype(np.int64) - zpw[None, None, None, :]
    else:  # depthwise
        kh = kw = layer.k
        wc = wq.astype(np.int64) - zpw[None, None, :]
    n, h, w, _ = xc.shape
    ho, ph0, ph1 = _same_pad(h, kh, sh)
    wo, pw0, pw1 = _same_pad(w, kw, sw)
    xpad = np.pad(xc, ((0, 0), (ph0, ph1), (pw0, pw1), (0, 0)))
    cout = wc.shape[-1]
    acc = np.zeros((n, ho, wo, cout), dtype=np.int64)
    for di in range(kh):
        for dj in range(kw):
            xs = xpad[:, di : di + (ho - 1) * sh + 1 : sh, dj : dj + (wo - 1) * sw + 1 : sw, :]
            if isinstance(layer, Conv2d):
                acc += np.tensordot(xs, wc[di, dj], axes=([3], [0]))
            else:
                acc += xs * wc[di, dj]
    return acc


def _channel_axis(layer):
    return 3 if isinstance(layer, Conv2d) else (1 if isinstance(layer, Dense) else 2)


def _walk_layers(arch):
    """Flatten the layer list into fusible steps: parametric layers carry a
    flag for a fused trailing ReLU; composites expand into sub-steps."""
    steps = []
    layers = arch.layers
    i = 0
    while i < len(layers):
        layer = layers[i]
        if isinstance(layer, (Conv2d, DepthwiseConv2d, Dense)):
            fuse_relu = i + 1 < len(layers) and isinstance(layers[i + 1], ReLU)
            steps.append(("conv", (i,), layer, fuse_relu))
            i += 2 if fuse_relu else 1
        elif isinstance(layer, ResidualPair):
            steps.append(("residual", (i,), layer, False))
            i += 1
        elif isinstance(layer, GlobalAvgPool):
            steps.append(("gap", (i,), layer, False))
            i += 1
        elif isinstance(layer, ReLU):
            steps.append(("relu", (i,), layer, False))
            i += 1
        else:
            raise EncoderError(f"unsupported layer for quantization: {layer!r}")
    return steps


def quantize_ptq(enc: EncoderState, calib_maps) -> QuantizedEncoder:
    """Quantize weights per channel and calibrate activation ranges from the
    observed min/max over the calibration maps."""
    if not calib_maps:
        raise EncoderError("need at least one calibration map")
    views = enc.arch.param_views(enc.weights)
    steps = _walk_layers(enc.arch)

    int8_weights, weight_qparams, biases = {}, {}, {}
    degenerate = []

    def quantize_layer(key, layer, weight, bias):
        q, qp, bad = _quantize_weight_per_channel(weight, _channel_axis(layer))
        int8_weights[key] = q
        weight_qparams[key] = qp
        biases[key] = bias.copy()
        degenerate.extend((key, c) for c in bad)

    for kind, key, layer, _ in steps:
        if kind == "conv":
            weight, bias = views[key[0]]
            quantize_layer(key, layer, weight, bias)
        elif kind == "residual":
            w1, b1, w2, b2 = views[key[0]]
            quantize_layer(key + ("c1",), layer.conv1, w1, b1)
            quantize_layer(key + ("c2",), layer.conv2, w2, b2)

    # observe activation ranges in float at every quantization point
    ranges = []

    def observe(x):
        ranges.append((float(x.min()), float(x.max())))
        return x

    x = _stack_maps(calib_maps)
    observe(x)
    for kind, key, layer, fuse_relu in steps:
        if kind == "conv":
            weight, bias = views[key[0]]
            x = layer.forward(x, [weight, bias])
            if fuse_relu:
                x = np.maximum(x, 0)
            observe(x)
        elif kind == "residual":
            skip = x
            w1, b1, w2, b2 = views[key[0]]
            h = np.maximum(layer.conv1.forward(x, [w1, b1]), 0)
            observe(h)
            x = np.maximum(layer.conv2.forward(h, [w2, b2]) + skip, 0)
            observe(x)
        elif kind == "gap":
            x = x.mean(axis=(1, 2))
            observe(x)
        elif kind == "relu":
            x = np.maximum(x, 0)
            observe(x)

    act_qparams = [_act_qparams(lo, hi) for lo, hi in ranges]
    return QuantizedEncoder(
        arch=enc.arch,
        int8_weights=int8_weights,
        weight_qparams=weight_qparams,
        biases=biases,
        activation_qparams=act_qparams,
        degenerate_channels=degenerate,
    )


def _qconv_step(layer, key, qenc, xq, xqp):
    wq = qenc.int8_weights[key]
    wqp = qenc.weight_qparams[key]
    acc = _int_conv(layer, xq, int(xqp.zero_point), wq, wqp.zero_point)
    return acc.astype(np.float64) * (float(xqp.scale) * wqp.scale) + qenc.biases[key]


def forward_quantized(qenc: QuantizedEncoder, mfcc: MfccMap) -> np.ndarray:
    return forward_quantized_batch(qenc, [mfcc])[0]


def forward_quantized_batch(qenc: QuantizedEncoder, maps) -> np.ndarray:
    """Embeddings via the int8 path.  Activations are requantized at every
    quantization point; the final embedding is returned dequantized."""
    if not maps:
        return np.zeros((0, qenc.arch.embedding_dim), dtype=np.float32)
    steps = _walk_layers(qenc.arch)
    qps = iter(qenc.activation_qparams)
    x = _stack_maps(maps).astype(np.float64)
    xqp = next(qps)
    xq = _quantize_act(x, xqp)
    is_last = lambda idx: idx == len(steps) - 1
    for si, (kind, key, layer, fuse_relu) in enumerate(steps):
        if kind == "conv":
            y = _qconv_step(layer, key, qenc, xq, xqp)
            if fuse_relu:
                y = np.maximum(y, 0)
            xqp = next(qps)
            if is_last(si):
                return y.astype(np.float32)
            xq = _quantize_act(y, xqp)
        elif kind == "residual":
            skip = _dequantize_act(xq, xqp)
            h = np.maximum(_qconv_step(layer.conv1, key + ("c1",), qenc, xq, xqp), 0)
            hqp = next(qps)
            hq = _quantize_act(h, hqp)
            y = np.maximum(_qconv_step(layer.conv2, key + ("c2",), qenc, hq, hqp) + skip, 0)
            xqp = next(qps)
            if is_last(si):
                return y.astype(np.float32)
            xq = _quantize_act(y, xqp)
        elif kind == "gap":
            y = _dequantize_act(xq, xqp).mean(axis=(1, 2))
            xqp = next(qps)
            if is_last(si):
                return y.astype(np.float32)
            xq = _quantize_act(y, xqp)
        elif kind == "relu":
            y = np.maximum(_dequantize_act(xq, xqp), 0)
            xqp = next(qps)
            if is_last(si):
                return y.astype(np.float32)
            xq = _quantize_act(y, xqp)
    raise EncoderError("empty architecture")
