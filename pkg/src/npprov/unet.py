"""Strided UNet with skip concatenation, for 1-D grids and 2-D images."""
from __future__ import annotations

from typing import Mapping

import numpy as np

from . import tensor as T

_CONV = {1: (T.conv1d, T.conv_transpose1d), 2: (T.conv2d, T.conv_transpose2d)}


def unet_channels(levels: int, base: int) -> list[int]:
    return [base * 2**i for i in range(levels)]


def init_unet(gen: np.random.Generator, prefix: str, in_channels: int, out_channels: int,
              levels: int, base: int, kernel: int, nd: int, dtype=np.float64) -> dict[str, np.ndarray]:
    """He-uniform filters, bound ``sqrt(6 / fan_in)``, and zero biases.

    Every layer but the last feeds a ReLU; the narrower ``sqrt(1/fan_in)``
    bound shrinks the signal by about 2.5x per level, which left the deep
    levels nearly silent early in training.
    """
    chans = unet_channels(levels, base)
    ks = (kernel,) * nd
    params = {}
    c_prev = in_channels
    for i, c in enumerate(chans, 1):
        bound = np.sqrt(6.0 / (c_prev * kernel**nd))
        params[f"{prefix}.down{i}.w"] = gen.uniform(-bound, bound, (c, c_prev) + ks).astype(dtype)
        params[f"{prefix}.down{i}.b"] = np.zeros(c, dtype=dtype)
        c_prev = c
    for i in range(levels, 0, -1):
        c_in = chans[i - 1] if i == levels else 2 * chans[i - 1]
        c_out = chans[i - 2] if i > 1 else out_channels
        bound = np.sqrt(6.0 / (c_in * kernel**nd))
        params[f"{prefix}.up{i}.w"] = gen.uniform(-bound, bound, (c_in, c_out) + ks).astype(dtype)
        params[f"{prefix}.up{i}.b"] = np.zeros(c_out, dtype=dtype)
    return params


def _bias(b: T.Tensor, nd: int) -> T.Tensor:
    return T.reshape(b, (-1,) + (1,) * nd)


def unet_apply(h, params: Mapping, prefix: str, levels: int, nd: int = 1) -> T.Tensor:
    """Apply the UNet to ``h`` of shape ``[C, *S]`` (or ``[B, C, *S]``).

    Every spatial size must be divisible by ``2**levels``. The result is the
    input concatenated with the last decoder layer along the channel axis,
    so it has ``C + out_channels`` channels.
    """
    conv, convt = _CONV[nd]
    h = T.as_tensor(h)
    spatial = h.shape[-nd:]
    if any(n % 2**levels for n in spatial):
        raise T.ShapeError(f"unet: spatial shape {spatial} not divisible by {2**levels}")
    kernel = params[f"{prefix}.down1.w"].shape[-1]
    pad = (kernel - 1) // 2
    ch_axis = h.ndim - nd - 1
    inputs = h
    skips = []
    for i in range(1, levels + 1):
        h = T.relu(conv(h, params[f"{prefix}.down{i}.w"], 2, pad) + _bias(params[f"{prefix}.down{i}.b"], nd))
        skips.append(h)
    for i in range(levels, 0, -1):
        if i < levels:
            h = T.concat([h, skips[i - 1]], axis=ch_axis)
        h = convt(h, params[f"{prefix}.up{i}.w"], 2, pad, 1) + _bias(params[f"{prefix}.up{i}.b"], nd)
        if i > 1:
            h = T.relu(h)
    return T.concat([inputs, h], axis=ch_axis)
