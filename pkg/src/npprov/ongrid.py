"""On-the-grid NP-PROV for image inpainting.

Context is a binary mask ``M`` over the image (1 = revealed). The mean path
sees ``M`` and ``M * Y``; the variance path sees ``M`` only, so the predicted
standard deviation cannot depend on pixel values.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import rng as _rng
from . import tensor as T
from .kernels import LOG_2PI
from .offgrid import SIGMA_FLOOR
from .taskgen import ParseError
from .unet import init_unet, unet_apply

IDX_MAGIC = 0x00000803
UNET_LEVELS = 4


@dataclass(frozen=True)
class MaskedImage:
    values: np.ndarray  # [C, H, W] in [0, 1]
    mask: np.ndarray    # [1, H, W], binary

    def __post_init__(self):
        if self.values.ndim != 3 or self.mask.shape != (1,) + self.values.shape[1:]:
            raise ValueError(f"mask {self.mask.shape} does not match image {self.values.shape}")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValueError("mask entries must be 0 or 1")


@dataclass(frozen=True)
class OnGridArchitecture:
    channels: int = 1
    self_channels: int = 8
    cross_channels: int = 8
    unet_base: int = 16
    unet_out_channels: int = 16
    target_channels: int = 8
    kernel_size: int = 3


def sample_mask(height: int, width: int, task_index: int, seed: int = 0) -> np.ndarray:
    """Reveal ``U{ceil(n/100)..floor(n/2)}`` distinct pixels, ``n = H*W``."""
    n = height * width
    g = _rng.stream(seed, task_index, _rng.MASK)
    count = int(g.integers(math.ceil(n / 100), n // 2 + 1))
    mask = np.zeros(n)
    mask[g.choice(n, size=count, replace=False)] = 1.0
    return mask.reshape(1, height, width)


def _batched(x) -> T.Tensor:
    x = T.as_tensor(x)
    return T.reshape(x, (1,) + x.shape) if x.ndim == 3 else x


def _conv(p: Mapping, name: str, x) -> T.Tensor:
    w = p[f"{name}.w"]
    pad = (w.shape[-1] - 1) // 2
    return T.add(T.conv2d(x, w, 1, pad), T.reshape(p[f"{name}.b"], (-1, 1, 1)))


def _pointwise(p: Mapping, name: str, x) -> T.Tensor:
    return T.affine_pointwise(x, p[f"{name}.w"], p[f"{name}.b"], batched=True)


def self_correlation(mask, params: Mapping):
    """``h_self = psi_E(M)``, its reconstruction of ``M`` and the per-pixel MSE."""
    mask = _batched(mask)
    h_self = _conv(params, "psi_E", mask)
    rec = _conv(params, "psi_D", h_self)
    resid = T.sub(mask, rec)
    return h_self, T.mean(T.mul(resid, resid))


def cnn(h, params: Mapping) -> T.Tensor:
    """Zero-pad to a multiple of ``2**levels``, run the 2-D UNet, crop back."""
    size = 2**UNET_LEVELS
    hh, ww = h.shape[-2:]
    ph, pw = (-hh) % size, (-ww) % size
    padded = T.pad(h, [(0, 0), (0, 0), (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)])
    out = unet_apply(padded, params, "unet", UNET_LEVELS, nd=2)
    return out[:, :, ph // 2: ph // 2 + hh, pw // 2: pw // 2 + ww]


def _mean_from(values, mask, h_self, params) -> T.Tensor:
    values, mask = _batched(values), _batched(mask)
    masked = T.mul(values, mask)
    h_cross = _conv(params, "psi", T.concat([mask, masked], axis=1))
    return _pointwise(params, "psi_mu", cnn(T.concat([h_self, h_cross], axis=1), params))


def _std_from(mask, h_self, params) -> T.Tensor:
    mask = _batched(mask)
    h_cross = _conv(params, "psi", T.concat([mask, mask], axis=1))
    r = cnn(T.concat([h_self, h_cross], axis=1), params)
    # Every pixel is a target: the target mask is all ones.
    target = np.ones((1, 1) + mask.shape[-2:], dtype=mask.dtype)
    h_target = _pointwise(params, "psi_ss", target)
    h_target = T.mul(h_target, np.ones((mask.shape[0], 1, 1, 1), dtype=mask.dtype))
    z = _pointwise(params, "psi_sigma", T.concat([r, h_target], axis=1))
    return T.add(T.softplus(z), SIGMA_FLOOR)


def ongrid_mean(img: MaskedImage, params: Mapping):
    """Mean image ``[C, H, W]`` and the mask reconstruction loss."""
    h_self, recon = self_correlation(img.mask, params)
    mu = _mean_from(img.values, img.mask, h_self, params)
    return mu[0], recon


def ongrid_variance(mask, params: Mapping) -> T.Tensor:
    """Standard deviation image ``[C, H, W]`` from the mask alone."""
    h_self, _ = self_correlation(mask, params)
    return _std_from(mask, h_self, params)[0]


def ongrid_loss(values, mu, sigma, recon) -> T.Tensor:
    """Negative per-pixel mean log-likelihood over the whole image, plus ``recon``."""
    values = T.as_tensor(np.asarray(values, dtype=T.as_tensor(mu).dtype))
    z = T.div(T.sub(values, mu), sigma)
    nll = T.mean(T.add(T.add(T.log(sigma), 0.5 * LOG_2PI), T.mul(T.mul(z, z), 0.5)))
    return T.add(nll, recon)


@dataclass
class OnGridModel:
    arch: OnGridArchitecture = field(default_factory=OnGridArchitecture)
    params: dict = field(default_factory=dict)

    kind = "np-prov-grid"

    @classmethod
    def create(cls, seed: int = 0, arch: OnGridArchitecture | None = None, dtype=np.float64):
        model = cls(arch or OnGridArchitecture())
        model.params = model.init_params(seed, dtype)
        return model

    def init_params(self, seed: int, dtype=np.float64) -> dict[str, np.ndarray]:
        a = self.arch
        gen = _rng.stream(seed, _rng.INIT)
        k = a.kernel_size
        p: dict[str, np.ndarray] = {}

        def conv(name, c_out, c_in, size):
            bound = np.sqrt(1.0 / (c_in * size * size))
            p[f"{name}.w"] = gen.uniform(-bound, bound, (c_out, c_in, size, size)).astype(dtype)
            p[f"{name}.b"] = np.zeros(c_out, dtype=dtype)

        def point(name, c_out, c_in):
            bound = np.sqrt(1.0 / c_in)
            p[f"{name}.w"] = gen.uniform(-bound, bound, (c_out, c_in)).astype(dtype)
            p[f"{name}.b"] = np.zeros(c_out, dtype=dtype)

        conv("psi_E", a.self_channels, 1, k)
        conv("psi_D", 1, a.self_channels, k)
        conv("psi", a.cross_channels, 2 * a.channels, k)
        p.update(init_unet(gen, "unet", a.self_channels + a.cross_channels, a.unet_out_channels,
                           UNET_LEVELS, a.unet_base, k, 2, dtype))
        head_in = a.self_channels + a.cross_channels + a.unet_out_channels
        point("psi_mu", a.channels, head_in)
        point("psi_ss", a.target_channels, 1)
        point("psi_sigma", a.channels, head_in + a.target_channels)
        return p

    @property
    def dtype(self):
        return self.params["psi_E.w"].dtype

    def tensors(self, trainable: bool = False) -> dict[str, T.Tensor]:
        if trainable:
            return {k: T.param(v, name=k) for k, v in self.params.items()}
        return {k: T.Tensor(v, name=k) for k, v in self.params.items()}

    def forward(self, values, mask, params: Mapping | None = None):
        """Batched forward pass over ``[B, C, H, W]`` values and ``[B, 1, H, W]`` masks."""
        params = self.tensors() if params is None else params
        values = np.asarray(values, dtype=self.dtype)
        mask = np.asarray(mask, dtype=self.dtype)
        h_self, recon = self_correlation(mask, params)
        mu = _mean_from(values, mask, h_self, params)
        sigma = _std_from(mask, h_self, params)
        return mu, sigma, recon

    def loss(self, values, mask, params: Mapping | None = None) -> T.Tensor:
        mu, sigma, recon = self.forward(values, mask, params)
        return ongrid_loss(values, mu, sigma, recon)

    def predict(self, img: MaskedImage):
        mu, sigma, recon = self.forward(img.values[None], img.mask[None])
        return mu.data[0].astype(np.float64), sigma.data[0].astype(np.float64), float(recon.data)

    def predict_std(self, mask) -> np.ndarray:
        return ongrid_variance(np.asarray(mask, dtype=self.dtype), self.tensors()).data.astype(np.float64)


# ---------------------------------------------------------------------------
# IDX image files

def load_idx_images(path) -> np.ndarray:
    """Read an unsigned-byte IDX image file as ``[N, 1, H, W]`` floats in [0, 1]."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise ParseError(f"{path}: truncated header at offset {len(raw)}")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != IDX_MAGIC:
        raise ParseError(f"{path}: bad magic 0x{magic:08x} at offset 0 (expected 0x{IDX_MAGIC:08x})")
    if len(raw) < 16:
        raise ParseError(f"{path}: truncated dimension header at offset {len(raw)}")
    n, h, w = struct.unpack(">III", raw[4:16])
    need = 16 + n * h * w
    if len(raw) < need:
        raise ParseError(f"{path}: truncated pixel data at offset {len(raw)} (expected {need} bytes)")
    if len(raw) > need:
        raise ParseError(f"{path}: {len(raw) - need} unexpected trailing bytes at offset {need}")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=n * h * w, offset=16)
    return (pixels.reshape(n, 1, h, w) / 255.0).astype(np.float64)


def write_idx_images(images, path) -> None:
    """Write ``[N, H, W]`` (or ``[N, 1, H, W]``) values in [0, 1] as an IDX file."""
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 4:
        arr = arr[:, 0]
    data = np.clip(np.rint(arr * 255), 0, 255).astype(np.uint8)
    n, h, w = data.shape
    Path(path).write_bytes(struct.pack(">IIII", IDX_MAGIC, n, h, w) + data.tobytes())
