"""Off-the-grid NP-PROV and the ConvCNP baseline for 1-D regression tasks.

Both models project the context set onto a uniform grid with an RBF set
convolution, run a UNet on the grid, and read predictions back at the target
positions. NP-PROV adds a self-correlation autoencoder over the context set
and derives its standard deviation from a second pass whose inputs are
positions only; ConvCNP reads mean and std from the same value-bearing
encoding.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from . import rng as _rng
from . import tensor as T
from .taskgen import Task
from .unet import init_unet, unet_apply

SIGMA_FLOOR = 1e-3
DENSITY_EPS = 1e-8
UNET_LEVELS = 6
# The context self-kernel must be close to the identity for the linear
# autoencoder to reconstruct y; start it well below the grid spacing.
SELF_SCALE_INIT = 1e-3

MODEL_KINDS = ("np-prov", "convcnp")


@dataclass(frozen=True)
class GridSpec:
    points_per_unit: int = 64
    margin: float = 0.1

    def __post_init__(self):
        if self.points_per_unit < 1:
            raise ValueError("points_per_unit must be positive")
        if self.margin < 0:
            raise ValueError("margin must be nonnegative")


@dataclass(frozen=True)
class Architecture:
    """Layer widths. Defaults follow the documented desk configuration."""
    unet_base: int = 16
    kernel_size: int = 5
    self_channels: int = 8      # psi_E output
    latent_channels: int = 16   # psi_t output / UNet input
    unet_out_channels: int = 16
    grid_self_channels: int = 8  # psi_tt output
    normalize_decoder: bool = True


@dataclass
class Prediction:
    mean: np.ndarray
    std: np.ndarray
    recon_loss: float = 0.0


def build_grid(x_all, spec: GridSpec = GridSpec(), multiple: int = 2**UNET_LEVELS) -> np.ndarray:
    """Uniform grid over ``[min - margin, max + margin]`` centred on the data.

    The length is rounded up to a multiple of ``multiple`` (and is at least
    ``2 * multiple``) so every UNet level halves evenly.
    """
    x_all = np.asarray(x_all, dtype=np.float64).reshape(-1)
    if x_all.size == 0:
        raise ValueError("build_grid needs at least one position")
    lo, hi = x_all.min() - spec.margin, x_all.max() + spec.margin
    ppu = spec.points_per_unit
    n = math.ceil((hi - lo) * ppu - 1e-9) + 1
    n = max(2 * multiple, multiple * math.ceil(n / multiple))
    mid = 0.5 * (lo + hi)
    return mid + (np.arange(n) - 0.5 * (n - 1)) / ppu


def _sq_dist(a, b, dtype) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 1)
    b = np.asarray(b, dtype=np.float64).reshape(1, -1)
    return ((a - b) ** 2).astype(dtype)


def setconv_kernel(a, b, log_scale) -> T.Tensor:
    """RBF weights ``exp(-(a_i - b_j)^2 / (2 l^2))`` with ``l = exp(log_scale)``."""
    log_scale = T.as_tensor(log_scale)
    inv_var = T.exp(T.mul(log_scale, -2.0))
    return T.exp(T.mul(_sq_dist(a, b, log_scale.dtype), T.mul(inv_var, -0.5)))


def _col(x, dtype) -> np.ndarray:
    return np.asarray(x, dtype=dtype).reshape(-1)


def _affine(p: Mapping, name: str, x) -> T.Tensor:
    return T.affine_pointwise(x, p[f"{name}.w"], p[f"{name}.b"])


def self_corr_autoencode(x, y, params: Mapping):
    """Self-correlation autoencoder over the context set.

    Returns ``(h_self [C, N, N], y_recon [N], recon_loss)`` with
    ``h_self[:, n, i] = psi_E(K[n, i] * y[n])``.
    """
    k = setconv_kernel(x, x, params["scale.self"])
    y = T.as_tensor(_col(y, k.dtype))
    ky = T.mul(k, T.reshape(y, (-1, 1)))
    h_self = _affine(params, "psi_E", T.reshape(ky, (1,) + ky.shape))
    pooled = T.sum(T.mul(h_self, k), axis=1)  # sum over n -> [C, N]
    y_rec = T.reshape(_affine(params, "psi_D", pooled), (-1,))
    resid = T.sub(y, y_rec)
    recon = T.mean(T.mul(resid, resid))
    return h_self, y_rec, recon


def self_corr_summary(h_self: T.Tensor) -> T.Tensor:
    """``(1/N^2) sum_{n,i} h_self`` per channel, shape ``[C, 1]``."""
    return T.reshape(T.mean(T.reshape(h_self, (h_self.shape[0], -1)), axis=1), (-1, 1))


def _positional_self_term(x, params: Mapping) -> T.Tensor:
    # Self-correlation summary with the value factor removed: psi_E(K[n, i]).
    k = setconv_kernel(x, x, params["scale.self"])
    return self_corr_summary(_affine(params, "psi_E", T.reshape(k, (1,) + k.shape)))


def density_and_value(x, values, x_grid, log_scale):
    """SetConv projection: density channel and density-normalised value channel, each ``[T]``."""
    kt = setconv_kernel(x_grid, x, log_scale)  # [T, N]
    values = T.as_tensor(values) if isinstance(values, T.Tensor) else T.as_tensor(_col(values, kt.dtype))
    density = T.sum(kt, axis=1)
    weighted = T.reshape(T.matmul(kt, T.reshape(values, (-1, 1))), (-1,))
    ok = (density.data > DENSITY_EPS).astype(kt.dtype)
    safe = T.add(T.mul(density, ok), 1.0 - ok)
    normalized = T.mul(T.div(weighted, safe), ok)
    return density, normalized


def cross_corr_encode(x, values, x_grid, self_term, params: Mapping) -> T.Tensor:
    """Fuse the grid projection of ``values`` with the self-correlation summary.

    ``self_term`` is ``[C, 1]`` (broadcast over the grid) or ``None`` for the
    baseline encoder. Returns ``[C', T]``.
    """
    density, normalized = density_and_value(x, values, x_grid, params["scale.enc"])
    chans = [T.reshape(density, (1, -1)), T.reshape(normalized, (1, -1))]
    if self_term is not None:
        ones = np.ones((1, len(x_grid)), dtype=density.dtype)
        chans.insert(0, T.mul(self_term, ones))
    return _affine(params, "psi_t", T.concat(chans, axis=0))


def _readout(r, x_grid, x_target, params: Mapping, normalize: bool) -> T.Tensor:
    k_star = setconv_kernel(x_grid, x_target, params["scale.dec"])  # [T, M]
    out = T.matmul(r, k_star)
    if normalize:
        out = T.div(out, T.reshape(T.sum(k_star, axis=0), (1, -1)))
    return out


def mean_head(r, x_target, x_grid, params: Mapping, normalize: bool = True) -> T.Tensor:
    """Target means ``psi*_mu(sum_j r_j K*_jm)``, shape ``[M]``."""
    z = _readout(r, x_grid, x_target, params, normalize)
    return T.reshape(_affine(params, "psi_mu", z), (-1,))


def std_from_features(z: T.Tensor, params: Mapping) -> T.Tensor:
    return T.add(T.softplus(T.reshape(_affine(params, "psi_sigma", z), (-1,))), SIGMA_FLOOR)


def variance_path(x_context, x_grid, x_target, params: Mapping, normalize: bool = True) -> T.Tensor:
    """Target standard deviations computed from positions alone, shape ``[M]``.

    Context values never enter: the per-context inputs of the second
    encoder pass are ``psi(sum_j K_t[j, i])``.
    """
    kt = setconv_kernel(x_grid, x_context, params["scale.enc"])  # [T, N]
    h_pos = T.reshape(_affine(params, "psi_pos", T.reshape(T.sum(kt, axis=0), (1, -1))), (-1,))
    h = cross_corr_encode(x_context, h_pos, x_grid, _positional_self_term(x_context, params), params)
    r = unet_apply(h, params, "unet", UNET_LEVELS)
    ktt = setconv_kernel(x_grid, x_grid, params["scale.enc"])
    h_grid_self = _affine(params, "psi_tt", T.reshape(T.sum(ktt, axis=0), (1, -1)))
    z = _readout(T.concat([r, h_grid_self], axis=0), x_grid, x_target, params, normalize)
    return std_from_features(z, params)


def _point_affine(gen, dtype, c_out, c_in, bound=None):
    bound = np.sqrt(1.0 / c_in) if bound is None else bound
    return gen.uniform(-bound, bound, (c_out, c_in)).astype(dtype), np.zeros(c_out, dtype=dtype)


@dataclass
class OffGridModel:
    """A parameter store plus the forward pass for one of :data:`MODEL_KINDS`."""

    kind: str = "np-prov"
    grid: GridSpec = field(default_factory=GridSpec)
    arch: Architecture = field(default_factory=Architecture)
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")

    @classmethod
    def create(cls, kind: str = "np-prov", seed: int = 0, grid: GridSpec | None = None,
               arch: Architecture | None = None, dtype=np.float64) -> "OffGridModel":
        model = cls(kind, grid or GridSpec(), arch or Architecture())
        model.params = model.init_params(seed, dtype)
        return model

    def init_params(self, seed: int, dtype=np.float64) -> dict[str, np.ndarray]:
        a = self.arch
        gen = _rng.stream(seed, _rng.INIT)
        log_l = np.log(2.0 / self.grid.points_per_unit)
        p: dict[str, np.ndarray] = {
            "scale.enc": np.array([log_l], dtype=dtype),
            "scale.dec": np.array([log_l], dtype=dtype),
        }
        fuse_in = 2
        if self.kind == "np-prov":
            p["scale.self"] = np.array([np.log(SELF_SCALE_INIT)], dtype=dtype)
            p["psi_E.w"], p["psi_E.b"] = _point_affine(gen, dtype, a.self_channels, 1)
            # Start the decoder at the left inverse of the encoder so the
            # autoencoder begins near the identity.
            p["psi_D.w"] = np.linalg.pinv(p["psi_E.w"].astype(np.float64)).astype(dtype)
            p["psi_D.b"] = np.zeros(1, dtype=dtype)
            p["psi_pos.w"], p["psi_pos.b"] = _point_affine(gen, dtype, 1, 1)
            p["psi_tt.w"], p["psi_tt.b"] = _point_affine(gen, dtype, a.grid_self_channels, 1)
            fuse_in += a.self_channels
        p["psi_t.w"], p["psi_t.b"] = _point_affine(gen, dtype, a.latent_channels, fuse_in)
        p.update(init_unet(gen, "unet", a.latent_channels, a.unet_out_channels, UNET_LEVELS,
                           a.unet_base, a.kernel_size, 1, dtype))
        head_in = a.latent_channels + a.unet_out_channels
        p["psi_mu.w"], p["psi_mu.b"] = _point_affine(gen, dtype, 1, head_in)
        sigma_in = head_in + (a.grid_self_channels if self.kind == "np-prov" else 0)
        p["psi_sigma.w"], p["psi_sigma.b"] = _point_affine(gen, dtype, 1, sigma_in)
        return p

    @property
    def dtype(self):
        return self.params["scale.enc"].dtype

    def astype(self, dtype) -> "OffGridModel":
        return replace(self, params={k: v.astype(dtype) for k, v in self.params.items()})

    def tensors(self, trainable: bool = False) -> dict[str, T.Tensor]:
        if trainable:
            return {k: T.param(v, name=k) for k, v in self.params.items()}
        return {k: T.Tensor(v, name=k) for k, v in self.params.items()}

    def grid_for(self, task: Task) -> np.ndarray:
        return build_grid(np.concatenate([task.x_context, task.x_target]), self.grid)

    def forward(self, task: Task, params: Mapping | None = None, x_grid=None):
        """Differentiable forward pass; returns ``(mean, std, recon_loss)`` tensors.

        ``x_grid`` overrides the grid built from the task's positions.
        """
        params = self.tensors() if params is None else params
        x_grid = self.grid_for(task) if x_grid is None else np.asarray(x_grid, dtype=np.float64)
        norm = self.arch.normalize_decoder
        if self.kind == "convcnp":
            h = cross_corr_encode(task.x_context, task.y_context, x_grid, None, params)
            r = unet_apply(h, params, "unet", UNET_LEVELS)
            z = _readout(r, x_grid, task.x_target, params, norm)
            mean = T.reshape(_affine(params, "psi_mu", z), (-1,))
            return mean, std_from_features(z, params), T.as_tensor(np.zeros((), self.dtype))
        h_self, _, recon = self_corr_autoencode(task.x_context, task.y_context, params)
        h = cross_corr_encode(task.x_context, task.y_context, x_grid, self_corr_summary(h_self), params)
        r = unet_apply(h, params, "unet", UNET_LEVELS)
        mean = mean_head(r, task.x_target, x_grid, params, norm)
        std = variance_path(task.x_context, x_grid, task.x_target, params, norm)
        return mean, std, recon

    def predict(self, task: Task, x_grid=None) -> Prediction:
        mean, std, recon = self.forward(task, x_grid=x_grid)
        return Prediction(mean.data.astype(np.float64), std.data.astype(np.float64), float(recon.data))

    def predict_std(self, x_context, x_target) -> np.ndarray:
        """NP-PROV standard deviations; the signature admits no values."""
        if self.kind != "np-prov":
            raise TypeError("only NP-PROV has a position-only variance path")
        x_grid = build_grid(np.concatenate([np.ravel(x_context), np.ravel(x_target)]), self.grid)
        std = variance_path(x_context, x_grid, x_target, self.tensors(), self.arch.normalize_decoder)
        return std.data.astype(np.float64)


def predict(model: OffGridModel, task: Task) -> Prediction:
    return model.predict(task)


def convcnp_predict(model: OffGridModel, task: Task) -> Prediction:
    if model.kind != "convcnp":
        raise TypeError(f"expected a ConvCNP model, got {model.kind!r}")
    return model.predict(task)
