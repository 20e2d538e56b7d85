"""Differentiable image and latent distances.

``d1`` is the input-space distance (MS-SSIM loss plus mean absolute error);
``d2`` is the latent-space distance (root-mean-square difference). Both accept
arrays or graph nodes and return a scalar :class:`~disguise.diffcore.Node`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import ContractError, Node

STANDARD_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def _scale_weights(scales: int) -> tuple[float, ...]:
    w = np.asarray(STANDARD_WEIGHTS[:scales], dtype=np.float64)
    return tuple(float(v) for v in w / w.sum())


@dataclass(frozen=True)
class MsSsimParams:
    scales: int = 3
    weights: tuple[float, ...] = field(default_factory=lambda: _scale_weights(3))
    window: int = 11
    sigma: float = 1.5
    c1: float = 0.01**2
    c2: float = 0.03**2

    def __post_init__(self):
        if self.scales < 1:
            raise ContractError("MS-SSIM needs at least one scale")
        if len(self.weights) != self.scales:
            raise ContractError(f"{len(self.weights)} weights given for {self.scales} scales")
        if any(w <= 0 for w in self.weights) or abs(sum(self.weights) - 1.0) > 1e-9:
            raise ContractError("MS-SSIM weights must be positive and sum to 1")

    @property
    def min_side(self) -> int:
        return self.window * 2 ** (self.scales - 1)

    @classmethod
    def with_scales(cls, scales: int) -> "MsSsimParams":
        return cls(scales=scales, weights=_scale_weights(scales))

    @classmethod
    def for_size(cls, height: int, width: int, max_scales: int = 3) -> "MsSsimParams":
        """Largest scale count (up to ``max_scales``) the image size supports."""
        side = min(height, width)
        for s in range(max_scales, 0, -1):
            if side >= 11 * 2 ** (s - 1):
                return cls.with_scales(s)
        raise ContractError(f"image side {side} is smaller than the 11-pixel SSIM window")


def _hw(x: Node) -> tuple[int, int]:
    return x.shape[-3], x.shape[-2]


def ms_ssim_per_image(x, y, params: MsSsimParams | None = None) -> Node:
    """MS-SSIM per image and channel: ``(C,)`` for one image, ``(N, C)`` for a batch."""
    x, y = dc.const(x), dc.const(y)
    if x.shape != y.shape:
        raise ContractError(f"ms_ssim: dims {x.shape} and {y.shape} differ")
    if x.value.ndim not in (3, 4):
        raise ContractError(f"ms_ssim: expected image dims, got {x.shape}")
    h, w = _hw(x)
    p = params if params is not None else MsSsimParams.for_size(h, w)
    if min(h, w) < p.min_side:
        raise ContractError(
            f"ms_ssim: {h}x{w} image too small for {p.scales} scales (min side {p.min_side})")
    kern = dc.gaussian_kernel1d(p.window, p.sigma)
    result = None
    for j in range(p.scales):
        mu_x = dc.gaussian_blur(x, kern)
        mu_y = dc.gaussian_blur(y, kern)
        mu_xx, mu_yy, mu_xy = dc.square(mu_x), dc.square(mu_y), dc.mul(mu_x, mu_y)
        s_xx = dc.sub(dc.gaussian_blur(dc.square(x), kern), mu_xx)
        s_yy = dc.sub(dc.gaussian_blur(dc.square(y), kern), mu_yy)
        s_xy = dc.sub(dc.gaussian_blur(dc.mul(x, y), kern), mu_xy)
        cs_map = dc.div(dc.add_scalar(dc.scalar_mul(s_xy, 2.0), p.c2),
                        dc.add_scalar(dc.add(s_xx, s_yy), p.c2))
        last = j == p.scales - 1
        if last:
            lum = dc.div(dc.add_scalar(dc.scalar_mul(mu_xy, 2.0), p.c1),
                         dc.add_scalar(dc.add(mu_xx, mu_yy), p.c1))
            term = dc.spatial_mean(dc.mul(lum, cs_map))
        else:
            term = dc.spatial_mean(cs_map)
        factor = term if p.weights[j] == 1.0 else dc.spow(term, p.weights[j])
        result = factor if result is None else dc.mul(result, factor)
        if not last:
            x = dc.downsample_avg2(dc.gaussian_blur(x, kern, mode="same"))
            y = dc.downsample_avg2(dc.gaussian_blur(y, kern, mode="same"))
    return result


def ms_ssim(x, y, params: MsSsimParams | None = None) -> Node:
    """Channel- (and batch-) averaged MS-SSIM, a scalar in [-1, 1]."""
    return dc.mean(ms_ssim_per_image(x, y, params))


def d1(a, b, params: MsSsimParams | None = None) -> Node:
    """``(1 - ms_ssim(a, b)) + mean|a - b|``."""
    a, b = dc.const(a), dc.const(b)
    if a.shape != b.shape:
        raise ContractError(f"d1: dims {a.shape} and {b.shape} differ")
    ssim_loss = dc.add_scalar(dc.scalar_mul(ms_ssim(a, b, params), -1.0), 1.0)
    return dc.add(ssim_loss, dc.mean(dc.abs_(dc.sub(a, b))))


def d2(za, zb) -> Node:
    """Element-RMS latent distance ``sqrt(mean((za - zb)**2) + 1e-12)``."""
    za, zb = dc.const(za), dc.const(zb)
    if za.shape != zb.shape:
        raise ContractError(f"d2: dims {za.shape} and {zb.shape} differ")
    return dc.sqrt_eps(dc.mean(dc.square(dc.sub(za, zb))))
