import math
from dataclasses import dataclass
from functools import lru_cache
from typing import List

import torch
import torch.nn.functional as F

from pptformer.errors import ConfigError, ShapeError
from pptformer.numerics import DTYPE, conv2d_same, filter2d_same

# 5-tap binomial, applied separably
BINOMIAL = (1.0, 4.0, 6.0, 4.0, 1.0)
DESIGN_GRID = 64


@dataclass
class ContourletLevel:
    low_pass: torch.Tensor
    subbands: List[torch.Tensor]


@dataclass
class ContourletPyramid:
    levels: List[ContourletLevel]
    z: int

    @property
    def T(self):
        return len(self.levels)


def _binomial_kernel(dtype=DTYPE):
    k = torch.tensor(BINOMIAL, dtype=dtype) / 16.0
    return torch.outer(k, k)


def _normalized_blur(x, mask):
    """Blur x with the binomial kernel, renormalized by the blurred sample mask.

    Zero padding is used at the border; dividing by the blurred mask makes the
    filter average only over real samples, so constants pass through unchanged.
    """
    kernel = _binomial_kernel(x.dtype)
    return filter2d_same(x, kernel) / filter2d_same(mask, kernel)


def _check_extent(x):
    if x.dim() < 2:
        raise ShapeError(f"expected a tensor with spatial dimensions, got shape {tuple(x.shape)}")
    h, w = x.shape[-2:]
    if h < 2 or w < 2:
        raise ShapeError(f"Laplacian pyramid needs spatial extents >= 2, got {h}x{w}")


def _expand(low, size):
    h, w = size
    up = low.new_zeros(*low.shape[:-2], h, w)
    up[..., ::2, ::2] = low
    mask = low.new_zeros(h, w)
    mask[::2, ::2] = 1.0
    return _normalized_blur(up, mask)


def lp_decompose(x):
    """One Laplacian pyramid step on the last two dimensions of x.

    Returns:
        low: blurred and 2x decimated x, spatial size ceil(H/2) x ceil(W/2)
        high: full-resolution residual x - expand(low)
    """
    _check_extent(x)
    blurred = _normalized_blur(x, x.new_ones(x.shape[-2:]))
    low = blurred[..., ::2, ::2]
    high = x - _expand(low, x.shape[-2:])
    return low, high


def lp_reconstruct(low, high):
    _check_extent(high)
    h, w = high.shape[-2:]
    if low.shape[:-2] != high.shape[:-2] or tuple(low.shape[-2:]) != (math.ceil(h / 2), math.ceil(w / 2)):
        raise ShapeError(f"low {tuple(low.shape)} is not one pyramid step below high {tuple(high.shape)}")
    return _expand(low, (h, w)) + high


def _check_depth(z):
    if not isinstance(z, int) or not 1 <= z <= 4:
        raise ConfigError(f"directional tree depth z must be an integer in [1, 4], got {z}")


@lru_cache(maxsize=None)
def _leaf_kernels(z, size):
    n = DESIGN_GRID
    freqs = torch.fft.fftfreq(n, dtype=DTYPE)
    wy, wx = torch.meshgrid(freqs, freqs, indexing="ij")
    # orientation of the frequency vector, folded to [-45, 135)
    angle = torch.rad2deg(torch.atan2(wy, wx))
    width = 180.0 / 2 ** z
    hann = torch.hann_window(size + 2, periodic=False, dtype=DTYPE)[1:-1]
    taper = torch.outer(hann, hann)
    centre, radius = n // 2, size // 2
    kernels = []
    for leaf in range(2 ** z):
        middle = -45.0 + (leaf + 0.5) * width
        d = torch.remainder(angle - middle + 90.0, 180.0) - 90.0
        # neighbouring cos^2 windows sum to one
        window = torch.where(d.abs() < width, torch.cos(math.pi * d / (2 * width)) ** 2, torch.zeros_like(d))
        window[0, 0] = 0.0
        kernel = torch.fft.fftshift(torch.fft.ifft2(window).real)
        kernel = kernel[centre - radius:centre + radius + 1, centre - radius:centre + radius + 1] * taper
        kernels.append(kernel - kernel.mean())
    return torch.stack(kernels)


def directional_filters(z, size=9):
    """Leaf kernels of the angular bisection tree of depth z, shape (2^z, size, size).

    Leaf k passes frequency orientations in [-45 + k*180/2^z, -45 + (k+1)*180/2^z) degrees,
    so the first half of the leaves holds vertical details and the second half
    horizontal ones.
    """
    _check_depth(z)
    if size % 2 == 0 or size < 3:
        raise ConfigError(f"directional filter size must be odd and >= 3, got {size}")
    return _leaf_kernels(z, size).clone()


def dfb_decompose(high, z, size=9):
    """Undecimated directional filter bank; returns 2^z subbands shaped like high."""
    _check_depth(z)
    _check_extent(high)
    # (2^z, size, size) -> (size, size, 1, 2^z)
    kernels = directional_filters(z, size).to(high.dtype).permute(1, 2, 0).unsqueeze(2)
    lead, (h, w) = high.shape[:-2], high.shape[-2:]
    planes = high.reshape(-1, h, w, 1)
    ones = high.new_ones(1, h, w, 1)
    response = conv2d_same(planes, kernels)
    magnitude = conv2d_same(planes, kernels.abs())
    # remove the DC leak the zero border introduces so constants map to exactly zero
    support = conv2d_same(ones, kernels)
    support_abs = conv2d_same(ones, kernels.abs())
    subbands = response - support * magnitude / support_abs
    return [subbands[..., k].reshape(*lead, h, w) for k in range(2 ** z)]


def required_extent(T):
    """Smallest spatial extent that supports T pyramid levels."""
    if T < 0:
        raise ConfigError(f"number of contourlet levels must be >= 0, got {T}")
    return 1 if T == 0 else 2 ** (T - 1) + 1


def contourlet_pyramid(x, T, z):
    if T < 0:
        raise ConfigError(f"number of contourlet levels must be >= 0, got {T}")
    _check_depth(z)
    h, w = x.shape[-2:]
    if min(h, w) < required_extent(T):
        raise ConfigError(f"{h}x{w} input is too small for {T} contourlet levels (needs >= {required_extent(T)})")
    levels = []
    current = x
    for _ in range(T):
        low, high = lp_decompose(current)
        levels.append(ContourletLevel(low_pass=low, subbands=dfb_decompose(high, z)))
        current = low
    return ContourletPyramid(levels=levels, z=z)


def contourlet_texture(x, T, z):
    """Texture feature of a (..., C, H, W) map: T * 2^z * C channels on the H x W grid.

    Each level contributes its 2^z subbands concatenated along channels (subband
    major); coarser levels are bilinearly upsampled to the finest grid. T = 0
    returns x unchanged.
    """
    if x.dim() < 3:
        raise ShapeError(f"contourlet_texture expects (..., C, H, W), got shape {tuple(x.shape)}")
    if T == 0:
        return x
    pyramid = contourlet_pyramid(x, T, z)
    h, w = x.shape[-2:]
    lead = x.shape[:-3]
    features = []
    for level in pyramid.levels:
        stacked = torch.cat(level.subbands, dim=-3)
        if stacked.shape[-2:] != (h, w):
            flat = stacked.reshape(-1, *stacked.shape[-3:])
            flat = F.interpolate(flat, size=(h, w), mode="bilinear", align_corners=False)
            stacked = flat.reshape(*lead, *flat.shape[-3:])
        features.append(stacked)
    return torch.cat(features, dim=-3)
