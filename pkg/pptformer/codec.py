import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from pptformer.contourlet import contourlet_texture
from pptformer.errors import ShapeError


@dataclass
class PerspectiveDescriptor:
    """Point-ness map (B, 1, h, w) in [0, 1] and unit-norm descriptors (B, D, h, w)."""

    pointness: torch.Tensor
    descriptors: torch.Tensor

    @property
    def combined(self):
        return torch.cat([self.pointness, self.descriptors], dim=1)

    @property
    def grid(self):
        return tuple(self.pointness.shape[-2:])


def texture_channel_count(channels, texture_levels, dfb_depth):
    if texture_levels == 0:
        return channels
    return texture_levels * 2 ** dfb_depth * channels


def feature_reconstruction_error(reconstruction, target):
    """Euclidean norm of reconstruction - target over all elements of each sample, shape (B,)."""
    if reconstruction.shape != target.shape:
        raise ShapeError(f"reconstruction {tuple(reconstruction.shape)} does not match target {tuple(target.shape)}")
    return (reconstruction - target).flatten(1).norm(dim=1)


class PerspectiveCodec(nn.Module):
    """Perspective encoder E_p and all-MLP decoder D_p of one PPTFormer block.

    The encoder projects the feature map to a few channels, extracts the contourlet
    texture, runs a stride-2 stem and two parallel 1x1 heads: a sigmoid point-ness
    head and an L2-normalized descriptor head. The decoder maps every descriptor
    position to a stride x stride patch of the feature map.
    """

    def __init__(
        self,
        channels,
        texture_channels=2,
        texture_levels=2,
        dfb_depth=3,
        stem_channels=12,
        descriptor_dim=32,
        decoder_hidden=24,
        stride=2,
    ):
        super().__init__()
        self.channels = channels
        self.texture_levels = texture_levels
        self.dfb_depth = dfb_depth
        self.descriptor_dim = descriptor_dim
        self.stride = stride
        self.project = nn.Conv2d(channels, texture_channels, kernel_size=1)
        self.stem = nn.Conv2d(
            texture_channel_count(texture_channels, texture_levels, dfb_depth),
            stem_channels, kernel_size=3, stride=stride, padding=1,
        )
        self.point_head = nn.Conv2d(stem_channels, 1, kernel_size=1)
        self.descriptor_head = nn.Conv2d(stem_channels, descriptor_dim, kernel_size=1)
        self.decoder = nn.Sequential(
            nn.Linear(descriptor_dim + 1, decoder_hidden),
            nn.GELU(),
            nn.Linear(decoder_hidden, decoder_hidden),
            nn.GELU(),
            nn.Linear(decoder_hidden, channels * stride * stride),
        )
        self.shuffle = nn.PixelShuffle(stride)

    def grid_for(self, size):
        return tuple(math.ceil(s / self.stride) for s in size)

    def encode(self, x):
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"codec expects (B, {self.channels}, H, W) features, got {tuple(x.shape)}")
        texture = contourlet_texture(self.project(x), self.texture_levels, self.dfb_depth)
        h = F.gelu(self.stem(texture))
        pointness = torch.sigmoid(self.point_head(h))
        descriptors = F.normalize(self.descriptor_head(h), p=2, dim=1)
        return PerspectiveDescriptor(pointness, descriptors)

    def flatten(self, p):
        """Row-major, channels-last vector of p per sample, shape (B, h*w*(D+1))."""
        combined = p.combined if isinstance(p, PerspectiveDescriptor) else p
        return combined.permute(0, 2, 3, 1).flatten(1)

    def unflatten(self, v, grid):
        h, w = grid
        expected = h * w * (self.descriptor_dim + 1)
        if v.dim() != 2 or v.shape[1] != expected:
            raise ShapeError(f"flat descriptor must have {expected} values per sample for a {h}x{w} grid, got {tuple(v.shape)}")
        return v.reshape(v.shape[0], h, w, self.descriptor_dim + 1).permute(0, 3, 1, 2)

    def decode(self, p, size):
        """Reconstruct a (B, C, H, W) feature map from p (descriptor, combined map or flat vector)."""
        if isinstance(p, PerspectiveDescriptor):
            combined = p.combined
        elif p.dim() == 2:
            combined = self.unflatten(p, self.grid_for(size))
        else:
            combined = p
        if combined.dim() != 4 or combined.shape[1] != self.descriptor_dim + 1:
            raise ShapeError(f"descriptor must have {self.descriptor_dim + 1} channels, got {tuple(combined.shape)}")
        h, w = size
        if combined.shape[-2:] != self.grid_for(size):
            raise ShapeError(f"descriptor grid {tuple(combined.shape[-2:])} cannot reconstruct a {h}x{w} map")
        patches = self.decoder(combined.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)
        return self.shuffle(patches)[..., :h, :w]

    def reconstruction_loss(self, x, p):
        """Batch mean of |D_p(p) - F|_2."""
        return feature_reconstruction_error(self.decode(p, x.shape[-2:]), x).mean()

    def forward(self, x):
        p = self.encode(x)
        return p, self.reconstruction_loss(x, p)
