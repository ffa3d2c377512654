"""CNN feature extractors, patch tokens and bilinear sampling at shape points.

Coordinates: a map of width W covers x in [-1, 1]; pixel column c has its
centre at x = (c + 0.5) * 2 / W - 1 (same for rows and y, y pointing down).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import TokenSet
from .autodiff import Conv2d, Linear, Module, Tensor, as_tensor


@dataclass
class FeatureMap:
    """(B, C, H, W) tensor plus the pixel <-> normalised coordinate mapping."""

    data: Tensor

    def __post_init__(self):
        self.data = as_tensor(self.data)
        if self.data.ndim != 4 or self.data.shape[2] < 2 or self.data.shape[3] < 2:
            raise ad.ShapeError("FeatureMap", self.data.shape, (None, None, 2, 2),
                                "expected (B, C, H, W) with H, W >= 2")

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def size(self) -> tuple:
        return self.data.shape[2], self.data.shape[3]

    def pixel_to_norm(self, rc):
        """(row, col) index pairs -> (x, y) centres."""
        rc = np.asarray(rc, dtype=np.float64)
        H, W = self.size
        return np.stack([(rc[..., 1] + 0.5) * 2.0 / W - 1.0, (rc[..., 0] + 0.5) * 2.0 / H - 1.0], -1)

    def norm_to_pixel(self, xy):
        """(x, y) -> fractional (row, col) in centre-aligned pixel units."""
        xy = np.asarray(xy, dtype=np.float64)
        H, W = self.size
        return np.stack([(xy[..., 1] + 1.0) * H / 2.0 - 0.5, (xy[..., 0] + 1.0) * W / 2.0 - 0.5], -1)


def _check_image(x: Tensor, multiple: int, where: str):
    if x.ndim != 4 or x.shape[1] != 1:
        raise ad.ShapeError(where, x.shape, (None, 1, None, None), "expected (B, 1, H, W)")
    H, W = x.shape[2:]
    if H != W:
        raise ad.ShapeError(where, x.shape, (H, H), "image must be square")
    if H % multiple or H & (H - 1):
        raise ad.ShapeError(where, x.shape, (multiple,),
                            f"side must be a power of two divisible by {multiple}")


def as_batch(image) -> Tensor:
    """(H, W), (1, H, W) or (B, 1, H, W) -> (B, 1, H, W) tensor."""
    x = as_tensor(image)
    if x.ndim == 2:
        x = x.reshape(1, 1, *x.shape)
    elif x.ndim == 3:
        x = x.reshape(x.shape[0], 1, *x.shape[1:]) if x.shape[0] != 1 else x.reshape(1, *x.shape)
    return x


class Backbone(Module):
    """Two conv groups: full-resolution features and quarter-side features."""

    def __init__(self, rng: np.random.Generator, c_high: int = 8, c_low: int = 32):
        self.hi1 = Conv2d(1, c_high, 3, rng)
        self.hi2 = Conv2d(c_high, c_high, 1, rng)
        mid = max(c_low // 4, 4)
        self.lo1 = Conv2d(1, mid, 3, rng, stride=2)
        self.lo2 = Conv2d(mid, c_low // 2, 3, rng, stride=2)
        self.lo3 = Conv2d(c_low // 2, c_low, 3, rng)
        self.c_high, self.c_low = c_high, c_low

    def forward(self, image):
        x = as_batch(image)
        _check_image(x, 4, "backbone_forward")
        hi = self.hi2(ad.relu(self.hi1(x)))
        lo = ad.relu(self.lo2(ad.relu(self.lo1(x))))
        lo = self.lo3(lo)
        return FeatureMap(lo), FeatureMap(hi)


def backbone_forward(image, backbone: Backbone):
    """(feature_low at 1/4 side, feature_high at full side)."""
    return backbone(image)


class UNet(Module):
    """Encoder at four sides (H, H/4, H/16, H/32 with the default pools); the decoder
    climbs back with skip concatenation.

    ``forward`` returns (decoder maps coarse to fine, logits with 12 channels
    at H). Channel 0 is background, 1..11 the objects.
    """

    def __init__(self, rng: np.random.Generator, widths=(8, 16, 32, 32), n_classes: int = 12,
                 pools=(4, 4, 2)):
        c1, c2, c3, c4 = widths
        self.widths = tuple(widths)
        self.pools = tuple(pools)
        self.e1a, self.e1b = Conv2d(1, c1, 3, rng), Conv2d(c1, c1, 3, rng)
        self.e2a, self.e2b = Conv2d(c1, c2, 3, rng), Conv2d(c2, c2, 3, rng)
        self.e3a, self.e3b = Conv2d(c2, c3, 3, rng), Conv2d(c3, c3, 3, rng)
        self.e4a, self.e4b = Conv2d(c3, c4, 3, rng), Conv2d(c4, c4, 3, rng)
        self.d3 = Conv2d(c4 + c3, c3, 3, rng)
        self.d2 = Conv2d(c3 + c2, c2, 3, rng)
        self.d1 = Conv2d(c2 + c1, c1, 3, rng)
        self.head = Conv2d(c1, n_classes, 1, rng)

    def encode(self, x):
        r = ad.relu
        f1 = r(self.e1b(r(self.e1a(x))))
        p1, p2, p3 = self.pools
        f2 = r(self.e2b(r(self.e2a(ad.max_pool2d(f1, p1)))))
        f3 = r(self.e3b(r(self.e3a(ad.max_pool2d(f2, p2)))))
        f4 = r(self.e4b(r(self.e4a(ad.max_pool2d(f3, p3)))))
        return f1, f2, f3, f4

    def forward(self, image):
        x = as_batch(image)
        p1, p2, p3 = self.pools
        _check_image(x, p1 * p2 * p3, "unet_forward")
        f1, f2, f3, f4 = self.encode(x)
        g3 = ad.relu(self.d3(ad.concat([ad.upsample_nearest(f4, p3), f3], 1)))
        g2 = ad.relu(self.d2(ad.concat([ad.upsample_nearest(g3, p2), f2], 1)))
        g1 = ad.relu(self.d1(ad.concat([ad.upsample_nearest(g2, p1), f1], 1)))
        return [FeatureMap(g3), FeatureMap(g2), FeatureMap(g1)], self.head(g1)

    def decoder_channels(self) -> tuple:
        return self.widths[2], self.widths[1], self.widths[0]

    def encoder_sides(self, side: int) -> tuple:
        p1, p2, p3 = self.pools
        return side, side // p1, side // (p1 * p2), side // (p1 * p2 * p3)


def unet_forward(image, unet: UNet):
    return unet(image)


# --- tokens -----------------------------------------------------------------------
def patch_positions(H: int, W: int, P: int) -> np.ndarray:
    """(L, 2) patch centres, row-major over the patch grid."""
    ys = (np.arange(H // P) + 0.5) * P * 2.0 / H - 1.0
    xs = (np.arange(W // P) + 0.5) * P * 2.0 / W - 1.0
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def patch_vectors(fm: FeatureMap, P: int) -> Tensor:
    """(B, L, C*P*P) flattened non-overlapping patches."""
    B, C, H, W = fm.data.shape
    if P < 1 or H % P or W % P:
        raise ad.ShapeError("patchify", (H, W), (P, P), "patch side must divide the map")
    x = fm.data.reshape(B, C, H // P, P, W // P, P).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(B, (H // P) * (W // P), C * P * P)


class PatchEmbed(Module):
    def __init__(self, channels: int, P: int, embed: int, rng: np.random.Generator):
        self.P = P
        self.proj = Linear(channels * P * P, embed, rng)

    def forward(self, fm: FeatureMap) -> TokenSet:
        return patchify(fm, self.P, self.proj)


def patchify(fm: FeatureMap, P: int, embedding: Linear) -> TokenSet:
    """Tokens = linear embedding of each P x P patch; positions = patch centres."""
    v = patch_vectors(fm, P)
    B, _, H, W = fm.data.shape
    pos = np.broadcast_to(patch_positions(H, W, P), (B, v.shape[1], 2)).copy()
    return TokenSet(embedding(v), Tensor(pos))


def bilinear_sample(fm: FeatureMap, points) -> Tensor:
    """(B, N, C) features at (B, N, 2) normalised points, clamped to the border.

    Differentiable in the map values and in the point coordinates.
    """
    pts = as_tensor(points)
    if pts.ndim == 2:
        pts = pts.reshape(1, *pts.shape)
    B, C, H, W = fm.data.shape
    if pts.shape[-1] != 2 or pts.shape[0] not in (1, B):
        raise ad.ShapeError("bilinear_sample", fm.data.shape, pts.shape)
    N = pts.shape[1]
    if N == 0:
        raise ad.ShapeError("bilinear_sample", fm.data.shape, pts.shape, "no points")
    if pts.shape[0] != B:
        pts = pts + Tensor(np.zeros((B, N, 2)))
    u = ad.clamp((pts[..., 0] + 1.0) * (W / 2.0) - 0.5, 0.0, W - 1.0)
    v = ad.clamp((pts[..., 1] + 1.0) * (H / 2.0) - 0.5, 0.0, H - 1.0)
    c0 = np.clip(np.floor(u.data), 0, W - 2).astype(np.intp)
    r0 = np.clip(np.floor(v.data), 0, H - 2).astype(np.intp)
    fx = u - Tensor(c0.astype(np.float64))
    fy = v - Tensor(r0.astype(np.float64))
    grid = fm.data.transpose(0, 2, 3, 1)                         # (B, H, W, C)
    b = np.broadcast_to(np.arange(B)[:, None, None], (B, N, 4))
    rows = np.stack([r0, r0, r0 + 1, r0 + 1], -1)
    cols = np.stack([c0, c0 + 1, c0, c0 + 1], -1)
    corners = grid[b, rows, cols]                                 # (B, N, 4, C)
    gx, gy = 1.0 - fx, 1.0 - fy
    w = ad.stack([gx * gy, fx * gy, gx * fy, fx * fy], axis=-1)   # (B, N, 4)
    return (corners * w.reshape(B, N, 4, 1)).sum(axis=2)


def position_embedding(points, n_freq: int = 4) -> Tensor:
    """[sin, cos] of x and y at frequencies pi * 2^k, k < n_freq."""
    pts = as_tensor(points)
    freqs = math.pi * 2.0 ** np.arange(n_freq)
    proj = ad.concat([pts[..., 0:1] * freqs, pts[..., 1:2] * freqs], axis=-1)
    return ad.concat([ad.sin(proj), ad.cos(proj)], axis=-1)


class PointSampler(Module):
    """Bilinear features + position embedding -> linear to the embedding size."""

    def __init__(self, channels: int, embed: int, rng: np.random.Generator, n_freq: int = 4):
        self.n_freq = n_freq
        self.proj = Linear(channels + 4 * n_freq, embed, rng)

    def forward(self, fm: FeatureMap, points) -> TokenSet:
        return sample_with_position(fm, points, self)


def sample_with_position(fm: FeatureMap, points, sampler: PointSampler) -> TokenSet:
    pts = as_tensor(points)
    if pts.ndim == 2:
        pts = pts.reshape(1, *pts.shape)
    feats = bilinear_sample(fm, pts)
    B = feats.shape[0]
    if pts.shape[0] != B:
        pts = pts + Tensor(np.zeros((B,) + pts.shape[1:]))
    pe = position_embedding(pts, sampler.n_freq)
    return TokenSet(sampler.proj(ad.concat([feats, pe], axis=-1)), pts)
