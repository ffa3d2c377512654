"""Deformation networks: TransDeformer, UNet-DeformSA, the UNet-MLP ablation and the
per-point error estimator.

Every deformation model maps (image, initial shape) to a list of shapes. Points
are in normalised coordinates; displacement heads start at zero, so an untrained
model returns its input shape.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attention import RelAttentionBlock, TokenSet
from .autodiff import MLP, LayerNorm, Linear, Module, Tensor, as_tensor, make_rng
from .autodiff.io import load_container, save_container
from .features import Backbone, FeatureMap, PatchEmbed, PointSampler, UNet, as_batch

MODEL_KINDS = ("transdeformer", "unet-deformsa", "unet-mlp", "error-estimator", "unet")


class ContractError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    kind: str = "transdeformer"
    image_side: int = 128
    embed: int = 64
    heads: int = 4
    layers: int = 2
    patch: int = 4
    n_points: int = 244
    c_high: int = 8
    c_low: int = 32
    unet_widths: tuple = (8, 16, 32, 32)
    unet_pools: tuple = (4, 4, 2)
    use_mlp: bool = False
    ffn_mult: int = 2
    seed: int = 0

    def __post_init__(self):
        self.unet_widths = tuple(int(w) for w in self.unet_widths)
        self.unet_pools = tuple(int(p) for p in self.unet_pools)
        self.validate()

    def validate(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"model kind must be one of {MODEL_KINDS}, got {self.kind!r}")
        if self.embed % self.heads:
            raise ValueError(f"embed {self.embed} not divisible by heads {self.heads}")
        if self.image_side % 4 or (self.image_side // 4) % self.patch:
            raise ValueError(f"patch {self.patch} must divide the low-resolution side "
                             f"{self.image_side // 4}")
        if self.layers < 0:
            raise ValueError("layers must be >= 0")
        if self.image_side % int(np.prod(self.unet_pools)):
            raise ValueError(f"image side {self.image_side} not divisible by UNet pools "
                             f"{self.unet_pools}")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class DeformationOutput:
    shapes: list                      # (B, N, 2) tensors, intermediate(s) then final
    displacements: list = field(default_factory=list)

    @property
    def final(self) -> Tensor:
        return self.shapes[-1]


def _batched_points(points, B: int | None = None) -> Tensor:
    p = as_tensor(points)
    if p.ndim == 2:
        p = p.reshape(1, *p.shape)
    if B is not None and p.shape[0] != B:
        if p.shape[0] != 1:
            raise ad.ShapeError("points", p.shape, (B,), "batch mismatch")
        p = p + Tensor(np.zeros((B,) + p.shape[1:]))
    return p


class DisplacementHead(Module):
    """LayerNorm + token-wise linear to 2 values, zero-initialised."""

    def __init__(self, embed: int, rng):
        self.norm = LayerNorm(embed)
        self.fc = Linear(embed, 2, rng, zero=True)

    def forward(self, x):
        return self.fc(self.norm(x))


def ssa_forward(tokens: TokenSet, layers) -> TokenSet:
    """Stacked shape self-attention; positions must be undeformed template coordinates."""
    for blk in layers:
        tokens = blk(tokens)
    return tokens


def isa_forward(tokens: TokenSet, layers) -> list:
    """Stacked image self-attention on patch tokens; returns every layer's output."""
    outs = []
    for blk in layers:
        tokens = blk(tokens)
        outs.append(tokens)
    return outs


def s2ia_forward(shape_tokens: TokenSet, image_tokens: TokenSet, block) -> TokenSet:
    """Shape-to-image cross attention; shape positions are current (deformed) coordinates."""
    return block(shape_tokens, image_tokens)


def _blocks(cfg: ModelConfig, n: int, rng, cross: bool = False) -> list:
    return [RelAttentionBlock(cfg.embed, cfg.heads, rng, cfg.use_mlp, ffn_mult=cfg.ffn_mult,
                              cross=cross) for _ in range(n)]


class TransDeformer(Module):
    """Backbone -> (ISA | S2IA | SSA) x N -> intermediate shape -> high-res SSA -> final shape."""

    def __init__(self, cfg: ModelConfig):
        rng = make_rng(cfg.seed)
        self.cfg = cfg
        self.backbone = Backbone(rng, cfg.c_high, cfg.c_low)
        self.patch_embed = PatchEmbed(cfg.c_low, cfg.patch, cfg.embed, rng)
        self.sample_lo = PointSampler(cfg.c_low, cfg.embed, rng)
        self.isa = _blocks(cfg, cfg.layers, rng)
        self.s2ia = _blocks(cfg, cfg.layers, rng, cross=True)
        self.ssa = _blocks(cfg, cfg.layers, rng)
        self.head1 = DisplacementHead(cfg.embed, rng)
        self.sample_hi = PointSampler(cfg.c_high, cfg.embed, rng)
        self.carry = Linear(cfg.embed, cfg.embed, rng)
        self.ssa2 = _blocks(cfg, cfg.layers, rng)
        self.head2 = DisplacementHead(cfg.embed, rng)
        # last forward's SSA position streams, kept for inspection
        self.last_ssa_positions = []

    def trunk(self, image, points, template_points):
        lo, hi = self.backbone(image)
        B = lo.data.shape[0]
        cur = _batched_points(points, B)
        tpl = _batched_points(template_points, B)
        Y = self.patch_embed(lo)
        X = self.sample_lo(lo, cur)
        self.last_ssa_positions = []
        for isa, s2ia, ssa in zip(self.isa, self.s2ia, self.ssa):
            Y = isa(Y)
            X = s2ia_forward(TokenSet(X.features, cur), Y, s2ia)
            X = ssa(TokenSet(X.features, tpl))
            self.last_ssa_positions.append(X.positions.data)
        return hi, X.features, cur, tpl

    def refine(self, hi, feats, pts, tpl):
        Xh = self.sample_hi(hi, pts)
        X = TokenSet(Xh.features + self.carry(feats), tpl)
        X = ssa_forward(X, self.ssa2)
        self.last_ssa_positions.append(X.positions.data)
        return X.features

    def forward(self, image, points, template_points=None) -> DeformationOutput:
        template_points = points if template_points is None else template_points
        hi, feats, cur, tpl = self.trunk(image, points, template_points)
        d1 = self.head1(feats)
        s1 = cur + d1
        d2 = self.head2(self.refine(hi, feats, s1, tpl))
        return DeformationOutput([s1, s1 + d2], [d1, d2])


class PointMLPBlock(Module):
    """Residual per-point MLP: no mixing between points."""

    def __init__(self, embed: int, mult: int, rng):
        self.norm = LayerNorm(embed)
        self.mlp = MLP(embed, mult * embed, embed, rng)

    def forward(self, tokens: TokenSet) -> TokenSet:
        return TokenSet(tokens.features + self.mlp(self.norm(tokens.features)), tokens.positions)


class UNetDeformer(Module):
    """Frozen UNet + three deformation modules on decoder maps (coarse to fine).

    ``mixer='ssa'`` is UNet-DeformSA; ``mixer='mlp'`` is the UNet-MLP ablation.
    """

    def __init__(self, cfg: ModelConfig, mixer: str = "ssa"):
        rng = make_rng(cfg.seed)
        self.cfg = cfg
        self.mixer = mixer
        self.unet = UNet(rng, cfg.unet_widths, pools=cfg.unet_pools)
        self.unet.freeze()
        chans = self.unet.decoder_channels()
        self.samplers = [PointSampler(c, cfg.embed, rng) for c in chans]
        self.carry = [Linear(cfg.embed, cfg.embed, rng) for _ in chans[1:]]
        if mixer == "ssa":
            self.mixers = [_blocks(cfg, cfg.layers, rng) for _ in chans]
        elif mixer == "mlp":
            self.mixers = [[PointMLPBlock(cfg.embed, cfg.ffn_mult, rng) for _ in range(cfg.layers)]
                           for _ in chans]
        else:
            raise ValueError(f"mixer must be 'ssa' or 'mlp', got {mixer!r}")
        self.heads = [DisplacementHead(cfg.embed, rng) for _ in chans]
        self.allow_backbone_training = False
        self.last_logits = None

    def features(self, image) -> list:
        """Decoder maps from the frozen UNet (no graph), for caching.

        Each channel is standardised per image: raw decoder activations reach the
        hundreds and would swamp the position embedding in the samplers.
        """
        with ad.no_grad():
            maps, _ = self.unet(image)
        return [FeatureMap(_standardise(m.data)) for m in maps]

    def unfreeze_backbone(self):
        """Opt into joint training: the UNet receives gradients and the forward
        pass keeps its segmentation logits in ``last_logits``."""
        self.allow_backbone_training = True
        for _, t in _all_tensors(self.unet):
            t.requires_grad = True

    def forward(self, image, points, template_points=None, features=None) -> DeformationOutput:
        if not self.allow_backbone_training and any(p.requires_grad for p in _all_params(self.unet)):
            raise ContractError("UNet backbone must be frozen during deformation training")
        if features is not None:
            maps = features
        elif self.allow_backbone_training:
            raw, self.last_logits = self.unet(image)
            maps = [FeatureMap(_standardise(m.data)) for m in raw]
        else:
            maps = self.features(image)
        B = maps[0].data.shape[0]
        cur = _batched_points(points, B)
        tpl = _batched_points(points if template_points is None else template_points, B)
        shapes, disps = [], []
        prev = None
        for k, fm in enumerate(maps):
            X = self.samplers[k](fm, cur)
            feats = X.features if prev is None else X.features + self.carry[k - 1](prev)
            T = TokenSet(feats, tpl)
            for blk in self.mixers[k]:
                T = blk(T)
            prev = T.features
            d = self.heads[k](prev)
            cur = cur + d
            shapes.append(cur)
            disps.append(d)
        return DeformationOutput(shapes, disps)


def _standardise(x: Tensor) -> Tensor:
    """Zero mean, unit deviation per image and channel of a (B, C, H, W) map."""
    mu = x.mean(axis=(2, 3), keepdims=True)
    c = x - mu
    return c / ad.sqrt((c * c).mean(axis=(2, 3), keepdims=True) + 1e-12)


def _all_params(m: Module):
    return [t for _, t in _all_tensors(m)]


def _all_tensors(m: Module, prefix: str = ""):
    """Every Tensor attribute, trainable or frozen."""
    for name, v in vars(m).items():
        if isinstance(v, Tensor):
            yield prefix + name, v
        elif isinstance(v, Module):
            yield from _all_tensors(v, f"{prefix}{name}.")
        elif isinstance(v, (list, tuple)):
            for i, item in enumerate(v):
                if isinstance(item, Module):
                    yield from _all_tensors(item, f"{prefix}{name}.{i}.")


class ErrorEstimator(Module):
    """TransDeformer trunk without the intermediate shape; softplus head in mm per point.

    Both attention position streams use the input shape itself.
    """

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.net = TransDeformer(cfg)
        rng = make_rng(cfg.seed + 1)
        self.norm = LayerNorm(cfg.embed)
        self.out = Linear(cfg.embed, 1, rng)
        # the intermediate-shape head is bypassed
        self.net.head1.freeze()
        self.net.head2.freeze()

    def forward(self, image, points) -> Tensor:
        hi, feats, cur, tpl = self.net.trunk(image, points, points)
        f = self.net.refine(hi, feats, cur, tpl)
        y = self.out(self.norm(f))
        return ad.softplus(y).reshape(*y.shape[:-1])


class SegmentationNet(Module):
    """UNet wrapper used for backbone pretraining."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.unet = UNet(make_rng(cfg.seed), cfg.unet_widths, pools=cfg.unet_pools)

    def forward(self, image):
        return self.unet(image)[1]


def build_model(cfg: ModelConfig) -> Module:
    if cfg.kind == "transdeformer":
        return TransDeformer(cfg)
    if cfg.kind == "unet-deformsa":
        return UNetDeformer(cfg, "ssa")
    if cfg.kind == "unet-mlp":
        return UNetDeformer(cfg, "mlp")
    if cfg.kind == "error-estimator":
        return ErrorEstimator(cfg)
    return SegmentationNet(cfg)


def _state(model: Module) -> dict:
    return {k: v.data.copy() for k, v in _all_tensors(model)}


def save_checkpoint(model: Module, path, extra: dict | None = None):
    meta = {"config": asdict(model.cfg), "format": "spinemesh-model/1"}
    meta.update(extra or {})
    save_container(path, _state(model), meta)


def load_checkpoint(path) -> tuple:
    """(model, meta). The model is rebuilt from the embedded config."""
    tensors, meta = load_container(Path(path))
    if "config" not in meta:
        raise ValueError(f"{path}: checkpoint manifest has no model config")
    model = build_model(ModelConfig.from_dict(meta["config"]))
    own = dict(_all_tensors(model))
    missing = set(own) - set(tensors)
    if missing:
        raise KeyError(f"{path}: checkpoint lacks {sorted(missing)[:5]}")
    for k, t in own.items():
        if t.shape != tensors[k].shape:
            raise ad.ShapeError("load_checkpoint", t.shape, tensors[k].shape, k)
        t.data[...] = tensors[k]
    return model, meta


def load_backbone(model: UNetDeformer, seg: SegmentationNet):
    """Copy pretrained UNet weights into a deformation model (then frozen)."""
    src = dict(_all_tensors(seg.unet))
    for k, t in _all_tensors(model.unet):
        t.data[...] = src[k].data
