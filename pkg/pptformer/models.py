import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn as nn
import torch.nn.functional as F
import yaml
from pytorch_lightning import Callback, LightningModule
from pytorch_lightning.utilities import rank_zero_info

from pptformer.codec import PerspectiveCodec
from pptformer.contourlet import required_extent
from pptformer.errors import ConfigError, DataError, NonFiniteLossError, ShapeError
from pptformer.metrics import IGNORE_INDEX, MeanIoU
from pptformer.numerics import DTYPE, Rng
from pptformer.pmp import (ProjectedAttentionStep, attention_step, attention_weights, calibrate, from_tokens,
                           pmp_chain, self_attention, to_tokens)
from pptformer.prototypes import PSEUDO_MODES, PrototypeBank

CHECKPOINT_FORMAT_VERSION = 1
PHASES = ("warmup", "pmp")
PERSPECTIVE_VIEWS = ("flatten", "pool")


@dataclass
class ModelConfig:
    image_size: int = 64
    in_channels: int = 3
    num_classes: int = 6
    widths: tuple = (32, 48, 48, 48)
    strides: tuple = (4, 1, 2, 1)
    plain_layers: int = 2
    num_heads: int = 2
    mlp_ratio: int = 4
    pmp_layers: int = 4
    calibration_layers: int = 2
    num_prototypes: int = 64
    texture_levels: int = 2
    dfb_depth: int = 3
    texture_channels: int = 2
    descriptor_dim: int = 32
    stem_channels: int = 12
    decoder_hidden: int = 24
    bank_grid: int = 4
    perspective_view: str = "flatten"
    pseudo_mode: str = "scale"
    pseudo_alpha: float = 0.5
    pseudo_eta: float = 0.0
    pmp_projections: bool = False
    plain_baseline: bool = False
    rec_weight: float = 0.4
    warmup_fraction: float = 0.3
    max_iterations: int = 5000
    lr: float = 5e-3
    momentum: float = 0.98
    grad_clip: float = 1.0
    batch_size: int = 8
    seed: int = 0
    head_hidden: int = 64

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.strides = tuple(self.strides)

    def grids(self):
        """Spatial extent of every block's output."""
        out, size = [], self.image_size
        for stride in self.strides:
            size = math.ceil(size / stride)
            out.append(size)
        return out

    def validate(self):
        if len(self.widths) != 4 or len(self.strides) != 4:
            raise ConfigError(f"exactly 4 blocks are required, got widths {self.widths} and strides {self.strides}")
        if self.strides[0] != 4:
            raise ConfigError(f"the first block embeds patches with stride 4, got {self.strides[0]}")
        if any(s < 1 for s in self.strides) or any(w < 1 for w in self.widths):
            raise ConfigError(f"widths and strides must be positive, got {self.widths} and {self.strides}")
        if self.widths[0] % self.num_heads != 0:
            raise ConfigError(f"width {self.widths[0]} is not divisible by {self.num_heads} heads")
        if self.plain_baseline and any(w % self.num_heads != 0 for w in self.widths):
            raise ConfigError(f"widths {self.widths} are not divisible by {self.num_heads} heads")
        if not 1 <= self.num_classes <= 255:
            raise ConfigError(f"num_classes must be in [1, 255], got {self.num_classes}")
        if self.rec_weight < 0:
            raise ConfigError(f"rec_weight must be >= 0, got {self.rec_weight}")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ConfigError(f"warmup_fraction must be in [0, 1], got {self.warmup_fraction}")
        if self.pmp_layers < 1:
            raise ConfigError(f"pmp_layers must be >= 1, got {self.pmp_layers}")
        if self.calibration_layers < 0:
            raise ConfigError(f"calibration_layers must be >= 0, got {self.calibration_layers}")
        if self.texture_levels < 0:
            raise ConfigError(f"texture_levels must be >= 0, got {self.texture_levels}")
        if not 1 <= self.dfb_depth <= 4:
            raise ConfigError(f"dfb_depth must be in [1, 4], got {self.dfb_depth}")
        if self.num_prototypes < 1:
            raise ConfigError(f"num_prototypes must be >= 1, got {self.num_prototypes}")
        if not 0.0 <= self.pseudo_alpha < 1.0:
            raise ConfigError(f"pseudo_alpha must be in [0, 1), got {self.pseudo_alpha}")
        if not 0.0 <= self.pseudo_eta <= 1.0:
            raise ConfigError(f"pseudo_eta must be in [0, 1], got {self.pseudo_eta}")
        if self.pseudo_mode not in PSEUDO_MODES:
            raise ConfigError(f"pseudo_mode {self.pseudo_mode} not supported")
        if self.perspective_view not in PERSPECTIVE_VIEWS:
            raise ConfigError(f"perspective_view {self.perspective_view} not supported")
        if self.grad_clip < 0:
            raise ConfigError(f"grad_clip must be >= 0 (0 disables clipping), got {self.grad_clip}")
        if self.max_iterations < 1 or self.batch_size < 1:
            raise ConfigError(f"max_iterations and batch_size must be >= 1, got {self.max_iterations} and {self.batch_size}")
        if not self.plain_baseline:
            smallest = min(self.grids()[1:])
            if smallest < required_extent(self.texture_levels):
                raise ConfigError(f"a {smallest}x{smallest} block grid cannot hold {self.texture_levels} contourlet levels")
        return self

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["strides"] = list(self.strides)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {unknown}")
        return cls(**d).validate()

    @classmethod
    def from_yaml(cls, path):
        with open(path) as f:
            data = yaml.safe_load(f) or {}
        if "model" in data or "data" in data:
            data = data.get("model") or {}
        return cls.from_dict(data)

    def config_hash(self):
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()


class Mlp(nn.Module):
    def __init__(self, dim, ratio):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * ratio)
        self.fc2 = nn.Linear(dim * ratio, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim, num_heads):
        super().__init__()
        if num_heads < 1 or dim % num_heads != 0:
            raise ConfigError(f"width {dim} is not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, N, C = x.shape
        # BNC -> 3 x BHND
        q, k, v = self.qkv(x).view(B, N, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        out = torch.matmul(attention_weights(q, k), v)
        return self.out_proj(out.transpose(1, 2).reshape(B, N, C))


class TransformerLayer(nn.Module):
    """Pre-norm self-attention + MLP."""

    def __init__(self, dim, num_heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def merge_layer(in_channels, dim, stride):
    if stride == 4:
        return nn.Conv2d(in_channels, dim, kernel_size=7, stride=4, padding=3)
    return nn.Conv2d(in_channels, dim, kernel_size=3, stride=stride, padding=1)


class PlainBlock(nn.Module):
    """Patch merging followed by a stack of plain transformer layers with learned projections."""

    def __init__(self, in_channels, dim, stride, num_layers, num_heads, mlp_ratio):
        super().__init__()
        self.merge = merge_layer(in_channels, dim, stride)
        self.norm = nn.LayerNorm(dim)
        self.layers = nn.ModuleList([TransformerLayer(dim, num_heads, mlp_ratio) for _ in range(num_layers)])

    def forward(self, x, phase=None):
        x = self.merge(x)
        size = x.shape[-2:]
        tokens = self.norm(to_tokens(x))
        for layer in self.layers:
            tokens = layer(tokens)
        return from_tokens(tokens, size), x.new_zeros(())


class PPTFormerBlock(nn.Module):
    """Patch merging, perspective codec, pseudo-perspective PMP attention with calibration, MLP.

    During warm-up the PMP attention is replaced by projection-free self-attention
    on the block's normalized input; the codec and the bank keep learning.
    """

    def __init__(self, in_channels, dim, stride, config, bank, rng=None):
        super().__init__()
        self.config = config
        self.bank = bank
        self.rng = rng
        self.merge = merge_layer(in_channels, dim, stride)
        self.norm = nn.LayerNorm(dim)
        self.codec = PerspectiveCodec(
            dim,
            texture_channels=config.texture_channels,
            texture_levels=config.texture_levels,
            dfb_depth=config.dfb_depth,
            stem_channels=config.stem_channels,
            descriptor_dim=config.descriptor_dim,
            decoder_hidden=config.decoder_hidden,
        )
        self.step = ProjectedAttentionStep(dim) if config.pmp_projections else None
        self.mlp_norm = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, config.mlp_ratio)
        self.pseudo_fusions = 0

    def bank_view(self, combined):
        """Per-sample vector the bank sees: pooled to bank_grid and flattened row-major, or globally pooled."""
        if self.config.perspective_view == "pool":
            return combined.mean(dim=(2, 3))
        g = self.config.bank_grid
        pooled = F.adaptive_avg_pool2d(combined, (g, g))
        return pooled.permute(0, 2, 3, 1).flatten(1)

    def lift(self, delta, grid):
        """Spread a change of the bank view back over the descriptor grid."""
        if self.config.perspective_view == "pool":
            return delta[:, :, None, None]
        g = self.config.bank_grid
        delta = delta.reshape(delta.shape[0], g, g, -1).permute(0, 3, 1, 2)
        return F.interpolate(delta, size=grid, mode="nearest")

    def pseudo_perspective(self, combined):
        if self.bank.is_empty:
            return combined
        rng = self.rng if self.training else None
        grid = combined.shape[-2:]
        out = []
        for b in range(combined.shape[0]):
            p = combined[b:b + 1]
            v = self.bank_view(p)
            v_step = self.bank.perturb(v, rng)
            p = p + self.lift(v_step - v, grid)
            if self.config.pseudo_mode == "mixture":
                p = p + self.lift(self.bank.generate_pseudo(v_step) - v_step, grid)
            else:
                p = p * self.bank.factor(v_step)
            out.append(p)
        return torch.cat(out, dim=0)

    def forward(self, x, phase="pmp"):
        if phase not in PHASES:
            raise ConfigError(f"phase {phase} not supported")
        x = self.merge(x)
        size = x.shape[-2:]
        tokens = to_tokens(x)
        normed = self.norm(tokens)
        features = from_tokens(normed, size)
        p = self.codec.encode(features)
        rec_loss = self.codec.reconstruction_loss(features, p)
        combined = p.combined
        if self.training:
            views = self.bank_view(combined.detach())
            for v in views:
                self.bank.observe(v)
        if phase == "warmup":
            fused = self_attention(normed)
        else:
            step = self.step if self.step is not None else attention_step
            pseudo_features = self.codec.decode(self.pseudo_perspective(combined), size)
            fused = pmp_chain(normed, to_tokens(pseudo_features), self.config.pmp_layers, step=step)
            fused = calibrate(normed, fused, self.config.calibration_layers, step=step)
            self.pseudo_fusions += 1
        tokens = tokens + fused
        tokens = tokens + self.mlp(self.mlp_norm(tokens))
        return from_tokens(tokens, size), rec_loss


class PPTFormerNet(nn.Module):
    """One plain block, three PPTFormer blocks sharing a prototype bank, and an all-MLP fusion head."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        self.bank = PrototypeBank(
            config.num_prototypes, alpha=config.pseudo_alpha, eta=config.pseudo_eta, mode=config.pseudo_mode,
        )
        self.rng = Rng(config.seed)
        blocks = [PlainBlock(config.in_channels, config.widths[0], config.strides[0],
                             config.plain_layers, config.num_heads, config.mlp_ratio)]
        for i in range(1, 4):
            if config.plain_baseline:
                blocks.append(PlainBlock(config.widths[i - 1], config.widths[i], config.strides[i],
                                         1, config.num_heads, config.mlp_ratio))
            else:
                blocks.append(PPTFormerBlock(config.widths[i - 1], config.widths[i], config.strides[i],
                                             config, self.bank, rng=self.rng))
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Sequential(
            nn.Conv2d(sum(config.widths), config.head_hidden, kernel_size=1),
            nn.GELU(),
            nn.Conv2d(config.head_hidden, config.num_classes, kernel_size=1),
        )

    @property
    def pseudo_fusions(self):
        return sum(getattr(block, "pseudo_fusions", 0) for block in self.blocks)

    def forward(self, image, phase="pmp"):
        """Returns logits (B, K, H, W), the summed reconstruction loss and the per-block features."""
        c = self.config
        if image.dim() != 4 or tuple(image.shape[1:]) != (c.in_channels, c.image_size, c.image_size):
            raise ShapeError(f"expected images of shape (B, {c.in_channels}, {c.image_size}, {c.image_size}), got {tuple(image.shape)}")
        x = image
        features = []
        rec_loss = image.new_zeros(())
        for block in self.blocks:
            x, rec = block(x, phase=phase)
            rec_loss = rec_loss + rec
            features.append(x)
        grid = features[0].shape[-2:]
        fused = torch.cat(
            [f if f.shape[-2:] == grid else F.interpolate(f, size=grid, mode="bilinear", align_corners=False)
             for f in features],
            dim=1,
        )
        logits = self.head(fused)
        logits = F.interpolate(logits, size=image.shape[-2:], mode="bilinear", align_corners=False)
        return logits, rec_loss, features


def check_labels(labels, num_classes):
    invalid = (labels < 0) | (labels >= num_classes)
    invalid &= labels != IGNORE_INDEX
    if invalid.any():
        bad = labels[invalid].unique().tolist()
        raise DataError(f"labels {bad} are outside [0, {num_classes}) and not the ignore index {IGNORE_INDEX}")


def total_loss(logits, labels, rec_loss, rec_weight=0.4):
    """Cross-entropy over non-ignored pixels plus rec_weight * rec_loss; returns (total, segmentation part)."""
    check_labels(labels, logits.shape[1])
    labels = labels.long()
    if (labels != IGNORE_INDEX).any():
        seg_loss = F.cross_entropy(logits, labels, ignore_index=IGNORE_INDEX)
    else:
        seg_loss = logits.sum() * 0.0
    return seg_loss + rec_weight * rec_loss, seg_loss


def count_parameters(module):
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def parameter_report(config):
    """Parameter counts of the PPTFormer network and of the plain-blocks-only network of the same widths."""
    d = config.to_dict()
    ppt = count_parameters(PPTFormerNet(ModelConfig.from_dict({**d, "plain_baseline": False})))
    baseline = count_parameters(PPTFormerNet(ModelConfig.from_dict({**d, "plain_baseline": True})))
    return {"pptformer": ppt, "baseline": baseline, "overhead": (ppt - baseline) / baseline}


class PhaseSwitchCallback(Callback):
    """Logs the iteration at which PMP attention takes over from plain self-attention."""

    def __init__(self):
        self.switch_iteration = None

    def on_train_batch_start(self, trainer, pl_module, batch, batch_idx):
        iteration = int(pl_module.iteration)
        if self.switch_iteration is None and pl_module.current_phase(iteration) == "pmp" and not pl_module.config.plain_baseline:
            self.switch_iteration = iteration
            rank_zero_info(f"Switching to PMP attention at iteration {iteration}")


class PPTFormerLightModel(LightningModule):
    def __init__(self, config):
        super().__init__()
        if isinstance(config, ModelConfig):
            config = config.to_dict()
        self.save_hyperparameters()
        self.config = ModelConfig.from_dict(config)
        self.lr = self.config.lr
        self.module = PPTFormerNet(self.config).to(DTYPE)
        self.register_buffer("iteration", torch.zeros((), dtype=torch.int64))
        self.val_miou = MeanIoU(self.config.num_classes)
        self.test_miou = MeanIoU(self.config.num_classes)

    @property
    def warmup_iterations(self):
        return math.floor(self.config.warmup_fraction * self.config.max_iterations)

    def current_phase(self, iteration):
        return "warmup" if iteration < self.warmup_iterations else "pmp"

    def forward(self, image, phase=None):
        if phase is None:
            phase = self.current_phase(int(self.iteration))
        return self.module(image, phase=phase)[0]

    def compute_losses(self, batch, phase=None):
        image, labels = batch[0], batch[1]
        if phase is None:
            phase = self.current_phase(int(self.iteration))
        logits, rec_loss, _ = self.module(image, phase=phase)
        loss, seg_loss = total_loss(logits, labels, rec_loss, self.config.rec_weight)
        return {"loss": loss, "seg_loss": seg_loss, "rec_loss": rec_loss, "logits": logits}

    def training_step(self, batch, batch_idx):
        iteration = int(self.iteration)
        losses = self.compute_losses(batch)
        components = {k: losses[k].item() for k in ("loss", "seg_loss", "rec_loss")}
        if not all(math.isfinite(v) for v in components.values()):
            raise NonFiniteLossError(iteration, components)
        batch_size = batch[0].shape[0]
        self.log("train_loss", components["loss"], prog_bar=True, on_step=True, on_epoch=True, batch_size=batch_size)
        self.log("train_seg_loss", components["seg_loss"], on_step=True, on_epoch=False, batch_size=batch_size)
        self.log("train_rec_loss", components["rec_loss"], on_step=True, on_epoch=False, batch_size=batch_size)
        self.log("phase", float(self.current_phase(iteration) == "pmp"), on_step=True, on_epoch=False, batch_size=batch_size)
        return {"loss": losses["loss"], "seg_loss": losses["seg_loss"].detach(), "rec_loss": losses["rec_loss"].detach()}

    def on_train_batch_end(self, outputs, batch, batch_idx):
        self.iteration += 1

    def validation_step(self, batch, batch_idx):
        losses = self.compute_losses(batch)
        preds = losses["logits"].argmax(dim=1)
        self.val_miou.update(preds, batch[1])
        self.log("val_loss", losses["loss"].item(), on_step=False, on_epoch=True, batch_size=batch[0].shape[0])
        self.log("val_miou", self.val_miou, on_step=False, on_epoch=True)

    def test_step(self, batch, batch_idx):
        losses = self.compute_losses(batch)
        preds = losses["logits"].argmax(dim=1)
        self.test_miou.update(preds, batch[1])
        self.log("test_loss", losses["loss"].item(), on_step=False, on_epoch=True, batch_size=batch[0].shape[0])
        self.log("test_miou", self.test_miou, on_step=False, on_epoch=True)

    def predict_step(self, batch, batch_idx):
        return self(batch[0]).argmax(dim=1)

    def configure_optimizers(self):
        optimizer = torch.optim.SGD(self.parameters(), lr=self.lr, momentum=self.config.momentum)
        return {
            "optimizer": optimizer,
        }

    def on_save_checkpoint(self, checkpoint):
        checkpoint["pptformer_format_version"] = CHECKPOINT_FORMAT_VERSION
        checkpoint["prototype_bank"] = self.module.bank.snapshot()

    def on_load_checkpoint(self, checkpoint):
        version = checkpoint.get("pptformer_format_version")
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ConfigError(f"checkpoint format version {version} not supported")
        c = self.config
        bank = PrototypeBank.restore(checkpoint["prototype_bank"], alpha=c.pseudo_alpha, eta=c.pseudo_eta, mode=c.pseudo_mode)
        self.module.bank = bank
        for block in self.module.blocks:
            if isinstance(block, PPTFormerBlock):
                block.bank = bank
