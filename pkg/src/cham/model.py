"""Full acoustic model: front end -> conformer stack -> upsampling heads."""

from __future__ import annotations

from dataclasses import dataclass, field

from . import heads as H
from . import params as P
from .blocks import BlockConfig, ConformerStack
from .common import RunContext
from .frontend import FrontendConfig, build_frontend
from .heads import HeadConfig
from .tensor import ConfigError


@dataclass
class ModelConfig:
    feature_dim: int = 40
    num_labels: int = 9001
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    blocks: BlockConfig = field(default_factory=BlockConfig)
    heads: HeadConfig = field(default_factory=HeadConfig)

    def validate(self):
        self.frontend.validate()
        self.blocks.validate()
        self.heads.validate(num_blocks=self.blocks.num_blocks)
        if self.num_labels < 2:
            raise ConfigError("need at least 2 output labels")


class AcousticModel:
    """Wires the components together; the upsampling stride always equals
    the front-end downsampling factor, so logits match the frame count."""

    def __init__(self, store, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        d = cfg.blocks.model_dim
        self.frontend = build_frontend(store, cfg.frontend, cfg.feature_dim, d)
        self.stack = ConformerStack(store, cfg.blocks)
        self.heads = H.build_heads(store, cfg.heads, d, cfg.num_labels,
                                   factor=cfg.frontend.downsample_factor)

    def forward(self, feats, mask, ctx: RunContext):
        """[B, T, F] + mask -> {head name: logits [B, T, num_labels]}."""
        num_frames = feats.shape[1]
        enc, enc_mask = self.frontend.forward(feats, mask, ctx)
        frontend_out = enc if self.cfg.blocks.long_skip else None
        taps = tuple(self.cfg.heads.intermediate_positions)
        out, tapped = self.stack.forward(enc, enc_mask, ctx,
                                         frontend_out=frontend_out, taps=taps)
        logits = {"final": self.heads["final"].forward(out, num_frames, ctx)}
        for pos in taps:
            logits[f"inter{pos}"] = self.heads[f"inter{pos}"].forward(
                tapped[pos], num_frames, ctx)
        return logits

    def loss(self, logits, alignment, mask):
        """(total training loss, per-head losses). The training criterion
        is focal with the configured gamma; gamma 0 is plain cross-entropy."""
        gamma = self.cfg.heads.focal_gamma
        parts = {
            name: H.focal_loss(lg, alignment, mask, gamma)
            for name, lg in logits.items()
        }
        inters = {k: v for k, v in parts.items() if k != "final"}
        total = H.total_loss(parts["final"], inters,
                             self.cfg.heads.intermediate_loss_scale)
        return total, parts


def build_model(cfg: ModelConfig, seed: int):
    """(ParamStore, AcousticModel) with order-independent initialization."""
    store = P.ParamStore(seed)
    return store, AcousticModel(store, cfg)


def parameter_census(cfg: ModelConfig) -> P.Census:
    """Count parameters without allocating them (shape-only build)."""
    store = P.ShapeStore()
    AcousticModel(store, cfg)
    return P.census(store)
