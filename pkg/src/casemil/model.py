"""Case-level model: shared per-image feature net followed by image-level MIL pooling."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .casedata import CaseRecord
from .featurenet import FeatureBundle, FeatureNet, NetConfig
from .milpool import CaseHeads, MilPooling, PoolInfo, PoolingSpec, participating_attention
from .nn import ComponentRegistry

ALWAYS_ON = ("global", "local", "heads")


@dataclass
class ModelConfig:
    net: NetConfig = field(default_factory=NetConfig)
    pooling: str = "es-att-side"
    t_fraction: float = 0.02
    k: int = 6
    image_height: int = 64
    image_width: int = 48
    patch_size: int = 16
    hidden_dim: int = 128


@dataclass
class ForwardResult:
    heads: CaseHeads
    bundle: FeatureBundle
    info: PoolInfo
    layout: tuple
    batch: int

    @property
    def n_images(self) -> int:
        return len(self.layout)

    def saliency_of_case(self, b: int) -> T.Tensor:
        m = self.n_images
        return self.bundle.saliency[b * m:(b + 1) * m]


class CaseModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.spec = PoolingSpec.parse(cfg.pooling)
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.registry = ComponentRegistry()
        self.features = FeatureNet(self.registry, cfg.net, (cfg.image_height, cfg.image_width),
                                   t_fraction=cfg.t_fraction, k=cfg.k, patch_size=cfg.patch_size,
                                   hidden_dim=cfg.hidden_dim, rng=rng)
        dims = {"topt": self.features.t, "local": cfg.net.embed_dim, "fusion": self.features.fusion_dim}
        self.pooling = MilPooling(self.registry, self.spec, dims, cfg.hidden_dim, rng)

    def parameters(self, component: str | None = None):
        return self.registry.parameters(component)

    def participating(self, layout) -> set[str]:
        return set(ALWAYS_ON) | participating_attention(self.spec, layout)

    def forward(self, cases: list[CaseRecord], patches: list | None = None) -> ForwardResult:
        """Forward a batch of cases that share one (side, view) layout."""
        if not cases:
            raise ValueError("empty batch")
        layout = cases[0].layout
        if any(c.layout != layout for c in cases):
            raise ValueError("batch mixes view combinations; group cases with group_batches first")
        b, m = len(cases), len(layout)
        images = np.stack([im.pixels for c in cases for im in c.images])
        bundle = self.features.forward(images, patches)
        feats = {
            "topt": T.reshape(bundle.h_topt, (b, m, -1)),
            "local": T.reshape(bundle.h_local, (b, m, -1)),
            "fusion": T.reshape(bundle.h_fusion, (b, m, -1)),
        }
        heads, info = self.pooling.case_forward(feats, layout)
        return ForwardResult(heads, bundle, info, layout, b)

    def predict(self, cases: list[CaseRecord]) -> ForwardResult:
        with T.no_grad():
            return self.forward(cases)
