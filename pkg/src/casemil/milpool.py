"""Image-level MIL pooling: instance/embedded space, mean/max/(gated) attention, side-wise."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .casedata import Side
from .nn import AttentionBlock, ComponentRegistry, Linear
from .tensor import Tensor

FEATURE_TYPES = ("topt", "local", "fusion")
VALID_SPECS = ("is-mean", "is-max", "is-att", "is-gatt", "is-att-side",
               "es-mean", "es-max", "es-att", "es-gatt", "es-att-side")


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class PoolingSpec:
    paradigm: str  # IS | ES
    operator: str  # mean | max | att | gatt | side_att

    @classmethod
    def parse(cls, text: str) -> "PoolingSpec":
        t = text.strip().lower()
        if t not in VALID_SPECS:
            raise SpecError(f"invalid pooling spec {text!r}; valid: {' | '.join(VALID_SPECS)}")
        par, rest = t.split("-", 1)
        op = "side_att" if rest == "att-side" else rest
        return cls(par.upper(), op)

    def __str__(self):
        op = "att-side" if self.operator == "side_att" else self.operator
        return f"{self.paradigm.lower()}-{op}"

    @property
    def uses_attention(self) -> bool:
        return self.operator in ("att", "gatt", "side_att")


@dataclass
class CaseHeads:
    y_topt: Tensor  # (B,)
    y_local: Tensor
    y_fusion: Tensor

    @property
    def final(self) -> Tensor:
        return self.y_fusion

    def as_dict(self) -> dict[str, Tensor]:
        return {"topt": self.y_topt, "local": self.y_local, "fusion": self.y_fusion}


@dataclass
class PoolInfo:
    """Diagnostics from one pooled batch, per feature type."""

    image_weights: dict = field(default_factory=dict)  # ftype -> (B, M) effective attention
    image_probs: dict = field(default_factory=dict)  # ftype -> (B, M), IS only
    side_weights: dict = field(default_factory=dict)  # ftype -> (B, n_sides)


# ---------------------------------------------------------------- primitives

def attention_weights(embeddings: Tensor, block: AttentionBlock, gated: bool | None = None) -> Tensor:
    """Softmax attention over the instance axis: (..., M, D) -> (..., M)."""
    if gated is not None and gated != block.gated:
        raise ValueError("block gating does not match requested attention type")
    if embeddings.shape[-2] < 1:
        raise ValueError("attention over an empty bag")
    return block.weights(embeddings)


def weighted_sum(weights: Tensor, values: Tensor) -> Tensor:
    """(B, M) x (B, M, D) -> (B, D); (B, M) x (B, M) -> (B,)."""
    if values.ndim == weights.ndim:
        return T.sum_(weights * values, axis=-1)
    return T.sum_(T.reshape(weights, weights.shape + (1,)) * values, axis=-2)


def side_indices(layout) -> dict[Side, list[int]]:
    out: dict[Side, list[int]] = {}
    for i, (side, _view) in enumerate(layout):
        out.setdefault(Side(side), []).append(i)
    return {s: out[s] for s in (Side.L, Side.R) if s in out}


def sidewise_weights(embeddings: Tensor, layout, view_block: AttentionBlock,
                     side_block: AttentionBlock) -> tuple[Tensor, Tensor, Tensor]:
    """Two-stage weights: views within each present side, then the present sides.

    Returns (effective per-image weights (B, M) in layout order, side weights (B, S),
    per-side embeddings (B, S, D)). Effective weight of image (s, v) is a_s * a_sv.
    """
    if embeddings.shape[1] < 1:
        raise ValueError("empty bag")
    sides = side_indices(layout)
    b = embeddings.shape[0]
    view_w, side_emb = [], []
    for idx in sides.values():
        # layouts are ordered L then R, so concatenating per side keeps image order
        if idx != list(range(idx[0], idx[0] + len(idx))):
            raise ValueError("layout must list each side's images contiguously")
        emb_s = embeddings[:, idx[0]:idx[-1] + 1]
        a_sv = view_block.weights(emb_s)
        view_w.append(a_sv)
        side_emb.append(T.reshape(weighted_sum(a_sv, emb_s), (b, 1, -1)))
    h_sides = T.concat(side_emb, axis=1)
    a_s = side_block.weights(h_sides)
    eff = T.concat([T.reshape(a_s[:, j], (b, 1)) * a_sv for j, a_sv in enumerate(view_w)], axis=1)
    return eff, a_s, h_sides


def sidewise_pool(embeddings: Tensor, layout, view_block: AttentionBlock, side_block: AttentionBlock) -> Tensor:
    """Case embedding  h_n = sum_s a_s sum_v a_sv h_sv  for (B, M, D) embeddings."""
    eff, a_s, h_sides = sidewise_weights(embeddings, layout, view_block, side_block)
    return weighted_sum(a_s, h_sides)


def _check_bag(x: Tensor):
    if x.shape[1] < 1:
        raise ValueError("empty bag")


def pool_is(probabilities: Tensor, embeddings: Tensor | None, spec: PoolingSpec, *,
            block: AttentionBlock | None = None, view_block: AttentionBlock | None = None,
            side_block: AttentionBlock | None = None, layout=None) -> tuple[Tensor, Tensor | None]:
    """Instance-space pooling of per-image probabilities (B, M) -> ((B,), weights or None)."""
    _check_bag(probabilities)
    op = spec.operator
    if op == "mean":
        return T.mean(probabilities, axis=1), None
    if op == "max":
        return T.max_(probabilities, axis=1), None
    if embeddings is None:
        raise ValueError("attention pooling needs embeddings")
    if op in ("att", "gatt"):
        a = attention_weights(embeddings, block, op == "gatt")
    else:
        a = sidewise_weights(embeddings, layout, view_block, side_block)[0]
    return weighted_sum(a, probabilities), a


def pool_es(embeddings: Tensor, spec: PoolingSpec, *, block: AttentionBlock | None = None,
            view_block: AttentionBlock | None = None, side_block: AttentionBlock | None = None,
            layout=None) -> tuple[Tensor, Tensor | None]:
    """Embedded-space pooling (B, M, D) -> (case embeddings (B, D), weights or None)."""
    _check_bag(embeddings)
    op = spec.operator
    if op == "mean":
        return T.mean(embeddings, axis=1), None
    if op == "max":
        return T.max_(embeddings, axis=1), None
    if op in ("att", "gatt"):
        a = attention_weights(embeddings, block, op == "gatt")
        return weighted_sum(a, embeddings), a
    eff, a_s, h_sides = sidewise_weights(embeddings, layout, view_block, side_block)
    return weighted_sum(a_s, h_sides), eff


# ---------------------------------------------------------------- pooling block

class MilPooling:
    """Heads plus whatever attention blocks the pooling spec needs, one set per feature type."""

    def __init__(self, reg: ComponentRegistry, spec: PoolingSpec, dims: dict[str, int],
                 hidden_dim: int, rng: np.random.Generator):
        self.spec = spec
        self.head_local = Linear(reg, "heads.local", "heads", dims["local"], 1, rng)
        self.head_fusion = Linear(reg, "heads.fusion", "heads", dims["fusion"], 1, rng)
        self.image_att: dict[str, AttentionBlock] = {}
        self.view_att: dict[str, AttentionBlock] = {}
        self.side_att: dict[str, AttentionBlock] = {}
        for f in FEATURE_TYPES:
            if spec.operator in ("att", "gatt"):
                self.image_att[f] = AttentionBlock(reg, f"image_att.{f}", "image_att", dims[f], hidden_dim,
                                                   spec.operator == "gatt", rng)
            elif spec.operator == "side_att":
                self.view_att[f] = AttentionBlock(reg, f"view_att.{f}", "view_att", dims[f], hidden_dim, False, rng)
                self.side_att[f] = AttentionBlock(reg, f"side_att.{f}", "side_att", dims[f], hidden_dim, False, rng)

    def classify(self, ftype: str, h: Tensor) -> Tensor:
        """g followed by sigmoid; for top-t scores g is the plain mean (already in (0, 1))."""
        if ftype == "topt":
            return T.mean(h, axis=-1)
        head = self.head_local if ftype == "local" else self.head_fusion
        z = head(h)
        return T.sigmoid(T.reshape(z, z.shape[:-1]))

    def _blocks(self, ftype: str) -> dict:
        return {"block": self.image_att.get(ftype), "view_block": self.view_att.get(ftype),
                "side_block": self.side_att.get(ftype)}

    def case_forward(self, features: dict[str, Tensor], layout) -> tuple[CaseHeads, PoolInfo]:
        """features: ftype -> (B, M, d) image embeddings in ``layout`` order."""
        info = PoolInfo()
        probs = {}
        for f in FEATURE_TYPES:
            h = features[f]
            if self.spec.paradigm == "IS":
                img_p = self.classify(f, h)
                p, a = pool_is(img_p, h, self.spec, layout=layout, **self._blocks(f))
                info.image_probs[f] = img_p.data.copy()
            else:
                h_n, a = pool_es(h, self.spec, layout=layout, **self._blocks(f))
                p = self.classify(f, h_n)
            if a is not None:
                info.image_weights[f] = a.data.copy()
            probs[f] = p
        return CaseHeads(probs["topt"], probs["local"], probs["fusion"]), info


def participating_attention(spec: PoolingSpec, layout) -> set[str]:
    """Attention components that receive gradient for a bag of this layout."""
    if spec.operator in ("att", "gatt"):
        return {"image_att"} if len(layout) > 1 else set()
    if spec.operator == "side_att":
        sides = side_indices(layout)
        out = set()
        if any(len(ix) > 1 for ix in sides.values()):
            out.add("view_att")
        if len(sides) == 2:
            out.add("side_att")
        return out
    return set()
