"""Per-image feature extraction: saliency, top-t scores, ROI retrieval, patch attention.

All functions work on a stack of N images at once; a single image is N = 1.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .casedata import resize_bilinear
from .nn import AttentionBlock, ComponentRegistry, Conv2d, Linear
from .tensor import Tensor


@dataclass
class NetConfig:
    channels_per_stage: tuple = (8, 16, 32)
    embed_dim: int = 32
    kernel: int = 3

    def __post_init__(self):
        self.channels_per_stage = tuple(int(c) for c in self.channels_per_stage)
        if not self.channels_per_stage or min(self.channels_per_stage) < 1:
            raise ValueError("NetConfig needs at least one stage with >= 1 channel")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")

    @property
    def reduction(self) -> int:
        return 2 ** len(self.channels_per_stage)


@dataclass
class SaliencyMap:
    values: np.ndarray  # (H', W'), each in (0, 1)
    source_shape: tuple


@dataclass
class PatchCandidate:
    crop: np.ndarray
    box: tuple  # (x0, y0, x1, y1), half-open, image space
    window: tuple  # (row, col, height, width) in saliency space
    saliency_mass: float
    attention: float = float("nan")


@dataclass
class FeatureBundle:
    """Features of a stack of N images (row i belongs to image i)."""

    h_topt: Tensor  # (N, t)
    h_local: Tensor  # (N, D)
    h_fusion: Tensor  # (N, C + D)
    pooled_global: Tensor  # (N, C)
    saliency: Tensor  # (N, H', W')
    patch_attention: Tensor  # (N, k)
    patches: list = field(default_factory=list)  # N lists of k PatchCandidate

    def saliency_map(self, i: int, source_shape) -> SaliencyMap:
        return SaliencyMap(self.saliency.data[i].copy(), tuple(source_shape))


def out_extent(n: int, stages: int) -> int:
    for _ in range(stages):
        n = (n - 1) // 2 + 1
    return n


def window_extent(n: int) -> int:
    """Retrieval window side: a quarter of the saliency extent, rounded half up, at least 1."""
    return max(1, int(np.floor(n / 4 + 0.5)))


def receptive_shift(stages: int, kernel: int, ratio: float) -> int:
    """Pixel offset from a cell's ratio-mapped centre to the centre of its receptive field.

    A stride-2 stage with padding kernel//2 centres output i on input 2i + (kernel-1)/2 - pad,
    so for odd kernels deep cells look at pixel ``2**stages * i`` rather than the middle of
    ``[ratio*i, ratio*(i+1))``.
    """
    centre, step = 0.0, 1.0
    for _ in range(stages):
        centre += step * ((kernel - 1) / 2 - kernel // 2)
        step *= 2
    return int(np.floor(centre - (ratio - 1) / 2 + 0.5))


def num_top(t_fraction: float, n_positions: int) -> int:
    if not 0 < t_fraction <= 1:
        raise ValueError("t_fraction must lie in (0, 1]")
    return max(1, int(np.floor(t_fraction * n_positions + 0.5)))


class ConvNet:
    """Stack of stride-2 3x3 conv + ReLU stages."""

    def __init__(self, reg: ComponentRegistry, prefix: str, component: str, cfg: NetConfig, rng):
        self.stages = []
        c_in = 1
        for i, c in enumerate(cfg.channels_per_stage):
            self.stages.append(Conv2d(reg, f"{prefix}.conv{i}", component, c_in, c, cfg.kernel, 2, cfg.kernel // 2, rng))
            c_in = c

    def __call__(self, x: Tensor) -> Tensor:
        for conv in self.stages:
            x = T.relu(conv(x))
        return x


class FeatureNet:
    def __init__(self, reg: ComponentRegistry, net: NetConfig, image_shape: tuple, *, t_fraction: float = 0.02,
                 k: int = 6, patch_size: int = 16, hidden_dim: int = 128, rng: np.random.Generator):
        h, w = image_shape
        stages = len(net.channels_per_stage)
        if h < 2 ** stages or w < 2 ** stages:
            raise ValueError(f"image {h}x{w} too small for {stages} stride-2 stages")
        if k < 1:
            raise ValueError("k must be >= 1")
        self.cfg = net
        self.image_shape = (h, w)
        self.map_shape = (out_extent(h, stages), out_extent(w, stages))
        self.t = num_top(t_fraction, self.map_shape[0] * self.map_shape[1])
        self.k = k
        self.patch_size = patch_size
        self.window = (window_extent(self.map_shape[0]), window_extent(self.map_shape[1]))
        self.roi_shift = (receptive_shift(stages, net.kernel, h / self.map_shape[0]),
                          receptive_shift(stages, net.kernel, w / self.map_shape[1]))
        if patch_size < 2 ** stages:
            raise ValueError("patch_size too small for the local network")
        c_last = net.channels_per_stage[-1]
        self.global_net = ConvNet(reg, "global", "global", net, rng)
        self.saliency_conv = Conv2d(reg, "global.saliency", "global", c_last, 1, 1, 1, 0, rng)
        self.local_net = ConvNet(reg, "local", "local", net, rng)
        self.local_proj = Linear(reg, "local.proj", "local", c_last, net.embed_dim, rng, init="he")
        self.patch_att = AttentionBlock(reg, "local.patch_att", "local", net.embed_dim, hidden_dim, True, rng)
        self.global_dim = c_last
        self.fusion_dim = c_last + net.embed_dim

    # -- global branch
    def global_forward(self, images: Tensor) -> tuple[Tensor, Tensor]:
        """images (N, 1, H, W) -> feature map (N, C, H', W') and its spatial max (N, C)."""
        if images.shape[2:] != self.image_shape:
            raise ValueError(f"expected images of extent {self.image_shape}, got {images.shape[2:]}")
        fmap = self.global_net(images)
        n, c = fmap.shape[:2]
        pooled = T.max_(T.reshape(fmap, (n, c, -1)), axis=2)
        return fmap, pooled

    def saliency(self, fmap: Tensor) -> Tensor:
        s = T.sigmoid(self.saliency_conv(fmap))
        return T.reshape(s, (s.shape[0],) + s.shape[2:])

    def topt_features(self, sal: Tensor) -> Tensor:
        return T.topk(T.reshape(sal, (sal.shape[0], -1)), self.t, axis=1)

    # -- ROI retrieval (no gradient: positions come from argmax)
    def retrieve_roi(self, images: np.ndarray, sal: np.ndarray) -> list[list[PatchCandidate]]:
        return retrieve_roi(images, sal, self.k, self.window, self.patch_size, self.roi_shift)

    def local_forward(self, crops: np.ndarray) -> tuple[Tensor, Tensor]:
        """crops (N, k, p, p) -> h_local (N, D) and patch attentions (N, k)."""
        n, k, ph, pw = crops.shape
        x = Tensor(crops.reshape(n * k, 1, ph, pw))
        f = self.local_net(x)
        f = T.mean(T.reshape(f, f.shape[:2] + (-1,)), axis=2)
        emb = T.reshape(T.relu(self.local_proj(f)), (n, k, -1))
        att = self.patch_att.weights(emb)
        h_local = T.sum_(T.reshape(att, (n, k, 1)) * emb, axis=1)
        return h_local, att

    @staticmethod
    def fusion(pooled_global: Tensor, h_local: Tensor) -> Tensor:
        return T.concat([pooled_global, h_local], axis=1)

    def forward(self, images: np.ndarray, patches: list | None = None) -> FeatureBundle:
        """images (N, H, W). ``patches`` reuses earlier candidates instead of retrieving new ones."""
        x = Tensor(images[:, None, :, :])
        fmap, pooled = self.global_forward(x)
        sal = self.saliency(fmap)
        h_topt = self.topt_features(sal)
        if patches is None:
            patches = self.retrieve_roi(images, sal.data)
        crops = np.stack([np.stack([p.crop for p in row]) for row in patches])
        h_local, att = self.local_forward(crops)
        for row, a in zip(patches, att.data):
            for p, aj in zip(row, a):
                p.attention = float(aj)
        return FeatureBundle(h_topt, h_local, self.fusion(pooled, h_local), pooled, sal, att, patches)


def retrieve_roi(images: np.ndarray, sal: np.ndarray, k: int, window: tuple, patch_size: int,
                 shift: tuple = (0, 0)):
    """Greedy top-k windows of summed saliency; each pick is blanked to -inf so it is never reused.

    Windows map to image space by the resolution ratio, then move by ``shift`` (dy, dx) pixels
    and slide back inside the image if that pushed them over an edge.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    n, mh, mw = sal.shape
    wh, ww = window
    if wh > mh or ww > mw:
        raise ValueError(f"window {window} does not fit saliency map {(mh, mw)}")
    ih, iw = images.shape[1:]
    ry, rx = ih / mh, iw / mw
    work = np.array(sal, dtype=np.float64)
    out = [[] for _ in range(n)]
    for _ in range(k):
        # windows are summed directly so blanked cells propagate -inf exactly
        sums = np.zeros((n, mh - wh + 1, mw - ww + 1))
        for dy in range(wh):
            for dx in range(ww):
                sums += work[:, dy:dy + mh - wh + 1, dx:dx + mw - ww + 1]
        flat = sums.reshape(n, -1)
        best = np.argmax(flat, axis=1)
        for i in range(n):
            mass = flat[i, best[i]]
            if not np.isfinite(mass):
                raise ValueError(f"only {len(out[i])} non-overlapping windows available, k={k}")
            r, c = divmod(int(best[i]), sums.shape[2])
            work[i, r:r + wh, c:c + ww] = -np.inf
            y0 = min(ih - 1, int(round(r * ry)))
            x0 = min(iw - 1, int(round(c * rx)))
            y1 = max(y0 + 1, min(ih, int(round((r + wh) * ry))))
            x1 = max(x0 + 1, min(iw, int(round((c + ww) * rx))))
            y0, y1 = _slide(y0 + shift[0], y1 + shift[0], ih)
            x0, x1 = _slide(x0 + shift[1], x1 + shift[1], iw)
            crop = resize_bilinear(images[i, y0:y1, x0:x1], patch_size, patch_size)
            out[i].append(PatchCandidate(crop, (x0, y0, x1, y1), (r, c, wh, ww), float(mass)))
    return out


def _slide(a: int, b: int, n: int) -> tuple[int, int]:
    if a < 0:
        a, b = 0, b - a
    if b > n:
        a, b = max(0, a - (b - n)), n
    return a, b
