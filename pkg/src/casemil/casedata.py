"""Cases, images, manifests, preprocessing, grouping and the synthetic benchmark."""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import cv2
import numpy as np
from scipy import ndimage

from .imageio import quantize, to_unit_grid, write_pgm

MANIFEST_HEADER = ("case_id", "side", "view", "path", "case_label", "image_label", "roi_boxes")
FOREGROUND_FLOOR = 0.05
STANDARD_VIEWS = ("CC", "MLO")
EXTRA_VIEWS = ("LM", "ML", "XCCL")
CASE_SHAPES = ("1L/1R", "nL/mR", "1L+1R", "4-std", "4-std+extra")


class Side(str, enum.Enum):
    L = "L"
    R = "R"


class View(str, enum.Enum):
    CC = "CC"
    MLO = "MLO"
    LM = "LM"
    ML = "ML"
    XCCL = "XCCL"


class Label(enum.IntEnum):
    benign = 0
    malignant = 1


class LesionKind(str, enum.Enum):
    mass = "mass"
    calcification = "calcification"


_VIEW_ORDER = {v: i for i, v in enumerate(View)}
_SIDE_ORDER = {Side.L: 0, Side.R: 1}


class DataError(ValueError):
    pass


class ManifestError(DataError):
    def __init__(self, msg: str, line: int | None = None):
        super().__init__(f"line {line}: {msg}" if line is not None else msg)
        self.line = line


@dataclass(frozen=True)
class RoiBox:
    """Half-open pixel box [x0, x1) x [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int
    kind: LesionKind = LesionKind.mass
    label: Label = Label.malignant

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise DataError(f"degenerate box {self}")

    @property
    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def within(self, height: int, width: int) -> bool:
        return 0 <= self.x0 and 0 <= self.y0 and self.x1 <= width and self.y1 <= height

    def to_token(self) -> str:
        return f"{self.x0}:{self.y0}:{self.x1}:{self.y1}:{self.kind.value}:{self.label.name}"

    @classmethod
    def from_token(cls, tok: str) -> "RoiBox":
        parts = tok.strip().split(":")
        if len(parts) != 6:
            raise ValueError(f"bad roi token {tok!r}")
        x0, y0, x1, y1 = (int(p) for p in parts[:4])
        return cls(x0, y0, x1, y1, LesionKind(parts[4]), Label[parts[5]])


@dataclass(eq=False)
class ImageRecord:
    side: Side
    view: View
    pixels: np.ndarray
    image_label: Label | None = None
    roi_boxes: list[RoiBox] = field(default_factory=list)
    source_path: str = ""
    source_boxes: list[RoiBox] = field(default_factory=list)
    raw: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        h, w = self.pixels.shape
        for b in self.roi_boxes:
            if not b.within(h, w):
                raise DataError(f"roi box {b} outside {h}x{w} image")

    @property
    def key(self) -> tuple[Side, View]:
        return (self.side, self.view)

    def same_as(self, other: "ImageRecord") -> bool:
        return (self.side == other.side and self.view == other.view
                and self.image_label == other.image_label
                and self.roi_boxes == other.roi_boxes
                and self.source_boxes == other.source_boxes
                and self.source_path == other.source_path
                and self.pixels.shape == other.pixels.shape
                and np.array_equal(self.pixels, other.pixels))


def image_sort_key(img: ImageRecord):
    return (_SIDE_ORDER[img.side], _VIEW_ORDER[img.view])


@dataclass(eq=False)
class CaseRecord:
    case_id: str
    images: list[ImageRecord]
    case_label: Label

    def __post_init__(self):
        if not self.images:
            raise DataError(f"case {self.case_id}: no images")
        keys = [im.key for im in self.images]
        if len(set(keys)) != len(keys):
            raise DataError(f"case {self.case_id}: duplicate (side, view)")
        labels = [im.image_label for im in self.images]
        if all(lb is not None for lb in labels):
            any_mal = any(lb == Label.malignant for lb in labels)
            if any_mal != (self.case_label == Label.malignant):
                raise DataError(f"case {self.case_id}: case label {self.case_label.name} "
                                f"inconsistent with image labels")
        self.images.sort(key=image_sort_key)

    @property
    def layout(self) -> tuple[tuple[Side, View], ...]:
        return tuple(im.key for im in self.images)

    def same_as(self, other: "CaseRecord") -> bool:
        return (self.case_id == other.case_id and self.case_label == other.case_label
                and len(self.images) == len(other.images)
                and all(a.same_as(b) for a, b in zip(self.images, other.images)))


# ---------------------------------------------------------------- preprocessing

@dataclass(frozen=True)
class Transform:
    """Maps original-image coordinates to preprocessed coordinates."""

    y0: int
    x0: int
    crop_h: int
    crop_w: int
    flip: bool
    padded_h: int
    padded_w: int
    out_h: int
    out_w: int

    def map_box(self, box: RoiBox) -> RoiBox | None:
        x0 = max(box.x0, self.x0) - self.x0
        x1 = min(box.x1, self.x0 + self.crop_w) - self.x0
        y0 = max(box.y0, self.y0) - self.y0
        y1 = min(box.y1, self.y0 + self.crop_h) - self.y0
        if x0 >= x1 or y0 >= y1:
            return None
        if self.flip:
            x0, x1 = self.crop_w - x1, self.crop_w - x0
        sy, sx = self.out_h / self.padded_h, self.out_w / self.padded_w
        nx0, ny0 = int(math.floor(x0 * sx)), int(math.floor(y0 * sy))
        nx1 = min(self.out_w, max(nx0 + 1, int(math.ceil(x1 * sx - 1e-9))))
        ny1 = min(self.out_h, max(ny0 + 1, int(math.ceil(y1 * sy - 1e-9))))
        return RoiBox(nx0, ny0, nx1, ny1, box.kind, box.label)


def foreground_bbox(raw: np.ndarray) -> tuple[int, int, int, int]:
    """(y0, x0, y1, x1) of the largest 4-connected region above the foreground floor."""
    peak = float(raw.max()) if raw.size else 0.0
    if peak <= 0:
        raise DataError("no foreground")
    mask = raw > FOREGROUND_FLOOR * peak
    labels, n = ndimage.label(mask)
    if n == 0:
        raise DataError("no foreground")
    sizes = np.bincount(labels.reshape(-1))[1:]
    biggest = int(np.argmax(sizes)) + 1
    sl = ndimage.find_objects(labels)[biggest - 1]
    return sl[0].start, sl[1].start, sl[0].stop, sl[1].stop


def crop_and_orient(raw: np.ndarray, side: Side | str) -> tuple[np.ndarray, tuple[int, int, int, int], bool]:
    """Steps 1-4: threshold, largest component, bbox crop, flip right-side images."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or 0 in raw.shape:
        raise DataError("raw image must be a non-empty 2-D grid")
    y0, x0, y1, x1 = foreground_bbox(raw)
    crop = raw[y0:y1, x0:x1]
    flip = Side(side) == Side.R
    if flip:
        crop = crop[:, ::-1]
    return np.ascontiguousarray(crop), (y0, x0, y1, x1), flip


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    if img.shape == (height, width):
        return img.copy()
    return cv2.resize(np.ascontiguousarray(img, dtype=np.float64), (width, height),
                      interpolation=cv2.INTER_LINEAR)


def preprocess_with_transform(raw: np.ndarray, target_h: int, target_w: int,
                              side: Side | str) -> tuple[np.ndarray, Transform]:
    crop, (y0, x0, y1, x1), flip = crop_and_orient(raw, side)
    h, w = crop.shape
    # pad bottom or right (the edge away from the chest wall after flipping)
    if h * target_w > w * target_h:
        ph, pw = h, max(w, int(round(h * target_w / target_h)))
    else:
        ph, pw = max(h, int(round(w * target_h / target_w))), w
    padded = np.zeros((ph, pw))
    padded[:h, :w] = crop
    out = np.clip(resize_bilinear(padded, target_h, target_w), 0.0, 1.0)
    return out, Transform(y0, x0, y1 - y0, x1 - x0, flip, ph, pw, target_h, target_w)


def preprocess_image(raw: np.ndarray, target_h: int, target_w: int, side: Side | str) -> np.ndarray:
    return preprocess_with_transform(raw, target_h, target_w, side)[0]


def make_image_record(raw: np.ndarray, side, view, target_h: int, target_w: int,
                      image_label: Label | None = None, source_boxes: Sequence[RoiBox] = (),
                      source_path: str = "", keep_raw: bool = False) -> ImageRecord:
    pixels, tf = preprocess_with_transform(raw, target_h, target_w, side)
    mapped = [b for b in (tf.map_box(b) for b in source_boxes) if b is not None]
    return ImageRecord(Side(side), View(view), pixels, image_label, mapped, source_path,
                       list(source_boxes), raw if keep_raw else None)


# ---------------------------------------------------------------- manifests

def _parse_label(tok: str, line: int, what: str) -> Label | None:
    tok = tok.strip()
    if not tok:
        return None
    if tok in ("0", "1"):
        return Label(int(tok))
    try:
        return Label[tok]
    except KeyError:
        raise ManifestError(f"unknown {what} {tok!r}", line) from None


def load_manifest(path, target_h: int = 64, target_w: int = 48) -> list[CaseRecord]:
    path = Path(path)
    base = path.parent
    groups: dict[str, list] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        header = [h.strip() for h in header]
        missing = [c for c in MANIFEST_HEADER[:5] if c not in header]
        if missing:
            raise ManifestError(f"missing columns {missing}", 1)
        col = {name: header.index(name) for name in header}
        for lineno, row in enumerate(reader, start=2):
            if not any(c.strip() for c in row):
                continue
            get = lambda name: row[col[name]].strip() if name in col and col[name] < len(row) else ""  # noqa: E731
            case_id = get("case_id")
            try:
                side = Side(get("side"))
            except ValueError:
                raise ManifestError(f"unknown side {get('side')!r}", lineno) from None
            try:
                view = View(get("view"))
            except ValueError:
                raise ManifestError(f"unknown view {get('view')!r}", lineno) from None
            case_label = _parse_label(get("case_label"), lineno, "case label")
            if case_label is None:
                raise ManifestError("missing case label", lineno)
            image_label = _parse_label(get("image_label"), lineno, "image label")
            boxes_tok = get("roi_boxes")
            try:
                boxes = [RoiBox.from_token(t) for t in boxes_tok.split(";") if t.strip()]
            except (ValueError, KeyError) as exc:
                raise ManifestError(f"bad roi_boxes: {exc}", lineno) from None
            entry = groups.setdefault(case_id, [])
            if any(e[1] == side and e[2] == view for e in entry):
                raise ManifestError(f"duplicate image ({case_id}, {side.value}, {view.value})", lineno)
            entry.append((lineno, side, view, get("path"), case_label, image_label, boxes))

    cases = []
    for case_id, rows in groups.items():
        labels = {r[4] for r in rows}
        if len(labels) != 1:
            raise ManifestError(f"case {case_id}: conflicting case labels", rows[0][0])
        images = []
        for lineno, side, view, rel, _, image_label, boxes in rows:
            img_path = base / rel
            try:
                raw = to_unit_grid(img_path)
                rec = make_image_record(raw, side, view, target_h, target_w, image_label, boxes, rel)
            except (OSError, DataError) as exc:
                raise ManifestError(f"{rel}: {exc}", lineno) from None
            images.append(rec)
        try:
            cases.append(CaseRecord(case_id, images, labels.pop()))
        except DataError as exc:
            raise ManifestError(str(exc), rows[0][0]) from None
    return cases


def write_manifest(cases: Iterable[CaseRecord], path) -> None:
    """Write manifest rows; image files are referenced by ``source_path`` and not rewritten."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(MANIFEST_HEADER)
        for case in cases:
            for im in case.images:
                wr.writerow([case.case_id, im.side.value, im.view.value, im.source_path,
                             case.case_label.name,
                             "" if im.image_label is None else im.image_label.name,
                             ";".join(b.to_token() for b in im.source_boxes)])


# ---------------------------------------------------------------- grouping

@dataclass(frozen=True)
class CaseGroup:
    shape: str  # 1L/1R | nL/mR | 1L+1R | nL+mR
    std: bool
    four_std: bool
    mix: bool

    def names(self) -> list[str]:
        out = [self.shape]
        if self.std:
            out.append("std")
        if self.four_std:
            out.append("4-std")
        if self.mix:
            out.append("mix")
        return out + ["All"]


GROUP_NAMES = ("1L/1R", "nL/mR", "1L+1R", "nL+mR", "std", "4-std", "mix", "All")
_FOUR_STD = {(Side.L, View.CC), (Side.L, View.MLO), (Side.R, View.CC), (Side.R, View.MLO)}


def case_group_of(case: CaseRecord) -> CaseGroup:
    n_left = sum(im.side == Side.L for im in case.images)
    n_right = len(case.images) - n_left
    if len(case.images) == 1:
        shape = "1L/1R"
    elif n_left == 0 or n_right == 0:
        shape = "nL/mR"
    elif n_left == 1 and n_right == 1:
        shape = "1L+1R"
    else:
        shape = "nL+mR"
    std = all(im.view.value in STANDARD_VIEWS for im in case.images)
    four = len(case.images) == 4 and set(case.layout) == _FOUR_STD
    return CaseGroup(shape, std, four, not std)


def group_batches(cases: Sequence[CaseRecord], batch_size: int,
                  seed: int | None = None) -> list[list[CaseRecord]]:
    """Batches whose cases share one (side, view) combination.

    With a seed, cases are shuffled within each combination and the batch order is
    shuffled; without one, input order is kept.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    by_layout: dict[tuple, list[CaseRecord]] = {}
    for c in cases:
        by_layout.setdefault(c.layout, []).append(c)
    rng = np.random.default_rng(seed) if seed is not None else None
    batches = []
    for members in by_layout.values():
        if rng is not None:
            members = [members[i] for i in rng.permutation(len(members))]
        batches.extend(members[i:i + batch_size] for i in range(0, len(members), batch_size))
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


# ---------------------------------------------------------------- synthetic data

@dataclass
class SyntheticConfig:
    n_cases: int = 200
    image_height: int = 64
    image_width: int = 48
    malignant_fraction: float = 0.3
    view_count_distribution: dict = field(default_factory=lambda: {
        "1L/1R": 0.075, "nL/mR": 0.075, "1L+1R": 0.075, "4-std": 0.7, "4-std+extra": 0.075})
    lesion_contrast: float = 0.6
    seed: int = 0
    split_fractions: tuple = (0.7, 0.1, 0.2)
    split_sizes: tuple | None = None

    def validate(self) -> None:
        if self.n_cases < 1:
            raise ValueError("n_cases must be >= 1")
        if not 0 < self.malignant_fraction < 1:
            raise ValueError("malignant_fraction must lie in (0, 1)")
        unknown = set(self.view_count_distribution) - set(CASE_SHAPES)
        if unknown:
            raise ValueError(f"unknown case shapes {sorted(unknown)}; valid: {CASE_SHAPES}")
        probs = np.array([self.view_count_distribution.get(s, 0.0) for s in CASE_SHAPES], dtype=float)
        if np.any(probs < 0) or probs.sum() <= 0:
            raise ValueError("infeasible view_count_distribution (zero mass)")
        if abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError(f"view_count_distribution sums to {probs.sum()}, expected 1")
        if self.image_height < 16 or self.image_width < 16:
            raise ValueError("synthetic images need extents >= 16")
        if self.split_sizes is not None and sum(self.split_sizes) != self.n_cases:
            raise ValueError("split_sizes must add up to n_cases")

    @property
    def shape_probs(self) -> np.ndarray:
        return np.array([self.view_count_distribution.get(s, 0.0) for s in CASE_SHAPES], dtype=float)


def _layout_for(shape: str, rng: np.random.Generator) -> list[tuple[Side, View]]:
    sides = (Side.L, Side.R)
    if shape == "1L/1R":
        return [(sides[rng.integers(2)], View(STANDARD_VIEWS[rng.integers(2)]))]
    if shape == "nL/mR":
        s = sides[rng.integers(2)]
        out = [(s, View.CC), (s, View.MLO)]
        if rng.random() < 0.3:
            out.append((s, View(EXTRA_VIEWS[rng.integers(3)])))
        return out
    if shape == "1L+1R":
        return [(Side.L, View(STANDARD_VIEWS[rng.integers(2)])),
                (Side.R, View(STANDARD_VIEWS[rng.integers(2)]))]
    out = [(Side.L, View.CC), (Side.L, View.MLO), (Side.R, View.CC), (Side.R, View.MLO)]
    if shape == "4-std+extra":
        out.append((sides[rng.integers(2)], View(EXTRA_VIEWS[rng.integers(3)])))
    return out


@dataclass
class _Lesion:
    u: float  # depth from chest wall, fraction of breast extent
    v: float  # vertical offset, fraction of half-height
    radius: float
    malignant: bool
    arms: int
    phase: float


def _breast_canvas(h: int, w: int, rng: np.random.Generator):
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    cy = h / 2 + rng.uniform(-0.04, 0.04) * h
    ry = h * rng.uniform(0.40, 0.46)
    rx = w * rng.uniform(0.78, 0.88)
    inside = ((yy - cy) / ry) ** 2 + (xx / rx) ** 2 <= 1.0
    noise = ndimage.gaussian_filter(rng.standard_normal((h, w)), 2.0)
    noise /= noise.std() + 1e-12
    depth = np.clip(1.0 - np.sqrt(((yy - cy) / ry) ** 2 + (xx / rx) ** 2), 0, 1)
    tissue = 0.30 + 0.10 * np.sqrt(depth) + 0.06 * noise
    img = np.where(inside, np.clip(tissue, 0.08, 1.0), 0.0)
    return img, (cy, ry, rx), yy, xx


def _plant(img, geom, yy, xx, les: _Lesion, contrast: float, rng) -> RoiBox:
    cy, ry, rx = geom
    jitter = rng.uniform(-0.03, 0.03, size=2)
    cx = (les.u + jitter[0]) * rx
    half = ry * math.sqrt(max(1e-3, 1 - les.u ** 2))
    cyl = cy + (les.v + jitter[1]) * half * 0.8
    dy, dx = yy - cyl, xx - cx
    d = np.sqrt(dy * dy + dx * dx)
    if les.malignant:
        theta = np.arctan2(dy, dx)
        edge = les.radius * (1.0 + 0.45 * np.cos(les.arms * theta + les.phase))
        prof = 1.0 / (1.0 + np.exp(-(edge - d) / 0.6))
        amp = contrast
    else:
        prof = np.exp(-0.5 * (d / (0.6 * les.radius)) ** 2)
        amp = 0.35 * contrast
    prof = np.where(img > 0, prof, 0.0)
    img += amp * prof
    ys, xs = np.nonzero(prof > 0.1)
    h, w = img.shape
    if ys.size == 0:
        iy, ix = int(np.clip(round(cyl), 0, h - 1)), int(np.clip(round(cx), 0, w - 1))
        ys, xs = np.array([iy]), np.array([ix])
    return RoiBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1, LesionKind.mass,
                  Label.malignant if les.malignant else Label.benign)


def _new_lesion(rng, malignant: bool, scale: float) -> _Lesion:
    return _Lesion(u=rng.uniform(0.25, 0.7), v=rng.uniform(-0.6, 0.6),
                   radius=rng.uniform(3.0, 4.5) * scale, malignant=malignant,
                   arms=int(rng.integers(5, 8)), phase=rng.uniform(0, 2 * math.pi))


def _raw_image(cfg: SyntheticConfig, side: Side, lesions: list[_Lesion], rng):
    h = cfg.image_height + cfg.image_height // 8
    w = cfg.image_width + cfg.image_width // 4
    img, geom, yy, xx = _breast_canvas(h, w, rng)
    boxes = [_plant(img, geom, yy, xx, les, cfg.lesion_contrast, rng) for les in lesions]
    img = np.clip(img, 0.0, 1.0)
    # burned-in marker in the far top corner, kept clear of the breast region
    mk = np.zeros_like(img, dtype=bool)
    mk[1:4, w - 5:w - 2] = True
    if not (ndimage.binary_dilation(img > 0, iterations=2) & mk).any():
        img[mk] = 0.9
    if side == Side.R:
        img = img[:, ::-1]
        boxes = [RoiBox(w - b.x1, b.y0, w - b.x0, b.y1, b.kind, b.label) for b in boxes]
    return quantize(img), boxes


def _stratified_split(labels: np.ndarray, sizes: Sequence[int], rng) -> list[np.ndarray]:
    n = len(labels)
    mal = np.flatnonzero(labels == 1)
    ben = np.flatnonzero(labels == 0)
    mal, ben = mal[rng.permutation(mal.size)], ben[rng.permutation(ben.size)]
    # largest-remainder allocation of malignant cases per split
    quota = np.array(sizes, dtype=float) * mal.size / n
    n_mal = np.floor(quota).astype(int)
    for i in np.argsort(-(quota - n_mal), kind="stable")[: mal.size - n_mal.sum()]:
        n_mal[i] += 1
    out, mi, bi = [], 0, 0
    for size, m in zip(sizes, n_mal):
        m = min(m, size)
        b = size - m
        out.append(np.sort(np.concatenate([mal[mi:mi + m], ben[bi:bi + b]])))
        mi += m
        bi += b
    return out


def _split_sizes(cfg: SyntheticConfig) -> list[int]:
    if cfg.split_sizes is not None:
        return list(cfg.split_sizes)
    fr = np.asarray(cfg.split_fractions, dtype=float)
    sizes = np.floor(fr / fr.sum() * cfg.n_cases).astype(int)
    sizes[0] += cfg.n_cases - sizes.sum()
    return [int(s) for s in sizes]


def generate_synthetic(cfg: SyntheticConfig) -> tuple[list[CaseRecord], list[CaseRecord], list[CaseRecord]]:
    cfg.validate()
    root = np.random.default_rng(cfg.seed)
    n = cfg.n_cases
    probs = cfg.shape_probs / cfg.shape_probs.sum()
    shapes = root.choice(len(CASE_SHAPES), size=n, p=probs)
    n_mal = min(n - 1, max(1, int(round(cfg.malignant_fraction * n)))) if n > 1 else 1
    labels = np.zeros(n, dtype=int)
    labels[root.permutation(n)[:n_mal]] = 1
    scale = cfg.image_height / 64.0
    width = len(str(n - 1))

    cases = []
    for i in range(n):
        rng = np.random.default_rng([cfg.seed, i])
        layout = _layout_for(CASE_SHAPES[shapes[i]], rng)
        malignant = bool(labels[i])
        per_image: dict[tuple, list[_Lesion]] = {k: [] for k in layout}
        sides_present = sorted({s for s, _ in layout}, key=_SIDE_ORDER.get)

        def plant_on_side(mal: bool):
            side = sides_present[rng.integers(len(sides_present))]
            keys = [k for k in layout if k[0] == side]
            pick = rng.random(len(keys)) < 0.75
            if not pick.any():
                pick[rng.integers(len(keys))] = True
            les = _new_lesion(rng, mal, scale)
            for k, p in zip(keys, pick):
                if p:
                    per_image[k].append(les)

        if malignant:
            plant_on_side(True)
            if rng.random() < 0.3:
                plant_on_side(False)
        elif rng.random() < 0.6:
            plant_on_side(False)

        images = []
        case_id = f"syn{cfg.seed}_{i:0{width}d}"
        for side, view in layout:
            lesions = per_image[(side, view)]
            raw_q, boxes = _raw_image(cfg, side, lesions, rng)
            img_label = Label.malignant if any(l.malignant for l in lesions) else Label.benign
            rel = f"images/{case_id}_{side.value}_{view.value}.pgm"
            images.append(make_image_record(raw_q / 65535.0, side, view, cfg.image_height, cfg.image_width,
                                            img_label, boxes, rel, keep_raw=True))
        for im in images:
            im.raw = quantize(im.raw)
        cases.append(CaseRecord(case_id, images, Label(int(malignant))))

    parts = _stratified_split(labels, _split_sizes(cfg), root)
    return tuple([cases[j] for j in idx] for idx in parts)


def write_dataset(splits: dict[str, list[CaseRecord]], out_dir) -> None:
    """Emit raw P5 images and manifests (``manifest.csv`` plus one per split)."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    everything = []
    for name, cases in splits.items():
        for case in cases:
            for im in case.images:
                if im.raw is None:
                    raise DataError(f"case {case.case_id}: no raw image to write")
                write_pgm(out_dir / im.source_path, im.raw, 65535)
        write_manifest(cases, out_dir / f"{name}.csv")
        everything.extend(cases)
    write_manifest(everything, out_dir / "manifest.csv")
