"""Where and how to paste stored instances into a new image.

The image is split into a grid of rectangles; an instance is anchored at
the top-left corner of the free rectangle with the most background, shrunk
until it fits, and blended in with mixup weight ``lam``::

    image[u + a, v + b] = lam * image[u + a, v + b] + (1 - lam) * crop[a, b]
    soft[u + a, v + b]  = lam * soft[u + a, v + b]  + (1 - lam) * onehot(cls)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

import cv2
import numpy as np

from .errors import PlacementSkip
from .memory import InstanceRecord
from .protocol import BACKGROUND, IGNORE, SegSample

SIZE_POLICIES = ("fit", "crop", "random")
OVERLAP_POLICIES = ("region", "iou")


@dataclass(frozen=True)
class RegionGrid:
    H: int
    W: int
    rows: int
    cols: int
    regions: tuple[tuple[int, int, int, int], ...]  # (top, left, height, width), row-major

    @property
    def n(self) -> int:
        return self.rows * self.cols


@dataclass(frozen=True)
class PlacementPlan:
    anchor: tuple[int, int]
    scale: float
    region_index: int
    size: tuple[int, int] = (0, 0)  # placed extent (h, w) after resizing / cropping


@dataclass(frozen=True)
class PlacementConfig:
    region_n: int = 6
    max_instances: int = 2
    beta_a: float = 0.5
    beta_b: float = 0.5
    fixed_lambda: float | None = None
    min_scale: float = 0.1
    size_policy: str = "fit"
    overlap_policy: str = "region"
    overlap_iou: float = 0.0

    def __post_init__(self):
        if self.size_policy not in SIZE_POLICIES:
            raise ValueError(f"size_policy must be one of {SIZE_POLICIES}")
        if self.overlap_policy not in OVERLAP_POLICIES:
            raise ValueError(f"overlap_policy must be one of {OVERLAP_POLICIES}")
        if self.fixed_lambda is not None and not 0.0 <= self.fixed_lambda <= 1.0:
            raise ValueError("fixed_lambda must lie in [0, 1]")
        if self.beta_a <= 0 or self.beta_b <= 0:
            raise ValueError("beta parameters must be positive")

    def draw_lambda(self, rng: np.random.Generator) -> float:
        if self.fixed_lambda is not None:
            return float(self.fixed_lambda)
        return float(rng.beta(self.beta_a, self.beta_b))


@dataclass(eq=False)
class FusedSample:
    image: np.ndarray  # H x W x 3 float32
    soft_label: np.ndarray  # H x W x K float32, rows sum to 1
    label: np.ndarray  # original hard label (H x W uint8)
    fused_mask: np.ndarray  # H x W bool
    valid: np.ndarray  # H x W bool, False on ignore pixels
    fused_classes: set[int] = field(default_factory=set)
    id: str = ""
    log: list[dict] = field(default_factory=list)

    @classmethod
    def from_sample(cls, sample: SegSample, num_outputs: int) -> "FusedSample":
        lab = np.asarray(sample.label)
        valid = lab != IGNORE
        if lab[valid].size and int(lab[valid].max()) >= num_outputs:
            raise ValueError(f"{sample.id}: label {int(lab[valid].max())} >= num_outputs {num_outputs}")
        soft = np.zeros(lab.shape + (num_outputs,), dtype=np.float32)
        hard = np.where(valid, lab, BACKGROUND)
        np.put_along_axis(soft, hard[..., None].astype(np.int64), 1.0, axis=2)
        return cls(np.array(sample.image, dtype=np.float32), soft, lab, np.zeros(lab.shape, bool), valid,
                   set(), sample.id)

    @property
    def num_outputs(self) -> int:
        return self.soft_label.shape[2]

    def hard_target(self) -> np.ndarray:
        """Argmax of the soft label; ignore pixels keep the sentinel."""
        return np.where(self.valid, self.soft_label.argmax(axis=2), IGNORE).astype(np.uint8)


def _factor_pairs(n: int):
    return [(r, n // r) for r in range(1, n + 1) if n % r == 0]


def build_region_grid(H: int, W: int, n: int = 6) -> RegionGrid:
    """rows x cols = n with cols/rows closest to W/H (ties: more columns)."""
    if n < 1:
        raise ValueError("region count must be >= 1")
    pairs = [(r, c) for r, c in _factor_pairs(n) if r <= H and c <= W]
    if not pairs:
        raise ValueError(f"{n} regions do not fit a {H}x{W} image")

    def dist(rc):
        r, c = rc
        a, b = Fraction(c * H), Fraction(r * W)
        return (max(a / b, b / a), -c)

    rows, cols = min(pairs, key=dist)
    hs = [H // rows] * (rows - 1) + [H - (H // rows) * (rows - 1)]
    ws = [W // cols] * (cols - 1) + [W - (W // cols) * (cols - 1)]
    tops = np.cumsum([0] + hs[:-1]).tolist()
    lefts = np.cumsum([0] + ws[:-1]).tolist()
    regions = tuple((tops[i], lefts[j], hs[i], ws[j]) for i in range(rows) for j in range(cols))
    return RegionGrid(H, W, rows, cols, regions)


def background_proportions(label: np.ndarray, grid: RegionGrid) -> list[Fraction]:
    bg = np.asarray(label) == BACKGROUND
    return [Fraction(int(bg[t:t + h, l:l + w].sum()), h * w) for t, l, h, w in grid.regions]


def choose_anchor(label: np.ndarray, grid: RegionGrid, occupied=()) -> tuple[tuple[int, int], int]:
    """Top-left corner and index of the free region with the most background."""
    if np.shape(label) != (grid.H, grid.W):
        raise ValueError("label does not match the grid")
    props = background_proportions(label, grid)
    free = [i for i in range(grid.n) if i not in set(occupied)]
    if not free:
        raise PlacementSkip("every region is occupied")
    best = min(free, key=lambda i: (-props[i], grid.regions[i][0] ** 2 + grid.regions[i][1] ** 2, i))
    t, l = grid.regions[best][:2]
    return (t, l), best


def fit_instance(record: InstanceRecord, anchor: tuple[int, int], H: int, W: int, region_index: int = -1,
                 min_scale: float = 0.1) -> PlacementPlan:
    """Shrink-only scale so the whole instance fits below/right of ``anchor``."""
    u, v = anchor
    if not (0 <= u < H and 0 <= v < W):
        raise ValueError(f"anchor {anchor} outside {H}x{W} image")
    h, w = record.shape
    scale = min(1.0, (H - u) / h, (W - v) / w)
    if scale < min_scale:
        raise PlacementSkip(f"scale {scale:.3f} below min_scale {min_scale}")
    size = (_scaled(h, scale), _scaled(w, scale))
    return PlacementPlan((u, v), scale, region_index, size)


def _scaled(n: int, scale: float) -> int:
    return max(1, int(math.floor(n * scale + 1e-9)))


def plan_with_policy(record: InstanceRecord, anchor, H, W, region_index, cfg: PlacementConfig,
                     rng: np.random.Generator) -> PlacementPlan:
    """Size policies: ``fit`` shrinks to fit; ``crop`` keeps the size and cuts
    the overflow; ``random`` rescales by U(0, 2] and cuts the overflow."""
    if cfg.size_policy == "fit":
        return fit_instance(record, anchor, H, W, region_index, cfg.min_scale)
    scale = 1.0 if cfg.size_policy == "crop" else float(2.0 - rng.uniform(0.0, 2.0))
    if scale < cfg.min_scale:
        raise PlacementSkip(f"scale {scale:.3f} below min_scale {cfg.min_scale}")
    h, w = record.shape
    u, v = anchor
    size = (min(_scaled(h, scale), H - u), min(_scaled(w, scale), W - v))
    return PlacementPlan((u, v), scale, region_index, size)


def resize_instance(record: InstanceRecord, plan: PlacementPlan) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear pixels / nearest mask at ``plan.scale``, cut to ``plan.size``."""
    h, w = record.shape
    sh, sw = _scaled(h, plan.scale), _scaled(w, plan.scale)
    if (sh, sw) == (h, w):
        pix, msk = record.pixels, record.mask
    else:
        pix = cv2.resize(np.ascontiguousarray(record.pixels), (sw, sh), interpolation=cv2.INTER_LINEAR)
        msk = cv2.resize(np.ascontiguousarray(record.mask), (sw, sh), interpolation=cv2.INTER_NEAREST)
    ph, pw = plan.size if plan.size != (0, 0) else (sh, sw)
    return np.clip(pix[:ph, :pw], 0.0, 1.0).astype(np.float32), msk[:ph, :pw].astype(bool)


def mixup_fuse(sample, record: InstanceRecord, plan: PlacementPlan, lam: float,
               num_outputs: int | None = None) -> FusedSample:
    """Blend one resized instance into ``sample``; returns a new FusedSample."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    if isinstance(sample, SegSample):
        if num_outputs is None:
            present = sample.classes | {record.class_id}
            num_outputs = max(present) + 1
        sample = FusedSample.from_sample(sample, num_outputs)
    if record.class_id >= sample.num_outputs:
        raise ValueError(f"class {record.class_id} has no output channel")
    pix, msk = resize_instance(record, plan)
    H, W = sample.label.shape
    u, v = plan.anchor
    ph, pw = msk.shape
    if u < 0 or v < 0 or u + ph > H or v + pw > W:
        raise ValueError(f"plan extent {(u, v, ph, pw)} leaves the {H}x{W} image")

    img = sample.image.copy()
    soft = sample.soft_label.copy()
    fused = sample.fused_mask.copy()
    win_img = img[u:u + ph, v:v + pw]
    win_soft = soft[u:u + ph, v:v + pw]
    lam64 = np.float64(lam)
    win_img[msk] = (lam64 * win_img[msk] + (1.0 - lam64) * pix[msk]).astype(np.float32)
    onehot = np.zeros(sample.num_outputs)
    onehot[record.class_id] = 1.0
    win_soft[msk] = (lam64 * win_soft[msk] + (1.0 - lam64) * onehot).astype(np.float32)
    fused[u:u + ph, v:v + pw] |= msk
    return FusedSample(img, soft, sample.label, fused, sample.valid, sample.fused_classes | {record.class_id},
                       sample.id, list(sample.log))


def fuse_all(sample: SegSample, records, grid_n: int | None = None, rng: np.random.Generator | None = None,
             num_outputs: int | None = None, cfg: PlacementConfig | None = None) -> FusedSample:
    """Place and blend ``records`` in order, one fresh lambda per instance.

    Instances that cannot be placed are dropped and noted in ``log``.
    """
    cfg = cfg or PlacementConfig()
    if grid_n is not None:
        cfg = replace(cfg, region_n=grid_n)
    rng = rng if rng is not None else np.random.default_rng(0)
    if num_outputs is None:
        num_outputs = max(sample.classes | {r.class_id for r in records} | {0}) + 1
    out = FusedSample.from_sample(sample, num_outputs)
    H, W = sample.label.shape
    grid = build_region_grid(H, W, cfg.region_n)
    occupied: list[int] = []
    for rec in records:
        entry = {"class_id": rec.class_id, "source_id": rec.source_id}
        try:
            anchor, idx = choose_anchor(sample.label, grid, occupied if cfg.overlap_policy == "region" else ())
            plan = plan_with_policy(rec, anchor, H, W, idx, cfg, rng)
            if cfg.overlap_policy == "iou" and out.fused_mask.any():
                _, msk = resize_instance(rec, plan)
                foot = np.zeros((H, W), bool)
                foot[anchor[0]:anchor[0] + msk.shape[0], anchor[1]:anchor[1] + msk.shape[1]] = msk
                inter = np.count_nonzero(foot & out.fused_mask)
                union = np.count_nonzero(foot | out.fused_mask)
                if union and inter / union > cfg.overlap_iou:
                    raise PlacementSkip(f"overlap IoU {inter / union:.3f} above {cfg.overlap_iou}")
        except PlacementSkip as exc:
            out.log.append({**entry, "status": "skipped", "reason": str(exc)})
            continue
        lam = cfg.draw_lambda(rng)
        out = mixup_fuse(out, rec, plan, lam)
        occupied.append(idx)
        out.log.append({**entry, "status": "placed", "region_index": idx, "anchor": list(plan.anchor),
                        "scale": plan.scale, "size": list(plan.size), "lambda": lam})
    return out


def instance_canvas(record: InstanceRecord, H: int, W: int, num_outputs: int) -> FusedSample:
    """A stored instance on its own: masked crop centred on a black H x W
    canvas, labelled with its class inside the mask and background outside."""
    h, w = record.shape
    if h > H or w > W:
        scale = min(H / h, W / w)
        rec_pix, rec_msk = resize_instance(record, PlacementPlan((0, 0), scale, -1))
    else:
        rec_pix, rec_msk = record.pixels, record.mask.astype(bool)
    h, w = rec_msk.shape
    top, left = (H - h) // 2, (W - w) // 2
    img = np.zeros((H, W, 3), np.float32)
    img[top:top + h, left:left + w][rec_msk] = rec_pix[rec_msk]
    label = np.zeros((H, W), np.uint8)
    label[top:top + h, left:left + w][rec_msk] = record.class_id
    out = FusedSample.from_sample(SegSample(img, label, record.source_id), num_outputs)
    out.fused_mask = label != BACKGROUND
    out.fused_classes = {record.class_id}
    return out
