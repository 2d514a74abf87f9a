"""Task schedules, per-step relabelling and dataset sources.

Class ids are small non-negative integers. ``0`` is the background class and
``IGNORE`` marks void pixels that no loss or metric may look at.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import DataError, EmptyStepError, ScheduleError

BACKGROUND = 0
IGNORE = 255

OVERLAPPED = "overlapped"
DISJOINT = "disjoint"


def to_float_image(rgb: np.ndarray) -> np.ndarray:
    """uint8 RGB -> float32 in [0, 1]. The only sanctioned conversion, so
    pixels survive a PNG round trip bit-exactly."""
    return rgb.astype(np.float32) / np.float32(255.0)


def to_uint8_image(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class TaskSchedule:
    steps: tuple[tuple[int, ...], ...]
    mode: str = OVERLAPPED

    def __post_init__(self):
        if self.mode not in (OVERLAPPED, DISJOINT):
            raise ScheduleError(f"unknown mode {self.mode!r}")
        if not self.steps:
            raise ScheduleError("schedule has no steps")
        seen: set[int] = set()
        for i, s in enumerate(self.steps, 1):
            if not s:
                raise ScheduleError(f"step {i} has no classes")
            if BACKGROUND in s:
                raise ScheduleError("background cannot be a step class")
            if seen & set(s):
                raise ScheduleError(f"step {i} repeats classes {sorted(seen & set(s))}")
            seen |= set(s)
        if seen != set(range(1, len(seen) + 1)):
            raise ScheduleError("step classes must cover 1..total_classes exactly")

    @property
    def total_classes(self) -> int:
        return sum(len(s) for s in self.steps)

    @property
    def num_steps(self) -> int:
        return len(self.steps)

    def _check(self, t: int) -> None:
        if not 1 <= t <= self.num_steps:
            raise ScheduleError(f"step {t} outside 1..{self.num_steps}")

    def new_classes(self, t: int) -> frozenset[int]:
        self._check(t)
        return frozenset(self.steps[t - 1])

    def old_classes(self, t: int) -> frozenset[int]:
        self._check(t)
        return frozenset(c for s in self.steps[: t - 1] for c in s)

    def learned_classes(self, t: int) -> frozenset[int]:
        """C_{1:t}, background excluded."""
        self._check(t)
        return frozenset(c for s in self.steps[:t] for c in s)

    def future_classes(self, t: int) -> frozenset[int]:
        self._check(t)
        return frozenset(c for s in self.steps[t:] for c in s)

    def num_outputs(self, t: int) -> int:
        """Output channels of the model after step t (background + learned)."""
        return 1 + len(self.learned_classes(t))


def parse_schedule(text: str, total_classes: int, mode: str = OVERLAPPED) -> TaskSchedule:
    """Parse ``"15-1"`` / ``"5-3"`` / ``"3-1-1-1"`` shorthand.

    Two numbers mean base size and increment, repeated until
    ``total_classes`` is covered. Longer lists are explicit step sizes.
    """
    if not re.fullmatch(r"\s*\d+(\s*-\s*\d+)*\s*", str(text)):
        raise ScheduleError(f"cannot parse schedule {text!r}")
    sizes = [int(x) for x in str(text).split("-")]
    if any(s <= 0 for s in sizes):
        raise ScheduleError(f"schedule {text!r} has an empty step")
    if len(sizes) == 2 and sizes[0] + sizes[1] != total_classes:
        base, inc = sizes
        rest = total_classes - base
        if rest <= 0 or rest % inc:
            raise ScheduleError(f"schedule {text!r} does not tile {total_classes} classes")
        sizes = [base] + [inc] * (rest // inc)
    if sum(sizes) != total_classes:
        raise ScheduleError(f"schedule {text!r} covers {sum(sizes)} classes, expected {total_classes}")
    steps, nxt = [], 1
    for s in sizes:
        steps.append(tuple(range(nxt, nxt + s)))
        nxt += s
    return TaskSchedule(tuple(steps), mode)


@dataclass(frozen=True, eq=False)
class SegSample:
    image: np.ndarray  # H x W x 3 float32
    label: np.ndarray  # H x W uint8
    id: str
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DataError(f"{self.id}: image must be HxWx3, got {self.image.shape}")
        if self.label.shape != self.image.shape[:2]:
            raise DataError(f"{self.id}: label {self.label.shape} does not match image {self.image.shape[:2]}")
        self.image.setflags(write=False)
        self.label.setflags(write=False)

    @property
    def classes(self) -> set[int]:
        return set(np.unique(self.label).tolist()) - {IGNORE}

    def relabeled(self, keep) -> "SegSample":
        keep_arr = np.zeros(256, dtype=bool)
        keep_arr[list(keep)] = True
        keep_arr[IGNORE] = True
        lab = np.where(keep_arr[self.label], self.label, BACKGROUND).astype(np.uint8)
        return SegSample(self.image, lab, self.id, self.meta)


@dataclass(frozen=True)
class StepDataset:
    samples: tuple[SegSample, ...]
    step_index: int
    visible_classes: frozenset[int]

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)


def build_step_dataset(full_dataset: Sequence[SegSample], schedule: TaskSchedule, t: int,
                       min_pixels: int = 1) -> StepDataset:
    """Select the samples seen at step ``t`` and hide every non-current class."""
    new = schedule.new_classes(t)
    future = schedule.future_classes(t)
    lut_new = np.zeros(256, dtype=bool)
    lut_new[list(new)] = True
    lut_future = np.zeros(256, dtype=bool)
    lut_future[list(future)] = True

    picked = []
    for s in full_dataset:
        if np.count_nonzero(lut_new[s.label]) < min_pixels:
            continue
        if schedule.mode == DISJOINT and lut_future[s.label].any():
            continue
        picked.append(s.relabeled(new))
    if not picked:
        raise EmptyStepError(f"step {t} ({sorted(new)}) selected no samples")
    return StepDataset(tuple(picked), t, new)


def relabel_for_eval(samples: Sequence[SegSample], learned) -> list[SegSample]:
    """Evaluation view after a step: classes not learned yet become background."""
    return [s.relabeled(learned) for s in samples]


# --- synthetic desk-scale data -------------------------------------------------

SHAPE_KINDS = ("disk", "square", "triangle", "diamond", "hbar", "ring", "cross", "vbar")


def shape_mask(kind: str, cy: float, cx: float, r: float, H: int, W: int) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    ady, adx = np.abs(dy), np.abs(dx)
    if kind == "disk":
        return dy * dy + dx * dx <= r * r
    if kind == "square":
        return (ady <= 0.85 * r) & (adx <= 0.85 * r)
    if kind == "triangle":
        return (dy <= 0.8 * r) & (1.8 * adx <= dy + r)
    if kind == "diamond":
        return ady + adx <= 1.2 * r
    if kind == "hbar":
        return (ady <= 0.45 * r) & (adx <= 1.2 * r)
    if kind == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= 0.25 * r * r)
    if kind == "cross":
        return ((ady <= 0.35 * r) & (adx <= r)) | ((adx <= 0.35 * r) & (ady <= r))
    if kind == "vbar":
        return (adx <= 0.45 * r) & (ady <= 1.2 * r)
    raise ValueError(f"unknown shape kind {kind!r}")


def class_colors(num_classes: int) -> np.ndarray:
    """Saturated, evenly spaced hues; row c is the colour of class c (row 0 unused)."""
    hues = np.arange(num_classes) / num_classes
    rgb = np.stack([np.clip(np.abs((hues * 6 + k) % 6 - 3) - 1, 0, 1) for k in (0, 4, 2)], axis=1)
    return np.vstack([np.zeros((1, 3)), 0.15 + 0.75 * rgb])


def default_affinity(num_classes: int, neighbour_weight: float = 4.0) -> np.ndarray:
    """Co-occurrence weights: each class prefers its ring neighbours."""
    a = np.ones((num_classes, num_classes))
    for c in range(num_classes):
        a[c, (c + 1) % num_classes] += neighbour_weight
        a[c, (c - 1) % num_classes] += neighbour_weight
    return a


def generate_synthetic_dataset(num_classes: int, samples_per_class: int, H: int, W: int, seed: int,
                               affinity: np.ndarray | None = None, prefix: str = "s") -> list[SegSample]:
    """Colored shapes on noisy backgrounds.

    Each sample has a primary class (``samples_per_class`` samples each),
    drawn last so it is always visible, plus 0-2 companions drawn from the
    primary's affinity row. Shape parameters are kept in ``meta["shapes"]``.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if H < 32 or W < 32:
        raise ValueError("H and W must be >= 32")
    if samples_per_class < 0:
        raise ValueError("samples_per_class must be >= 0")
    if affinity is None:
        affinity = default_affinity(num_classes)
    affinity = np.asarray(affinity, dtype=np.float64)
    if affinity.shape != (num_classes, num_classes) or (affinity < 0).any():
        raise ValueError("affinity must be a non-negative num_classes x num_classes matrix")

    rng = np.random.default_rng(seed)
    colors = class_colors(num_classes)
    yy, xx = np.mgrid[0:H, 0:W]
    rmin, rmax = min(H, W) / 8, min(H, W) / 4

    samples = []
    for idx in range(num_classes * samples_per_class):
        primary = idx % num_classes + 1
        n_extra = int(rng.integers(0, 3))
        row = affinity[primary - 1] / affinity[primary - 1].sum()
        extras = [int(c) + 1 for c in rng.choice(num_classes, size=n_extra, p=row)]
        order = extras + [primary]

        base = rng.uniform(0.3, 0.6, size=3)
        img = base + rng.normal(0.0, 0.06, size=(H, W, 3))
        img += 0.05 * np.sin(xx / rng.uniform(3, 9) + rng.uniform(0, 6.3))[..., None]
        label = np.zeros((H, W), dtype=np.uint8)
        shapes = []
        for c in order:
            kind = SHAPE_KINDS[(c - 1) % len(SHAPE_KINDS)]
            r = float(rng.uniform(rmin, rmax))
            cy = float(rng.uniform(r, H - r))
            cx = float(rng.uniform(r, W - r))
            m = shape_mask(kind, cy, cx, r, H, W)
            stripes = 0.85 + 0.15 * np.sign(np.sin((yy + xx * (c % 3)) * (0.4 + 0.15 * c)))
            img[m] = colors[c] * stripes[m][:, None] + rng.normal(0.0, 0.03, size=(int(m.sum()), 3))
            label[m] = c
            shapes.append({"kind": kind, "class_id": c, "cy": cy, "cx": cx, "r": r})

        rgb = to_uint8_image(np.clip(img, 0.0, 1.0))
        samples.append(SegSample(to_float_image(rgb), label, f"{prefix}{idx:05d}",
                                 {"shapes": shapes, "primary": primary}))
    return samples


# --- VOC-format ingestion ------------------------------------------------------

IMAGE_EXTS = (".png", ".jpg", ".jpeg")


def read_palette(path: Path) -> dict[int, int]:
    """``palette.json`` maps mask index -> class id; ``null`` marks void (ignore)."""
    try:
        raw = json.loads(Path(path).read_text())
        table = {int(k): (IGNORE if v is None else int(v)) for k, v in raw.items()}
    except (OSError, ValueError, TypeError) as exc:
        raise DataError(f"bad palette file {path}: {exc}") from exc
    bad = {k: v for k, v in table.items() if not (0 <= k <= 255 and 0 <= v <= 255)}
    if bad:
        raise DataError(f"palette entries out of range: {bad}")
    return table


def load_voc_format(root_path, palette: dict[int, int] | None = None) -> list[SegSample]:
    """Load ``images/`` + ``masks/`` (8-bit indexed PNG) pairs, sorted by basename."""
    root = Path(root_path)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.exists() and not mask_dir.exists():
        return []
    if palette is None:
        palette = read_palette(root / "palette.json")
    lut = np.full(256, -1, dtype=np.int16)
    for k, v in palette.items():
        lut[k] = v

    images = {p.stem: p for p in sorted(img_dir.glob("*")) if p.suffix.lower() in IMAGE_EXTS}
    masks = {p.stem: p for p in sorted(mask_dir.glob("*.png"))}
    unpaired = sorted(set(images) ^ set(masks))
    if unpaired:
        raise DataError(f"missing image/mask pair for {unpaired[0]!r}")

    out = []
    for name in sorted(images):
        with Image.open(images[name]) as im:
            rgb = np.asarray(im.convert("RGB"))
        with Image.open(masks[name]) as m:
            if m.mode not in ("P", "L"):
                raise DataError(f"{name}: mask must be 8-bit indexed, got mode {m.mode}")
            idx = np.asarray(m)
        mapped = lut[idx]
        if (mapped < 0).any():
            unknown = sorted(set(idx[mapped < 0].tolist()))
            raise DataError(f"{name}: palette index {unknown[0]} not in palette table (all: {unknown})")
        if rgb.shape[:2] != idx.shape:
            raise DataError(f"{name}: image {rgb.shape[:2]} and mask {idx.shape} differ in size")
        out.append(SegSample(to_float_image(rgb), mapped.astype(np.uint8), name))
    return out


def save_voc_format(samples: Sequence[SegSample], root_path, num_classes: int) -> None:
    """Write samples in the layout ``load_voc_format`` reads (identity palette)."""
    root = Path(root_path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    colors = to_uint8_image(class_colors(num_classes))
    flat = np.zeros((256, 3), dtype=np.uint8)
    flat[: num_classes + 1] = colors
    flat[IGNORE] = 255
    for s in samples:
        Image.fromarray(to_uint8_image(s.image)).save(root / "images" / f"{s.id}.png")
        m = Image.fromarray(np.asarray(s.label, dtype=np.uint8))
        m.putpalette(flat.ravel().tolist())  # L -> P
        m.save(root / "masks" / f"{s.id}.png")
    table = {str(c): c for c in range(num_classes + 1)}
    table[str(IGNORE)] = None
    (root / "palette.json").write_text(json.dumps(table, indent=1))
