"""Class-balanced instance memory.

Instances are tight crops of single connected object regions. The buffer
keeps ``floor(capacity / n_classes)`` records per learned class, handing the
remainder to the lowest class ids, and always evicts the weakest records.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DataError
from .protocol import BACKGROUND, IGNORE, SegSample, StepDataset, to_float_image, to_uint8_image

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True, eq=False)
class InstanceRecord:
    pixels: np.ndarray  # h x w x 3 float32
    mask: np.ndarray  # h x w uint8 in {0, 1}
    class_id: int
    source_id: str
    contiguity_score: float

    def __post_init__(self):
        if self.class_id in (BACKGROUND, IGNORE):
            raise ValueError(f"instance class must be a foreground class, got {self.class_id}")
        if not self.mask.any():
            raise ValueError("instance mask is empty")
        if self.pixels.shape[:2] != self.mask.shape:
            raise ValueError("pixels and mask differ in size")
        rows, cols = np.flatnonzero(self.mask.any(1)), np.flatnonzero(self.mask.any(0))
        if rows[0] != 0 or cols[0] != 0 or rows[-1] != self.mask.shape[0] - 1 or cols[-1] != self.mask.shape[1] - 1:
            raise ValueError("instance crop is not tight around its mask")

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.mask))

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    def same_as(self, other: "InstanceRecord") -> bool:
        return (self.class_id == other.class_id and self.source_id == other.source_id
                and self.contiguity_score == other.contiguity_score
                and np.array_equal(self.mask, other.mask)
                and self.pixels.dtype == other.pixels.dtype
                and np.array_equal(self.pixels, other.pixels))


def storage_key(rec: InstanceRecord):
    """Total order for storage preference: best record first."""
    return (-rec.contiguity_score, -rec.area, rec.source_id)


def extract_instances(dataset: StepDataset | Iterable[SegSample], classes=None,
                      min_pixels: int = 16) -> list[InstanceRecord]:
    """One record per 4-connected component of each visible class."""
    if classes is None:
        classes = dataset.visible_classes
    out = []
    for s in dataset:
        for c in sorted(set(classes) & s.classes):
            cls_mask = s.label == c
            total = int(cls_mask.sum())
            comps, n = ndimage.label(cls_mask, structure=FOUR_CONNECTED)
            for k, sl in enumerate(ndimage.find_objects(comps), 1):
                m = comps[sl] == k
                size = int(m.sum())
                if size < min_pixels:
                    continue
                out.append(InstanceRecord(
                    pixels=np.array(s.image[sl]), mask=m.astype(np.uint8), class_id=c,
                    source_id=f"{s.id}#{c}.{k}", contiguity_score=size / total))
    return out


def sample_for_storage(candidates: Sequence[InstanceRecord], quota: int, seed: int = 0) -> list[InstanceRecord]:
    """Deterministic top-``quota`` by the storage order. ``seed`` is accepted
    for interface symmetry; the order is total, so it is never consulted."""
    if quota < 0:
        raise ValueError("quota must be >= 0")
    return sorted(candidates, key=storage_key)[:quota]


def quotas(capacity: int, classes: Iterable[int]) -> dict[int, int]:
    classes = sorted(classes)
    if not classes:
        return {}
    q, rem = divmod(capacity, len(classes))
    return {c: q + (1 if i < rem else 0) for i, c in enumerate(classes)}


@dataclass
class MemoryBuffer:
    capacity: int
    per_class: dict[int, list[InstanceRecord]] = field(default_factory=dict)
    learned_classes: frozenset[int] = frozenset()

    def __len__(self):
        return sum(len(v) for v in self.per_class.values())

    def counts(self) -> dict[int, int]:
        return {c: len(self.per_class.get(c, [])) for c in sorted(self.learned_classes)}

    def records(self, class_id: int) -> list[InstanceRecord]:
        return self.per_class.get(class_id, [])

    def stored_classes(self) -> list[int]:
        return sorted(c for c, v in self.per_class.items() if v)

    def check(self) -> None:
        if len(self) > self.capacity:
            raise AssertionError(f"buffer holds {len(self)} > capacity {self.capacity}")
        stray = set(self.per_class) - set(self.learned_classes)
        if stray:
            raise AssertionError(f"records for unlearned classes {sorted(stray)}")


def rebalance(buffer: MemoryBuffer, new_records_by_class: Mapping[int, Sequence[InstanceRecord]],
              seed: int = 0) -> MemoryBuffer:
    """Admit new classes and shrink every class to its new quota.

    A class with fewer candidates than its quota keeps all of them; the
    balance guarantee assumes every class can fill its quota.
    """
    new_classes = set(new_records_by_class)
    clash = new_classes & set(buffer.learned_classes)
    if clash:
        raise ValueError(f"classes {sorted(clash)} are already learned")
    if BACKGROUND in new_classes:
        raise ValueError("background cannot be stored")
    learned = frozenset(buffer.learned_classes) | new_classes
    quota = quotas(buffer.capacity, learned)
    per_class = {}
    for c in sorted(learned):
        if c in new_classes:
            recs = [r for r in new_records_by_class[c] if r.class_id == c]
            if len(recs) != len(new_records_by_class[c]):
                raise ValueError(f"records under class {c} carry a different class id")
            kept = sample_for_storage(recs, quota[c], seed)
        else:
            kept = sorted(buffer.per_class.get(c, []), key=storage_key)[: quota[c]]
        if kept:
            per_class[c] = kept
    out = MemoryBuffer(buffer.capacity, per_class, learned)
    out.check()
    return out


# --- persistence -----------------------------------------------------------------

def _quantized(pixels: np.ndarray) -> bool:
    return pixels.dtype == np.float32 and np.array_equal(to_float_image(to_uint8_image(pixels)), pixels)


def save_buffer(buffer: MemoryBuffer, path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    i = 0
    for c in sorted(buffer.per_class):
        for rec in buffer.per_class[c]:
            if not _quantized(rec.pixels):
                raise ValueError(f"record {rec.source_id}: pixels are not 8-bit representable")
            rgb, msk = f"{i:03d}_rgb.png", f"{i:03d}_mask.png"
            Image.fromarray(to_uint8_image(rec.pixels)).save(root / rgb)
            Image.fromarray((rec.mask > 0).astype(np.uint8) * 255).save(root / msk)
            entries.append({"class_id": rec.class_id, "contiguity_score": rec.contiguity_score,
                            "source_id": rec.source_id, "rgb": rgb, "mask": msk})
            i += 1
    manifest = {"capacity": buffer.capacity, "learned_classes": sorted(buffer.learned_classes),
                "records": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_buffer(path) -> MemoryBuffer:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
        capacity = int(manifest["capacity"])
        learned = frozenset(int(c) for c in manifest["learned_classes"])
        entries = list(manifest["records"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataError(f"corrupt buffer manifest in {root}: {exc}") from exc

    per_class: dict[int, list[InstanceRecord]] = {}
    for n, e in enumerate(entries):
        name = e.get("source_id", f"#{n}") if isinstance(e, dict) else f"#{n}"
        try:
            with Image.open(root / e["rgb"]) as im:
                rgb = np.asarray(im.convert("RGB"))
            with Image.open(root / e["mask"]) as im:
                mask = (np.asarray(im.convert("L")) > 127).astype(np.uint8)
            rec = InstanceRecord(to_float_image(rgb), mask, int(e["class_id"]), str(e["source_id"]),
                                 float(e["contiguity_score"]))
        except (OSError, KeyError, TypeError, ValueError) as exc:
            raise DataError(f"cannot load buffer record {name}: {exc}") from exc
        per_class.setdefault(rec.class_id, []).append(rec)
    buf = MemoryBuffer(capacity, per_class, learned)
    try:
        buf.check()
    except AssertionError as exc:
        raise DataError(f"inconsistent buffer in {root}: {exc}") from exc
    return buf


def buffers_equal(a: MemoryBuffer, b: MemoryBuffer) -> bool:
    if a.capacity != b.capacity or set(a.learned_classes) != set(b.learned_classes):
        return False
    if a.stored_classes() != b.stored_classes():
        return False
    return all(len(a.records(c)) == len(b.records(c))
               and all(x.same_as(y) for x, y in zip(a.records(c), b.records(c)))
               for c in a.stored_classes())


# --- whole-image memory for the image-replay baseline ---------------------------------

@dataclass
class ImageBuffer:
    """Stores whole step-relabelled samples under the same quota accounting."""
    capacity: int
    per_class: dict[int, list[SegSample]] = field(default_factory=dict)
    learned_classes: frozenset[int] = frozenset()

    def __len__(self):
        return len(self.all())

    def all(self) -> list[SegSample]:
        seen, out = set(), []
        for c in sorted(self.per_class):
            for s in self.per_class[c]:
                if s.id not in seen:
                    seen.add(s.id)
                    out.append(s)
        return out

    def counts(self) -> dict[int, int]:
        return {c: len(self.per_class.get(c, [])) for c in sorted(self.learned_classes)}

    def add_step(self, dataset: StepDataset) -> "ImageBuffer":
        new = set(dataset.visible_classes)
        if new & set(self.learned_classes):
            raise ValueError(f"classes {sorted(new & set(self.learned_classes))} are already learned")
        learned = frozenset(self.learned_classes) | new
        quota = quotas(self.capacity, learned)
        taken = {s.id for s in self.all()}
        per_class = {c: v[: quota[c]] for c, v in self.per_class.items() if quota[c]}
        for c in sorted(new):
            # most pixels of the class first; one image is stored at most once
            cands = [(-int(np.count_nonzero(s.label == c)), s.id, s) for s in dataset if c in s.classes]
            cands.sort(key=lambda x: x[:2])
            picked = []
            for _, sid, s in cands:
                if len(picked) >= quota[c]:
                    break
                if sid not in taken:
                    picked.append(s)
                    taken.add(sid)
            if picked:
                per_class[c] = picked
        return ImageBuffer(self.capacity, per_class, learned)
