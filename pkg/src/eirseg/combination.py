"""Guess which old classes hide in a new image's background and pick
matching instances from memory."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .memory import InstanceRecord, MemoryBuffer
from .protocol import BACKGROUND

DEFAULT_TAU = 0.7
DEFAULT_MAX_INSTANCES = 2


@dataclass(frozen=True)
class PotentialClassRanking:
    entries: tuple[tuple[int, int], ...]

    def __len__(self):
        return len(self.entries)

    @property
    def classes(self) -> list[int]:
        return [c for c, _ in self.entries]


def rank_potential_classes(old_model_probs: np.ndarray, label: np.ndarray,
                           tau: float = DEFAULT_TAU) -> PotentialClassRanking:
    """Count background pixels confidently claimed by each old class.

    ``old_model_probs`` is H x W x K with channel ``k`` = class ``k``
    (channel 0 = background). A pixel votes for its argmax class when that
    class is not background and its probability is strictly above ``tau``.
    """
    probs = np.asarray(old_model_probs)
    if probs.ndim != 3 or probs.shape[:2] != np.shape(label):
        raise ValueError(f"probs {probs.shape} do not match label {np.shape(label)}")
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    bg = np.asarray(label) == BACKGROUND
    top = probs.argmax(axis=2)
    conf = np.take_along_axis(probs, top[..., None], axis=2)[..., 0]
    votes = top[bg & (top != BACKGROUND) & (conf > tau)]
    counts = np.bincount(votes, minlength=probs.shape[2])
    entries = sorted(((int(c), int(n)) for c, n in enumerate(counts) if n > 0), key=lambda e: (-e[1], e[0]))
    return PotentialClassRanking(tuple(entries))


def select_instances(ranking: PotentialClassRanking, buffer: MemoryBuffer,
                     max_instances: int = DEFAULT_MAX_INSTANCES, seed=None, fallback: bool = True,
                     rng: np.random.Generator | None = None) -> list[InstanceRecord]:
    """One random stored instance for each of the top-ranked classes.

    Ranked classes without stored instances are passed over. Remaining
    slots are filled from uniformly drawn stored classes when ``fallback``.
    """
    if max_instances < 0:
        raise ValueError("max_instances must be >= 0")
    if rng is None:
        rng = np.random.default_rng(seed)
    stored = buffer.stored_classes()
    if max_instances == 0 or not stored:
        return []

    chosen = [c for c in ranking.classes if buffer.records(c)][:max_instances]
    if fallback and len(chosen) < max_instances:
        rest = [c for c in stored if c not in chosen]
        k = min(max_instances - len(chosen), len(rest))
        if k:
            chosen += [int(c) for c in rng.choice(rest, size=k, replace=False)]
    out = []
    for c in chosen:
        recs = buffer.records(c)
        out.append(recs[int(rng.integers(len(recs)))])
    return out
