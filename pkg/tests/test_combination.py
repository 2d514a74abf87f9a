import numpy as np
import pytest
from scipy import stats

from eirseg.combination import rank_potential_classes, select_instances
from eirseg.memory import MemoryBuffer, rebalance

from conftest import make_record


def _probs(rng, H, W, K, sharp=3.0):
    z = rng.normal(size=(H, W, K)) * sharp
    e = np.exp(z - z.max(axis=2, keepdims=True))
    return e / e.sum(axis=2, keepdims=True)


@pytest.mark.parametrize("seed", range(30))
def test_ranking_matches_loop(seed):
    rng = np.random.default_rng(seed)
    H, W, K = 9, 7, 5
    probs = _probs(rng, H, W, K)
    label = rng.choice([0, 0, 0, 3, 4], size=(H, W)).astype(np.uint8)
    tau = float(rng.uniform(0.3, 0.9))
    counts = {}
    for y in range(H):
        for x in range(W):
            if label[y, x] != 0:
                continue
            c = int(np.argmax(probs[y, x]))
            if c != 0 and probs[y, x, c] > tau:
                counts[c] = counts.get(c, 0) + 1
    want = sorted(counts.items(), key=lambda e: (-e[1], e[0]))
    assert list(rank_potential_classes(probs, label, tau).entries) == want


def test_ranking_threshold_is_strict():
    probs = np.zeros((1, 2, 3))
    probs[0, 0] = [0.3, 0.7, 0.0]
    probs[0, 1] = [0.2, 0.0, 0.8]
    r = rank_potential_classes(probs, np.zeros((1, 2), np.uint8), tau=0.7)
    assert r.classes == [2]


def test_ranking_shape_errors():
    with pytest.raises(ValueError):
        rank_potential_classes(np.zeros((2, 2, 3)), np.zeros((3, 2), np.uint8))
    with pytest.raises(ValueError):
        rank_potential_classes(np.zeros((2, 2, 3)), np.zeros((2, 2), np.uint8), tau=1.0)


def _buffer(classes, per=3):
    return rebalance(MemoryBuffer(per * len(classes)),
                     {c: [make_record(3, 3, c, seed=c * 10 + i, source=f"{c}.{i}") for i in range(per)]
                      for c in classes})


class _Ranking:
    def __init__(self, classes):
        self.classes = classes


def test_select_takes_top_ranked_and_skips_unstored():
    buf = _buffer([1, 2, 3, 4])
    buf.per_class.pop(2)  # ranked but nothing stored
    recs = select_instances(_Ranking([2, 4, 1, 3]), buf, 2, seed=0)
    assert [r.class_id for r in recs] == [4, 1]
    assert all(r in buf.records(r.class_id) for r in recs)


def test_select_edge_cases():
    buf = _buffer([1, 2])
    assert select_instances(_Ranking([1]), buf, 0, seed=0) == []
    assert select_instances(_Ranking([1]), MemoryBuffer(0), 2, seed=0) == []
    assert [r.class_id for r in select_instances(_Ranking([]), buf, 2, seed=0, fallback=False)] == []
    assert [r.class_id for r in select_instances(_Ranking([2]), buf, 2, seed=0, fallback=False)] == [2]
    assert len(select_instances(_Ranking([]), buf, 5, seed=0)) == 2
    with pytest.raises(ValueError):
        select_instances(_Ranking([]), buf, -1)


def test_fallback_is_uniform():
    buf = _buffer([1, 2, 3, 4, 5])
    rng = np.random.default_rng(123)
    counts = np.zeros(6)
    n = 4000
    for _ in range(n):
        (rec,) = select_instances(_Ranking([]), buf, 1, rng=rng)
        counts[rec.class_id] += 1
    chi2, p = stats.chisquare(counts[1:])
    assert p > 1e-3, (counts, p)


def test_select_is_seeded():
    buf = _buffer([1, 2, 3, 4, 5])
    a = [r.source_id for r in select_instances(_Ranking([3]), buf, 2, seed=9)]
    b = [r.source_id for r in select_instances(_Ranking([3]), buf, 2, seed=9)]
    assert a == b and a[0].startswith("3.")
