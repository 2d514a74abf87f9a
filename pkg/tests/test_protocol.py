import json

import numpy as np
import pytest
from PIL import Image

from eirseg.errors import DataError, EmptyStepError, ScheduleError
from eirseg.protocol import (BACKGROUND, DISJOINT, IGNORE, OVERLAPPED, SegSample, TaskSchedule,
                             build_step_dataset, generate_synthetic_dataset, load_voc_format, parse_schedule,
                             relabel_for_eval, save_voc_format, shape_mask)

from conftest import make_sample


@pytest.mark.parametrize("text,total,sizes", [
    ("15-1", 20, [15, 1, 1, 1, 1, 1]),
    ("5-3", 20, [5, 3, 3, 3, 3, 3]),
    ("3-1-1-1", 6, [3, 1, 1, 1]),
    ("19-1", 20, [19, 1]),
    ("6", 6, [6]),
])
def test_parse_schedule(text, total, sizes):
    s = parse_schedule(text, total)
    assert [len(x) for x in s.steps] == sizes
    assert s.total_classes == total
    assert sorted(c for step in s.steps for c in step) == list(range(1, total + 1))


@pytest.mark.parametrize("text,total", [("5-4", 20), ("abc", 6), ("3-0", 6), ("2-2-2", 7), ("", 3)])
def test_parse_schedule_rejects(text, total):
    with pytest.raises(ScheduleError):
        parse_schedule(text, total)


def test_schedule_invariants():
    with pytest.raises(ScheduleError):
        TaskSchedule(((1, 2), (2, 3)))
    with pytest.raises(ScheduleError):
        TaskSchedule(((0, 1),))
    with pytest.raises(ScheduleError):
        TaskSchedule(((1,), (3,)))
    with pytest.raises(ScheduleError):
        TaskSchedule(((1,),), mode="sideways")


def test_schedule_class_sets():
    s = parse_schedule("3-1-1-1", 6)
    assert s.new_classes(2) == {4}
    assert s.old_classes(3) == {1, 2, 3, 4}
    assert s.learned_classes(3) == {1, 2, 3, 4, 5}
    assert s.future_classes(2) == {5, 6}
    assert s.num_outputs(1) == 4 and s.num_outputs(4) == 7
    with pytest.raises(ScheduleError):
        s.new_classes(5)


def _filter_oracle(samples, schedule, t, min_pixels):
    out = []
    new, fut = schedule.new_classes(t), schedule.future_classes(t)
    for s in samples:
        vals = s.label.ravel().tolist()
        if sum(v in new for v in vals) < min_pixels:
            continue
        if schedule.mode == DISJOINT and any(v in fut for v in vals):
            continue
        lab = [v if (v in new or v == IGNORE) else BACKGROUND for v in vals]
        out.append((s.id, lab))
    return out


@pytest.mark.parametrize("mode", [OVERLAPPED, DISJOINT])
@pytest.mark.parametrize("min_pixels", [1, 40])
def test_step_dataset_matches_brute_force(small_data, mode, min_pixels):
    schedule = parse_schedule("2-1-1", 4, mode)
    for t in (1, 2, 3):
        try:
            got = build_step_dataset(small_data, schedule, t, min_pixels)
        except EmptyStepError:
            assert _filter_oracle(small_data, schedule, t, min_pixels) == []
            continue
        want = _filter_oracle(small_data, schedule, t, min_pixels)
        assert [s.id for s in got] == [w[0] for w in want]
        for s, (_, lab) in zip(got, want):
            assert s.label.ravel().tolist() == lab
        assert got.visible_classes == schedule.new_classes(t)


def test_disjoint_excludes_future_and_overlapped_keeps_them():
    lab = np.zeros((4, 4), np.uint8)
    lab[0, 0], lab[3, 3] = 1, 2
    samples = [make_sample(lab, sid="a")]
    ov = build_step_dataset(samples, parse_schedule("1-1", 2, OVERLAPPED), 1)
    assert len(ov) == 1 and ov.samples[0].label[3, 3] == BACKGROUND
    with pytest.raises(EmptyStepError):
        build_step_dataset(samples, parse_schedule("1-1", 2, DISJOINT), 1)


def test_relabel_keeps_ignore():
    lab = np.array([[0, 1, 2], [3, IGNORE, 1]], np.uint8)
    out = relabel_for_eval([make_sample(lab)], {1})[0]
    assert out.label.tolist() == [[0, 1, 0], [0, IGNORE, 1]]


def test_sample_is_read_only():
    s = make_sample(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        s.label[0, 0] = 1
    with pytest.raises(DataError):
        SegSample(np.zeros((4, 4, 3), np.float32), np.zeros((3, 4), np.uint8), "bad")


def test_synthetic_is_deterministic():
    a = generate_synthetic_dataset(4, 2, 32, 32, seed=11)
    b = generate_synthetic_dataset(4, 2, 32, 32, seed=11)
    c = generate_synthetic_dataset(4, 2, 32, 32, seed=12)
    assert all(np.array_equal(x.image, y.image) and np.array_equal(x.label, y.label) for x, y in zip(a, b))
    assert not all(np.array_equal(x.label, y.label) for x, y in zip(a, c))


def test_synthetic_labels_match_rerasterised_shapes(small_data):
    # independent redraw of every recorded shape, painted in order
    for s in small_data:
        H, W = s.label.shape
        lab = np.zeros((H, W), np.uint8)
        for sh in s.meta["shapes"]:
            lab[shape_mask(sh["kind"], sh["cy"], sh["cx"], sh["r"], H, W)] = sh["class_id"]
        assert np.array_equal(lab, s.label), s.id
        assert s.meta["primary"] in s.classes


def test_synthetic_covers_every_class(small_data):
    assert set().union(*(s.classes for s in small_data)) == {0, 1, 2, 3, 4}
    assert all(s.image.dtype == np.float32 and 0 <= s.image.min() and s.image.max() <= 1 for s in small_data)


def test_voc_round_trip(tmp_path, small_data):
    lab = np.array(small_data[0].label)
    lab[0, :4] = IGNORE
    samples = [SegSample(small_data[0].image, lab, "with_void"), *small_data[1:4]]
    save_voc_format(samples, tmp_path, 4)
    back = load_voc_format(tmp_path)
    assert [s.id for s in back] == sorted(s.id for s in samples)
    by_id = {s.id: s for s in samples}
    for s in back:
        assert np.array_equal(s.image, by_id[s.id].image)
        assert np.array_equal(s.label, by_id[s.id].label)


def test_voc_missing_pair(tmp_path, small_data):
    save_voc_format(small_data[:2], tmp_path, 4)
    (tmp_path / "masks" / f"{small_data[0].id}.png").unlink()
    with pytest.raises(DataError, match=small_data[0].id):
        load_voc_format(tmp_path)


def test_voc_unknown_palette_index(tmp_path, small_data):
    save_voc_format(small_data[:1], tmp_path, 4)
    m = Image.open(tmp_path / "masks" / f"{small_data[0].id}.png")
    arr = np.array(m)
    arr[0, 0] = 77
    out = Image.fromarray(arr)
    out.putpalette(m.getpalette())
    out.save(tmp_path / "masks" / f"{small_data[0].id}.png")
    with pytest.raises(DataError, match="77"):
        load_voc_format(tmp_path)


def test_voc_palette_null_is_ignore(tmp_path, small_data):
    save_voc_format(small_data[:1], tmp_path, 4)
    table = json.loads((tmp_path / "palette.json").read_text())
    table["1"] = None
    (tmp_path / "palette.json").write_text(json.dumps(table))
    s = load_voc_format(tmp_path)[0]
    orig = small_data[0].label
    assert np.all(s.label[orig == 1] == IGNORE)
    assert np.array_equal(s.label[orig != 1], orig[orig != 1])


def test_voc_bad_palette_file(tmp_path, small_data):
    save_voc_format(small_data[:1], tmp_path, 4)
    (tmp_path / "palette.json").write_text("{not json")
    with pytest.raises(DataError):
        load_voc_format(tmp_path)
