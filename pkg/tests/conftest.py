import numpy as np
import pytest

from eirseg.memory import InstanceRecord
from eirseg.protocol import SegSample, generate_synthetic_dataset
from eirseg.trainer import DataConfig, RunConfig


@pytest.fixture(scope="session")
def small_data():
    """Four classes, 32x32, deterministic."""
    return generate_synthetic_dataset(4, 6, 32, 32, seed=3)


def tiny_config(**over) -> RunConfig:
    """A run that finishes in a few seconds: 4 classes, 32x32, 2 epochs."""
    kw = dict(schedule="2-1-1", epochs=2, batch_size=4, capacity=12, eval_batch_size=16,
              data=DataConfig(num_classes=4, samples_per_class=5, test_samples_per_class=2, height=32, width=32))
    kw.update(over)
    return RunConfig(**kw)


def make_record(h, w, class_id=1, seed=0, source="r", score=1.0, full=False) -> InstanceRecord:
    rng = np.random.default_rng(seed)
    mask = np.ones((h, w), np.uint8) if full else (rng.random((h, w)) < 0.6).astype(np.uint8)
    mask[0, :] = 1
    mask[:, 0] = 1
    mask[-1, -1] = 1
    pixels = (rng.integers(0, 256, (h, w, 3)) / 255).astype(np.float32)
    return InstanceRecord(pixels, mask, class_id, source, score)


def make_sample(label, seed=0, sid="x") -> SegSample:
    label = np.asarray(label, dtype=np.uint8)
    rng = np.random.default_rng(seed)
    img = (rng.integers(0, 256, label.shape + (3,)) / 255).astype(np.float32)
    return SegSample(img, label, sid)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    def record(name: str, ok: bool, detail: str = ""):
        line = f"{'PASS' if ok else 'FAIL'}: {name}" + (f" -- {detail}" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
