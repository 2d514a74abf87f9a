"""The T-step continual training loop and the replay strategies.

Strategies:

* ``none``               plain fine-tuning on each step's data
* ``image_replay``       stored whole images (with their step's partial labels) mixed into batches
* ``vanilla_instance``   stored instances trained on their own canvases
* ``random_copy_paste``  random instances hard-pasted at random positions
* ``eir``                ranked class combination, background-aware placement,
                         mixup fusion and region-specific distillation
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import yaml

from .combination import rank_potential_classes, select_instances
from .errors import ConfigError, TrainingDivergence
from .losses import LossBreakdown, total_loss
from .memory import ImageBuffer, InstanceRecord, MemoryBuffer, extract_instances, rebalance, save_buffer
from .metrics import BgMisclassCounter, ConfusionAccumulator, MetricReport, grouped_miou
from .model import ModelSnapshot, SegNet, reference_model, save_checkpoint, snapshot, to_tensor
from .placement import FusedSample, PlacementConfig, fit_instance, fuse_all, mixup_fuse
from .protocol import (SegSample, TaskSchedule, build_step_dataset, default_affinity,
                       generate_synthetic_dataset, load_voc_format, parse_schedule, relabel_for_eval)

log = logging.getLogger(__name__)

STRATEGIES = ("none", "image_replay", "vanilla_instance", "random_copy_paste", "eir")


@dataclass
class DataConfig:
    kind: str = "synthetic"  # or "voc"
    num_classes: int = 6
    samples_per_class: int = 20
    test_samples_per_class: int = 10
    height: int = 64
    width: int = 64
    seed: int = 0
    neighbour_weight: float = 4.0
    train_root: str | None = None
    test_root: str | None = None


@dataclass
class RunConfig:
    name: str = "run"
    schedule: str = "3-1"
    mode: str = "overlapped"
    strategy: str = "eir"
    epochs: int = 20
    lr_base: float = 0.05
    lr_inc: float = 0.02
    momentum: float = 0.9
    grad_clip: float | None = 2.0  # max global gradient norm; None disables
    batch_size: int = 8
    capacity: int = 60
    model_width: int = 8
    model_levels: int = 3
    seed: int = 0
    # class combination
    tau: float = 0.7
    max_instances: int = 2
    fallback: bool = True
    # placement
    region_n: int = 6
    beta_a: float = 0.5
    beta_b: float = 0.5
    fixed_lambda: float | None = None
    min_scale: float = 0.1
    size_policy: str = "fit"
    overlap_policy: str = "region"
    overlap_iou: float = 0.0
    # losses
    alpha: float = 5.0
    beta: float = 0.05  # reserved; not consumed by any loss
    rskd: bool | None = None  # None: on for eir only
    mbce_class_reduction: str = "sum"
    # baselines / data plumbing
    replay_ratio: float = 1 / 3  # stored : new images per batch
    min_instance_pixels: int = 16
    min_step_pixels: int = 1
    eval_batch_size: int = 32
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        if isinstance(self.data, dict):
            self.data = DataConfig(**self.data)
        self.validate()

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        positive = ("epochs", "lr_base", "lr_inc", "batch_size", "model_width", "tau", "region_n",
                    "beta_a", "beta_b", "min_scale", "eval_batch_size")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        non_negative = ("momentum", "capacity", "max_instances", "alpha", "replay_ratio",
                        "min_instance_pixels", "min_step_pixels", "overlap_iou")
        for name in non_negative:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not self.tau < 1:
            raise ConfigError("tau must lie in (0, 1)")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("grad_clip must be positive or null")
        if self.mbce_class_reduction not in ("mean", "sum"):
            raise ConfigError("mbce_class_reduction must be 'mean' or 'sum'")
        if self.data.kind not in ("synthetic", "voc"):
            raise ConfigError(f"unknown data kind {self.data.kind!r}")
        try:
            self.placement()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def use_rskd(self) -> bool:
        return self.strategy == "eir" if self.rskd is None else bool(self.rskd)

    def placement(self) -> PlacementConfig:
        return PlacementConfig(self.region_n, self.max_instances, self.beta_a, self.beta_b, self.fixed_lambda,
                               self.min_scale, self.size_policy, self.overlap_policy, self.overlap_iou)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "RunConfig":
        data = changes.pop("data", None)
        cfg = dataclasses.replace(self, **changes)
        if data:
            cfg.data = dataclasses.replace(cfg.data, **data)
        return cfg


def config_from_dict(raw: dict) -> RunConfig:
    if "config" in raw and "code_version" in raw:  # a run manifest
        raw = raw["config"]
    raw = dict(raw)
    data = raw.pop("data", {}) or {}
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(raw) - known
    dknown = {f.name for f in dataclasses.fields(DataConfig)}
    unknown |= {f"data.{k}" for k in set(data) - dknown}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        return RunConfig(**raw, data=DataConfig(**data))
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return config_from_dict(raw)


def load_datasets(config: RunConfig) -> tuple[list[SegSample], list[SegSample]]:
    d = config.data
    if d.kind == "voc":
        if not d.train_root or not d.test_root:
            raise ConfigError("voc data needs train_root and test_root")
        return load_voc_format(d.train_root), load_voc_format(d.test_root)
    aff = default_affinity(d.num_classes, d.neighbour_weight)
    train = generate_synthetic_dataset(d.num_classes, d.samples_per_class, d.height, d.width, d.seed, aff,
                                       prefix="train_")
    test = generate_synthetic_dataset(d.num_classes, d.test_samples_per_class, d.height, d.width, d.seed + 1,
                                      aff, prefix="test_")
    return train, test


def schedule_for(config: RunConfig, train: Sequence[SegSample]) -> TaskSchedule:
    present = set().union(*(s.classes for s in train)) - {0} if train else set()
    schedule = parse_schedule(config.schedule, config.data.num_classes, config.mode)
    missing = set(range(1, schedule.total_classes + 1)) - present
    if missing:
        raise ConfigError(f"training data has no pixels of classes {sorted(missing)}")
    return schedule


# --- rng plumbing -------------------------------------------------------------------

def sample_rng(seed: int, step: int, epoch: int, sample_id: str) -> np.random.Generator:
    """Independent stream per (run seed, step, epoch, sample)."""
    return np.random.default_rng([seed, step, epoch, zlib.crc32(sample_id.encode())])


# --- batch builders ------------------------------------------------------------------

@dataclass
class Batch:
    fused: list[FusedSample]
    instances: list[InstanceRecord] = field(default_factory=list)


def plain_batch(samples, num_outputs: int) -> Batch:
    return Batch([FusedSample.from_sample(s, num_outputs) for s in samples])


def random_instance(buffer: MemoryBuffer, rng: np.random.Generator, exclude=()) -> InstanceRecord | None:
    classes = [c for c in buffer.stored_classes() if c not in exclude]
    if not classes:
        return None
    c = classes[int(rng.integers(len(classes)))]
    recs = buffer.records(c)
    return recs[int(rng.integers(len(recs)))]


def draw_random_instances(buffer: MemoryBuffer, k: int, rng: np.random.Generator) -> list[InstanceRecord]:
    out = []
    for _ in range(k):
        rec = random_instance(buffer, rng, exclude={r.class_id for r in out})
        if rec is None:
            break
        out.append(rec)
    return out


def make_batch_eir(samples, buffer: MemoryBuffer, old_snapshot: ModelSnapshot | None, config: RunConfig,
                   rngs, num_outputs: int) -> Batch:
    if old_snapshot is None or not buffer.stored_classes() or config.max_instances == 0:
        return plain_batch(samples, num_outputs)
    probs = old_snapshot.probs(to_tensor([s.image for s in samples])).permute(0, 2, 3, 1).numpy()
    cfg = config.placement()
    fused, instances = [], []
    for s, p, rng in zip(samples, probs, rngs):
        ranking = rank_potential_classes(p, s.label, config.tau)
        recs = select_instances(ranking, buffer, config.max_instances, rng=rng, fallback=config.fallback)
        f = fuse_all(s, recs, rng=rng, num_outputs=num_outputs, cfg=cfg)
        f.log.insert(0, {"ranking": [list(e) for e in ranking.entries]})
        fused.append(f)
        instances.extend(recs)
    return Batch(fused, instances)


def make_batch_image_replay(samples, image_buffer: ImageBuffer, config: RunConfig, rng: np.random.Generator,
                            num_outputs: int) -> Batch:
    stored = image_buffer.all()
    batch = plain_batch(samples, num_outputs)
    if not stored or config.replay_ratio == 0:
        return batch
    k = min(len(stored), math.ceil(len(samples) * config.replay_ratio))
    picks = rng.choice(len(stored), size=k, replace=False)
    batch.fused.extend(FusedSample.from_sample(stored[int(i)], num_outputs) for i in sorted(picks))
    return batch


def make_batch_vanilla(samples, buffer: MemoryBuffer, config: RunConfig, rngs, num_outputs: int) -> Batch:
    batch = plain_batch(samples, num_outputs)
    for rng in rngs:
        batch.instances.extend(draw_random_instances(buffer, config.max_instances, rng))
    return batch


def make_batch_random_copy_paste(samples, buffer: MemoryBuffer, rngs, config: RunConfig,
                                 num_outputs: int) -> Batch:
    fused = []
    for s, rng in zip(samples, rngs):
        f = FusedSample.from_sample(s, num_outputs)
        H, W = s.label.shape
        for rec in draw_random_instances(buffer, config.max_instances, rng):
            h, w = rec.shape
            anchor = (int(rng.integers(0, max(H - h, 0) + 1)), int(rng.integers(0, max(W - w, 0) + 1)))
            plan = fit_instance(rec, anchor, H, W, -1, min_scale=0.0)
            f = mixup_fuse(f, rec, plan, 0.0)
            f.log.append({"class_id": rec.class_id, "source_id": rec.source_id, "status": "placed",
                          "anchor": list(anchor), "scale": plan.scale, "lambda": 0.0})
        fused.append(f)
    return Batch(fused)


# --- loss on a batch ---------------------------------------------------------------------

def batch_loss(batch: Batch, model: SegNet, old_snapshot: ModelSnapshot | None, config: RunConfig,
               old_classes, new_classes) -> LossBreakdown:
    return total_loss(batch.fused, batch.instances, model, old_snapshot, config.alpha, old_classes, new_classes,
                      use_rskd=config.use_rskd, class_reduction=config.mbce_class_reduction)


# --- evaluation ----------------------------------------------------------------------------

@torch.no_grad()
def predict(model: SegNet, images, batch_size: int = 32) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = []
    for i in range(0, len(images), batch_size):
        out.append(model(to_tensor(images[i:i + batch_size])).argmax(1).numpy().astype(np.uint8))
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0,), np.uint8)


def evaluate(model: SegNet, eval_dataset: Sequence[SegSample], schedule: TaskSchedule, upto_step: int,
             batch_size: int = 32) -> MetricReport:
    """mIoU over background + classes learned up to ``upto_step``; unlearned
    classes in the ground truth count as background."""
    learned = schedule.learned_classes(upto_step)
    view = relabel_for_eval(eval_dataset, learned)
    K = schedule.num_outputs(upto_step)
    acc = ConfusionAccumulator(K)
    bgc = BgMisclassCounter(schedule.old_classes(upto_step))
    preds = predict(model, [s.image for s in view], batch_size)
    for pred, s in zip(preds, view):
        acc.update(pred, s.label)
        bgc.update(pred, s.label)
    ious = acc.iou()
    g = grouped_miou(ious, schedule, 1, upto_step)
    return MetricReport(ious, g["base"], g["inc"], g["all"], bgc.rate, upto_step)


# --- the continual loop -------------------------------------------------------------------------

@dataclass
class RunResult:
    config: RunConfig
    schedule: TaskSchedule
    reports: list[MetricReport]
    buffers: list[MemoryBuffer]
    image_buffers: list[ImageBuffer]
    step_states: list[dict]
    loss_rows: list[dict]
    fusion_log: list[dict]
    model: SegNet

    @property
    def final(self) -> MetricReport:
        return self.reports[-1]


class RunWriter:
    """Writes losses.csv, metrics.json, checkpoints and audit logs into a run directory."""

    LOSS_FIELDS = ("step", "epoch", "mbce_inst", "mbce_img", "rskd", "total")

    def __init__(self, run_dir):
        self.dir = Path(run_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        with open(self.dir / "losses.csv", "w", newline="") as f:
            csv.writer(f).writerow(self.LOSS_FIELDS)
        (self.dir / "fusion_log.jsonl").write_text("")

    def loss_row(self, row: dict) -> None:
        with open(self.dir / "losses.csv", "a", newline="") as f:
            csv.DictWriter(f, self.LOSS_FIELDS).writerow(row)

    def fusion_entries(self, entries) -> None:
        with open(self.dir / "fusion_log.jsonl", "a") as f:
            for e in entries:
                f.write(json.dumps(e) + "\n")

    def step_done(self, t, model, schedule, seed, buffer, reports) -> None:
        save_checkpoint(model, self.dir / f"step_{t}.ckpt", t, schedule.learned_classes(t), seed)
        save_buffer(buffer, self.dir / f"buffer_step_{t}")
        (self.dir / "metrics.json").write_text(json.dumps([r.to_json() for r in reports], indent=1))


def train_continual(config: RunConfig, train_samples: Sequence[SegSample], eval_samples: Sequence[SegSample],
                    run_dir=None, keep_fusion_log: bool = True) -> RunResult:
    """Train over every step of the schedule, updating memory after each step."""
    schedule = schedule_for(config, train_samples)
    writer = RunWriter(run_dir) if run_dir is not None else None
    torch.manual_seed(config.seed)
    model = reference_model(len(schedule.steps[0]), config.model_width, config.seed, config.model_levels)
    buffer = MemoryBuffer(config.capacity)
    image_buffer = ImageBuffer(config.capacity)
    reports, buffers, image_buffers, states, loss_rows, fusion_log = [], [], [], [], [], []

    for t in range(1, schedule.num_steps + 1):
        step_ds = build_step_dataset(train_samples, schedule, t, config.min_step_pixels)
        new, old = schedule.new_classes(t), schedule.old_classes(t)
        old_snap = None
        if t > 1:
            old_snap = snapshot(model, t - 1)
            model.extend_head(new)
        K = model.num_outputs
        lr = config.lr_base if t == 1 else config.lr_inc
        opt = torch.optim.SGD(model.parameters(), lr=lr, momentum=config.momentum)
        model.train()
        log.info("step %d/%d: %d samples, classes %s, strategy %s", t, schedule.num_steps, len(step_ds),
                 sorted(new), config.strategy)

        for epoch in range(config.epochs):
            order = np.random.default_rng([config.seed, t, epoch]).permutation(len(step_ds))
            sums = dict.fromkeys(("mbce_inst", "mbce_img", "rskd", "total"), 0.0)
            nb = 0
            for start in range(0, len(order), config.batch_size):
                samples = [step_ds.samples[int(i)] for i in order[start:start + config.batch_size]]
                rngs = [sample_rng(config.seed, t, epoch, s.id) for s in samples]
                batch_rng = np.random.default_rng([config.seed, t, epoch, start])
                batch = build_batch(config, samples, buffer, image_buffer, old_snap, rngs, batch_rng, K)
                if keep_fusion_log:
                    for f in batch.fused:
                        if f.log:
                            fusion_log.append({"step": t, "epoch": epoch, "sample": f.id, "events": f.log})
                losses = batch_loss(batch, model, old_snap, config, old, new)
                if not torch.isfinite(losses.total):
                    raise TrainingDivergence(f"non-finite loss at step {t}, epoch {epoch}: {losses.floats()}")
                opt.zero_grad(set_to_none=True)
                losses.total.backward()
                if config.grad_clip is not None:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                opt.step()
                for k, v in losses.floats().items():
                    sums[k] += v
                nb += 1
            row = {"step": t, "epoch": epoch, **{k: v / max(nb, 1) for k, v in sums.items()}}
            loss_rows.append(row)
            if writer:
                writer.loss_row(row)
        if writer and keep_fusion_log:
            writer.fusion_entries(e for e in fusion_log if e["step"] == t)

        records = extract_instances(step_ds, new, config.min_instance_pixels)
        by_class = {c: [r for r in records if r.class_id == c] for c in sorted(new)}
        buffer = rebalance(buffer, by_class, config.seed)
        image_buffer = image_buffer.add_step(step_ds)
        buffers.append(buffer)
        image_buffers.append(image_buffer)
        states.append({k: v.detach().clone() for k, v in model.state_dict().items()})

        report = evaluate(model, eval_samples, schedule, t, config.eval_batch_size)
        reports.append(report)
        log.info("step %d: all mIoU %.4f (base %s, inc %s)", t, report.all_miou, report.base_miou, report.inc_miou)
        if writer:
            writer.step_done(t, model, schedule, config.seed, buffer, reports)

    return RunResult(config, schedule, reports, buffers, image_buffers, states, loss_rows, fusion_log, model)


def build_batch(config: RunConfig, samples, buffer, image_buffer, old_snap, rngs, batch_rng, K) -> Batch:
    s = config.strategy
    if s == "eir":
        return make_batch_eir(samples, buffer, old_snap, config, rngs, K)
    if s == "image_replay":
        return make_batch_image_replay(samples, image_buffer, config, batch_rng, K)
    if s == "vanilla_instance":
        return make_batch_vanilla(samples, buffer, config, rngs, K)
    if s == "random_copy_paste":
        return make_batch_random_copy_paste(samples, buffer, rngs, config, K)
    return plain_batch(samples, K)
