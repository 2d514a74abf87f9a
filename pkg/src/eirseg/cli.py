"""Command-line runner: ``eirseg run | compare | gen-data | dump-fusions | region-sweep``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training
divergence (non-finite loss).
"""

from __future__ import annotations

import json
import logging
import sys
import time
from pathlib import Path

import click
import numpy as np
from PIL import Image

from . import __version__
from .errors import ConfigError, DataError, TrainingDivergence
from .memory import load_buffer
from .model import load_checkpoint, snapshot
from .protocol import build_step_dataset, class_colors, save_voc_format, to_uint8_image
from .reports import REGION_COUNTS, compare, config_from_run, format_table, region_sensitivity
from .trainer import load_config, load_datasets, make_batch_eir, sample_rng, schedule_for, train_continual

EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 2, 3, 4

log = logging.getLogger("eirseg")


def _fail(code: int, exc: Exception):
    click.echo(f"error: {exc}", err=True)
    sys.exit(code)


def guarded(fn):
    """Translate library errors into the documented exit codes."""
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            _fail(EXIT_CONFIG, exc)
        except DataError as exc:
            _fail(EXIT_DATA, exc)
        except TrainingDivergence as exc:
            _fail(EXIT_DIVERGED, exc)
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _load(config_path, seed=None, strategy=None):
    cfg = load_config(config_path)
    changes = {}
    if seed is not None:
        changes["seed"] = seed
    if strategy is not None:
        changes["strategy"] = strategy
    if changes:
        cfg = cfg.replace(**changes)
        try:
            cfg.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return cfg


def write_manifest(cfg, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": cfg.to_dict(),
        "code_version": __version__,
        "seed": cfg.seed,
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "outputs": {"metrics": "metrics.json", "losses": "losses.csv", "fusion_log": "fusion_log.jsonl",
                    "checkpoints": "step_<t>.ckpt", "buffers": "buffer_step_<t>/", "timing": "timing.json"},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


@click.group()
@click.version_option(__version__)
@click.option("-v", "--verbose", is_flag=True, help="Log per-step progress.")
def main(verbose):
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(), help="YAML run config.")
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Run directory to create.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--strategy", default=None, help="Override the config strategy.")
@guarded
def run(config_path, out, seed, strategy):
    """Train every step of the schedule and write metrics, checkpoints and buffers."""
    cfg = _load(config_path, seed, strategy)
    train, test = load_datasets(cfg)
    out = Path(out)
    write_manifest(cfg, out)
    t0 = time.perf_counter()
    result = train_continual(cfg, train, test, out)
    (out / "timing.json").write_text(json.dumps({"wall_clock_s": time.perf_counter() - t0}))
    f = result.final
    click.echo(format_table([{"label": cfg.strategy, "base": f.base_miou, "inc": f.inc_miou, "all": f.all_miou}],
                            "label", "strategy"), nl=False)


@main.command("compare")
@click.argument("run_dirs", nargs=-1, required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", type=click.Path(file_okay=False), default=None,
              help="Directory for comparison.csv and comparison.txt.")
@guarded
def compare_cmd(run_dirs, out):
    """Tabulate final base / inc / all mIoU of finished runs."""
    _, table = compare(run_dirs, out)
    click.echo(table, nl=False)


@main.command("gen-data")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path(file_okay=False))
@guarded
def gen_data(config_path, out):
    """Write the configured synthetic train and test sets as indexed-PNG folders."""
    cfg = load_config(config_path)
    if cfg.data.kind != "synthetic":
        raise ConfigError("gen-data needs data.kind: synthetic")
    train, test = load_datasets(cfg)
    out = Path(out)
    save_voc_format(train, out / "train", cfg.data.num_classes)
    save_voc_format(test, out / "test", cfg.data.num_classes)
    click.echo(f"wrote {len(train)} train and {len(test)} test samples to {out}")


def _label_png(label: np.ndarray, num_classes: int) -> Image.Image:
    im = Image.fromarray(label.astype(np.uint8))
    pal = np.zeros((256, 3), np.uint8)
    pal[: num_classes + 1] = to_uint8_image(class_colors(num_classes))
    pal[255] = 255
    im.putpalette(pal.ravel().tolist())
    return im


@main.command("dump-fusions")
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
@click.option("-n", "count", type=int, default=8, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Default: <run_dir>/fusions.")
@guarded
def dump_fusions(run_dir, count, out):
    """Rebuild enhanced-replay fusions of the last step and save them as PNGs.

    Uses the previous step's checkpoint and buffer from RUN_DIR and the
    random streams of the last step's first epoch.
    """
    cfg = config_from_run(run_dir)
    train, _ = load_datasets(cfg)
    schedule = schedule_for(cfg, train)
    T = schedule.num_steps
    if T < 2:
        raise ConfigError("fusion needs at least two steps")
    root = Path(run_dir)
    model, _ = load_checkpoint(root / f"step_{T - 1}.ckpt")
    buffer = load_buffer(root / f"buffer_step_{T - 1}")
    step_ds = build_step_dataset(train, schedule, T, cfg.min_step_pixels)
    samples = list(step_ds.samples[:count])
    rngs = [sample_rng(cfg.seed, T, 0, s.id) for s in samples]
    batch = make_batch_eir(samples, buffer, snapshot(model, T - 1), cfg, rngs, schedule.num_outputs(T))
    dest = Path(out) if out else root / "fusions"
    dest.mkdir(parents=True, exist_ok=True)
    events = []
    for i, f in enumerate(batch.fused):
        Image.fromarray(to_uint8_image(f.image)).save(dest / f"{i:03d}_fused.png")
        _label_png(f.soft_label.argmax(axis=2), schedule.total_classes).save(dest / f"{i:03d}_mask.png")
        events.append({"index": i, "sample": f.id, "events": f.log})
    (dest / "fusions.json").write_text(json.dumps(events, indent=1))
    click.echo(f"wrote {len(batch.fused)} fusions to {dest}")


@main.command("region-sweep")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--seeds", default=None, help="Comma-separated seeds (default: the config seed).")
@click.option("--counts", default=",".join(map(str, REGION_COUNTS)), show_default=True)
@guarded
def region_sweep(config_path, out, seeds, counts):
    """Final mIoU of enhanced replay for several region counts."""
    cfg = load_config(config_path)
    try:
        ns = [int(x) for x in counts.split(",")]
        seed_list = None if seeds is None else [int(x) for x in seeds.split(",")]
    except ValueError as exc:
        raise ConfigError(f"bad integer list: {exc}") from exc
    rows = region_sensitivity(cfg, ns, seed_list, out)
    click.echo(format_table(rows, "regions", "regions"), nl=False)


if __name__ == "__main__":
    main()
