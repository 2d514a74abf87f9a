"""Comparison tables over finished run directories, and the region-count sweep."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

from .errors import DataError
from .metrics import MetricReport
from .trainer import RunConfig, config_from_dict, load_datasets, train_continual

COLUMNS = ("base", "inc", "all")
REGION_COUNTS = (4, 6, 9, 12)


def read_run(run_dir) -> dict:
    """Manifest config plus the final-step report of one run directory."""
    root = Path(run_dir)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
        reports = json.loads((root / "metrics.json").read_text())
        final = MetricReport.from_json(reports[-1])
    except (OSError, ValueError, KeyError, IndexError, TypeError) as exc:
        raise DataError(f"{root} is not a finished run directory: {exc}") from exc
    cfg = manifest.get("config", {})
    return {"run": root.name, "strategy": cfg.get("strategy", "?"), "seed": cfg.get("seed", "?"),
            "base": final.base_miou, "inc": final.inc_miou, "all": final.all_miou,
            "bg_misclass": final.bg_misclass_rate}


def _pct(x) -> str:
    return "-" if x is None else f"{100 * x:.2f}"


def format_table(rows, label_key: str, label_title: str, columns=COLUMNS) -> str:
    """Right-aligned text table with mIoU values shown in percent."""
    header = [label_title, *columns]
    body = [[str(r[label_key]), *(_pct(r[c]) for c in columns)] for r in rows]
    widths = [max(len(line[i]) for line in [header, *body]) for i in range(len(header))]
    fmt = lambda line: "  ".join(x.ljust(w) if i == 0 else x.rjust(w) for i, (x, w) in enumerate(zip(line, widths)))
    rule = "  ".join("-" * w for w in widths)
    return "\n".join([fmt(header), rule, *(fmt(line) for line in body)]) + "\n"


def to_csv(rows, fields) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fields, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in fields})
    return buf.getvalue()


def compare(run_dirs, out_dir=None) -> tuple[str, str]:
    """Strategy x {base, inc, all} table over finished runs, one row per run.

    Returns (csv_text, table_text) and writes both under ``out_dir`` when given.
    """
    rows = [read_run(d) for d in run_dirs]
    csv_text = to_csv(rows, ("run", "strategy", "seed", *COLUMNS, "bg_misclass"))
    labelled = [dict(r, label=f"{r['strategy']} (seed {r['seed']})") for r in rows]
    table = format_table(labelled, "label", "strategy")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.csv").write_text(csv_text)
        (out / "comparison.txt").write_text(table)
    return csv_text, table


def region_sensitivity(config: RunConfig, counts=REGION_COUNTS, seeds=None, out_dir=None,
                       train=None, test=None) -> list[dict]:
    """Train EIR once per region count (and seed) and tabulate final mIoU.

    Values are averaged over ``seeds``; no ordering is implied.
    """
    seeds = [config.seed] if seeds is None else list(seeds)
    if train is None or test is None:
        train, test = load_datasets(config)
    rows = []
    for n in counts:
        finals = []
        for seed in seeds:
            cfg = config.replace(strategy="eir", region_n=int(n), seed=int(seed), name=f"regions_{n}_seed_{seed}")
            run_dir = None if out_dir is None else Path(out_dir) / cfg.name
            finals.append(train_continual(cfg, train, test, run_dir).final)
        row = {"regions": int(n)}
        for c, attr in zip(COLUMNS, ("base_miou", "inc_miou", "all_miou")):
            vals = [getattr(f, attr) for f in finals if getattr(f, attr) is not None]
            row[c] = sum(vals) / len(vals) if vals else None
        rows.append(row)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "region_sensitivity.csv").write_text(to_csv(rows, ("regions", *COLUMNS)))
        (out / "region_sensitivity.txt").write_text(format_table(rows, "regions", "regions"))
    return rows


def config_from_run(run_dir) -> RunConfig:
    try:
        manifest = json.loads((Path(run_dir) / "manifest.json").read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read manifest in {run_dir}: {exc}") from exc
    return config_from_dict(manifest)
