"""Command-line surface: dataset generation, training, evaluation, weather
grids, gradient auditing, and ablation sweeps.

Every command is deterministic given its config file — seeds live in the
config, never in the environment — and writes byte-reproducible artifacts.

Exit codes: 0 success; 1 IO or runtime failure; 2 usage error (unknown
command, unknown config key, bad flag); 3 gradient audit above tolerance.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .audit import AUDIT_TOLERANCE, format_audit_report, run_gradient_audit
from .config import ABLATION_FLAGS, ConfigError, RunConfig, load_config
from .dataset import DiskDataset, write_dataset
from .evaluation import DIRECTIONS, MEAN_COLUMN, run_eval, weather_table
from .model import GeoPartModel
from .scenes import CONDITIONS
from .training import CONFIG_SIDECAR_SUFFIX, train

EXIT_OK = 0
EXIT_IO = 1
EXIT_USAGE = 2
EXIT_AUDIT = 3


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _load_model(ckpt: str) -> tuple[GeoPartModel, RunConfig]:
    """Rebuild a model from a checkpoint and its config sidecar."""
    ckpt_path = Path(ckpt)
    if not ckpt_path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt_path}")
    sidecar = Path(str(ckpt_path) + CONFIG_SIDECAR_SUFFIX)
    if not sidecar.is_file():
        raise FileNotFoundError(f"config sidecar not found: {sidecar}")
    cfg = load_config(sidecar)
    model = GeoPartModel(cfg.model_config())
    model.load(ckpt_path)
    return model, cfg


def _metric_lines(records: list[dict], dataset_name: str) -> list[str]:
    """One structured text line per metric value."""
    lines = []
    for rec in records:
        skip = {"direction", "condition", "n_queries", "n_gallery"}
        for key, value in rec.items():
            if key in skip:
                continue
            lines.append(
                f"metric={key} dataset={dataset_name} "
                f"direction={rec['direction']} condition={rec['condition']} "
                f"value={value!r}"
            )
    return lines


def _write_metrics(out_dir: Path, records: list[dict],
                   dataset_name: str) -> list[str]:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = _metric_lines(records, dataset_name)
    (out_dir / "metrics.txt").write_text("\n".join(lines) + "\n",
                                         encoding="utf-8")
    with open(out_dir / "metrics.json", "w", encoding="utf-8",
              newline="\n") as f:
        json.dump({"dataset": dataset_name, "records": records}, f,
                  sort_keys=True, indent=1)
        f.write("\n")
    return lines


def _table_csv(table: dict[str, dict[str, float]]) -> str:
    """Flat table, one column per condition plus the corrupted mean."""
    columns = list(CONDITIONS) + [MEAN_COLUMN]
    lines = ["metric," + ",".join(columns)]
    for metric in ("r@1", "ap"):
        lines.append(
            metric + "," + ",".join(repr(table[c][metric]) for c in columns)
        )
    return "\n".join(lines) + "\n"


def _table_records(table: dict[str, dict[str, float]],
                   direction: str) -> list[dict]:
    records = []
    for condition, metrics in table.items():
        records.append({"direction": direction, "condition": condition,
                        **metrics})
    return records


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    manifest = write_dataset(args.out, cfg)
    n_lines = sum(1 for _ in open(manifest, encoding="utf-8"))
    print(f"wrote {manifest} ({n_lines} records)")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    dataset = DiskDataset(args.data)
    result = train(cfg, dataset, args.out)
    print(f"steps={result.n_steps} skipped={result.skipped_steps} "
          f"checkpoint={result.checkpoint} loss_log={result.loss_log}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, cfg = _load_model(args.ckpt)
    dataset = DiskDataset(args.data)
    record = run_eval(model, dataset, args.direction,
                      recall_ks=cfg.recall_ks, sdm_k=cfg.sdm_k,
                      sdm_lambda=cfg.sdm_lambda)
    lines = _write_metrics(Path(args.out), [record], Path(args.data).name)
    print("\n".join(lines))
    return EXIT_OK


def cmd_weather_eval(args) -> int:
    model, cfg = _load_model(args.ckpt)
    dataset = DiskDataset(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for direction in DIRECTIONS:
        table = weather_table(model, dataset, direction, seed=cfg.data_seed)
        csv_text = _table_csv(table)
        (out_dir / f"weather_{direction}.csv").write_text(csv_text,
                                                          encoding="utf-8")
        records.extend(_table_records(table, direction))
        print(f"direction={direction}")
        print(csv_text, end="")
    _write_metrics(out_dir, records, Path(args.data).name)
    return EXIT_OK


def cmd_grad_check(args) -> int:
    cfg = load_config(args.config)
    report = run_gradient_audit(seed=cfg.init_seed)
    print(format_audit_report(report))
    if max(report.values()) > AUDIT_TOLERANCE:
        return EXIT_AUDIT
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    flags = [f.strip() for f in args.flags.split(",") if f.strip()]
    unknown = [f for f in flags if f not in ABLATION_FLAGS]
    if unknown:
        raise ConfigError(
            f"unknown ablation flags {unknown}; known: {ABLATION_FLAGS}"
        )
    dataset = DiskDataset(args.data)
    out_dir = Path(args.out)
    rows = []
    for label, run_cfg in [("full", cfg)] + [
        (flag, dataclasses.replace(cfg, **{flag: True})) for flag in flags
    ]:
        result = train(run_cfg, dataset, out_dir / label)
        record = run_eval(result.model, dataset, "d2s",
                          recall_ks=cfg.recall_ks, sdm_k=cfg.sdm_k,
                          sdm_lambda=cfg.sdm_lambda)
        rows.append((label, record["r@1"], record["ap"]))
    base_r1, base_ap = rows[0][1], rows[0][2]
    lines = ["flag,r@1,ap,delta_r@1,delta_ap"]
    for label, r1, ap in rows:
        lines.append(f"{label},{r1!r},{ap!r},{r1 - base_r1!r},{ap - base_ap!r}")
    csv_text = "\n".join(lines) + "\n"
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ablation.csv").write_text(csv_text, encoding="utf-8")
    print(csv_text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser + entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="partloc",
        description="part-prototype cross-view localization pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render and write a dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run the training loop")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="single-pass retrieval metrics")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--direction", required=True, choices=DIRECTIONS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("weather-eval",
                       help="per-condition grid, both directions")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_weather_eval)

    p = sub.add_parser("grad-check",
                       help="audit every loss group against the "
                            "finite-difference oracle")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("ablate", help="toggle sweep with a delta table")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--flags", required=True,
                   help="comma-separated ablation flag names")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
