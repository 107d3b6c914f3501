#!/usr/bin/env python3
"""End to end: dataset -> training -> retrieval -> weather grid.

Uses the shipped desk profile (configs/desk.cfg): 32 training and 16
held-out locations at four flight heights, 600 optimizer steps, then the
clean retrieval metrics and the full per-condition table.  Takes roughly
two to three minutes of CPU time; everything is seeded, so rerunning
reproduces the numbers byte for byte.

Run:  python3 demos/05_end_to_end.py
"""

from __future__ import annotations

import pathlib
import tempfile
import time

from partloc.config import load_config
from partloc.dataset import DiskDataset, write_dataset
from partloc.evaluation import run_eval, weather_table
from partloc.training import train

DESK_CFG = pathlib.Path(__file__).resolve().parents[1] / "configs" / "desk.cfg"


def main() -> None:
    cfg = load_config(DESK_CFG)
    with tempfile.TemporaryDirectory() as tmp:
        root = pathlib.Path(tmp)
        print("== dataset ==")
        t0 = time.monotonic()
        manifest = write_dataset(root / "data", cfg)
        data = DiskDataset(root / "data")
        print(f"manifest: {manifest.name}  "
              f"train={len(data.records('train'))} "
              f"gallery={len(data.records('gallery'))} "
              f"query={len(data.records('query'))}  "
              f"({time.monotonic() - t0:.1f}s)")

        print("\n== training (desk profile) ==")
        t0 = time.monotonic()
        result = train(cfg, data, root / "run")
        print(f"{result.n_steps} steps in {time.monotonic() - t0:.1f}s  "
              f"checkpoint={result.checkpoint.name}")

        print("\n== clean retrieval, both directions ==")
        for direction in ("d2s", "s2d"):
            rec = run_eval(result.model, data, direction)
            print(f"{direction}: " + "  ".join(
                f"{k}={v:.4f}" for k, v in rec.items()
                if k not in ("direction", "condition",
                             "n_queries", "n_gallery")))

        print("\n== ground-to-overhead retrieval under weather ==")
        t0 = time.monotonic()
        table = weather_table(result.model, data, "d2s", seed=cfg.data_seed)
        width = max(len(c) for c in table)
        for cond, metrics in table.items():
            print(f"{cond:>{width}}  r@1={metrics['r@1']:.4f}  "
                  f"ap={metrics['ap']:.4f}")
        print(f"({time.monotonic() - t0:.1f}s)")


if __name__ == "__main__":
    main()
