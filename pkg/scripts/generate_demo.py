#!/usr/bin/env python3
"""Generate a small inspectable dataset and print what landed on disk.

Produces page images, sidecars, and a manifest under --out, then shows the
run summary plus the first stage-1 and stage-2 records so the output format
is visible without opening files by hand.
"""

import argparse
import json
from pathlib import Path

from docforge.compose import GenerationConfig, generate_dataset


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="demo_out")
    ap.add_argument("--pages", type=int, default=12)
    ap.add_argument("--stage1", type=int, default=6)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--page-width", type=int, default=620)
    ap.add_argument("--page-height", type=int, default=877)
    ap.add_argument("--augment-fraction", type=float, default=0.25)
    args = ap.parse_args()

    config = GenerationConfig(
        out_dir=args.out,
        pages=args.pages,
        stage1=args.stage1,
        seed=args.seed,
        page_width=args.page_width,
        page_height=args.page_height,
        augment_fraction=args.augment_fraction,
    )
    summary = generate_dataset(config)
    print(json.dumps(summary, indent=1, sort_keys=True))

    shown = set()
    with open(Path(args.out) / "manifest.jsonl", encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            if rec["stage"] in shown:
                continue
            shown.add(rec["stage"])
            rec["target"] = rec["target"][:120] + (
                "..." if len(rec["target"]) > 120 else "")
            print(f"\nstage-{rec['stage']} record:")
            print(json.dumps(rec, indent=1, sort_keys=True))
            if len(shown) == 2:
                break


if __name__ == "__main__":
    main()
