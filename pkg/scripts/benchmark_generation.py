#!/usr/bin/env python3
"""Measure per-page cost of each pipeline phase.

Times composition, rasterization, augmentation, and the full dataset run
separately so regressions can be attributed to a phase rather than guessed
at from the end-to-end number.
"""

import argparse
import shutil
import tempfile
import time

from docforge import raster
from docforge.augment import augment, default_spec
from docforge.compose import (
    FillPolicy,
    GenerationConfig,
    compose_page,
    generate_dataset,
)
from docforge.elements import ElementKind, ElementRepository
from docforge.layout import SampleConstraints, builtin_templates, sample_template


def timed(label: str, n: int, fn) -> None:
    t0 = time.perf_counter()
    for i in range(n):
        fn(i)
    dt = time.perf_counter() - t0
    print(f"{label:<28} {dt / n * 1000:8.2f} ms/page ({n / dt:7.1f} pages/s)")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pages", type=int, default=200)
    ap.add_argument("--page-width", type=int, default=1240)
    ap.add_argument("--page-height", type=int, default=1754)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()

    size = (args.page_width, args.page_height)
    repo = ElementRepository.build_procedural(
        {k: 16 for k in ElementKind}, languages=("en",), seed=3)
    store = builtin_templates()
    policy = FillPolicy(page_size=size, unfillable="skip")
    constraints = SampleConstraints()

    pages = []
    def compose(i: int) -> None:
        template = sample_template(store, constraints, i)
        pages.append(compose_page(template, repo, policy, i))
    timed("compose", args.pages, compose)

    canvases = []
    def render(i: int) -> None:
        canvases.append(raster.render_page(pages[i]))
    timed("render", args.pages, render)

    spec = default_spec()
    timed("augment (default spec)", args.pages,
          lambda i: augment(canvases[i], spec, seed=i))

    out = tempfile.mkdtemp(prefix="bench_")
    config = GenerationConfig(
        out_dir=out, pages=args.pages, stage1=0, seed=11,
        page_width=size[0], page_height=size[1],
        augment_fraction=0.2, workers=args.workers)
    t0 = time.perf_counter()
    generate_dataset(config)
    dt = time.perf_counter() - t0
    print(f"{'full run (images+augment)':<28} {dt / args.pages * 1000:8.2f} "
          f"ms/page ({args.pages / dt:7.1f} pages/s, workers={args.workers})")
    shutil.rmtree(out)


if __name__ == "__main__":
    main()
