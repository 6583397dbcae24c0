"""Command-line entry point.

Subcommands: generate, augment, evaluate, inspect, elements.  Every run
is reproducible from the config snapshot it writes; all randomness flows
from one master seed.  Exit codes: 0 success, 1 internal error, 2 user or
input error.  Failures print one machine-readable JSON object to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .augment import AugmentError, AugmentationSpec, augment, default_spec, \
    remap_bboxes
from .compose import ComposeError, ConfigError, DatasetRecord, GenerationConfig, \
    generate_dataset
from .elements import ElementError, ElementKind, ElementRepository, \
    INGEST_FORMATS, ingest_elements
from .layout import TemplateError
from .metrics import DEFAULT_MAX_LEN, MetricError, evaluate, with_degradation
from .raster import Canvas

USER_ERRORS = (ConfigError, ComposeError, ElementError, TemplateError,
               MetricError, AugmentError, FileNotFoundError, NotADirectoryError,
               PermissionError, IsADirectoryError)


class CliError(ValueError):
    """User-facing command error (exit code 2)."""


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------

def _load_config_file(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file not found: {p}")
    text = p.read_text("utf-8")
    if p.suffix.lower() == ".json":
        try:
            return json.loads(text)
        except json.JSONDecodeError as e:
            raise CliError(f"invalid JSON in {p}: {e}")
    if p.suffix.lower() == ".toml":
        try:
            import tomllib  # Python >= 3.11
        except ImportError:
            import tomli as tomllib
        try:
            return tomllib.loads(text)
        except tomllib.TOMLDecodeError as e:
            raise CliError(f"invalid TOML in {p}: {e}")
    raise CliError(f"config must be .json or .toml, got: {p.name}")


def _default_workers() -> int:
    env = os.environ.get("DOCFORGE_WORKERS", "").strip()
    if env:
        try:
            n = int(env)
        except ValueError:
            raise CliError(f"DOCFORGE_WORKERS must be an integer, got {env!r}")
        if n < 1:
            raise CliError(f"DOCFORGE_WORKERS must be >= 1, got {n}")
        return n
    return 1


def _build_generation_config(args: argparse.Namespace) -> GenerationConfig:
    # precedence: flag > config file > environment > built-in default
    base: dict = {"workers": _default_workers()}
    if args.config:
        base.update(_load_config_file(args.config))
    flag_map = {
        "out": "out_dir", "pages": "pages", "stage1": "stage1",
        "seed": "seed", "workers": "workers",
        "augment_fraction": "augment_fraction",
        "page_width": "page_width", "page_height": "page_height",
        "token_budget": "token_budget", "languages": "languages",
        "repo": "repo_path", "templates": "template_dir",
        "channels": "channels", "no_images": "write_images",
    }
    for flag, key in flag_map.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        if flag == "languages":
            value = tuple(s.strip() for s in value.split(",") if s.strip())
        if flag == "no_images":
            if not value:
                continue
            value = False
        base[key] = value
    try:
        return GenerationConfig.from_dict(base)
    except TypeError as e:
        raise ConfigError(str(e))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_generate(args: argparse.Namespace) -> int:
    config = _build_generation_config(args)
    summary = generate_dataset(config)
    print(json.dumps(summary, sort_keys=True))
    return 0


def _load_canvas(path: Path) -> Canvas:
    from PIL import Image

    if not path.exists():
        raise CliError(f"image not found: {path}")
    img = Image.open(path)
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB" if img.mode in ("RGBA", "P") else "L")
    buf = np.asarray(img)
    channels = 1 if buf.ndim == 2 else buf.shape[2]
    return Canvas(buf.shape[1], buf.shape[0], channels, buf.copy())


def cmd_augment(args: argparse.Namespace) -> int:
    image = Path(args.image)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.spec:
        spec = AugmentationSpec.from_dict(_load_config_file(args.spec))
    else:
        spec = default_spec()
    spec.validate()
    canvas = _load_canvas(image)
    warped, record = augment(canvas, spec, seed=args.seed)
    stem = image.stem
    warped.to_png(out / f"{stem}.aug.png")
    (out / f"{stem}.record.json").write_text(record.to_json(), "utf-8")
    result = {"image": str(out / f"{stem}.aug.png"),
              "record": str(out / f"{stem}.record.json"),
              "size": list(record.output_size)}
    if args.sidecar:
        sidecar_path = Path(args.sidecar)
        if not sidecar_path.exists():
            raise CliError(f"sidecar not found: {sidecar_path}")
        sidecar = json.loads(sidecar_path.read_text("utf-8"))
        blocks = sidecar.get("blocks", [])
        remapped = remap_bboxes(blocks, record)
        (out / f"{stem}.remapped.json").write_text(
            json.dumps(remapped, sort_keys=True), "utf-8")
        result["remapped"] = str(out / f"{stem}.remapped.json")
    print(json.dumps(result, sort_keys=True))
    return 0


def _read_manifest(path: str) -> list[DatasetRecord]:
    p = Path(path)
    if not p.exists():
        raise CliError(f"manifest not found: {p}")
    records = []
    with p.open("r", encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(DatasetRecord.from_json_line(line))
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise CliError(f"{p}:{n}: bad manifest record: {e}")
    return records


def _stage2(records: list[DatasetRecord]) -> list[DatasetRecord]:
    return [r for r in records if r.stage == 2]


def cmd_evaluate(args: argparse.Namespace) -> int:
    pred = _stage2(_read_manifest(args.pred))
    gt = _stage2(_read_manifest(args.gt))
    mode = "any" if args.repetition_any else "and"
    if args.wild_pair:
        pairs = _load_pairs(args.wild_pair)
        by_id_p = {r.meta.get("page_id"): r for r in pred}
        by_id_g = {r.meta.get("page_id"): r for r in gt}
        for origin_id, wild_id in pairs:
            for pid in (origin_id, wild_id):
                if pid not in by_id_p or pid not in by_id_g:
                    raise MetricError(
                        f"paired page id {pid!r} missing from manifests")
        origin_ids = [o for o, _ in pairs]
        wild_ids = [w for _, w in pairs]
        origin = evaluate([by_id_p[i] for i in origin_ids],
                          [by_id_g[i] for i in origin_ids],
                          args.max_len, mode)
        wild = evaluate([by_id_p[i] for i in wild_ids],
                        [by_id_g[i] for i in wild_ids],
                        args.max_len, mode)
        report = with_degradation(wild, origin)
    else:
        report = evaluate(pred, gt, args.max_len, mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json(), "utf-8")
    table = report.to_text_table()
    (out / "report.txt").write_text(table + "\n", "utf-8")
    print(table)
    return 0


def _load_pairs(path: str) -> list[tuple[str, str]]:
    p = Path(path)
    if not p.exists():
        raise CliError(f"pairing file not found: {p}")
    data = json.loads(p.read_text("utf-8"))
    if isinstance(data, dict):
        items = data.get("pairs", data)
        if isinstance(items, dict):
            return [(str(k), str(v)) for k, v in sorted(items.items())]
        data = items
    pairs = []
    for entry in data:
        if not isinstance(entry, (list, tuple)) or len(entry) != 2:
            raise CliError(f"pairing entries must be [origin, wild]: {entry!r}")
        pairs.append((str(entry[0]), str(entry[1])))
    return pairs


def cmd_inspect(args: argparse.Namespace) -> int:
    from PIL import Image, ImageDraw

    dataset = Path(args.dataset)
    records = _read_manifest(str(dataset / "manifest.jsonl"))
    record = next((r for r in records if r.meta.get("page_id") == args.page_id),
                  None)
    if record is None:
        raise CliError(f"page id {args.page_id!r} not in "
                       f"{dataset / 'manifest.jsonl'}")
    image_path = dataset / record.image
    sidecar_path = image_path.with_suffix(".json")
    if not image_path.exists():
        raise CliError(f"page image not found (run generated without images?): "
                       f"{image_path}")
    sidecar = json.loads(sidecar_path.read_text("utf-8")) \
        if sidecar_path.exists() else {"blocks": []}
    augmented = "remapped_blocks" in sidecar
    source = sidecar["remapped_blocks"] if augmented else \
        sidecar.get("blocks", [])
    boxes = [b["bbox"] for b in source]
    orders = [b["order_index"] for b in source]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    img = Image.open(image_path).convert("RGB")
    draw = ImageDraw.Draw(img)
    for bbox, order in zip(boxes, orders):
        x, y, w, h = bbox
        draw.rectangle([x, y, x + w, y + h], outline=(200, 30, 30), width=2)
        draw.text((x + 3, y + 3), str(order), fill=(200, 30, 30))
    overlay_path = out / f"{args.page_id}.overlay.png"
    img.save(overlay_path)
    (out / f"{args.page_id}.gt.txt").write_text(record.target + "\n", "utf-8")
    result = {"overlay": str(overlay_path),
              "ground_truth": str(out / f"{args.page_id}.gt.txt"),
              "blocks": len(boxes), "augmented": augmented}
    if augmented:
        remap_path = out / f"{args.page_id}.remapped.json"
        remap_path.write_text(json.dumps(source, sort_keys=True), "utf-8")
        result["remapped"] = str(remap_path)
    print(json.dumps(result, sort_keys=True))
    return 0


def cmd_elements(args: argparse.Namespace) -> int:
    if args.elements_cmd == "build":
        counts = {}
        for part in args.counts.split(","):
            name, _, num = part.partition("=")
            try:
                counts[ElementKind(name.strip())] = int(num)
            except ValueError:
                raise CliError(f"bad count spec {part!r}; use kind=N")
        languages = tuple(s.strip() for s in args.languages.split(",") if s.strip())
        repo = ElementRepository.build_procedural(counts, languages, args.seed)
        repo.save(args.out)
        print(json.dumps({"out": args.out, "count": len(repo.elements),
                          "hash": repo.content_hash()}, sort_keys=True))
        return 0
    if args.elements_cmd == "ingest":
        elements, report = ingest_elements(args.source, args.format)
        repo = ElementRepository(elements)
        repo.save(args.out)
        print(json.dumps({"out": args.out, **report.as_dict()}, sort_keys=True))
        return 0
    if args.elements_cmd == "stats":
        repo = ElementRepository.load(args.repo)
        by_kind: dict[str, int] = {}
        by_lang: dict[str, int] = {}
        for e in repo.elements:
            by_kind[e.kind.value] = by_kind.get(e.kind.value, 0) + 1
            by_lang[e.language] = by_lang.get(e.language, 0) + 1
        print(json.dumps({"count": len(repo.elements), "by_kind": by_kind,
                          "by_language": by_lang,
                          "hash": repo.content_hash()}, sort_keys=True))
        return 0
    raise CliError(f"unknown elements subcommand {args.elements_cmd!r}")


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="docforge",
        description="Synthetic document-parsing dataset toolkit: generate "
                    "pages, augment captures, evaluate predictions.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="synthesize a dataset")
    g.add_argument("--config", help="TOML or JSON config file")
    g.add_argument("--out", help="output directory")
    g.add_argument("--pages", type=int, help="stage-2 page count")
    g.add_argument("--stage1", type=int, help="stage-1 element record count")
    g.add_argument("--seed", type=int, help="master seed")
    g.add_argument("--workers", type=int, help="process count "
                   "(default: DOCFORGE_WORKERS or 1)")
    g.add_argument("--augment-fraction", dest="augment_fraction", type=float,
                   help="fraction of pages to augment")
    g.add_argument("--page-width", dest="page_width", type=int)
    g.add_argument("--page-height", dest="page_height", type=int)
    g.add_argument("--token-budget", dest="token_budget", type=int)
    g.add_argument("--languages", help="comma-separated language codes")
    g.add_argument("--repo", help="element repository JSONL path")
    g.add_argument("--templates", help="layout template directory")
    g.add_argument("--channels", type=int, choices=(1, 3))
    g.add_argument("--no-images", dest="no_images", action="store_true",
                   default=None, help="manifest only, skip PNG rendering")
    g.set_defaults(func=cmd_generate)

    a = sub.add_parser("augment", help="augment a page image")
    a.add_argument("--image", required=True, help="input PNG")
    a.add_argument("--out", required=True, help="output directory")
    a.add_argument("--spec", help="augmentation spec (TOML or JSON)")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--sidecar", help="page sidecar JSON; remaps its bboxes")
    a.set_defaults(func=cmd_augment)

    e = sub.add_parser("evaluate", help="score predictions against ground truth")
    e.add_argument("--pred", required=True, help="prediction manifest JSONL")
    e.add_argument("--gt", required=True, help="ground-truth manifest JSONL")
    e.add_argument("--out", required=True, help="report directory")
    e.add_argument("--max-len", dest="max_len", type=int, default=DEFAULT_MAX_LEN,
                   help="generation budget for the repetition check")
    e.add_argument("--repetition-any", dest="repetition_any",
                   action="store_true",
                   help="flag on either repetition condition instead of both")
    e.add_argument("--wild-pair", dest="wild_pair",
                   help="JSON pairing of origin/wild page ids; adds deltas")
    e.set_defaults(func=cmd_evaluate)

    i = sub.add_parser("inspect", help="render block overlays for a page")
    i.add_argument("--dataset", required=True, help="dataset directory")
    i.add_argument("--page-id", dest="page_id", required=True)
    i.add_argument("--out", required=True, help="artifact directory")
    i.set_defaults(func=cmd_inspect)

    el = sub.add_parser("elements", help="element repository tooling")
    els = el.add_subparsers(dest="elements_cmd", required=True)
    b = els.add_parser("build", help="build a procedural repository")
    b.add_argument("--out", required=True)
    b.add_argument("--counts", required=True, help="e.g. table=50,formula=30")
    b.add_argument("--languages", default="en")
    b.add_argument("--seed", type=int, default=0)
    ing = els.add_parser("ingest", help="normalize an external corpus")
    ing.add_argument("--source", required=True)
    ing.add_argument("--format", required=True, choices=INGEST_FORMATS)
    ing.add_argument("--out", required=True)
    st = els.add_parser("stats", help="summarize a repository")
    st.add_argument("--repo", required=True)
    el.set_defaults(func=cmd_elements)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors and 0 on --help; keep its codes
        return int(e.code or 0)
    try:
        return args.func(args)
    except (CliError, *USER_ERRORS) as e:
        _fail(e)
        return 2
    except Exception as e:  # internal bug surface, still machine-readable
        _fail(e)
        return 1


def _fail(e: Exception) -> None:
    print(json.dumps({"error": {"type": type(e).__name__, "message": str(e)}},
                     sort_keys=True), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
