"""Page composition and dataset emission.

Fills layout templates with repository elements under spatial constraints,
producing pages whose rendered structure and ground-truth stream are the
same tree by construction (truncation rewrites the markup first, then both
the renderer and the serializer consume the rewritten markup).  Dataset
generation streams records to a JSONL manifest; every page is a pure
function of (config, page index), so results are independent of worker
count and scheduling.
"""

from __future__ import annotations

import json
import random
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from . import raster
from .augment import AugmentationSpec, augment, default_spec, remap_bboxes
from .elements import Element, ElementRepository
from .layout import (
    LayoutTemplate,
    SampleConstraints,
    TemplateStore,
    builtin_templates,
    sample_template,
)
from .model import (
    Block,
    BlockAnnotation,
    ElementKind,
    FigureMarkup,
    GroundTruth,
    Markup,
    ParagraphMarkup,
    TableCell,
    TableMarkup,
    TableRow,
    VOCAB,
    serialize_block,
    serialize_ground_truth,
)
from .seeding import derive_seed

MIN_FIGURE_PX = 12
MAX_FIGURE_SCALE = 4.0

STAGE1_PROMPTS: dict[ElementKind, str] = {
    ElementKind.TABLE: "Parse the table in the image and output its structure "
                       "and content as tokens.",
    ElementKind.FORMULA: "Transcribe the formula in the image as a token sequence.",
    ElementKind.PARAGRAPH: "Transcribe the text in the image.",
    ElementKind.FIGURE: "Mark the figure region in the image as structured tokens.",
    ElementKind.TITLE: "Transcribe the heading in the image.",
}
STAGE2_PROMPT = "Parse the document image into the structured token stream."

#: Engine-default stage-1 kind mixture (the upstream corpus ratios are not
#: public; these are our choices and are recorded in every config snapshot).
DEFAULT_STAGE1_MIX: dict[ElementKind, float] = {
    ElementKind.TABLE: 0.30,
    ElementKind.FORMULA: 0.25,
    ElementKind.PARAGRAPH: 0.30,
    ElementKind.FIGURE: 0.15,
}

DEFAULT_REPO_COUNTS: dict[str, int] = {
    "table": 120, "formula": 100, "paragraph": 140, "figure": 50, "title": 50,
}


class ComposeError(ValueError):
    """Composition failed under the active fill policy."""


class ConfigError(ValueError):
    """Generation config failed schema validation."""


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FillPolicy:
    page_size: tuple[int, int] = (1240, 1754)
    min_font_k: int = 1          # scale 0.5
    max_font_k: int = raster.MAX_K  # scale 4.0
    empty_region_prob: float = 0.0
    max_candidates: int = 8
    unfillable: str = "error"    # "error" | "skip"
    include_titles: bool = True

    def validate(self) -> None:
        w, h = self.page_size
        if w <= 0 or h <= 0:
            raise ConfigError(f"page size {self.page_size} must be positive")
        if not 1 <= self.min_font_k <= self.max_font_k <= raster.MAX_K:
            raise ConfigError("font factor bounds must satisfy "
                              f"1 <= min <= max <= {raster.MAX_K}")
        if not 0 <= self.empty_region_prob <= 1:
            raise ConfigError("empty_region_prob must be in [0, 1]")
        if self.unfillable not in ("error", "skip"):
            raise ConfigError("unfillable must be 'error' or 'skip'")
        if self.max_candidates < 1:
            raise ConfigError("max_candidates must be >= 1")


@dataclass(frozen=True)
class Placement:
    element_id: str
    block_id: str
    region_index: int
    kind: ElementKind
    language: str
    markup: Markup               # possibly truncated copy of the element's
    font_k: int
    scale: float                 # font_k / nominal, or continuous for figures
    bbox: tuple[int, int, int, int]
    policy_applied: str          # fit-scale | truncate-rows | truncate-lines


@dataclass(frozen=True)
class ComposedPage:
    page_id: str
    template_id: str
    size: tuple[int, int]
    placements: tuple[Placement, ...]
    ground_truth: GroundTruth
    seed: int
    augmented: bool = False

    @property
    def languages(self) -> tuple[str, ...]:
        return tuple(sorted({p.language for p in self.placements}))


@dataclass(frozen=True)
class DatasetRecord:
    stage: int
    prompt: str
    image: str
    target: str
    meta: dict = field(default_factory=dict, compare=False)

    def to_json_line(self) -> str:
        return json.dumps(
            {"stage": self.stage, "prompt": self.prompt, "image": self.image,
             "target": self.target, "meta": self.meta},
            sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json_line(cls, line: str) -> "DatasetRecord":
        d = json.loads(line)
        return cls(int(d["stage"]), d["prompt"], d["image"], d["target"],
                   d.get("meta", {}))


# ---------------------------------------------------------------------------
# Fitting and truncation
# ---------------------------------------------------------------------------

def truncate_table_rows(markup: TableMarkup, keep: int) -> TableMarkup:
    """First `keep` rows, with rowspans crossing the cut clamped to it."""
    rows = []
    for r, row in enumerate(markup.rows[:keep]):
        cells = tuple(
            TableCell(c.text, rowspan=min(c.rowspan, keep - r), colspan=c.colspan)
            for c in row.cells)
        rows.append(TableRow(cells))
    return TableMarkup(tuple(rows))


@dataclass(frozen=True)
class _Fit:
    markup: Markup
    font_k: int
    scale: float
    size: tuple[int, int]
    policy_applied: str


def fit_element(element: Element, box_w: int, box_h: int,
                policy: FillPolicy) -> _Fit | None:
    """Scale (and as a last resort truncate) an element into a box.

    Ladder: integer font factors max..min; then whole-row truncation for
    tables and whole-line truncation for paragraphs at the minimum factor;
    figures scale continuously with aspect preserved.  None = no fit.
    """
    markup = element.markup
    if isinstance(markup, FigureMarkup):
        iw, ih = element.intrinsic_size
        s = min(box_w / iw, box_h / ih, MAX_FIGURE_SCALE)
        bw, bh = int(iw * s), int(ih * s)
        if min(bw, bh) < MIN_FIGURE_PX:
            return None
        return _Fit(markup, raster.NOMINAL_K, s, (bw, bh), "fit-scale")

    for k in range(policy.max_font_k, policy.min_font_k - 1, -1):
        lay = raster.layout_markup(markup, k, max_width=box_w)
        if lay is not None and lay.width <= box_w and lay.height <= box_h:
            return _Fit(markup, k, k / raster.NOMINAL_K,
                        (lay.width, lay.height), "fit-scale")

    k = policy.min_font_k
    if isinstance(markup, TableMarkup) and len(markup.rows) > 1:
        lay_full = raster.layout_markup(markup, k)
        if lay_full.width <= box_w:
            for keep in range(len(markup.rows) - 1, 0, -1):
                cut = truncate_table_rows(markup, keep)
                lay = raster.layout_markup(cut, k)
                if lay.width <= box_w and lay.height <= box_h:
                    return _Fit(cut, k, k / raster.NOMINAL_K,
                                (lay.width, lay.height), "truncate-rows")
    elif isinstance(markup, ParagraphMarkup) and len(markup.lines) > 1:
        heights = raster.paragraph_line_heights(markup.lines, k, box_w)
        if heights is not None:
            total = 0
            keep = 0
            for lh in heights:
                if total + lh > box_h:
                    break
                total += lh
                keep += 1
            if keep >= 1:
                cut = ParagraphMarkup(markup.lines[:keep],
                                      language=markup.language)
                lay = raster.layout_markup(cut, k, max_width=box_w)
                if lay.width <= box_w and lay.height <= box_h:
                    return _Fit(cut, k, k / raster.NOMINAL_K,
                                (lay.width, lay.height), "truncate-lines")
    return None


# ---------------------------------------------------------------------------
# Page composition
# ---------------------------------------------------------------------------

def _region_px(bbox: tuple[float, float, float, float],
               page: tuple[int, int]) -> tuple[int, int, int, int]:
    x, y, w, h = bbox
    pw, ph = page
    x0 = round(x * pw)
    y0 = round(y * ph)
    x1 = round((x + w) * pw)
    y1 = round((y + h) * ph)
    return (x0, y0, max(0, x1 - x0), max(0, y1 - y0))


def compose_page(template: LayoutTemplate, repo: ElementRepository,
                 policy: FillPolicy, seed: int,
                 page_id: str | None = None) -> ComposedPage:
    """Fill the template's regions in reading order; deterministic in seed."""
    policy.validate()
    if page_id is None:
        page_id = f"page-{seed & 0xFFFFFFFFFFFFFFFF:016x}"
    rng = random.Random(derive_seed("compose", seed))
    order = template.region_order()
    empties = [rng.random() < policy.empty_region_prob for _ in order]
    if order and all(empties):
        empties[0] = False

    repo_kinds = repo.kinds()
    placements: list[Placement] = []
    annotations: list[BlockAnnotation] = []
    for slot, region_index in enumerate(order):
        if empties[slot]:
            continue
        region = template.regions[region_index]
        rx, ry, rw, rh = _region_px(region.bbox, policy.page_size)
        allowed = sorted(
            (k for k in region.kinds & repo_kinds
             if policy.include_titles or k is not ElementKind.TITLE),
            key=lambda k: k.value)
        fit = None
        element = None
        if allowed and rw > 0 and rh > 0:
            for _ in range(policy.max_candidates):
                kind = allowed[rng.randrange(len(allowed))]
                element = repo.sample(rng, kind)
                fit = fit_element(element, rw, rh, policy)
                if fit is not None:
                    break
        if fit is None or element is None:
            if policy.unfillable == "skip":
                continue
            raise ComposeError(
                f"region {region_index} (order {region.order_index}, "
                f"kinds {sorted(k.value for k in region.kinds)}): "
                "no eligible element fits")
        j = len(placements)
        bbox = (rx, ry, fit.size[0], fit.size[1])
        placements.append(Placement(
            element_id=element.id,
            block_id=f"{page_id}-b{j}",
            region_index=region_index,
            kind=element.kind,
            language=element.language,
            markup=fit.markup,
            font_k=fit.font_k,
            scale=fit.scale,
            bbox=bbox,
            policy_applied=fit.policy_applied,
        ))
        annotations.append(BlockAnnotation(
            block_id=f"{page_id}-b{j}",
            kind=element.kind,
            bbox=tuple(float(v) for v in bbox),
            order_index=j,
            markup=fit.markup,
        ))
    stream = serialize_ground_truth([Block(a.kind, a.markup) for a in annotations])
    return ComposedPage(
        page_id=page_id,
        template_id=template.id,
        size=policy.page_size,
        placements=tuple(placements),
        ground_truth=GroundTruth(stream, tuple(annotations)),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Dataset records
# ---------------------------------------------------------------------------

def emit_stage1(repo: ElementRepository, count: int, seed: int = 0,
                proportions: Mapping[ElementKind, float] | None = None,
                image_dir: str = "elements") -> list[DatasetRecord]:
    """Element-level records with kind-specific prompts."""
    if count <= 0:
        raise ComposeError(f"stage-1 record count must be positive, got {count}")
    mix = dict(proportions) if proportions else dict(DEFAULT_STAGE1_MIX)
    present = repo.kinds()
    mix = {k: w for k, w in mix.items() if w > 0 and k in present}
    if not mix:
        raise ComposeError(
            "no stage-1 kinds available: repository kinds "
            f"{sorted(k.value for k in present)} do not overlap the mixture")
    kinds = sorted(mix, key=lambda k: k.value)
    weights = [mix[k] for k in kinds]
    records = []
    for i in range(count):
        rng = random.Random(derive_seed("stage1", seed, i))
        kind = rng.choices(kinds, weights)[0]
        element = repo.sample(rng, kind)
        records.append(DatasetRecord(
            stage=1,
            prompt=STAGE1_PROMPTS[kind],
            image=f"{image_dir}/e{i:06d}.png",
            target=serialize_block(Block(element.kind, element.markup)),
            meta={"kind": kind.value, "language": element.language,
                  "element_id": element.id},
        ))
    return records


def emit_stage2(pages: Iterable[ComposedPage], budget: int = 8192,
                image_dir: str = "pages") -> tuple[list[DatasetRecord], dict]:
    """One unified-prompt record per page, enforcing the token budget."""
    records = []
    report = {"total": 0, "emitted": 0, "rejected": 0}
    for page in pages:
        report["total"] += 1
        if token_count(page.ground_truth.stream) > budget:
            report["rejected"] += 1
            continue
        records.append(stage2_record(page, image_dir))
        report["emitted"] += 1
    return records, report


def token_count(stream: str) -> int:
    return len(VOCAB.tokenize(stream))


def stage2_record(page: ComposedPage, image_dir: str = "pages") -> DatasetRecord:
    return DatasetRecord(
        stage=2,
        prompt=STAGE2_PROMPT,
        image=f"{image_dir}/{page.page_id}.png",
        target=page.ground_truth.stream,
        meta={"page_id": page.page_id, "template_id": page.template_id,
              "languages": list(page.languages), "augmented": page.augmented},
    )


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------

@dataclass
class GenerationConfig:
    out_dir: str = "out"
    pages: int = 10
    stage1: int = 0
    seed: int = 0
    page_width: int = 1240
    page_height: int = 1754
    augment_fraction: float = 0.2
    augment_spec: dict | None = None       # None = default_spec()
    workers: int = 1
    channels: int = 1
    write_images: bool = True
    token_budget: int = 8192
    languages: tuple[str, ...] = ("en",)
    empty_region_prob: float = 0.05
    include_titles: bool = True
    unfillable: str = "skip"
    max_candidates: int = 8
    repo_counts: dict = field(default_factory=lambda: dict(DEFAULT_REPO_COUNTS))
    repo_path: str | None = None
    template_dir: str | None = None
    template_min_regions: int = 0
    template_max_regions: int | None = None
    template_required_kinds: tuple[str, ...] = ()
    compress_level: int = 1
    emit_glyph_log: bool = False

    def validate(self) -> None:
        if self.pages < 0 or self.stage1 < 0:
            raise ConfigError("pages and stage1 counts must be >= 0")
        if not 0 <= self.augment_fraction <= 1:
            raise ConfigError(
                f"augment_fraction {self.augment_fraction} outside [0, 1]")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.channels not in (1, 3):
            raise ConfigError("channels must be 1 (grayscale) or 3 (RGB)")
        if self.token_budget <= 0:
            raise ConfigError("token_budget must be positive")
        if self.page_width <= 0 or self.page_height <= 0:
            raise ConfigError("page size must be positive")
        if not self.languages:
            raise ConfigError("languages must be non-empty")
        for kind in self.template_required_kinds:
            ElementKind(kind)
        for kind in self.repo_counts:
            ElementKind(kind)
        self.fill_policy().validate()
        self.augmentation_spec().validate()

    def fill_policy(self) -> FillPolicy:
        return FillPolicy(
            page_size=(self.page_width, self.page_height),
            empty_region_prob=self.empty_region_prob,
            unfillable=self.unfillable,
            max_candidates=self.max_candidates,
            include_titles=self.include_titles,
        )

    def constraints(self) -> SampleConstraints:
        return SampleConstraints(
            min_regions=self.template_min_regions,
            max_regions=self.template_max_regions,
            required_kinds=frozenset(
                ElementKind(k) for k in self.template_required_kinds),
        )

    def augmentation_spec(self) -> AugmentationSpec:
        if self.augment_spec is None:
            return default_spec()
        return AugmentationSpec.from_dict(self.augment_spec)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["languages"] = list(self.languages)
        d["template_required_kinds"] = list(self.template_required_kinds)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "GenerationConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = dict(d)
        for key in ("languages", "template_required_kinds"):
            if key in kwargs and kwargs[key] is not None:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


def build_inputs(config: GenerationConfig) -> tuple[ElementRepository, TemplateStore]:
    if config.repo_path:
        repo = ElementRepository.load(config.repo_path)
    else:
        counts = {ElementKind(k): int(v) for k, v in config.repo_counts.items()}
        repo = ElementRepository.build_procedural(
            counts, languages=config.languages, seed=config.seed)
    if config.template_dir:
        store = TemplateStore.from_dir(config.template_dir)
    else:
        store = builtin_templates()
    return repo, store


def augmented_page_set(config: GenerationConfig) -> frozenset[int]:
    """Indices of pages to augment: round-half-up(fraction * pages) of them,
    chosen once from the master seed so worker scheduling cannot matter."""
    m = int(config.pages * config.augment_fraction + 0.5)
    if m == 0:
        return frozenset()
    rng = random.Random(derive_seed("augment-set", config.seed))
    return frozenset(rng.sample(range(config.pages), m))


# Per-process generation context (set by _worker_init; used by _page_job).
_CTX: dict = {}


def _worker_init(config_dict: dict) -> None:
    config = GenerationConfig.from_dict(config_dict)
    repo, store = build_inputs(config)
    _CTX["config"] = config
    _CTX["repo"] = repo
    _CTX["store"] = store
    _CTX["policy"] = config.fill_policy()
    _CTX["constraints"] = config.constraints()
    _CTX["aug_spec"] = config.augmentation_spec()
    _CTX["aug_set"] = augmented_page_set(config)


def _page_job(index: int) -> dict:
    """Produce one page: files written here, manifest line returned."""
    config: GenerationConfig = _CTX["config"]
    seed_i = derive_seed(config.seed, index)
    page_id = f"p{index:06d}"
    template = sample_template(_CTX["store"], _CTX["constraints"], seed_i)
    page = compose_page(template, _CTX["repo"], _CTX["policy"], seed_i, page_id)
    if token_count(page.ground_truth.stream) > config.token_budget:
        return {"rejected": True, "page_id": page_id}
    out = Path(config.out_dir)
    augmented = index in _CTX["aug_set"]
    sidecar: dict = {
        "page_id": page_id,
        "template_id": page.template_id,
        "seed": seed_i,
        "blocks": page.ground_truth.sidecar(),
    }
    if config.write_images:
        canvas = raster.render_page(page, channels=config.channels)
        if config.emit_glyph_log:
            sidecar["glyph_log"] = [
                {"char": g.char, "bbox": list(g.bbox), "block_id": g.block_id}
                for g in canvas.glyph_log]
        if augmented:
            canvas, record = augment(canvas, _CTX["aug_spec"],
                                     derive_seed("aug", config.seed, index))
            sidecar["augmentation"] = record.to_dict()
            sidecar["remapped_blocks"] = remap_bboxes(sidecar["blocks"], record)
        canvas.to_png(out / "pages" / f"{page_id}.png",
                      compress_level=config.compress_level)
        (out / "pages" / f"{page_id}.json").write_text(
            json.dumps(sidecar, sort_keys=True), "utf-8")
    page = replace(page, augmented=augmented)
    return {"rejected": False, "page_id": page_id,
            "line": stage2_record(page).to_json_line(),
            "augmented": augmented}


def generate_dataset(config: GenerationConfig) -> dict:
    """Run the full pipeline; returns (and writes) the run summary."""
    config.validate()
    started = time.monotonic()
    out = Path(config.out_dir)
    try:
        (out / "pages").mkdir(parents=True, exist_ok=True)
        if config.stage1:
            (out / "elements").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot create output dir {out}: {e}")
    (out / "config.json").write_text(
        json.dumps(config.to_dict(), indent=1, sort_keys=True), "utf-8")

    repo, store = build_inputs(config)
    manifest_path = out / "manifest.jsonl"
    rejected = 0
    augmented = 0
    with manifest_path.open("w", encoding="utf-8") as mf:
        if config.stage1:
            for rec in emit_stage1(repo, config.stage1, config.seed):
                if config.write_images:
                    element = repo.get(rec.meta["element_id"])
                    crop = raster.render_element_crop(
                        element, channels=config.channels)
                    crop.to_png(out / rec.image,
                                compress_level=config.compress_level)
                mf.write(rec.to_json_line() + "\n")
        indices = range(config.pages)
        if config.workers > 1 and config.pages > 1:
            chunk = max(1, min(64, config.pages // (config.workers * 4) or 1))
            with ProcessPoolExecutor(
                    max_workers=config.workers,
                    initializer=_worker_init,
                    initargs=(config.to_dict(),)) as pool:
                results = pool.map(_page_job, indices, chunksize=chunk)
                for res in results:
                    rejected, augmented = _consume(res, mf, rejected, augmented)
        else:
            _worker_init(config.to_dict())
            for i in indices:
                rejected, augmented = _consume(_page_job(i), mf, rejected, augmented)

    summary = {
        "pages": config.pages,
        "emitted": config.pages - rejected,
        "rejected": rejected,
        "augmented": augmented,
        "stage1": config.stage1,
        "manifest": str(manifest_path),
        "repo_hash": repo.content_hash(),
        "template_hash": store.content_hash(),
        "elapsed_s": round(time.monotonic() - started, 3),
    }
    (out / "summary.json").write_text(
        json.dumps(summary, indent=1, sort_keys=True), "utf-8")
    return summary


def _consume(res: dict, mf, rejected: int, augmented: int) -> tuple[int, int]:
    if res["rejected"]:
        return rejected + 1, augmented
    mf.write(res["line"] + "\n")
    return rejected, augmented + (1 if res.get("augmented") else 0)
