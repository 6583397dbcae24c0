"""Layout template library: validation, composition, sampling, storage.

A template is a page skeleton: typed regions in fractional page coordinates
plus a total reading order.  The library ships a few hundred authored
patterns and can compose pairs of them into new ones, so arbitrary counts
are reachable without mining real documents.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .model import ElementKind
from .seeding import derive_seed

MIN_REGION_SIZE = 0.02
MAX_REGION_IOU = 0.01
COMPOSE_GUTTER = 0.02
A4_ASPECT = round(1240 / 1754, 4)

_EPS = 1e-9


class TemplateError(ValueError):
    """Template violates its invariants or a composition constraint."""


@dataclass(frozen=True)
class Region:
    bbox: tuple[float, float, float, float]  # x, y, w, h as page fractions
    kinds: frozenset[ElementKind]
    order_index: int


@dataclass(frozen=True)
class LayoutTemplate:
    id: str
    aspect: float  # page width / height
    regions: tuple[Region, ...]
    columns: int = 1  # column-band hint (1..3) for reading-order checks
    provenance: str = "authored"

    def region_order(self) -> list[int]:
        """Region indices sorted by reading order."""
        return sorted(range(len(self.regions)),
                      key=lambda i: self.regions[i].order_index)


def _iou(a: tuple[float, float, float, float],
         b: tuple[float, float, float, float]) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def column_band(region: Region, columns: int) -> int:
    cx = region.bbox[0] + region.bbox[2] / 2
    return min(columns - 1, max(0, int(cx * columns)))


def validate_template(t: LayoutTemplate) -> list[str]:
    """Return every violated invariant (with region indices); [] iff valid."""
    problems: list[str] = []
    if t.aspect <= 0:
        problems.append(f"aspect {t.aspect} must be positive")
    if not 1 <= t.columns <= 3:
        problems.append(f"columns hint {t.columns} outside 1..3")
    for i, r in enumerate(t.regions):
        x, y, w, h = r.bbox
        if x < -_EPS or y < -_EPS or x + w > 1 + _EPS or y + h > 1 + _EPS:
            problems.append(f"region {i}: bbox {r.bbox} outside the unit page")
        if w < MIN_REGION_SIZE - _EPS or h < MIN_REGION_SIZE - _EPS:
            problems.append(
                f"region {i}: size {w:.4f}x{h:.4f} below minimum {MIN_REGION_SIZE}")
        if not r.kinds:
            problems.append(f"region {i}: allowed kinds empty")
    for i in range(len(t.regions)):
        for j in range(i + 1, len(t.regions)):
            iou = _iou(t.regions[i].bbox, t.regions[j].bbox)
            if iou > MAX_REGION_IOU + _EPS:
                problems.append(
                    f"regions {i} and {j}: overlap IoU {iou:.4f} > {MAX_REGION_IOU}")
    orders = [r.order_index for r in t.regions]
    if sorted(orders) != list(range(len(orders))):
        dupes = sorted({o for o in orders if orders.count(o) > 1})
        missing = sorted(set(range(len(orders))) - set(orders))
        problems.append(
            f"order indices {orders} are not a permutation of 0..{len(orders) - 1}"
            + (f" (duplicated: {dupes})" if dupes else "")
            + (f" (missing: {missing})" if missing else ""))
        return problems  # band check needs a well-formed order
    by_band: dict[int, list[Region]] = {}
    for r in t.regions:
        by_band.setdefault(column_band(r, t.columns), []).append(r)
    for band, regions in sorted(by_band.items()):
        regions.sort(key=lambda r: r.order_index)
        for a, b in zip(regions, regions[1:]):
            if b.bbox[1] < a.bbox[1] - _EPS:
                problems.append(
                    f"column band {band}: order {a.order_index} (top {a.bbox[1]:.3f}) "
                    f"precedes order {b.order_index} (top {b.bbox[1]:.3f}) "
                    "but sits lower on the page")
    return problems


# ---------------------------------------------------------------------------
# Composition
# ---------------------------------------------------------------------------

def _squeeze(regions: Sequence[Region], axis: int, offset: float,
             factor: float, order_shift: int) -> list[Region]:
    out = []
    for r in regions:
        x, y, w, h = r.bbox
        if axis == 0:
            bbox = (offset + x * factor, y, w * factor, h)
        else:
            bbox = (x, offset + y * factor, w, h * factor)
        out.append(Region(bbox, r.kinds, r.order_index + order_shift))
    return out


def compose_partial_templates(a: LayoutTemplate, b: LayoutTemplate,
                              mode: str, seed: int = 0) -> LayoutTemplate:
    """Join two templates into one page: a fills the first band (top or
    left), b the second; a's reading order precedes b's."""
    if mode not in ("top-bottom", "left-right"):
        raise TemplateError(f"unknown compose mode {mode!r}")
    for name, t in (("a", a), ("b", b)):
        problems = validate_template(t)
        if problems:
            raise TemplateError(f"input {name} ({t.id}) invalid: {problems[0]}")
    factor = 0.5 - COMPOSE_GUTTER / 2
    offset = 0.5 + COMPOSE_GUTTER / 2
    axis = 1 if mode == "top-bottom" else 0
    regions = (_squeeze(a.regions, axis, 0.0, factor, 0)
               + _squeeze(b.regions, axis, offset, factor, len(a.regions)))
    for i, r in enumerate(regions):
        if r.bbox[2] < MIN_REGION_SIZE - _EPS or r.bbox[3] < MIN_REGION_SIZE - _EPS:
            raise TemplateError(
                f"composed region {i} shrinks to {r.bbox[2]:.4f}x{r.bbox[3]:.4f}, "
                f"below minimum {MIN_REGION_SIZE}")
    if mode == "left-right":
        hints = [min(3, a.columns + b.columns), 2, 3, 1]
    else:
        hints = [max(a.columns, b.columns), a.columns, b.columns, 1, 2, 3]
    composed_id = f"composed-{derive_seed(a.id, b.id, mode, seed):016x}"
    last_problems: list[str] = ["no column hint tried"]
    for hint in dict.fromkeys(hints):
        t = LayoutTemplate(composed_id, a.aspect, tuple(regions),
                           columns=hint, provenance="composed")
        last_problems = validate_template(t)
        if not last_problems:
            return t
    raise TemplateError(
        f"composition of {a.id} + {b.id} ({mode}) is invalid under every "
        f"column hint: {last_problems[0]}")


# ---------------------------------------------------------------------------
# Store and sampling
# ---------------------------------------------------------------------------

def template_to_dict(t: LayoutTemplate) -> dict:
    return {
        "id": t.id,
        "aspect": t.aspect,
        "regions": [
            {"bbox": list(r.bbox),
             "kinds": sorted(k.value for k in r.kinds),
             "order": r.order_index}
            for r in t.regions
        ],
        "columns": t.columns,
        "provenance": t.provenance,
    }


def template_from_dict(d: dict) -> LayoutTemplate:
    regions = tuple(
        Region(tuple(float(v) for v in r["bbox"]),
               frozenset(ElementKind(k) for k in r["kinds"]),
               int(r["order"]))
        for r in d["regions"]
    )
    columns = d.get("columns")
    if columns is None:
        # infer the smallest hint under which the order is monotone
        for hint in (1, 2, 3):
            t = LayoutTemplate(d["id"], float(d["aspect"]), regions, hint,
                               d.get("provenance", "authored"))
            if not validate_template(t):
                return t
        columns = 1
    return LayoutTemplate(d["id"], float(d["aspect"]), regions, int(columns),
                          d.get("provenance", "authored"))


class TemplateStore:
    """Id-keyed template collection; every insert is validated."""

    def __init__(self, templates: Iterable[LayoutTemplate] = ()) -> None:
        self._by_id: dict[str, LayoutTemplate] = {}
        self._hash: str | None = None
        for t in templates:
            self.insert(t)

    def insert(self, t: LayoutTemplate) -> None:
        problems = validate_template(t)
        if problems:
            raise TemplateError(f"template {t.id} invalid: {problems[0]}")
        if t.id in self._by_id:
            raise TemplateError(f"duplicate template id {t.id}")
        self._by_id[t.id] = t
        self._hash = None

    def __len__(self) -> int:
        return len(self._by_id)

    def __iter__(self):
        return iter(self.templates)

    @property
    def templates(self) -> list[LayoutTemplate]:
        return [self._by_id[i] for i in sorted(self._by_id)]

    def get(self, template_id: str) -> LayoutTemplate | None:
        return self._by_id.get(template_id)

    def content_hash(self) -> str:
        # cached: sample_template hashes the store on every draw
        if self._hash is None:
            payload = json.dumps([template_to_dict(t) for t in self.templates],
                                 sort_keys=True)
            self._hash = hashlib.sha256(payload.encode("utf-8")).hexdigest()
        return self._hash

    @classmethod
    def from_dir(cls, path) -> "TemplateStore":
        store = cls()
        p = Path(path)
        files = sorted(p.rglob("*.json"))
        if not files:
            raise TemplateError(f"no template JSON files under {p}")
        for f in files:
            payload = json.loads(f.read_text("utf-8"))
            entries = payload if isinstance(payload, list) else [payload]
            for d in entries:
                store.insert(template_from_dict(d))
        return store

    def save_dir(self, path) -> None:
        p = Path(path)
        p.mkdir(parents=True, exist_ok=True)
        for t in self.templates:
            (p / f"{t.id}.json").write_text(
                json.dumps(template_to_dict(t), indent=1), "utf-8")


@dataclass(frozen=True)
class SampleConstraints:
    min_regions: int = 0
    max_regions: int | None = None
    required_kinds: frozenset[ElementKind] = frozenset()

    def key(self) -> str:
        return (f"min={self.min_regions},max={self.max_regions},"
                f"kinds={sorted(k.value for k in self.required_kinds)}")


def sample_template(store: TemplateStore,
                    constraints: SampleConstraints | None = None,
                    seed: int = 0) -> LayoutTemplate:
    """Uniform pick among templates satisfying the constraints.

    Deterministic for (store content hash, constraints, seed), independent
    of insertion order.
    """
    import random

    if len(store) == 0:
        raise TemplateError("template store is empty")
    c = constraints or SampleConstraints()
    eliminated = {"min_regions": 0, "max_regions": 0, "required_kinds": 0}
    matches = []
    for t in store.templates:
        n = len(t.regions)
        if n < c.min_regions:
            eliminated["min_regions"] += 1
            continue
        if c.max_regions is not None and n > c.max_regions:
            eliminated["max_regions"] += 1
            continue
        allowed = frozenset().union(*(r.kinds for r in t.regions)) if n else frozenset()
        if not c.required_kinds <= allowed:
            eliminated["required_kinds"] += 1
            continue
        matches.append(t)
    if not matches:
        detail = ", ".join(f"{k} eliminated {v}" for k, v in eliminated.items() if v)
        raise TemplateError(
            f"no template satisfies constraints ({c.key()}); {detail or 'library empty'}")
    rng = random.Random(derive_seed(store.content_hash(), c.key(), seed))
    return matches[rng.randrange(len(matches))]


# ---------------------------------------------------------------------------
# Built-in authored library
# ---------------------------------------------------------------------------

_P = ElementKind.PARAGRAPH
_T = ElementKind.TABLE
_F = ElementKind.FORMULA
_G = ElementKind.FIGURE
_H = ElementKind.TITLE

_MARGIN = 0.05
_GAP = 0.02


def _rows(x: float, w: float, y0: float, y1: float, n: int) -> list[tuple]:
    h = (y1 - y0 - (n - 1) * _GAP) / n
    return [(x, y0 + i * (h + _GAP), w, h) for i in range(n)]


def _stack_template(tid: str, cycle: Sequence[frozenset], n: int,
                    title: bool = False) -> LayoutTemplate:
    regions = []
    order = 0
    y0 = _MARGIN
    if title:
        regions.append(Region((_MARGIN, y0, 1 - 2 * _MARGIN, 0.06),
                              frozenset({_H}), order))
        order += 1
        y0 += 0.06 + _GAP
    for i, bbox in enumerate(_rows(_MARGIN, 1 - 2 * _MARGIN, y0, 1 - _MARGIN, n)):
        regions.append(Region(bbox, cycle[i % len(cycle)], order))
        order += 1
    return LayoutTemplate(tid, A4_ASPECT, tuple(regions), columns=1)


def _twocol_template(tid: str, cycle: Sequence[frozenset], nl: int, nr: int,
                     title: bool = False) -> LayoutTemplate:
    regions = []
    order = 0
    y0 = _MARGIN
    if title:
        regions.append(Region((_MARGIN, y0, 1 - 2 * _MARGIN, 0.06),
                              frozenset({_H}), order))
        order += 1
        y0 += 0.06 + _GAP
    col_w = (1 - 2 * _MARGIN - _GAP) / 2
    for i, bbox in enumerate(_rows(_MARGIN, col_w, y0, 1 - _MARGIN, nl)):
        regions.append(Region(bbox, cycle[i % len(cycle)], order))
        order += 1
    for i, bbox in enumerate(_rows(_MARGIN + col_w + _GAP, col_w, y0, 1 - _MARGIN, nr)):
        regions.append(Region(bbox, cycle[(nl + i) % len(cycle)], order))
        order += 1
    return LayoutTemplate(tid, A4_ASPECT, tuple(regions), columns=2)


def _threecol_template(tid: str, cycle: Sequence[frozenset], per_col: tuple[int, int, int],
                       title: bool = False) -> LayoutTemplate:
    regions = []
    order = 0
    y0 = _MARGIN
    if title:
        regions.append(Region((_MARGIN, y0, 1 - 2 * _MARGIN, 0.06),
                              frozenset({_H}), order))
        order += 1
        y0 += 0.06 + _GAP
    col_w = (1 - 2 * _MARGIN - 2 * _GAP) / 3
    k = 0
    for ci, n in enumerate(per_col):
        x = _MARGIN + ci * (col_w + _GAP)
        for bbox in _rows(x, col_w, y0, 1 - _MARGIN, n):
            regions.append(Region(bbox, cycle[k % len(cycle)], order))
            order += 1
            k += 1
    return LayoutTemplate(tid, A4_ASPECT, tuple(regions), columns=3)


def builtin_templates() -> TemplateStore:
    """The authored library: a few hundred deterministic page skeletons."""
    store = TemplateStore()
    any_kind = frozenset({_P, _T, _F, _G})

    full_kinds = [frozenset({k}) for k in (_P, _T, _F, _G)] + [
        frozenset({_P, _T}), frozenset({_T, _F}), any_kind]
    for i, kinds in enumerate(full_kinds):
        store.insert(LayoutTemplate(
            f"full-{i}", A4_ASPECT,
            (Region((_MARGIN, _MARGIN, 1 - 2 * _MARGIN, 1 - 2 * _MARGIN), kinds, 0),),
            columns=1))

    cycles = {
        "p": (frozenset({_P}),),
        "t": (frozenset({_T}),),
        "f": (frozenset({_F}),),
        "pt": (frozenset({_P}), frozenset({_T})),
        "pf": (frozenset({_P}), frozenset({_F})),
        "tfp": (frozenset({_T}), frozenset({_F}), frozenset({_P})),
        "pg": (frozenset({_P}), frozenset({_G})),
        "mix": (any_kind,),
    }
    for name, cycle in cycles.items():
        for n in range(2, 9):
            store.insert(_stack_template(f"stack-{name}-{n}", cycle, n))
    for name in ("p", "pt", "pf", "tfp"):
        for n in range(1, 7):
            store.insert(_stack_template(f"titled-{name}-{n}", cycles[name], n,
                                         title=True))

    for name in ("p", "pf", "mix"):
        for nl in range(1, 5):
            for nr in range(1, 5):
                store.insert(_twocol_template(
                    f"twocol-{name}-{nl}x{nr}", cycles[name], nl, nr))
    for name in ("pf", "pt"):
        for nl in range(1, 4):
            for nr in range(1, 4):
                store.insert(_twocol_template(
                    f"titled-twocol-{name}-{nl}x{nr}", cycles[name], nl, nr,
                    title=True))

    for per_col in ((1, 1, 1), (2, 2, 2), (3, 3, 3), (1, 2, 1), (2, 1, 2),
                    (2, 3, 2), (3, 2, 3), (1, 3, 1)):
        tid = "threecol-" + "".join(map(str, per_col))
        store.insert(_threecol_template(tid, cycles["p"], per_col))
        store.insert(_threecol_template("titled-" + tid, cycles["mix"], per_col,
                                        title=True))

    # figure plates: tiles of figure-over-caption pairs
    for m in (1, 2):
        for n in (1, 2, 3):
            regions = []
            order = 0
            col_w = (1 - 2 * _MARGIN - (m - 1) * _GAP) / m
            tile_h = (1 - 2 * _MARGIN - (n - 1) * _GAP) / n
            for ci in range(m):
                x = _MARGIN + ci * (col_w + _GAP)
                for ri in range(n):
                    y = _MARGIN + ri * (tile_h + _GAP)
                    fig_h = tile_h * 0.7 - _GAP / 2
                    cap_h = tile_h * 0.3 - _GAP / 2
                    regions.append(Region((x, y, col_w, fig_h),
                                          frozenset({_G}), order))
                    regions.append(Region((x, y + fig_h + _GAP, col_w, cap_h),
                                          frozenset({_P}), order + 1))
                    order += 2
            store.insert(LayoutTemplate(f"plate-{m}x{n}", A4_ASPECT,
                                        tuple(regions), columns=m))

    # report pages: title, intro paragraph, dominant table, closing notes
    for i, body in enumerate((_T, _F, _G)):
        regions = (
            Region((_MARGIN, _MARGIN, 0.9, 0.06), frozenset({_H}), 0),
            Region((_MARGIN, 0.13, 0.9, 0.15), frozenset({_P}), 1),
            Region((_MARGIN, 0.30, 0.9, 0.45), frozenset({body}), 2),
            Region((_MARGIN, 0.77, 0.9, 0.18), frozenset({_P}), 3),
        )
        store.insert(LayoutTemplate(f"report-{i}", A4_ASPECT, regions, columns=1))

    # sidebar layouts: tall figure left, stacked text right
    for n in (2, 3, 4):
        regions = [Region((_MARGIN, _MARGIN, 0.38, 0.9), frozenset({_G, _T}), 0)]
        for j, bbox in enumerate(_rows(0.47, 0.48, _MARGIN, 1 - _MARGIN, n)):
            regions.append(Region(bbox, frozenset({_P, _F}), j + 1))
        store.insert(LayoutTemplate(f"sidebar-{n}", A4_ASPECT, tuple(regions),
                                    columns=2))

    # landscape slides: wide aspect, banner title plus side-by-side panels
    wide = round(1754 / 1240, 4)
    panel_kinds = (frozenset({_T}), frozenset({_G}), frozenset({_P}),
                   frozenset({_F}), any_kind)
    for i, left in enumerate(panel_kinds):
        for j, right in enumerate(panel_kinds):
            regions = (
                Region((_MARGIN, _MARGIN, 1 - 2 * _MARGIN, 0.1),
                       frozenset({_H}), 0),
                Region((_MARGIN, 0.2, 0.43, 0.72), left, 1),
                Region((0.52, 0.2, 0.43, 0.72), right, 2),
            )
            store.insert(LayoutTemplate(f"slide-{i}{j}", wide, regions,
                                        columns=2))

    return store
