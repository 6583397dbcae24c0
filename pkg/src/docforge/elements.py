"""Element repository: procedural generators, corpus ingestion, mutation.

Elements are the atomic units pages are composed from: tables, formulas,
paragraphs, figures, and titles.  Each element is a pure function of
(kind, language, seed), carries a stable content hash as its id, and an
intrinsic size in layout units (pixels at font factor 1).
"""

from __future__ import annotations

import hashlib
import json
import random
from collections import Counter
from dataclasses import dataclass, field
from html.parser import HTMLParser
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from . import raster
from .model import (
    Block,
    ElementKind,
    FigureMarkup,
    FormulaMarkup,
    Markup,
    ParagraphMarkup,
    TableCell,
    TableMarkup,
    TableRow,
    TitleMarkup,
    expand_table_grid,
    kind_of_markup,
    parse_ground_truth,
    serialize_block,
    validate_markup,
)
from .seeding import derive_seed

SUPPORTED_LANGUAGES = ("de", "en", "es", "fr", "it", "ja", "pt", "zh")

PROVENANCES = ("procedural", "ingested", "mutated")

MAX_TABLE_ROWS = 12
MAX_TABLE_COLS = 8
MAX_FORMULA_DEPTH = 4


class ElementError(ValueError):
    """Element construction or mutation violated a contract."""


def _load_wordpools() -> dict[str, list[str]]:
    data = resources.files("docforge").joinpath("data/wordpools.json").read_text("utf-8")
    return json.loads(data)


_WORDPOOLS = _load_wordpools()


def word_pool(language: str) -> list[str]:
    try:
        return _WORDPOOLS[language]
    except KeyError:
        raise ElementError(
            f"unsupported language {language!r}; supported: "
            + ", ".join(SUPPORTED_LANGUAGES)
        )


# ---------------------------------------------------------------------------
# Element
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Element:
    id: str
    kind: ElementKind
    markup: Markup
    intrinsic_size: tuple[int, int]  # (w, h) in layout units (px at factor 1)
    language: str
    provenance: str
    meta: dict = field(default_factory=dict, compare=False)


def element_id(kind: ElementKind, language: str, markup: Markup,
               intrinsic_size: tuple[int, int]) -> str:
    # figures serialize identically, so their sampled size keeps ids distinct
    payload = "|".join((
        kind.value, language,
        f"{intrinsic_size[0]}x{intrinsic_size[1]}",
        serialize_block(Block(kind, markup)),
    ))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def intrinsic_size_of(markup: Markup,
                      figure_size: tuple[int, int] | None = None) -> tuple[int, int]:
    if isinstance(markup, FigureMarkup):
        return figure_size if figure_size else (60, 40)
    lay = raster.layout_markup(markup, 1, max_width=10 ** 9)
    return (max(1, lay.width), max(1, lay.height))


def make_element(kind: ElementKind, markup: Markup, language: str,
                 provenance: str, meta: dict | None = None,
                 figure_size: tuple[int, int] | None = None) -> Element:
    if kind_of_markup(markup) is not kind:
        raise ElementError(f"markup type does not match kind {kind.value}")
    problems = validate_markup(markup)
    if problems:
        raise ElementError(f"invalid {kind.value} markup: {problems[0]}")
    size = intrinsic_size_of(markup, figure_size)
    return Element(
        id=element_id(kind, language, markup, size),
        kind=kind,
        markup=markup,
        intrinsic_size=size,
        language=language,
        provenance=provenance,
        meta=meta or {},
    )


# ---------------------------------------------------------------------------
# Procedural generators
# ---------------------------------------------------------------------------

def _gen_words(rng: random.Random, pool: Sequence[str], n: int) -> list[str]:
    return [pool[rng.randrange(len(pool))] for _ in range(n)]


def _gen_number(rng: random.Random) -> str:
    if rng.random() < 0.3:
        return f"{rng.uniform(0, 1000):.{rng.randint(1, 2)}f}"
    return str(rng.randint(0, 99999))


def _gen_table(rng: random.Random, language: str) -> TableMarkup:
    pool = word_pool(language)
    n_rows = rng.randint(1, MAX_TABLE_ROWS)
    n_cols = rng.randint(1, MAX_TABLE_COLS)
    grid = [[False] * n_cols for _ in range(n_rows)]
    rows: list[list[TableCell]] = [[] for _ in range(n_rows)]
    header = n_rows >= 2 and rng.random() < 0.5
    for r in range(n_rows):
        while True:
            try:
                c = grid[r].index(False)
            except ValueError:
                break
            free_run = 0
            while c + free_run < n_cols and not grid[r][c + free_run]:
                free_run += 1
            cs = rs = 1
            if free_run > 1 and rng.random() < 0.12:
                cs = rng.randint(2, min(3, free_run))
            max_rs = 1
            while (r + max_rs < n_rows
                   and all(not grid[r + max_rs][cc] for cc in range(c, c + cs))
                   and max_rs < 3):
                max_rs += 1
            if max_rs > 1 and rng.random() < 0.08:
                rs = rng.randint(2, max_rs)
            for rr in range(r, r + rs):
                for cc in range(c, c + cs):
                    grid[rr][cc] = True
            if header and r == 0:
                text = " ".join(_gen_words(rng, pool, rng.randint(1, 2))).upper()
            elif rng.random() < 0.35:
                text = _gen_number(rng)
            else:
                text = " ".join(_gen_words(rng, pool, rng.randint(1, 3)))
            rows[r].append(TableCell(text, rowspan=rs, colspan=cs))
    return TableMarkup(tuple(TableRow(tuple(cells)) for cells in rows))


_FORMULA_VARS = tuple("abcdefghkmnpqrstuvwxyz") + (
    "\\alpha", "\\beta", "\\gamma", "\\theta", "\\lambda", "\\mu", "\\pi",
    "\\sigma", "\\phi", "\\omega",
)
_FORMULA_OPS = ("+", "-", "=", "\\cdot", "\\le", "\\ge", "\\ne", "\\to")
_FORMULA_HEADS = ("\\sum", "\\int", "\\prod", "\\max", "\\min", "\\log", "\\exp")


def _gen_formula_item(rng: random.Random, depth: int) -> list[str]:
    roll = rng.random()
    if depth < MAX_FORMULA_DEPTH and roll < 0.18:
        num = _gen_formula_seq(rng, depth + 1, rng.randint(1, 2))
        den = _gen_formula_seq(rng, depth + 1, rng.randint(1, 2))
        return ["\\frac", "{", *num, "}", "{", *den, "}"]
    base: list[str]
    if roll < 0.30:
        base = [rng.choice(_FORMULA_HEADS)]
    elif roll < 0.45:
        base = [str(rng.randint(0, 99))]
    else:
        base = [rng.choice(_FORMULA_VARS)]
    if depth < MAX_FORMULA_DEPTH and rng.random() < 0.30:
        script = rng.choice(("^", "_"))
        arg = _gen_formula_seq(rng, depth + 1, 1)
        base += [script, "{", *arg, "}"]
        if rng.random() < 0.2:
            other = "_" if script == "^" else "^"
            arg2 = _gen_formula_seq(rng, depth + 1, 1)
            base += [other, "{", *arg2, "}"]
    return base


def _gen_formula_seq(rng: random.Random, depth: int, n_terms: int) -> list[str]:
    out: list[str] = []
    for i in range(n_terms):
        if i:
            out.append(rng.choice(_FORMULA_OPS))
        out += _gen_formula_item(rng, depth)
    return out


def _gen_formula(rng: random.Random, language: str) -> FormulaMarkup:
    tokens = _gen_formula_seq(rng, 1, rng.randint(2, 4))
    return FormulaMarkup(tuple(tokens))


def _gen_paragraph(rng: random.Random, language: str) -> ParagraphMarkup:
    pool = word_pool(language)
    lines = []
    for _ in range(rng.randint(1, 5)):
        words = _gen_words(rng, pool, rng.randint(4, 12))
        words[0] = words[0].capitalize()
        lines.append(" ".join(words) + ".")
    return ParagraphMarkup(tuple(lines), language=language)


def _gen_title(rng: random.Random, language: str) -> TitleMarkup:
    pool = word_pool(language)
    words = _gen_words(rng, pool, rng.randint(2, 6))
    text = " ".join(w.capitalize() for w in words)
    if rng.random() < 0.3:
        text = text.upper()
    return TitleMarkup(text)


_FIGURE_ASPECTS = ((4, 3), (3, 4), (16, 9), (1, 1), (2, 1), (3, 2))


def generate_element(kind: ElementKind, language: str = "en",
                     seed: int = 0) -> Element:
    """Deterministic procedural element for (kind, language, seed)."""
    pool = word_pool(language)  # language gate applies to every kind
    del pool
    rng = random.Random(derive_seed("element", kind.value, language, seed))
    figure_size = None
    if kind is ElementKind.TABLE:
        markup: Markup = _gen_table(rng, language)
    elif kind is ElementKind.FORMULA:
        markup = _gen_formula(rng, language)
    elif kind is ElementKind.PARAGRAPH:
        markup = _gen_paragraph(rng, language)
    elif kind is ElementKind.TITLE:
        markup = _gen_title(rng, language)
    elif kind is ElementKind.FIGURE:
        aw, ah = rng.choice(_FIGURE_ASPECTS)
        base = rng.randint(24, 60)
        markup = FigureMarkup()
        figure_size = (aw * base, ah * base)
    else:
        raise ElementError(f"unsupported kind {kind}")
    return make_element(kind, markup, language, "procedural",
                        figure_size=figure_size)


# ---------------------------------------------------------------------------
# Corpus ingestion
# ---------------------------------------------------------------------------

INGEST_FORMATS = ("html-table-jsonl", "formula-jsonl", "text-jsonl")


@dataclass
class IngestReport:
    total: int = 0
    accepted: int = 0
    skipped: Counter = field(default_factory=Counter)

    def skip(self, reason: str) -> None:
        self.skipped[reason] += 1

    def as_dict(self) -> dict:
        return {"total": self.total, "accepted": self.accepted,
                "skipped": dict(self.skipped)}


class _TableHTMLParser(HTMLParser):
    """Extracts rows of (text, rowspan, colspan) from one <table>."""

    def __init__(self) -> None:
        super().__init__(convert_charrefs=True)
        self.rows: list[list[tuple[str, int, int]]] = []
        self.cell_text: list[str] | None = None
        self.cell_spans = (1, 1)
        self.depth = 0
        self.nested = False

    def handle_starttag(self, tag, attrs):
        if tag == "table":
            self.depth += 1
            if self.depth > 1:
                self.nested = True
            return
        if self.depth != 1:
            return
        if tag == "tr":
            self._flush_cell()
            self.rows.append([])
        elif tag in ("td", "th"):
            self._flush_cell()
            a = dict(attrs)
            self.cell_text = []
            self.cell_spans = (_span_attr(a.get("rowspan")),
                               _span_attr(a.get("colspan")))

    def handle_endtag(self, tag):
        if tag == "table":
            self._flush_cell()
            self.depth -= 1
        elif tag in ("td", "th") and self.depth == 1:
            self._flush_cell()

    def handle_data(self, data):
        if self.cell_text is not None:
            self.cell_text.append(data)

    def _flush_cell(self):
        if self.cell_text is None:
            return
        text = " ".join("".join(self.cell_text).split())
        rs, cs = self.cell_spans
        if not self.rows:
            self.rows.append([])
        self.rows[-1].append((text, rs, cs))
        self.cell_text = None


def _span_attr(value) -> int:
    try:
        return max(1, int(value))
    except (TypeError, ValueError):
        return 1


def normalize_html_table(html: str) -> TableMarkup:
    """Parse one HTML table and normalize it to a rectangular grid.

    Rowspans that overrun the last row are clamped; short rows are padded
    with empty cells.  Raises :class:`ElementError` when no table structure
    is recoverable.
    """
    p = _TableHTMLParser()
    p.feed(html)
    p.close()
    if p.nested:
        raise ElementError("nested table")
    rows = [r for r in p.rows if r]
    if not rows:
        raise ElementError("no table rows")
    n_rows = len(rows)
    clamped = [
        TableRow(tuple(
            TableCell(text, rowspan=min(rs, n_rows - r), colspan=cs)
            for text, rs, cs in row))
        for r, row in enumerate(rows)
    ]
    markup = TableMarkup(tuple(clamped))
    grid = expand_table_grid(markup)  # may raise MarkupError on overlaps
    width = max(len(g) for g in grid)
    padded = []
    for r, row in enumerate(clamped):
        missing = width - len(grid[r])
        cells = row.cells + tuple(TableCell("") for _ in range(missing))
        padded.append(TableRow(cells))
    return TableMarkup(tuple(padded))


def ingest_elements(path, fmt: str) -> tuple[list[Element], IngestReport]:
    """Load and normalize a JSONL corpus of external elements.

    Invalid records are skipped and counted by reason; more than 50%
    invalid raises (corpus/format mismatch signal).
    """
    if fmt not in INGEST_FORMATS:
        raise ElementError(
            f"unknown corpus format {fmt!r}; expected one of {INGEST_FORMATS}")
    p = Path(path)
    try:
        lines = p.read_text("utf-8").splitlines()
    except OSError as e:
        raise ElementError(f"cannot read corpus {p}: {e}")
    report = IngestReport()
    out: list[Element] = []
    for line in lines:
        if not line.strip():
            continue
        report.total += 1
        try:
            rec = json.loads(line)
        except json.JSONDecodeError:
            report.skip("bad json")
            continue
        content = rec.get("content")
        if not isinstance(content, str) or not content.strip():
            report.skip("missing content")
            continue
        lang = rec.get("lang", "und")
        try:
            if fmt == "html-table-jsonl":
                markup: Markup = normalize_html_table(content)
                kind = ElementKind.TABLE
            elif fmt == "formula-jsonl":
                markup = FormulaMarkup(tuple(content.split()))
                kind = ElementKind.FORMULA
            else:
                lines_ = tuple(l for l in content.split("\n") if l.strip())
                if not lines_:
                    raise ElementError("empty text")
                markup = ParagraphMarkup(lines_, language=lang)
                kind = ElementKind.PARAGRAPH
            element = make_element(kind, markup, lang, "ingested",
                                   meta={"source": str(p)})
        except (ElementError, ValueError) as e:
            report.skip(_skip_reason(e))
            continue
        out.append(element)
        report.accepted += 1
    if report.total and report.accepted * 2 < report.total:
        raise ElementError(
            f"more than half of {p} is invalid ({report.as_dict()}); "
            "wrong format?")
    return out, report


def _skip_reason(e: Exception) -> str:
    msg = str(e)
    return msg.split(":")[0][:60] if msg else type(e).__name__


# ---------------------------------------------------------------------------
# Mutation
# ---------------------------------------------------------------------------

MUTATION_RULES = ("table-row-shuffle", "table-col-merge",
                  "formula-symbol-swap", "hybrid-embed", "paragraph-regroup")

#: Interchangeable symbol classes for formula-symbol-swap; a token is only
#: ever replaced by another member of its own class.
SWAP_CLASSES: tuple[tuple[str, ...], ...] = (
    ("+", "-"),
    ("\\cdot", "/"),
    ("\\le", "\\ge", "=", "\\ne"),
    ("a", "b", "c"),
    ("x", "y", "z"),
    ("m", "n", "k"),
    ("\\alpha", "\\beta", "\\gamma"),
    ("\\sum", "\\prod"),
    ("\\max", "\\min"),
)


@dataclass(frozen=True)
class MutationRule:
    kind: str
    params: Mapping = field(default_factory=dict)
    seed: int = 0


class MutationError(ElementError):
    """Rule is not applicable to the element kind."""


def mutate_element(e: Element, rule: MutationRule) -> Element:
    """Apply a mutation rule; deterministic given (element, rule)."""
    if rule.kind not in MUTATION_RULES:
        raise MutationError(f"unknown mutation rule {rule.kind!r}; "
                            f"expected one of {MUTATION_RULES}")
    rng = random.Random(derive_seed("mutate", e.id, rule.kind, rule.seed))
    fn = _MUTATORS[rule.kind]
    markup = fn(e, rule, rng)
    return make_element(
        e.kind if rule.kind != "hybrid-embed" else kind_of_markup(markup),
        markup, e.language, "mutated",
        meta={"parent": e.id, "rule": rule.kind},
        figure_size=e.intrinsic_size if isinstance(markup, FigureMarkup) else None,
    )


def _require_kind(e: Element, rule: MutationRule, *kinds: ElementKind) -> None:
    if e.kind not in kinds:
        raise MutationError(
            f"rule {rule.kind} does not apply to {e.kind.value} elements")


def _row_bands(markup: TableMarkup) -> list[tuple[int, int]]:
    """Maximal contiguous row groups not crossed by any rowspan."""
    grid = expand_table_grid(markup)
    n = len(grid)
    bands = []
    start = 0
    for r in range(n):
        crossed = r + 1 < n and any(
            grid[r][c] == grid[r + 1][c] for c in range(len(grid[r])))
        if not crossed:
            bands.append((start, r + 1))
            start = r + 1
    return bands


def _mut_row_shuffle(e: Element, rule: MutationRule, rng: random.Random) -> Markup:
    _require_kind(e, rule, ElementKind.TABLE)
    m: TableMarkup = e.markup
    bands = _row_bands(m)
    order = list(range(len(bands)))
    rng.shuffle(order)
    rows: list[TableRow] = []
    for i in order:
        lo, hi = bands[i]
        rows.extend(m.rows[lo:hi])
    return TableMarkup(tuple(rows))


def flatten_table(markup: TableMarkup) -> TableMarkup:
    """Rewrite to a spanless grid; span text stays at its start slot."""
    grid = expand_table_grid(markup)
    flat_cells = [c for row in markup.rows for c in row.cells]
    seen: set[int] = set()
    rows = []
    for grow in grid:
        cells = []
        for idx in grow:
            if idx is not None and idx not in seen:
                seen.add(idx)
                cells.append(TableCell(flat_cells[idx].text))
            else:
                cells.append(TableCell(""))
        rows.append(TableRow(tuple(cells)))
    return TableMarkup(tuple(rows))


def _mut_col_merge(e: Element, rule: MutationRule, rng: random.Random) -> Markup:
    _require_kind(e, rule, ElementKind.TABLE)
    m: TableMarkup = e.markup
    grid = expand_table_grid(m)
    n_cols = max((len(r) for r in grid), default=0)
    if n_cols < 2:
        raise MutationError("table-col-merge needs at least 2 columns")
    c = rule.params.get("column")
    if c is None:
        c = rng.randrange(n_cols - 1)
    if not 0 <= c < n_cols - 1:
        raise MutationError(f"merge column {c} out of range 0..{n_cols - 2}")
    flat = flatten_table(m)
    rows = []
    for row in flat.rows:
        cells = list(row.cells)
        joined = " ".join(t for t in (cells[c].text, cells[c + 1].text) if t)
        cells[c:c + 2] = [TableCell(joined)]
        rows.append(TableRow(tuple(cells)))
    return TableMarkup(tuple(rows))


def _mut_symbol_swap(e: Element, rule: MutationRule, rng: random.Random) -> Markup:
    _require_kind(e, rule, ElementKind.FORMULA)
    m: FormulaMarkup = e.markup
    class_of = {tok: cls for cls in SWAP_CLASSES for tok in cls}
    swappable = [i for i, t in enumerate(m.tokens) if t in class_of]
    tokens = list(m.tokens)
    if swappable:
        n = rng.randint(1, min(3, len(swappable)))
        for i in rng.sample(swappable, n):
            others = [t for t in class_of[tokens[i]] if t != tokens[i]]
            tokens[i] = rng.choice(others)
    return FormulaMarkup(tuple(tokens))


def _mut_hybrid_embed(e: Element, rule: MutationRule, rng: random.Random) -> Markup:
    _require_kind(e, rule, ElementKind.TABLE, ElementKind.PARAGRAPH)
    guest = rule.params.get("guest")
    if isinstance(guest, Element):
        guest_markup = guest.markup
    else:
        guest_markup = guest
    if not isinstance(guest_markup, FormulaMarkup):
        raise MutationError("hybrid-embed needs a formula guest in params['guest']")
    span = "<formula>" + " ".join(guest_markup.tokens) + "</formula>"
    if e.kind is ElementKind.TABLE:
        m: TableMarkup = e.markup
        positions = [(r, c) for r, row in enumerate(m.rows)
                     for c in range(len(row.cells))]
        if not positions:
            raise MutationError("hybrid-embed host table has no cells")
        r, c = positions[rng.randrange(len(positions))]
        rows = []
        for ri, row in enumerate(m.rows):
            cells = list(row.cells)
            if ri == r:
                old = cells[c]
                cells[c] = TableCell(span, old.rowspan, old.colspan)
            rows.append(TableRow(tuple(cells)))
        return TableMarkup(tuple(rows))
    pm: ParagraphMarkup = e.markup
    if not pm.lines:
        raise MutationError("hybrid-embed host paragraph has no lines")
    li = rng.randrange(len(pm.lines))
    words = pm.lines[li].split()
    pos = rng.randint(0, len(words))
    words[pos:pos] = [span]
    lines = list(pm.lines)
    lines[li] = " ".join(words)
    return ParagraphMarkup(tuple(lines), language=pm.language)


def _mut_regroup(e: Element, rule: MutationRule, rng: random.Random) -> Markup:
    _require_kind(e, rule, ElementKind.PARAGRAPH)
    m: ParagraphMarkup = e.markup
    words = [w for line in m.lines for w in line.split()]
    if not words:
        return m
    n_lines = rng.randint(1, min(5, len(words)))
    cuts = sorted(rng.sample(range(1, len(words)), n_lines - 1)) if n_lines > 1 else []
    bounds = [0, *cuts, len(words)]
    lines = tuple(" ".join(words[a:b]) for a, b in zip(bounds, bounds[1:]))
    return ParagraphMarkup(lines, language=m.language)


_MUTATORS = {
    "table-row-shuffle": _mut_row_shuffle,
    "table-col-merge": _mut_col_merge,
    "formula-symbol-swap": _mut_symbol_swap,
    "hybrid-embed": _mut_hybrid_embed,
    "paragraph-regroup": _mut_regroup,
}


# ---------------------------------------------------------------------------
# Repository
# ---------------------------------------------------------------------------

class ElementRepository:
    """Ordered, id-deduplicated element collection with kind/language views."""

    def __init__(self, elements: Iterable[Element] = ()) -> None:
        self._by_id: dict[str, Element] = {}
        self._order: list[str] = []
        for e in elements:
            self.add(e)

    def add(self, e: Element) -> bool:
        if e.id in self._by_id:
            return False
        self._by_id[e.id] = e
        self._order.append(e.id)
        return True

    def __len__(self) -> int:
        return len(self._order)

    def __iter__(self):
        return (self._by_id[i] for i in self._order)

    def get(self, element_id: str) -> Element | None:
        return self._by_id.get(element_id)

    @property
    def elements(self) -> list[Element]:
        return list(self)

    def by_kind(self, kind: ElementKind, language: str | None = None) -> list[Element]:
        return [e for e in self
                if e.kind is kind and (language is None or e.language == language)]

    def kinds(self) -> set[ElementKind]:
        return {e.kind for e in self}

    def sample(self, rng: random.Random, kind: ElementKind,
               language: str | None = None) -> Element:
        pool = self.by_kind(kind, language)
        if not pool:
            where = f" in language {language}" if language else ""
            raise LookupError(f"repository has no {kind.value} elements{where}")
        return pool[rng.randrange(len(pool))]

    @classmethod
    def build_procedural(cls, counts: Mapping[ElementKind, int],
                         languages: Sequence[str] = ("en",),
                         seed: int = 0) -> "ElementRepository":
        """Deterministic repository: each record's seed derives from its own
        (kind, index), so build order/parallelism cannot change results."""
        repo = cls()
        for kind in sorted(counts, key=lambda k: k.value):
            for i in range(counts[kind]):
                lang = languages[i % len(languages)]
                repo.add(generate_element(kind, lang, derive_seed(seed, kind.value, i)))
        return repo

    # -- persistence --------------------------------------------------------

    def to_jsonl(self) -> str:
        lines = []
        for e in self:
            lines.append(json.dumps({
                "id": e.id,
                "kind": e.kind.value,
                "lang": e.language,
                "provenance": e.provenance,
                "intrinsic_size": list(e.intrinsic_size),
                "markup": serialize_block(Block(e.kind, e.markup)),
            }, ensure_ascii=False, sort_keys=True))
        return "\n".join(lines) + ("\n" if lines else "")

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_jsonl().encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        p = Path(path)
        body = self.to_jsonl()
        p.write_text(body, "utf-8")
        index = {
            "content_hash": hashlib.sha256(body.encode("utf-8")).hexdigest(),
            "count": len(self),
            "by_kind": Counter(e.kind.value for e in self),
        }
        p.with_suffix(p.suffix + ".index.json").write_text(
            json.dumps(index, sort_keys=True, indent=1), "utf-8")

    @classmethod
    def load(cls, path, verify: bool = True) -> "ElementRepository":
        p = Path(path)
        body = p.read_text("utf-8")
        index_path = p.with_suffix(p.suffix + ".index.json")
        if verify and index_path.exists():
            index = json.loads(index_path.read_text("utf-8"))
            got = hashlib.sha256(body.encode("utf-8")).hexdigest()
            if got != index.get("content_hash"):
                raise ElementError(
                    f"repository {p} does not match its index hash")
        repo = cls()
        for n, line in enumerate(body.splitlines(), 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            kind = ElementKind(rec["kind"])
            blocks, _ = parse_ground_truth(rec["markup"])
            if kind is ElementKind.FIGURE:
                markup: Markup = FigureMarkup()
            elif len(blocks) == 1 and blocks[0].kind is kind:
                markup = blocks[0].markup
                if isinstance(markup, ParagraphMarkup):
                    markup = ParagraphMarkup(markup.lines, language=rec["lang"])
            else:
                raise ElementError(f"{p}:{n}: markup does not parse as {kind.value}")
            size = tuple(rec["intrinsic_size"])
            repo.add(Element(
                id=rec["id"], kind=kind, markup=markup,
                intrinsic_size=(int(size[0]), int(size[1])),
                language=rec["lang"], provenance=rec["provenance"],
            ))
        return repo
