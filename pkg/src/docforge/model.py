"""Shared domain types and the canonical ground-truth serialization.

Every page produced by the engine is annotated with a single token stream
that interleaves structure tokens (``<doc>``, ``<table>``, ``<tr>``, ...)
with plain content text, plus a JSON sidecar of per-block bounding boxes.
This module owns the markup types, the structure-token vocabulary, the
serializer, and a repair-capable parser that never hard-fails on model
output.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence, Union

VOCAB_VERSION = "1"

#: Tokens that lay out formulas rather than carrying visible text.  They are
#: content (not structure) tokens, but the renderer consumes them as layout
#: directives, so GT/render consistency checks exclude them.
FORMULA_CONTROL_TOKENS = frozenset({"{", "}", "^", "_", "\\frac"})


class ElementKind(str, Enum):
    TABLE = "table"
    FORMULA = "formula"
    PARAGRAPH = "paragraph"
    FIGURE = "figure"
    # Engine plumbing, not one of the four core kinds; emission is gated by
    # the ``include_titles`` generation flag.
    TITLE = "title"


class MarkupError(ValueError):
    """A markup value violates its structural invariants."""


# ---------------------------------------------------------------------------
# Markup types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TableCell:
    """One ``<td>``; spans of 1 are omitted from the serialized tag."""

    text: str = ""
    rowspan: int = 1
    colspan: int = 1


@dataclass(frozen=True)
class TableRow:
    cells: tuple[TableCell, ...] = ()


@dataclass(frozen=True)
class TableMarkup:
    rows: tuple[TableRow, ...] = ()


@dataclass(frozen=True)
class FormulaMarkup:
    """Token sequence over the closed formula grammar."""

    tokens: tuple[str, ...] = ()


@dataclass(frozen=True)
class ParagraphMarkup:
    lines: tuple[str, ...] = ()
    # Informational BCP-47 tag.  The stream does not carry it (the element
    # record does), so it is excluded from equality to keep the round-trip
    # identity exact.
    language: str = field(default="und", compare=False)


@dataclass(frozen=True)
class FigureMarkup:
    """Opaque placeholder; figures carry no text payload."""


@dataclass(frozen=True)
class TitleMarkup:
    text: str = ""


Markup = Union[TableMarkup, FormulaMarkup, ParagraphMarkup, FigureMarkup, TitleMarkup]

_MARKUP_KINDS: dict[type, ElementKind] = {
    TableMarkup: ElementKind.TABLE,
    FormulaMarkup: ElementKind.FORMULA,
    ParagraphMarkup: ElementKind.PARAGRAPH,
    FigureMarkup: ElementKind.FIGURE,
    TitleMarkup: ElementKind.TITLE,
}


def kind_of_markup(markup: Markup) -> ElementKind:
    try:
        return _MARKUP_KINDS[type(markup)]
    except KeyError:
        raise MarkupError(f"unknown markup type {type(markup).__name__}")


@dataclass(frozen=True)
class Block:
    """A (kind, markup) unit as it appears in reading order."""

    kind: ElementKind
    markup: Markup


@dataclass(frozen=True)
class BlockAnnotation:
    """Sidecar entry pairing a block with its page geometry."""

    block_id: str
    kind: ElementKind
    bbox: tuple[float, float, float, float]  # x, y, w, h in page px
    order_index: int
    markup: Markup

    def sidecar_entry(self) -> dict:
        return {
            "block_id": self.block_id,
            "kind": self.kind.value,
            "bbox": list(self.bbox),
            "order_index": self.order_index,
        }


@dataclass(frozen=True)
class GroundTruth:
    stream: str
    blocks: tuple[BlockAnnotation, ...] = ()

    def sidecar(self) -> list[dict]:
        return [b.sidecar_entry() for b in self.blocks]


# ---------------------------------------------------------------------------
# Structure-token vocabulary
# ---------------------------------------------------------------------------

_BASE_TOKENS = (
    "<doc>", "</doc>",
    "<title>", "</title>",
    "<para>", "</para>",
    "<table>", "</table>",
    "<tr>", "</tr>",
    "<td>", "</td>",
    "<formula>", "</formula>",
    "<figure/>",
)

_TD_OPEN_RE = re.compile(r'<td(?: rowspan="(\d+)")?(?: colspan="(\d+)")?>')
_ATTR_TOKEN_RE = re.compile(r'(?:rowspan|colspan)="\d+"')
_TAG_RE = re.compile(
    r'<td(?: rowspan="\d+")?(?: colspan="\d+")?>'
    r"|</?(?:doc|title|para|table|tr|td|formula)>"
    r"|<figure/>"
)
_ANY_TAG_IN_TEXT_RE = _TAG_RE
_INLINE_FORMULA_RE = re.compile(r"<formula>(.*?)</formula>", re.DOTALL)


@dataclass(frozen=True)
class StructTokenVocab:
    """Fixed, versioned set of structure tokens.

    ``<td>`` may carry rowspan/colspan attribute tokens; those attributed
    forms (and bare ``rowspan="n"`` fragments a model might emit) also count
    as structure tokens for loss weighting.
    """

    tokens: frozenset[str] = frozenset(_BASE_TOKENS)
    version: str = VOCAB_VERSION

    def is_structure_token(self, token: str) -> bool:
        if token in self.tokens:
            return True
        if _TD_OPEN_RE.fullmatch(token):
            return True
        return bool(_ATTR_TOKEN_RE.fullmatch(token))

    def tokenize(self, stream: str) -> list[str]:
        """Split a raw stream into structure tokens + whitespace-split words."""
        out: list[str] = []
        pos = 0
        for m in _TAG_RE.finditer(stream):
            out.extend(stream[pos:m.start()].split())
            out.append(m.group(0))
            pos = m.end()
        out.extend(stream[pos:].split())
        return out

    def content_tokens(self, stream: str) -> list[str]:
        return [t for t in self.tokenize(stream) if not self.is_structure_token(t)]


VOCAB = StructTokenVocab()


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def expand_table_grid(markup: TableMarkup) -> list[list[int | None]]:
    """Expand rows into an occupancy grid of cell indices (row-major).

    Cells are placed left-to-right, skipping slots occupied by earlier spans.
    Raises :class:`MarkupError` on spans that escape the grid.
    """
    n_rows = len(markup.rows)
    grid: list[list[int | None]] = [[] for _ in range(n_rows)]
    cell_index = 0
    for r, row in enumerate(markup.rows):
        for cell in row.cells:
            if cell.rowspan < 1 or cell.colspan < 1:
                raise MarkupError(f"cell {cell_index}: spans must be >= 1")
            if r + cell.rowspan > n_rows:
                raise MarkupError(
                    f"cell {cell_index}: rowspan {cell.rowspan} extends past last row"
                )
            col = _first_free(grid[r])
            needed = col + cell.colspan
            for rr in range(r, r + cell.rowspan):
                while len(grid[rr]) < needed:
                    grid[rr].append(None)
                for cc in range(col, needed):
                    if grid[rr][cc] is not None:
                        raise MarkupError(
                            f"cell {cell_index}: overlaps cell {grid[rr][cc]} "
                            f"at grid ({rr},{cc})"
                        )
                    grid[rr][cc] = cell_index
            cell_index += 1
    return grid


def _first_free(row: list[int | None]) -> int:
    for i, v in enumerate(row):
        if v is None:
            return i
    return len(row)


def _validate_text(text: str, where: str, allow_inline_formula: bool) -> list[str]:
    problems: list[str] = []
    rest = text
    if allow_inline_formula:
        spans = _INLINE_FORMULA_RE.findall(text)
        for inner in spans:
            problems += [f"{where}: {p}" for p in _validate_formula_tokens(inner.split())]
        rest = _INLINE_FORMULA_RE.sub("", text)
    if _ANY_TAG_IN_TEXT_RE.search(rest):
        problems.append(f"{where}: content contains structure tags")
    return problems


def _validate_formula_tokens(tokens: Sequence[str]) -> list[str]:
    problems: list[str] = []
    depth = 0
    for i, tok in enumerate(tokens):
        if not tok or any(c.isspace() for c in tok):
            problems.append(f"token {i} is empty or contains whitespace")
        if tok == "{":
            depth += 1
        elif tok == "}":
            depth -= 1
            if depth < 0:
                problems.append(f"unbalanced '}}' at token {i}")
                depth = 0
    if depth != 0:
        problems.append(f"{depth} unclosed '{{'")
    if problems:
        return problems

    # arity: \frac takes two groups; ^/_ take a following group or atom
    def parse_group(i: int) -> int | None:
        if i >= len(tokens):
            return None
        if tokens[i] == "{":
            d = 1
            i += 1
            while i < len(tokens) and d:
                if tokens[i] == "{":
                    d += 1
                elif tokens[i] == "}":
                    d -= 1
                i += 1
            return i if d == 0 else None
        if tokens[i] in ("}", "^", "_", "\\frac"):
            return None
        return i + 1

    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if tok == "\\frac":
            j = parse_group(i + 1)
            j = parse_group(j) if j is not None else None
            if j is None:
                problems.append(f"\\frac at token {i} is missing its two groups")
                break
            i += 1
        elif tok in ("^", "_"):
            if i == 0:
                problems.append(f"'{tok}' at token 0 has no base")
            if parse_group(i + 1) is None:
                problems.append(f"'{tok}' at token {i} has no argument")
                break
            i += 1
        else:
            i += 1
    return problems


def validate_markup(markup: Markup) -> list[str]:
    """Return a list of invariant violations; empty means valid."""
    problems: list[str] = []
    if isinstance(markup, TableMarkup):
        try:
            grid = expand_table_grid(markup)
        except MarkupError as e:
            return [str(e)]
        widths = {len(row) for row in grid}
        if len(widths) > 1:
            problems.append(f"ragged grid: row widths {sorted(widths)}")
        for r, row in enumerate(markup.rows):
            for c, cell in enumerate(row.cells):
                problems += _validate_text(
                    cell.text, f"cell ({r},{c})", allow_inline_formula=True
                )
    elif isinstance(markup, FormulaMarkup):
        problems += _validate_formula_tokens(markup.tokens)
    elif isinstance(markup, ParagraphMarkup):
        for i, line in enumerate(markup.lines):
            if "\n" in line:
                problems.append(f"line {i} contains a newline")
            problems += _validate_text(line, f"line {i}", allow_inline_formula=True)
    elif isinstance(markup, TitleMarkup):
        if "\n" in markup.text:
            problems.append("title contains a newline")
        problems += _validate_text(markup.text, "title", allow_inline_formula=False)
    elif isinstance(markup, FigureMarkup):
        pass
    else:
        problems.append(f"unknown markup type {type(markup).__name__}")
    return problems


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def serialize_cell(cell: TableCell) -> str:
    attrs = ""
    if cell.rowspan > 1:
        attrs += f' rowspan="{cell.rowspan}"'
    if cell.colspan > 1:
        attrs += f' colspan="{cell.colspan}"'
    return f"<td{attrs}>{cell.text}</td>"


def serialize_block(block: Block) -> str:
    m = block.markup
    if isinstance(m, TitleMarkup):
        return f"<title>{m.text}</title>"
    if isinstance(m, ParagraphMarkup):
        return "<para>" + "\n".join(m.lines) + "</para>"
    if isinstance(m, FormulaMarkup):
        return "<formula>" + " ".join(m.tokens) + "</formula>"
    if isinstance(m, FigureMarkup):
        return "<figure/>"
    if isinstance(m, TableMarkup):
        rows = "".join(
            "<tr>" + "".join(serialize_cell(c) for c in row.cells) + "</tr>"
            for row in m.rows
        )
        return f"<table>{rows}</table>"
    raise MarkupError(f"cannot serialize markup type {type(m).__name__}")


def serialize_ground_truth(blocks: Sequence[Block]) -> str:
    """Serialize blocks (already in reading order) into the canonical stream."""
    parts = ["<doc>"]
    for i, block in enumerate(blocks):
        problems = validate_markup(block.markup)
        if problems:
            raise MarkupError(f"block {i} ({block.kind.value}): {problems[0]}")
        if kind_of_markup(block.markup) is not block.kind:
            raise MarkupError(f"block {i}: markup does not match kind {block.kind.value}")
        parts.append(serialize_block(block))
    parts.append("</doc>")
    return "".join(parts)


# ---------------------------------------------------------------------------
# Repair-capable parsing
# ---------------------------------------------------------------------------

_BLOCK_OPENS = {"<title>": ElementKind.TITLE, "<para>": ElementKind.PARAGRAPH,
                "<table>": ElementKind.TABLE, "<formula>": ElementKind.FORMULA}


class _StreamParser:
    """Best-effort parser: auto-closes open tags at block boundaries and at
    end of stream so that imperfect model output remains scoreable."""

    def __init__(self) -> None:
        self.blocks: list[Block] = []
        self.warnings: list[str] = []
        self.block_kind: ElementKind | None = None
        self.text_parts: list[str] = []
        self.inline_formula = False
        self.rows: list[TableRow] = []
        self.cells: list[TableCell] = []
        self.cell: tuple[int, int] | None = None  # (rowspan, colspan) while open
        self.in_row = False
        self.seen_doc = False

    def warn(self, msg: str) -> None:
        self.warnings.append(msg)

    # -- block lifecycle ---------------------------------------------------

    def _close_cell(self) -> None:
        if self.cell is not None:
            rs, cs = self.cell
            self.cells.append(TableCell("".join(self.text_parts), rs, cs))
            self.text_parts = []
            self.cell = None
            self.inline_formula = False

    def _close_row(self) -> None:
        self._close_cell()
        if self.in_row:
            self.rows.append(TableRow(tuple(self.cells)))
            self.cells = []
            self.in_row = False

    def close_block(self, auto: bool = False) -> None:
        kind = self.block_kind
        if kind is None:
            return
        if auto:
            self.warn(f"unclosed tags: auto-closed open {kind.value} block")
        if kind is ElementKind.TABLE:
            self._close_row()
            self.blocks.append(Block(kind, TableMarkup(tuple(self.rows))))
            self.rows = []
        elif kind is ElementKind.PARAGRAPH:
            text = "".join(self.text_parts)
            self.blocks.append(Block(kind, ParagraphMarkup(tuple(text.split("\n")))))
        elif kind is ElementKind.TITLE:
            text = "".join(self.text_parts)
            if "\n" in text:
                self.warn("newline in title replaced with space")
                text = text.replace("\n", " ")
            self.blocks.append(Block(kind, TitleMarkup(text)))
        elif kind is ElementKind.FORMULA:
            tokens = "".join(self.text_parts).split()
            self.blocks.append(Block(kind, FormulaMarkup(tuple(tokens))))
        self.text_parts = []
        self.inline_formula = False
        self.block_kind = None

    def open_block(self, kind: ElementKind) -> None:
        if self.block_kind is not None:
            self.close_block(auto=True)
        self.block_kind = kind

    # -- event handlers ----------------------------------------------------

    def text(self, chunk: str) -> None:
        if self.block_kind is None:
            if chunk.strip():
                # stray text becomes an implicit paragraph so model output
                # that drops tags still gets scored
                self.warn("stray text outside any block; wrapped as paragraph")
                self.blocks.append(
                    Block(ElementKind.PARAGRAPH,
                          ParagraphMarkup(tuple(chunk.strip().split("\n")))))
            return
        if self.block_kind is ElementKind.TABLE:
            if self.cell is None:
                if chunk.strip():
                    self.warn("text inside table but outside any cell was dropped")
                return
            self.text_parts.append(chunk)
        else:
            self.text_parts.append(chunk)

    def tag(self, tok: str) -> None:
        if tok == "<doc>":
            if self.seen_doc:
                self.warn("duplicate <doc> ignored")
            self.seen_doc = True
            return
        if tok == "</doc>":
            if self.block_kind is not None:
                self.close_block(auto=True)
            return
        if tok == "<figure/>":
            if self.inline_formula or self.cell is not None:
                self.warn("<figure/> inside a cell was dropped")
                return
            if self.block_kind is not None:
                self.close_block(auto=True)
            self.blocks.append(Block(ElementKind.FIGURE, FigureMarkup()))
            return

        # inline formula spans inside paragraph or cell text
        if tok == "<formula>" and self.block_kind in (
                ElementKind.PARAGRAPH, ElementKind.TABLE) and (
                self.block_kind is ElementKind.PARAGRAPH or self.cell is not None):
            if self.inline_formula:
                self.warn("nested <formula> treated as literal text")
                self.text_parts.append(tok)
            else:
                self.inline_formula = True
                self.text_parts.append(tok)
            return
        if tok == "</formula>" and self.inline_formula:
            self.inline_formula = False
            self.text_parts.append(tok)
            return

        if tok in _BLOCK_OPENS:
            self.open_block(_BLOCK_OPENS[tok])
            return

        m = _TD_OPEN_RE.fullmatch(tok)
        if m:
            if self.block_kind is not ElementKind.TABLE:
                self.warn(f"{tok} outside a table was dropped")
                return
            if not self.in_row:
                self.warn("<td> before any <tr>: opened an implicit row")
                self.in_row = True
            self._close_cell()
            self.cell = (int(m.group(1) or 1), int(m.group(2) or 1))
            return
        if tok == "<tr>":
            if self.block_kind is not ElementKind.TABLE:
                self.warn("<tr> outside a table was dropped")
                return
            self._close_row()
            self.in_row = True
            return
        if tok == "</td>":
            if self.cell is None:
                self.warn("unmatched </td> ignored")
            else:
                self._close_cell()
            return
        if tok == "</tr>":
            if self.block_kind is not ElementKind.TABLE or not self.in_row:
                self.warn("unmatched </tr> ignored")
            else:
                self._close_row()
            return
        # closing tag for the current block?
        closes = {"</title>": ElementKind.TITLE, "</para>": ElementKind.PARAGRAPH,
                  "</table>": ElementKind.TABLE, "</formula>": ElementKind.FORMULA}
        if tok in closes:
            if self.block_kind is closes[tok]:
                self.close_block()
            else:
                self.warn(f"unmatched {tok} ignored")
            return
        self.warn(f"unrecognized tag {tok} ignored")

    def finish(self) -> None:
        if self.block_kind is not None:
            self.close_block(auto=True)
        if not self.seen_doc:
            self.warn("stream is not wrapped in <doc>...</doc>")


def parse_ground_truth(stream: str) -> tuple[list[Block], list[str]]:
    """Parse a (possibly malformed) stream into blocks.

    Total over arbitrary input: returns ``(blocks, warnings)`` and never
    raises on content.
    """
    parser = _StreamParser()
    if not stream:
        return [], ["empty stream"]
    pos = 0
    for m in _TAG_RE.finditer(stream):
        if m.start() > pos:
            parser.text(stream[pos:m.start()])
        parser.tag(m.group(0))
        pos = m.end()
    if pos < len(stream):
        parser.text(stream[pos:])
    parser.finish()
    return parser.blocks, parser.warnings


def blocks_of(annotations: Iterable[BlockAnnotation]) -> list[Block]:
    """Project annotations (sorted by order_index) onto plain blocks."""
    anns = sorted(annotations, key=lambda a: a.order_index)
    return [Block(a.kind, a.markup) for a in anns]
