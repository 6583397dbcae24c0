"""Deterministic rasterization of elements and pages.

Glyphs come from a built-in 5x7 block-matrix font scaled by integer factors,
so rendering uses only integer arithmetic and is byte-stable across
platforms.  Every drawn character is recorded in a glyph log (char, bbox,
block id) so ground-truth/render consistency can be checked exactly.
Visual fidelity is explicitly not a goal; structural fidelity is.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .model import (
    _INLINE_FORMULA_RE,
    ElementKind,
    FigureMarkup,
    FormulaMarkup,
    Markup,
    ParagraphMarkup,
    TableMarkup,
    TitleMarkup,
    expand_table_grid,
)

GLYPH_W = 5
GLYPH_H = 7
ADVANCE = 6        # glyph cell + 1px gap, at scale 1
LINE_HEIGHT = 9    # glyph rows + 2px leading, at scale 1
CELL_PAD = 2       # table cell padding, at scale 1
TOKEN_GAP = 2      # gap between formula tokens, at scale 1
SCRIPT_SHIFT = 3   # sub/superscript baseline shift (~40% of glyph height)
NOMINAL_K = 2      # font factor corresponding to scale 1.0
MAX_K = 8          # font factor corresponding to the scale cap 4.0

INK = 0
PAPER = 255

# 5x7 font, one int per row, bit 4 = leftmost pixel.  Lowercase letters share
# the uppercase bitmaps (per-codepoint boxes are all the structure checks
# need); anything without a bitmap renders as the hollow-box glyph.
_BOX = (0x1F, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1F)
FONT: dict[str, tuple[int, ...]] = {
    "A": (0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11),
    "B": (0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E),
    "C": (0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E),
    "D": (0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E),
    "E": (0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F),
    "F": (0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10),
    "G": (0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F),
    "H": (0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11),
    "I": (0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E),
    "J": (0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C),
    "K": (0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11),
    "L": (0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F),
    "M": (0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11),
    "N": (0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11),
    "O": (0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E),
    "P": (0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10),
    "Q": (0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D),
    "R": (0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11),
    "S": (0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E),
    "T": (0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04),
    "U": (0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E),
    "V": (0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04),
    "W": (0x11, 0x11, 0x11, 0x15, 0x15, 0x1B, 0x11),
    "X": (0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11),
    "Y": (0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04),
    "Z": (0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F),
    "0": (0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E),
    "1": (0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E),
    "2": (0x0E, 0x11, 0x01, 0x06, 0x08, 0x10, 0x1F),
    "3": (0x1F, 0x01, 0x02, 0x06, 0x01, 0x11, 0x0E),
    "4": (0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02),
    "5": (0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E),
    "6": (0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E),
    "7": (0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08),
    "8": (0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E),
    "9": (0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C),
    ".": (0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C),
    ",": (0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08),
    ":": (0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00),
    ";": (0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x04, 0x08),
    "!": (0x04, 0x04, 0x04, 0x04, 0x04, 0x00, 0x04),
    "?": (0x0E, 0x11, 0x01, 0x02, 0x04, 0x00, 0x04),
    "'": (0x0C, 0x04, 0x08, 0x00, 0x00, 0x00, 0x00),
    '"': (0x0A, 0x0A, 0x00, 0x00, 0x00, 0x00, 0x00),
    "(": (0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02),
    ")": (0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08),
    "[": (0x0E, 0x08, 0x08, 0x08, 0x08, 0x08, 0x0E),
    "]": (0x0E, 0x02, 0x02, 0x02, 0x02, 0x02, 0x0E),
    "{": (0x06, 0x04, 0x04, 0x08, 0x04, 0x04, 0x06),
    "}": (0x0C, 0x04, 0x04, 0x02, 0x04, 0x04, 0x0C),
    "+": (0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00),
    "-": (0x00, 0x00, 0x00, 0x0E, 0x00, 0x00, 0x00),
    "=": (0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00),
    "*": (0x00, 0x04, 0x15, 0x0E, 0x15, 0x04, 0x00),
    "/": (0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10),
    "\\": (0x10, 0x10, 0x08, 0x04, 0x02, 0x01, 0x01),
    "_": (0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F),
    "^": (0x04, 0x0A, 0x11, 0x00, 0x00, 0x00, 0x00),
    "<": (0x02, 0x04, 0x08, 0x10, 0x08, 0x04, 0x02),
    ">": (0x08, 0x04, 0x02, 0x01, 0x02, 0x04, 0x08),
    "%": (0x19, 0x1A, 0x02, 0x04, 0x08, 0x0B, 0x13),
    "&": (0x0C, 0x12, 0x14, 0x08, 0x15, 0x12, 0x0D),
    "#": (0x0A, 0x0A, 0x1F, 0x0A, 0x1F, 0x0A, 0x0A),
    "@": (0x0E, 0x11, 0x17, 0x15, 0x17, 0x10, 0x0E),
    "~": (0x00, 0x00, 0x08, 0x15, 0x02, 0x00, 0x00),
    "|": (0x04, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04),
    "$": (0x04, 0x0F, 0x14, 0x0E, 0x05, 0x1E, 0x04),
}


def glyph_rows(char: str) -> tuple[int, ...]:
    return FONT.get(char) or FONT.get(char.upper()) or _BOX


@lru_cache(maxsize=4096)
def glyph_mask(rows: tuple[int, ...], k: int) -> np.ndarray:
    """Boolean ink mask of a glyph bitmap scaled by integer factor k."""
    bits = np.array(
        [[(r >> (GLYPH_W - 1 - c)) & 1 for c in range(GLYPH_W)] for r in rows],
        dtype=bool,
    )
    if k == 1:
        return bits
    return np.kron(bits, np.ones((k, k), dtype=bool))


class RenderError(ValueError):
    """Target box is too small for the element."""


# ---------------------------------------------------------------------------
# Layout IR
# ---------------------------------------------------------------------------

@dataclass
class Layout:
    """Resolved drawing plan for one element, origin at its top-left."""

    width: int
    height: int
    glyphs: list[tuple[str, int, int, int]] = field(default_factory=list)
    rules: list[tuple[int, int, int, int]] = field(default_factory=list)
    hatches: list[tuple[int, int, int, int]] = field(default_factory=list)

    def shift(self, dx: int, dy: int) -> "Layout":
        return Layout(
            self.width,
            self.height,
            [(c, x + dx, y + dy, k) for c, x, y, k in self.glyphs],
            [(x + dx, y + dy, w, h) for x, y, w, h in self.rules],
            [(x + dx, y + dy, w, h) for x, y, w, h in self.hatches],
        )

    def merge(self, other: "Layout") -> None:
        self.glyphs += other.glyphs
        self.rules += other.rules
        self.hatches += other.hatches


@dataclass
class _Box:
    """Baseline-relative fragment used during inline/formula layout."""

    width: int
    ascent: int
    descent: int
    glyphs: list[tuple[str, int, int, int]] = field(default_factory=list)
    rules: list[tuple[int, int, int, int]] = field(default_factory=list)

    @property
    def height(self) -> int:
        return self.ascent + self.descent


def _text_box(text: str, k: int) -> _Box:
    glyphs = []
    x = 0
    for ch in text:
        if not ch.isspace():
            glyphs.append((ch, x, -GLYPH_H * k, k))
        x += ADVANCE * k
    if text:
        x -= k  # trim the trailing inter-glyph gap
    return _Box(max(x, 0), GLYPH_H * k, 0, glyphs)


# -- formula layout ----------------------------------------------------------

def parse_formula_nodes(tokens: list[str] | tuple[str, ...]) -> list:
    """Parse a formula token sequence into layout nodes.

    Total over arbitrary input: control tokens that cannot be consumed
    structurally are dropped, never rendered as text, keeping the drawn
    character set equal to the non-control content of the sequence.
    """
    nodes, _ = _parse_seq(list(tokens), 0, stop_at_close=False)
    return nodes


def _parse_seq(tokens: list[str], i: int, stop_at_close: bool) -> tuple[list, int]:
    nodes: list = []
    while i < len(tokens):
        tok = tokens[i]
        if tok == "}" and stop_at_close:
            return nodes, i + 1
        if tok == "}":
            i += 1  # stray close: drop
            continue
        if tok == "{":
            inner, i = _parse_seq(tokens, i + 1, stop_at_close=True)
            nodes.append(("group", inner))
            continue
        if tok == "\\frac":
            num, i = _parse_arg(tokens, i + 1)
            den, i = _parse_arg(tokens, i)
            nodes.append(("frac", num, den))
            continue
        if tok in ("^", "_"):
            arg, i2 = _parse_arg(tokens, i + 1)
            base = nodes.pop() if nodes else ("group", [])
            if base[0] == "script":
                _, b, sup, sub = base
            else:
                b, sup, sub = base, None, None
            if tok == "^":
                sup = arg
            else:
                sub = arg
            nodes.append(("script", b, sup, sub))
            i = i2
            continue
        nodes.append(("atom", tok))
        i += 1
    return nodes, i


def _parse_arg(tokens: list[str], i: int) -> tuple[list, int]:
    if i >= len(tokens):
        return [], i
    if tokens[i] == "{":
        return _parse_seq(tokens, i + 1, stop_at_close=True)
    if tokens[i] in ("}", "^", "_"):
        return [], i
    if tokens[i] == "\\frac":
        num, j = _parse_arg(tokens, i + 1)
        den, j = _parse_arg(tokens, j)
        return [("frac", num, den)], j
    return [("atom", tokens[i])], i + 1


def _script_k(k: int) -> int:
    return max(1, (3 * k) // 5)


def _node_box(node, k: int) -> _Box:
    tag = node[0]
    if tag == "atom":
        return _text_box(node[1], k)
    if tag == "group":
        return _seq_box(node[1], k)
    if tag == "frac":
        num = _seq_box(node[1], k)
        den = _seq_box(node[2], k)
        w = max(num.width, den.width) + 2 * k
        rule_top = -4 * k
        box = _Box(w, 0, 0)
        box.rules.append((0, rule_top, w, k))
        nx = (w - num.width) // 2
        _place(box, num, nx, rule_top - k - num.descent)
        dx = (w - den.width) // 2
        _place(box, den, dx, rule_top + 2 * k + den.ascent)
        box.ascent = max(GLYPH_H * k, 5 * k + num.height)
        box.descent = max(0, -2 * k + den.height)
        return box
    if tag == "script":
        _, base, sup, sub = node
        box = _node_box(base, k)
        ks = _script_k(k)
        x = box.width + k
        w = box.width
        if sup is not None:
            sup_box = _seq_box(sup, ks)
            _place(box, sup_box, x, -SCRIPT_SHIFT * k - sup_box.descent)
            box.ascent = max(box.ascent, SCRIPT_SHIFT * k + sup_box.height)
            w = max(w, x + sup_box.width)
        if sub is not None:
            sub_box = _seq_box(sub, ks)
            _place(box, sub_box, x, SCRIPT_SHIFT * k)
            box.descent = max(box.descent, SCRIPT_SHIFT * k)
            w = max(w, x + sub_box.width)
        box.width = w
        return box
    raise AssertionError(f"unknown node {tag}")


def _place(dst: _Box, src: _Box, dx: int, baseline_y: int) -> None:
    """Merge src into dst with src's baseline at (dx, baseline_y)."""
    dst.glyphs += [(c, x + dx, y + baseline_y, kk) for c, x, y, kk in src.glyphs]
    dst.rules += [(x + dx, y + baseline_y, w, h) for x, y, w, h in src.rules]


def _seq_box(nodes: list, k: int) -> _Box:
    box = _Box(0, GLYPH_H * k, 0)
    x = 0
    for i, node in enumerate(nodes):
        nb = _node_box(node, k)
        if i:
            x += TOKEN_GAP * k
        _place(box, nb, x, 0)
        x += nb.width
        box.ascent = max(box.ascent, nb.ascent)
        box.descent = max(box.descent, nb.descent)
    box.width = x
    return box


def formula_box(tokens, k: int) -> _Box:
    return _seq_box(parse_formula_nodes(tokens), k)


# -- inline runs (text with embedded formula spans) --------------------------

def _run_box(text: str, k: int) -> _Box:
    """A single-line run: plain text plus inline <formula>...</formula> spans."""
    box = _Box(0, GLYPH_H * k, 0)
    x = 0
    pos = 0
    for m in _INLINE_FORMULA_RE.finditer(text):
        if m.start() > pos:
            part = _text_box(text[pos:m.start()], k)
            _place(box, part, x, 0)
            x += part.width + k
        fb = formula_box(m.group(1).split(), k)
        _place(box, fb, x, 0)
        x += fb.width + k
        box.ascent = max(box.ascent, fb.ascent)
        box.descent = max(box.descent, fb.descent)
        pos = m.end()
    if pos < len(text):
        part = _text_box(text[pos:], k)
        _place(box, part, x, 0)
        x += part.width + k
    box.width = max(0, x - k)
    return box


def _box_layout(box: _Box) -> Layout:
    lay = Layout(box.width, box.height)
    lay.glyphs = [(c, x, y + box.ascent, kk) for c, x, y, kk in box.glyphs]
    lay.rules = [(x, y + box.ascent, w, h) for x, y, w, h in box.rules]
    return lay


# -- paragraph wrapping -------------------------------------------------------

_SPAN_SPLIT_RE = _INLINE_FORMULA_RE


def _line_items(line: str) -> list[str]:
    """Break a line into wrap-atomic items: words and whole formula spans."""
    items: list[str] = []
    pos = 0
    for m in _SPAN_SPLIT_RE.finditer(line):
        items.extend(line[pos:m.start()].split())
        items.append(m.group(0))
        pos = m.end()
    items.extend(line[pos:].split())
    return items


def wrap_line(line: str, k: int, max_width: int) -> list[list[_Box]] | None:
    """Greedy word wrap of one source line into visual rows of boxes.

    Plain words too wide for the box are split at character granularity;
    formula spans are atomic, so a span wider than max_width makes the wrap
    impossible at this k (returns None).
    """
    space = ADVANCE * k
    rows: list[list[_Box]] = []
    cur: list[_Box] = []
    cur_w = 0

    def push(b: _Box) -> None:
        nonlocal cur, cur_w
        w = b.width if not cur else cur_w + space + b.width
        if cur and w > max_width:
            rows.append(cur)
            cur, cur_w = [b], b.width
        else:
            cur, cur_w = cur + [b], w

    for item in _line_items(line):
        if item.startswith("<formula>"):
            b = _run_box(item, k)
            if b.width > max_width:
                return None
            push(b)
            continue
        b = _text_box(item, k)
        if b.width <= max_width:
            push(b)
            continue
        chars_per_row = max(1, (max_width + k) // (ADVANCE * k))
        for i in range(0, len(item), chars_per_row):
            push(_text_box(item[i:i + chars_per_row], k))
    if cur:
        rows.append(cur)
    if not rows:
        rows.append([])
    return rows


def _row_height(row: list[_Box], k: int) -> tuple[int, int]:
    """(height, baseline offset from row top) with 2k leading."""
    asc = max([b.ascent for b in row], default=GLYPH_H * k)
    desc = max([b.descent for b in row], default=0)
    return asc + desc + 2 * k, asc + k


def paragraph_line_heights(lines, k: int, max_width: int) -> list[int] | None:
    """Rendered height of each source line after wrapping, or None if any
    line cannot wrap into max_width at this k."""
    heights = []
    for line in lines:
        rows = wrap_line(line, k, max_width)
        if rows is None:
            return None
        heights.append(sum(_row_height(r, k)[0] for r in rows))
    return heights


def layout_paragraph(lines, k: int, max_width: int) -> Layout | None:
    space = ADVANCE * k
    lay = Layout(0, 0)
    y = 0
    for line in lines:
        rows = wrap_line(line, k, max_width)
        if rows is None:
            return None
        for row in rows:
            rh, baseline = _row_height(row, k)
            x = 0
            for b in row:
                blay = _Box(0, 0, 0)
                _place(blay, b, x, y + baseline)
                lay.glyphs += blay.glyphs
                lay.rules += blay.rules
                x += b.width + space
            lay.width = max(lay.width, max(0, x - space))
            y += rh
    lay.height = y
    return lay


# -- tables -------------------------------------------------------------------

def layout_table(markup: TableMarkup, k: int) -> Layout:
    grid = expand_table_grid(markup)
    n_rows = len(grid)
    n_cols = max((len(r) for r in grid), default=0)
    t = k            # rule thickness
    pad = CELL_PAD * k

    cells: list[tuple[int, int, int, int, _Box]] = []  # (r, c, rs, cs, box)
    idx = 0
    for r, row in enumerate(markup.rows):
        for cell in row.cells:
            c = _grid_col(grid, r, idx)
            cells.append((r, c, cell.rowspan, cell.colspan, _run_box(cell.text, k)))
            idx += 1

    col_w = [3 * k] * n_cols
    row_h = [GLYPH_H * k + 2 * pad] * n_rows
    for r, c, rs, cs, box in cells:
        if cs == 1:
            col_w[c] = max(col_w[c], box.width + 2 * pad)
        if rs == 1:
            row_h[r] = max(row_h[r], box.height + 2 * pad)
    for r, c, rs, cs, box in cells:
        if cs > 1:
            have = sum(col_w[c:c + cs]) + (cs - 1) * t
            need = box.width + 2 * pad
            if need > have:
                extra = -(-(need - have) // cs)  # ceil division
                for cc in range(c, c + cs):
                    col_w[cc] += extra
        if rs > 1:
            have = sum(row_h[r:r + rs]) + (rs - 1) * t
            need = box.height + 2 * pad
            if need > have:
                extra = -(-(need - have) // rs)
                for rr in range(r, r + rs):
                    row_h[rr] += extra

    xs = [0]
    for w in col_w:
        xs.append(xs[-1] + t + w)
    ys = [0]
    for h in row_h:
        ys.append(ys[-1] + t + h)
    total_w = xs[-1] + t if n_cols else 2 * t
    total_h = ys[-1] + t if n_rows else 2 * t

    lay = Layout(total_w, total_h)
    for r, c, rs, cs, box in cells:
        x0, y0 = xs[c], ys[r]
        x1 = xs[min(c + cs, n_cols)] + t
        y1 = ys[min(r + rs, n_rows)] + t
        # cell border (overlapping strips of shared edges coincide)
        lay.rules.append((x0, y0, x1 - x0, t))
        lay.rules.append((x0, y1 - t, x1 - x0, t))
        lay.rules.append((x0, y0, t, y1 - y0))
        lay.rules.append((x1 - t, y0, t, y1 - y0))
        cell_lay = _box_layout(box).shift(x0 + t + pad, y0 + t + pad)
        lay.merge(cell_lay)
    if not cells:
        lay.rules.append((0, 0, total_w, t))
        lay.rules.append((0, total_h - t, total_w, t))
        lay.rules.append((0, 0, t, total_h))
        lay.rules.append((total_w - t, 0, t, total_h))
    return lay


def _grid_col(grid: list[list[int | None]], r: int, cell_index: int) -> int:
    for c, v in enumerate(grid[r]):
        if v == cell_index:
            return c
    raise AssertionError("cell not found in its own grid row")


def table_rule_positions(markup: TableMarkup, k: int) -> tuple[list[int], list[int]]:
    """Top-left coordinates of the grid rules (x positions, y positions)."""
    grid = expand_table_grid(markup)
    lay = layout_table(markup, k)
    del grid
    xs = sorted({x for x, y, w, h in lay.rules if h > w})
    ys = sorted({y for x, y, w, h in lay.rules if w >= h})
    return xs, ys


# -- figures ------------------------------------------------------------------

def layout_figure(width: int, height: int) -> Layout:
    t = max(1, min(width, height) // 40) + 1
    lay = Layout(width, height)
    lay.rules.append((0, 0, width, t))
    lay.rules.append((0, height - t, width, t))
    lay.rules.append((0, 0, t, height))
    lay.rules.append((width - t, 0, t, height))
    inset = t + 2
    if width > 2 * inset and height > 2 * inset:
        lay.hatches.append((inset, inset, width - 2 * inset, height - 2 * inset))
    return lay


# ---------------------------------------------------------------------------
# Measuring and drawing
# ---------------------------------------------------------------------------

def layout_markup(markup: Markup, k: int, max_width: int | None = None,
                  figure_size: tuple[int, int] | None = None) -> Layout | None:
    """Layout for any markup kind; paragraphs need max_width, figures their
    target size. Returns None when a paragraph cannot wrap at this k."""
    if isinstance(markup, TableMarkup):
        return layout_table(markup, k)
    if isinstance(markup, FormulaMarkup):
        return _box_layout(formula_box(markup.tokens, k))
    if isinstance(markup, TitleMarkup):
        return _box_layout(_run_box(markup.text, k))
    if isinstance(markup, ParagraphMarkup):
        if max_width is None:
            max_width = 10 ** 9
        return layout_paragraph(markup.lines, k, max_width)
    if isinstance(markup, FigureMarkup):
        w, h = figure_size if figure_size else (60, 40)
        return layout_figure(w, h)
    raise AssertionError(f"unknown markup {type(markup).__name__}")


@dataclass
class GlyphBox:
    char: str
    bbox: tuple[int, int, int, int]
    block_id: str


@dataclass
class Canvas:
    width: int
    height: int
    channels: int
    buf: np.ndarray
    glyph_log: list[GlyphBox] = field(default_factory=list)

    @classmethod
    def blank(cls, width: int, height: int, channels: int = 1,
              fill: int = PAPER) -> "Canvas":
        shape = (height, width) if channels == 1 else (height, width, channels)
        return cls(width, height, channels, np.full(shape, fill, dtype=np.uint8))

    def to_png(self, path, compress_level: int = 1) -> None:
        from PIL import Image

        mode = "L" if self.channels == 1 else "RGB"
        Image.fromarray(self.buf, mode).save(
            str(path), format="PNG", optimize=False, compress_level=compress_level
        )


def draw_layout(canvas: Canvas, layout: Layout, ox: int, oy: int,
                block_id: str = "") -> None:
    buf = canvas.buf
    for x, y, w, h in layout.rules:
        buf[oy + y:oy + y + h, ox + x:ox + x + w] = INK
    for x, y, w, h in layout.hatches:
        yy, xx = np.mgrid[y:y + h, x:x + w]
        stripe = ((xx + yy) % 12) < 2
        region = buf[oy + y:oy + y + h, ox + x:ox + x + w]
        region[stripe] = INK
    for ch, x, y, k in layout.glyphs:
        mask = glyph_mask(glyph_rows(ch), k)
        gh, gw = mask.shape
        buf[oy + y:oy + y + gh, ox + x:ox + x + gw][mask] = INK
        canvas.glyph_log.append(
            GlyphBox(ch, (ox + x, oy + y, gw, gh), block_id))


def fit_font_factor(markup: Markup, box_w: int, box_h: int,
                    max_k: int = MAX_K) -> tuple[int, Layout] | None:
    """Largest integer font factor whose layout fits (box_w, box_h)."""
    if isinstance(markup, FigureMarkup):
        return NOMINAL_K, layout_figure(box_w, box_h)
    for k in range(max_k, 0, -1):
        lay = layout_markup(markup, k, max_width=box_w)
        if lay is not None and lay.width <= box_w and lay.height <= box_h:
            return k, lay
    return None


def render_markup(markup: Markup, k: int, box: tuple[int, int, int, int],
                  canvas: Canvas, block_id: str = "",
                  max_width: int | None = None) -> None:
    x, y, w, h = box
    if isinstance(markup, FigureMarkup):
        lay = layout_figure(w, h)
    else:
        lay = layout_markup(markup, k, max_width=max_width if max_width else w)
    if lay is None or lay.width > w or lay.height > h:
        raise RenderError(f"markup does not fit box {w}x{h} at factor {k}")
    draw_layout(canvas, lay, x, y, block_id)


def render_element_patch(element, box_w: int, box_h: int,
                         channels: int = 1) -> Canvas:
    """Render a single element scaled to fit a box (no truncation)."""
    fit = fit_font_factor(element.markup, box_w, box_h)
    if fit is None:
        raise RenderError(
            f"box {box_w}x{box_h} too small for {element.kind.value} element")
    k, lay = fit
    canvas = Canvas.blank(box_w, box_h, channels)
    draw_layout(canvas, lay, 0, 0, element.id)
    return canvas


def render_element_crop(element, k: int = NOMINAL_K, margin: int = 8,
                        channels: int = 1) -> Canvas:
    """Render an element alone on a tight canvas (stage-1 crops)."""
    if isinstance(element.markup, FigureMarkup):
        iw, ih = element.intrinsic_size
        lay = layout_figure(max(24, iw * 4), max(24, ih * 4))
    else:
        lay = layout_markup(element.markup, k, max_width=10 ** 9)
    canvas = Canvas.blank(lay.width + 2 * margin, lay.height + 2 * margin, channels)
    draw_layout(canvas, lay, margin, margin, element.id)
    return canvas


def render_page(page, channels: int = 1) -> Canvas:
    """Render a composed page: white background, each placement in its box."""
    w, h = page.size
    canvas = Canvas.blank(w, h, channels)
    for pl in page.placements:
        x, y, bw, bh = (int(v) for v in pl.bbox)
        render_markup(pl.markup, pl.font_k, (x, y, bw, bh), canvas,
                      block_id=pl.block_id, max_width=bw)
    return canvas


# -- render/ground-truth consistency ------------------------------------------

def _node_chars(node, out: Counter) -> None:
    tag = node[0]
    if tag == "atom":
        for ch in node[1]:
            if not ch.isspace():
                out[ch] += 1
    elif tag == "group":
        for n in node[1]:
            _node_chars(n, out)
    elif tag == "frac":
        for n in node[1]:
            _node_chars(n, out)
        for n in node[2]:
            _node_chars(n, out)
    elif tag == "script":
        _node_chars(node[1], out)
        for seq in (node[2], node[3]):
            if seq is not None:
                for n in seq:
                    _node_chars(n, out)


def _run_chars(text: str, out: Counter) -> None:
    pos = 0
    for m in _INLINE_FORMULA_RE.finditer(text):
        for ch in text[pos:m.start()]:
            if not ch.isspace():
                out[ch] += 1
        for node in parse_formula_nodes(m.group(1).split()):
            _node_chars(node, out)
        pos = m.end()
    for ch in text[pos:]:
        if not ch.isspace():
            out[ch] += 1


def expected_glyph_chars(markup: Markup) -> Counter:
    """Multiset of characters the renderer stamps for this markup.

    Mirrors the drawing walk exactly: whitespace is never drawn, formula
    control tokens are layout directives, figures draw frames only.  This
    is the contract a rendered page is checked against: for every block,
    Counter(c for glyphs logged under its id) == expected_glyph_chars(markup).
    """
    out: Counter = Counter()
    if isinstance(markup, TableMarkup):
        for row in markup.rows:
            for cell in row.cells:
                _run_chars(cell.text, out)
    elif isinstance(markup, FormulaMarkup):
        for node in parse_formula_nodes(list(markup.tokens)):
            _node_chars(node, out)
    elif isinstance(markup, ParagraphMarkup):
        for line in markup.lines:
            _run_chars(line, out)
    elif isinstance(markup, TitleMarkup):
        _run_chars(markup.text, out)
    return out
