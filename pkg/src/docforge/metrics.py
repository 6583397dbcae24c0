"""Evaluation metrics and the structure-weighted token loss.

All metrics are pure functions.  Page-level evaluation aggregates in
page-id order so results never depend on input file ordering.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .model import (
    Block,
    ElementKind,
    FigureMarkup,
    FormulaMarkup,
    Markup,
    ParagraphMarkup,
    TableMarkup,
    TitleMarkup,
    VOCAB,
    parse_ground_truth,
)

DEFAULT_LAMBDA = 4.0
DEFAULT_MAX_LEN = 8192
MIN_PATTERN_LEN = 4      # shortest token pattern that counts as a repeat unit
MIN_REPEATS = 11         # "more than 10 times"
MATCH_THRESHOLD = 0.5    # block-pairing similarity floor for reading order


class MetricError(ValueError):
    """Invalid metric input (mismatched lengths, bad log-probs, bad ids)."""


# ---------------------------------------------------------------------------
# Structure-weighted token loss
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossSpec:
    """Weighting rule: positions whose token is structural get weight lam,
    every other position gets 1.  lam = 1 reduces to the unweighted loss."""

    lam: float = DEFAULT_LAMBDA
    structure_tokens: frozenset[str] | None = None  # None = built-in vocabulary
    reduction: str = "sum"

    def validate(self) -> None:
        if not self.lam > 0 or math.isnan(self.lam):
            raise MetricError(f"lambda must be positive, got {self.lam}")
        if self.reduction not in ("sum", "mean"):
            raise MetricError(f"reduction must be sum or mean, got "
                              f"{self.reduction!r}")

    def is_structured(self, token: str) -> bool:
        if self.structure_tokens is not None:
            return token in self.structure_tokens
        return VOCAB.is_structure_token(token)


@dataclass(frozen=True)
class TokenLossInput:
    tokens: tuple[str, ...]
    logprobs: tuple[float, ...]

    def validate(self) -> None:
        if len(self.tokens) != len(self.logprobs):
            raise MetricError(
                f"{len(self.tokens)} tokens but {len(self.logprobs)} log-probs")
        for i, lp in enumerate(self.logprobs):
            if math.isnan(lp):
                raise MetricError(f"log-prob at position {i} is NaN")
            if lp > 0:
                raise MetricError(
                    f"log-prob at position {i} is {lp} > 0; probabilities "
                    "cannot exceed 1")


def structured_loss(tokens, logprobs=None,
                    spec: LossSpec = LossSpec()) -> tuple[float, list[float]]:
    """Weighted negative log-likelihood over target positions.

    Returns (loss, weights): loss = -sum(w_t * logP_t), reduced per spec;
    w_t = lam for structural tokens, else 1.  Accepts a TokenLossInput or
    separate token/log-prob sequences.
    """
    if isinstance(tokens, TokenLossInput):
        inp = tokens
    else:
        inp = TokenLossInput(tuple(tokens), tuple(float(x) for x in logprobs))
    spec.validate()
    inp.validate()
    weights = [spec.lam if spec.is_structured(t) else 1.0 for t in inp.tokens]
    loss = -sum(w * lp for w, lp in zip(weights, inp.logprobs))
    if spec.reduction == "mean" and inp.tokens:
        loss /= len(inp.tokens)
    return loss, weights


# ---------------------------------------------------------------------------
# Edit distance
# ---------------------------------------------------------------------------

def levenshtein(a: Sequence, b: Sequence) -> int:
    """Edit distance over arbitrary hashable items (unit costs)."""
    if not a:
        return len(b)
    if not b:
        return len(a)
    codes: dict = {}
    ca = np.fromiter((codes.setdefault(x, len(codes)) for x in a),
                     dtype=np.int64, count=len(a))
    cb = np.fromiter((codes.setdefault(x, len(codes)) for x in b),
                     dtype=np.int64, count=len(b))
    idx = np.arange(len(cb) + 1, dtype=np.int64)
    prev = idx.copy()
    cur = np.empty_like(prev)
    for i in range(len(ca)):
        cur[0] = i + 1
        np.minimum(prev[:-1] + (cb != ca[i]), prev[1:] + 1, out=cur[1:])
        # fold in insertions: cur[j] = min over i<=j of cur[i] + (j - i)
        np.minimum(cur, np.minimum.accumulate(cur - idx) + idx, out=cur)
        prev, cur = cur, prev
    return int(prev[-1])


def _normalized_edit(a: Sequence, b: Sequence) -> float:
    if not a and not b:
        return 0.0
    return levenshtein(a, b) / max(len(a), len(b))


def text_edit_score(pred: str, gt: str) -> float:
    """Normalized Levenshtein over characters; 0 when both empty."""
    return _normalized_edit(pred, gt)


def token_edit_score(pred: Sequence[str], gt: Sequence[str]) -> float:
    """Normalized Levenshtein over token sequences; 0 when both empty."""
    return _normalized_edit(tuple(pred), tuple(gt))


# ---------------------------------------------------------------------------
# TEDS (tree-edit-distance similarity for tables)
# ---------------------------------------------------------------------------

class TreeNode:
    """Ordered labeled tree node; `tag` carries span attributes so a span
    change is a full rename, `text` only matters for matching tags."""

    __slots__ = ("tag", "text", "children")

    def __init__(self, tag: str, text: str = "",
                 children: Sequence["TreeNode"] = ()):
        self.tag = tag
        self.text = text
        self.children = list(children)

    def size(self) -> int:
        return 1 + sum(c.size() for c in self.children)

    def __repr__(self) -> str:
        return f"TreeNode({self.tag!r}, {self.text!r}, {self.children!r})"


def _td_tag(rowspan: int, colspan: int) -> str:
    tag = "td"
    if rowspan != 1:
        tag += f' rowspan="{rowspan}"'
    if colspan != 1:
        tag += f' colspan="{colspan}"'
    return tag


def table_tree(markup: TableMarkup | None) -> TreeNode | None:
    """table -> tr -> td tree; None stands for the empty tree."""
    if markup is None:
        return None
    rows = []
    for row in markup.rows:
        cells = [TreeNode(_td_tag(c.rowspan, c.colspan), c.text)
                 for c in row.cells]
        rows.append(TreeNode("tr", children=cells))
    return TreeNode("table", children=rows)


def _rename_cost(a: TreeNode, b: TreeNode) -> float:
    if a.tag != b.tag:
        return 1.0
    return _normalized_edit(a.text, b.text)


def tree_edit_distance(t1: TreeNode | None, t2: TreeNode | None) -> float:
    """Ordered tree edit distance, unit insert/delete, graded rename."""
    if t1 is None and t2 is None:
        return 0.0
    if t1 is None:
        return float(t2.size())
    if t2 is None:
        return float(t1.size())

    def postorder(root: TreeNode) -> tuple[list[TreeNode], list[int]]:
        nodes: list[TreeNode] = []
        lml: list[int] = []

        def walk(n: TreeNode) -> int:
            first = None
            for c in n.children:
                got = walk(c)
                if first is None:
                    first = got
            me = len(nodes)
            nodes.append(n)
            lml.append(first if first is not None else me)
            return lml[me] if n.children else me
        walk(root)
        return nodes, lml

    n1, l1 = postorder(t1)
    n2, l2 = postorder(t2)
    kr1 = _keyroots(l1)
    kr2 = _keyroots(l2)
    td = np.zeros((len(n1), len(n2)))
    for i in kr1:
        for j in kr2:
            _treedist(i, j, n1, l1, n2, l2, td)
    return float(td[len(n1) - 1][len(n2) - 1])


def _keyroots(lml: list[int]) -> list[int]:
    seen: set[int] = set()
    kr = []
    for i in range(len(lml) - 1, -1, -1):
        if lml[i] not in seen:
            kr.append(i)
            seen.add(lml[i])
    return sorted(kr)


def _treedist(i: int, j: int, n1, l1, n2, l2, td) -> None:
    # forest distance table over the subforests rooted at keyroots i, j
    ioff = l1[i] - 1
    joff = l2[j] - 1
    m = i - l1[i] + 2
    n = j - l2[j] + 2
    fd = np.zeros((m, n))
    for x in range(1, m):
        fd[x][0] = fd[x - 1][0] + 1
    for y in range(1, n):
        fd[0][y] = fd[0][y - 1] + 1
    for x in range(1, m):
        for y in range(1, n):
            if l1[x + ioff] == l1[i] and l2[y + joff] == l2[j]:
                fd[x][y] = min(
                    fd[x - 1][y] + 1,
                    fd[x][y - 1] + 1,
                    fd[x - 1][y - 1] + _rename_cost(n1[x + ioff], n2[y + joff]))
                td[x + ioff][y + joff] = fd[x][y]
            else:
                p = l1[x + ioff] - 1 - ioff
                q = l2[y + joff] - 1 - joff
                fd[x][y] = min(
                    fd[x - 1][y] + 1,
                    fd[x][y - 1] + 1,
                    fd[p][q] + td[x + ioff][y + joff])


def _first_table(source) -> TableMarkup | None:
    """Coerce a TEDS operand: markup passes through, a token stream is
    parsed (with repair) and its first table block is taken."""
    if source is None or isinstance(source, TableMarkup):
        return source
    if isinstance(source, TreeNode):
        raise MetricError("pass table markup or a stream, not a TreeNode")
    blocks, _ = parse_ground_truth(str(source))
    for b in blocks:
        if isinstance(b.markup, TableMarkup):
            return b.markup
    return None


def teds(pred, gt) -> float:
    """1 - TED/max(|pred|, |gt|); 1.0 when both trees are empty."""
    t1 = table_tree(_first_table(pred))
    t2 = table_tree(_first_table(gt))
    if t1 is None and t2 is None:
        return 1.0
    s1 = t1.size() if t1 is not None else 0
    s2 = t2.size() if t2 is not None else 0
    dist = tree_edit_distance(t1, t2)
    return 1.0 - dist / max(s1, s2)


# ---------------------------------------------------------------------------
# Reading order
# ---------------------------------------------------------------------------

def block_text(block: Block) -> str:
    """Flat text used for cross-page block matching."""
    m = block.markup
    if isinstance(m, ParagraphMarkup):
        return "\n".join(m.lines)
    if isinstance(m, TitleMarkup):
        return m.text
    if isinstance(m, TableMarkup):
        return " ".join(c.text for row in m.rows for c in row.cells if c.text)
    if isinstance(m, FormulaMarkup):
        return " ".join(m.tokens)
    return ""


def reading_order_edit(pred_blocks: Sequence[Block],
                       gt_blocks: Sequence[Block]) -> float:
    """Order error of pred against GT after content-based matching.

    Pairs are formed greedily by descending text similarity (ties: earliest
    pred, then earliest GT), kept only above 0.5.  The matched GT indices in
    pred order are compared to 0..n-1 by edit distance over index symbols,
    normalized by the GT block count; GT blocks nobody matched are the
    deletions that remain in that distance.
    """
    if not gt_blocks:
        return 0.0
    pt = [block_text(b) for b in pred_blocks]
    gt = [block_text(b) for b in gt_blocks]
    scored = []
    for i, p in enumerate(pt):
        for j, g in enumerate(gt):
            sim = 1.0 - text_edit_score(p, g)
            if sim > MATCH_THRESHOLD:
                scored.append((-sim, i, j))
    scored.sort()
    used_p: set[int] = set()
    used_g: set[int] = set()
    match: dict[int, int] = {}
    for neg, i, j in scored:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        match[i] = j
    seq = [match[i] for i in sorted(match)]
    return levenshtein(seq, list(range(len(gt_blocks)))) / len(gt_blocks)


# ---------------------------------------------------------------------------
# Repetition detection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RepetitionResult:
    flagged: bool
    repeat_found: bool          # condition A: pattern repeated > 10 times
    at_max_len: bool            # condition B: output hit the budget
    mode: str                   # "and" | "any"
    pattern: tuple[str, ...] = ()
    repeats: int = 0
    start: int = 0
    length: int = 0             # token count of the inspected output

    def to_dict(self) -> dict:
        return {"flagged": self.flagged, "repeat_found": self.repeat_found,
                "at_max_len": self.at_max_len, "mode": self.mode,
                "pattern": list(self.pattern), "repeats": self.repeats,
                "start": self.start, "length": self.length}


def _best_run(codes: np.ndarray, period: int) -> tuple[int, int]:
    """Longest consecutive-repeat count for this period and its start."""
    eq = codes[period:] == codes[:-period]
    if not eq.any():
        return 1, 0
    # lengths of maximal True runs in eq
    padded = np.concatenate(([False], eq, [False]))
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    starts, ends = edges[::2], edges[1::2]
    runs = ends - starts
    best = int(np.argmax(runs))
    # a True-run of length L means period holds over L + period tokens
    return int(runs[best]) // period + 1, int(starts[best])


def repetition_flag(output, max_len: int = DEFAULT_MAX_LEN,
                    mode: str = "and") -> RepetitionResult:
    """Degenerate-repetition detector.

    A: some contiguous pattern of >= 4 tokens repeats consecutively more
    than 10 times.  B: the output occupies the full token budget.  The
    default flag is A and B; mode="any" flags on either.
    """
    if max_len <= 0:
        raise MetricError(f"max_len must be positive, got {max_len}")
    if mode not in ("and", "any"):
        raise MetricError(f"mode must be 'and' or 'any', got {mode!r}")
    tokens = VOCAB.tokenize(output) if isinstance(output, str) else list(output)
    n = len(tokens)
    at_max = n >= max_len
    codes_map: dict = {}
    codes = np.fromiter((codes_map.setdefault(t, len(codes_map))
                         for t in tokens), dtype=np.int64, count=n)
    found = False
    pattern: tuple[str, ...] = ()
    repeats = 0
    start = 0
    for period in range(MIN_PATTERN_LEN, n // MIN_REPEATS + 1):
        r, s = _best_run(codes, period)
        if r >= MIN_REPEATS:
            found = True
            pattern = tuple(tokens[s:s + period])
            repeats = r
            start = s
            break
    flagged = (found or at_max) if mode == "any" else (found and at_max)
    return RepetitionResult(flagged, found, at_max, mode, pattern, repeats,
                            start, n)


# ---------------------------------------------------------------------------
# Manifest evaluation
# ---------------------------------------------------------------------------

_TEXT_KINDS = (ParagraphMarkup, TitleMarkup)
METRIC_KEYS = ("text_edit", "table_teds", "formula_token_edit",
               "reading_order_edit", "repetition_rate")


@dataclass(frozen=True)
class PageEval:
    page_id: str
    text_edit: float | None
    table_teds: float | None
    formula_token_edit: float | None
    reading_order_edit: float
    repetition: RepetitionResult

    def to_dict(self) -> dict:
        return {"page_id": self.page_id, "text_edit": self.text_edit,
                "table_teds": self.table_teds,
                "formula_token_edit": self.formula_token_edit,
                "reading_order_edit": self.reading_order_edit,
                "repetition": self.repetition.to_dict()}


@dataclass(frozen=True)
class EvalReport:
    pages: tuple[PageEval, ...]
    aggregate: Mapping[str, float | None]
    deltas: Mapping[str, float | None] | None = None

    def to_dict(self) -> dict:
        d = {"pages": [p.to_dict() for p in self.pages],
             "aggregate": dict(self.aggregate)}
        if self.deltas is not None:
            d["deltas"] = dict(self.deltas)
        return d

    def to_json(self, indent: int | None = 1) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    def to_text_table(self) -> str:
        cols = ["page_id", "text_edit", "table_teds", "formula_token_edit",
                "reading_order_edit", "repetition"]
        rows = [cols]
        for p in self.pages:
            rows.append([p.page_id, _fmt(p.text_edit), _fmt(p.table_teds),
                         _fmt(p.formula_token_edit),
                         _fmt(p.reading_order_edit),
                         "flag" if p.repetition.flagged else "-"])
        agg = self.aggregate
        rows.append(["aggregate", _fmt(agg["text_edit"]),
                     _fmt(agg["table_teds"]), _fmt(agg["formula_token_edit"]),
                     _fmt(agg["reading_order_edit"]),
                     _fmt(agg["repetition_rate"])])
        if self.deltas is not None:
            d = self.deltas
            rows.append(["delta", _fmt(d["text_edit"], sign=True),
                         _fmt(d["table_teds"], sign=True),
                         _fmt(d["formula_token_edit"], sign=True),
                         _fmt(d["reading_order_edit"], sign=True),
                         _fmt(d["repetition_rate"], sign=True)])
        widths = [max(len(r[c]) for r in rows) for c in range(len(cols))]
        lines = []
        for r_i, r in enumerate(rows):
            lines.append("  ".join(cell.ljust(widths[c])
                                   for c, cell in enumerate(r)).rstrip())
            if r_i == 0:
                lines.append("  ".join("-" * widths[c]
                                       for c in range(len(cols))))
        return "\n".join(lines)


def _fmt(v: float | None, sign: bool = False) -> str:
    if v is None:
        return "-"
    return f"{v:+.4f}" if sign else f"{v:.4f}"


def _pair_scores(pred: list, gt: list, score) -> float | None:
    """Score same-kind blocks paired by order of appearance; the unmatched
    tail on either side is scored against emptiness."""
    if not pred and not gt:
        return None
    total = 0.0
    count = max(len(pred), len(gt))
    for i in range(count):
        p = pred[i] if i < len(pred) else None
        g = gt[i] if i < len(gt) else None
        total += score(p, g)
    return total / count


def evaluate_page(page_id: str, pred_stream: str, gt_stream: str,
                  max_len: int = DEFAULT_MAX_LEN,
                  repetition_mode: str = "and") -> PageEval:
    pred_blocks, _ = parse_ground_truth(pred_stream)
    gt_blocks, _ = parse_ground_truth(gt_stream)

    def by_kind(blocks, kinds):
        return [b.markup for b in blocks if isinstance(b.markup, kinds)]

    pred_text = "\n".join(block_text(b) for b in pred_blocks
                          if isinstance(b.markup, _TEXT_KINDS))
    gt_text = "\n".join(block_text(b) for b in gt_blocks
                        if isinstance(b.markup, _TEXT_KINDS))
    has_text = bool(pred_text or gt_text)

    table_score = _pair_scores(
        by_kind(pred_blocks, TableMarkup), by_kind(gt_blocks, TableMarkup),
        lambda p, g: teds(p, g))
    formula_score = _pair_scores(
        by_kind(pred_blocks, FormulaMarkup), by_kind(gt_blocks, FormulaMarkup),
        lambda p, g: token_edit_score(p.tokens if p else (),
                                      g.tokens if g else ()))
    return PageEval(
        page_id=page_id,
        text_edit=text_edit_score(pred_text, gt_text) if has_text else None,
        table_teds=table_score,
        formula_token_edit=formula_score,
        reading_order_edit=reading_order_edit(pred_blocks, gt_blocks),
        repetition=repetition_flag(pred_stream, max_len, repetition_mode),
    )


def _stream_by_page(records: Iterable) -> dict[str, str]:
    out: dict[str, str] = {}
    for i, rec in enumerate(records):
        if hasattr(rec, "target"):
            target, meta = rec.target, rec.meta
        else:
            target, meta = rec["target"], rec.get("meta", {})
        page_id = meta.get("page_id", f"#{i}")
        out[page_id] = target
    return out


def evaluate(pred_records: Iterable, gt_records: Iterable,
             max_len: int = DEFAULT_MAX_LEN,
             repetition_mode: str = "and") -> EvalReport:
    """Score a prediction manifest against a ground-truth manifest.

    Records align by meta.page_id; any id present on one side only is an
    error (all unmatched ids are listed).
    """
    pred = _stream_by_page(pred_records)
    gt = _stream_by_page(gt_records)
    missing = sorted(set(gt) - set(pred))
    extra = sorted(set(pred) - set(gt))
    if missing or extra:
        parts = []
        if missing:
            parts.append(f"missing from predictions: {', '.join(missing[:20])}")
        if extra:
            parts.append(f"not in ground truth: {', '.join(extra[:20])}")
        raise MetricError("manifest page ids do not align; " + "; ".join(parts))
    pages = tuple(
        evaluate_page(pid, pred[pid], gt[pid], max_len, repetition_mode)
        for pid in sorted(gt))
    return EvalReport(pages=pages, aggregate=_aggregate(pages))


def _aggregate(pages: Sequence[PageEval]) -> dict[str, float | None]:
    def mean_of(values):
        vals = [v for v in values if v is not None]
        return sum(vals) / len(vals) if vals else None

    flagged = sum(1 for p in pages if p.repetition.flagged)
    return {
        "text_edit": mean_of(p.text_edit for p in pages),
        "table_teds": mean_of(p.table_teds for p in pages),
        "formula_token_edit": mean_of(p.formula_token_edit for p in pages),
        "reading_order_edit": mean_of(p.reading_order_edit for p in pages),
        "repetition_rate": flagged / len(pages) if pages else None,
        "pages": float(len(pages)),
    }


def degradation(wild: EvalReport, origin: EvalReport) -> dict[str, float | None]:
    """Per-metric wild - origin deltas (None when either side lacks a score)."""
    out: dict[str, float | None] = {}
    for key in METRIC_KEYS:
        w = wild.aggregate.get(key)
        o = origin.aggregate.get(key)
        out[key] = None if w is None or o is None else w - o
    return out


def with_degradation(wild: EvalReport, origin: EvalReport) -> EvalReport:
    return replace(wild, deltas=degradation(wild, origin))
