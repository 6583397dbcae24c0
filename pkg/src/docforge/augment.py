"""Capture-realistic page degradation with exact bbox remapping.

Transforms simulate photographing a printed page: perspective, page bend,
wrinkles, uneven illumination, exposure shift, rotation, and compositing
onto a desk-like background.  Every applied transform records its sampled
parameters and a forward point map, so block bounding boxes can be carried
through the exact same geometry the pixels went through.  The ground-truth
token stream is never an input here, so it cannot be altered.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import cv2
import numpy as np

from .raster import Canvas, PAPER
from .seeding import derive_seed


class AugmentError(ValueError):
    """Invalid augmentation spec or unrecoverably degenerate sample."""


MAX_CORNER_JITTER_SIGMA = 0.1
MAX_ROTATE_DEG = 45.0

GEOMETRIC = ("perspective", "bend", "wrinkle", "rotate")
PHOTOMETRIC = ("illumination", "exposure")
COMPOSITING = ("background",)
TRANSFORM_NAMES = GEOMETRIC + PHOTOMETRIC + COMPOSITING

#: Application order is physical-capture order: the page deforms, light
#: falls on it, then it sits on a surface; listed order is kept inside
#: each category.
_CATEGORY_RANK = {name: 0 for name in GEOMETRIC}
_CATEGORY_RANK.update({name: 1 for name in PHOTOMETRIC})
_CATEGORY_RANK.update({name: 2 for name in COMPOSITING})

BACKGROUND_TEXTURES = ("wood", "desk", "moire")


def _as_range(value, name: str) -> tuple[float, float]:
    if isinstance(value, (int, float)):
        return (float(value), float(value))
    lo, hi = (float(value[0]), float(value[1]))
    if hi < lo:
        raise AugmentError(f"{name}: range [{lo}, {hi}] is inverted")
    return (lo, hi)


@dataclass(frozen=True)
class Transform:
    """One transform with parameter distributions (scalars = fixed)."""

    name: str
    params: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.name not in TRANSFORM_NAMES:
            raise AugmentError(
                f"unknown transform {self.name!r}; expected one of {TRANSFORM_NAMES}")
        p = self.params
        if self.name == "perspective":
            sigma = float(p.get("corner_jitter_sigma", 0.02))
            if not 0 <= sigma <= MAX_CORNER_JITTER_SIGMA:
                raise AugmentError(
                    f"perspective corner jitter sigma {sigma} outside "
                    f"[0, {MAX_CORNER_JITTER_SIGMA}]")
        elif self.name == "bend":
            _as_range(p.get("amplitude", (2, 10)), "bend amplitude")
            lo, _ = _as_range(p.get("wavelength", (200, 800)), "bend wavelength")
            if lo <= 0:
                raise AugmentError("bend wavelength must be positive")
            if p.get("axis", "y") not in ("x", "y"):
                raise AugmentError("bend axis must be 'x' or 'y'")
        elif self.name == "wrinkle":
            n = int(p.get("grid_n", 5))
            if n < 2:
                raise AugmentError("wrinkle grid_n must be >= 2")
            _as_range(p.get("displacement_sigma", 2.0), "wrinkle sigma")
        elif self.name == "illumination":
            lo, hi = _as_range(p.get("gain", (0.7, 1.3)), "illumination gain")
            if lo <= 0:
                raise AugmentError(f"illumination gains must be > 0, got {lo}")
            if p.get("direction", "vertical") not in (
                    "horizontal", "vertical", "diagonal"):
                raise AugmentError("illumination direction must be "
                                   "horizontal, vertical, or diagonal")
        elif self.name == "exposure":
            lo, _ = _as_range(p.get("gamma", (0.8, 1.25)), "exposure gamma")
            if lo <= 0:
                raise AugmentError("exposure gamma must be > 0")
        elif self.name == "rotate":
            lo, hi = _as_range(p.get("angle", (-8, 8)), "rotate angle")
            # skew stays within +/-45; exact right-angle turns are allowed
            # separately as orientation flips
            right_angle = lo == hi and lo % 90 == 0
            if max(abs(lo), abs(hi)) > MAX_ROTATE_DEG and not right_angle:
                raise AugmentError(
                    f"rotate angle range [{lo}, {hi}] exceeds +/-{MAX_ROTATE_DEG} deg")
        elif self.name == "background":
            tex = p.get("texture", "desk")
            if tex not in BACKGROUND_TEXTURES:
                raise AugmentError(
                    f"unknown background texture {tex!r}; "
                    f"expected one of {BACKGROUND_TEXTURES}")
            lo, hi = _as_range(p.get("page_scale", (0.75, 0.95)), "page scale")
            if not 0 < lo <= hi <= 1:
                raise AugmentError("background page scale must be in (0, 1]")


@dataclass(frozen=True)
class AugmentationSpec:
    transforms: tuple[Transform, ...] = ()

    def validate(self) -> None:
        for t in self.transforms:
            t.validate()

    def to_dict(self) -> dict:
        return {"transforms": [{"name": t.name, **t.params}
                               for t in self.transforms]}

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationSpec":
        transforms = []
        for entry in d.get("transforms", []):
            entry = dict(entry)
            try:
                name = entry.pop("name")
            except KeyError:
                raise AugmentError(f"transform entry missing 'name': {entry}")
            transforms.append(Transform(name, entry))
        spec = cls(tuple(transforms))
        spec.validate()
        return spec


def default_spec() -> AugmentationSpec:
    """One mild transform per category; engine defaults, tuned by eye."""
    return AugmentationSpec((
        Transform("perspective", {"corner_jitter_sigma": 0.02}),
        Transform("bend", {"amplitude": (2, 8), "wavelength": (400, 900),
                           "axis": "y"}),
        Transform("rotate", {"angle": (-6, 6)}),
        Transform("illumination", {"gain": (0.75, 1.2),
                                   "direction": "diagonal"}),
        Transform("exposure", {"gamma": (0.85, 1.2)}),
        Transform("background", {"texture": "desk", "page_scale": (0.8, 0.95)}),
    ))


# ---------------------------------------------------------------------------
# Forward point map
# ---------------------------------------------------------------------------

def _bilinear_grid_sample(grid: np.ndarray, xs: np.ndarray, ys: np.ndarray,
                          size: tuple[int, int]) -> np.ndarray:
    """Sample an n×n control grid stretched over a (w, h) image at points.

    Half-pixel convention: control cell centers sit at ((j+0.5)/n)·w.
    """
    n = grid.shape[0]
    w, h = size
    gx = np.clip(xs / w * n - 0.5, 0, n - 1)
    gy = np.clip(ys / h * n - 0.5, 0, n - 1)
    x0 = np.floor(gx).astype(int)
    y0 = np.floor(gy).astype(int)
    x1 = np.minimum(x0 + 1, n - 1)
    y1 = np.minimum(y0 + 1, n - 1)
    fx = gx - x0
    fy = gy - y0
    return (grid[y0, x0] * (1 - fx) * (1 - fy)
            + grid[y0, x1] * fx * (1 - fy)
            + grid[y1, x0] * (1 - fx) * fy
            + grid[y1, x1] * fx * fy)


def _bend_offsets(coords: np.ndarray, amplitude: float, wavelength: float,
                  phase: float) -> np.ndarray:
    return amplitude * np.sin(2 * math.pi * coords / wavelength + phase)


@dataclass
class AugmentationRecord:
    """Sampled parameters plus a forward map from source page coordinates
    to output canvas coordinates."""

    transforms: list[dict] = field(default_factory=list)
    stages: list[dict] = field(default_factory=list)
    output_size: tuple[int, int] = (0, 0)

    def add_homography(self, matrix: np.ndarray) -> None:
        if self.stages and self.stages[-1]["type"] == "homography":
            prev = np.array(self.stages[-1]["matrix"], dtype=float)
            self.stages[-1]["matrix"] = (matrix @ prev).tolist()
        else:
            self.stages.append({"type": "homography",
                                "matrix": matrix.tolist()})

    def map_points(self, points) -> np.ndarray:
        """Map continuous source coordinates through every geometric stage."""
        pts = np.asarray(points, dtype=float).reshape(-1, 2).copy()
        for stage in self.stages:
            kind = stage["type"]
            if kind == "homography":
                m = np.array(stage["matrix"], dtype=float)
                ones = np.ones((len(pts), 1))
                hom = np.hstack([pts, ones]) @ m.T
                pts = hom[:, :2] / hom[:, 2:3]
            elif kind == "bend":
                a = stage["amplitude"]
                lam = stage["wavelength"]
                phase = stage["phase"]
                margin = stage["margin"]
                if stage["axis"] == "y":
                    pts[:, 1] += _bend_offsets(pts[:, 0], a, lam, phase) + margin
                else:
                    pts[:, 0] += _bend_offsets(pts[:, 1], a, lam, phase) + margin
            elif kind == "wrinkle":
                size = tuple(stage["size"])
                dx = np.array(stage["dx"], dtype=float)
                dy = np.array(stage["dy"], dtype=float)
                pts[:, 0] += _bilinear_grid_sample(dx, pts[:, 0], pts[:, 1], size)
                pts[:, 1] += _bilinear_grid_sample(dy, pts[:, 0], pts[:, 1], size)
            else:
                raise AugmentError(f"unknown map stage {kind!r}")
        return pts

    def map_pixels(self, pixels) -> np.ndarray:
        """Map integer pixel positions via their centers."""
        pts = np.asarray(pixels, dtype=float).reshape(-1, 2) + 0.5
        return self.map_points(pts) - 0.5

    def to_dict(self) -> dict:
        return {"transforms": self.transforms, "stages": self.stages,
                "output_size": list(self.output_size)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationRecord":
        return cls(transforms=list(d.get("transforms", [])),
                   stages=list(d.get("stages", [])),
                   output_size=tuple(d.get("output_size", (0, 0))))

    @classmethod
    def from_json(cls, text: str) -> "AugmentationRecord":
        return cls.from_dict(json.loads(text))


def remap_bboxes(blocks: Sequence[dict], record: AugmentationRecord) -> list[dict]:
    """Map sidecar bboxes through the record's forward map.

    Each new bbox is the axis-aligned hull of the four mapped corners,
    clipped to the output canvas; coordinates stay float.
    """
    out_w, out_h = record.output_size
    remapped = []
    for block in blocks:
        x, y, w, h = block["bbox"]
        corners = [(x, y), (x + w, y), (x + w, y + h), (x, y + h)]
        mapped = record.map_points(corners)
        x0 = float(np.clip(mapped[:, 0].min(), 0, out_w))
        x1 = float(np.clip(mapped[:, 0].max(), 0, out_w))
        y0 = float(np.clip(mapped[:, 1].min(), 0, out_h))
        y1 = float(np.clip(mapped[:, 1].max(), 0, out_h))
        new = dict(block)
        new["bbox"] = [x0, y0, x1 - x0, y1 - y0]
        remapped.append(new)
    return remapped


# ---------------------------------------------------------------------------
# Transform application
# ---------------------------------------------------------------------------

class _Pipeline:
    """Mutable image + page mask + record, threaded through the transforms."""

    def __init__(self, canvas: Canvas, seed: int) -> None:
        self.img = canvas.buf.copy()
        self.channels = canvas.channels
        self.mask = np.full((canvas.height, canvas.width), 255, dtype=np.uint8)
        self.record = AugmentationRecord(output_size=(canvas.width, canvas.height))
        self.rng = np.random.Generator(np.random.PCG64(seed))

    @property
    def size(self) -> tuple[int, int]:
        return (self.img.shape[1], self.img.shape[0])

    def note(self, name: str, params: dict) -> None:
        self.record.transforms.append({"name": name, "params": params})

    def warp_homography(self, matrix: np.ndarray, out_size: tuple[int, int]) -> None:
        # the record maps continuous page coordinates; cv2 indexes pixel
        # centers, half a pixel off, so warp with the conjugated matrix
        to_centers = np.array([[1, 0, 0.5], [0, 1, 0.5], [0, 0, 1.0]])
        from_centers = np.array([[1, 0, -0.5], [0, 1, -0.5], [0, 0, 1.0]])
        index_matrix = from_centers @ matrix @ to_centers
        self.img = cv2.warpPerspective(
            self.img, index_matrix, out_size, flags=cv2.INTER_LINEAR,
            borderMode=cv2.BORDER_CONSTANT, borderValue=PAPER)
        self.mask = cv2.warpPerspective(
            self.mask, index_matrix, out_size, flags=cv2.INTER_LINEAR,
            borderMode=cv2.BORDER_CONSTANT, borderValue=0)
        self.record.add_homography(matrix)
        self.record.output_size = out_size

    def remap(self, map_x: np.ndarray, map_y: np.ndarray) -> None:
        self.img = cv2.remap(self.img, map_x, map_y, cv2.INTER_LINEAR,
                             borderMode=cv2.BORDER_CONSTANT, borderValue=PAPER)
        self.mask = cv2.remap(self.mask, map_x, map_y, cv2.INTER_LINEAR,
                              borderMode=cv2.BORDER_CONSTANT, borderValue=0)


def _sample(rng: np.random.Generator, value, default) -> float:
    lo, hi = _as_range(value if value is not None else default, "param")
    if lo == hi:
        return lo
    return float(rng.uniform(lo, hi))


def _apply_perspective(p: _Pipeline, t: Transform) -> None:
    w, h = p.size
    sigma = float(t.params.get("corner_jitter_sigma", 0.02)) * min(w, h)
    src = np.array([[0, 0], [w, 0], [w, h], [0, h]], dtype=np.float32)
    for attempt in range(8):
        jitter = p.rng.normal(0.0, sigma, size=(4, 2)) if sigma else np.zeros((4, 2))
        dst = src + jitter.astype(np.float32)
        if _convex_quad(dst):
            break
    else:
        raise AugmentError(
            "perspective corners degenerate after 8 resampling attempts")
    shift = dst.min(axis=0)
    dst = dst - shift
    out_w = int(math.ceil(dst[:, 0].max()))
    out_h = int(math.ceil(dst[:, 1].max()))
    matrix = cv2.getPerspectiveTransform(src, dst).astype(float)
    p.note("perspective", {"corners": dst.tolist()})
    p.warp_homography(matrix, (max(out_w, 1), max(out_h, 1)))


def _convex_quad(q: np.ndarray) -> bool:
    signs = []
    for i in range(4):
        a, b, c = q[i], q[(i + 1) % 4], q[(i + 2) % 4]
        cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0])
        signs.append(cross)
    area2 = abs(sum(
        q[i][0] * q[(i + 1) % 4][1] - q[(i + 1) % 4][0] * q[i][1]
        for i in range(4)))
    return (all(s > 0 for s in signs) or all(s < 0 for s in signs)) and area2 > 1.0


def _apply_rotate(p: _Pipeline, t: Transform) -> None:
    angle = _sample(p.rng, t.params.get("angle"), (-8, 8))
    theta = math.radians(angle)
    c, s = math.cos(theta), math.sin(theta)
    if angle % 90 == 0:
        # quarter turns must be lossless; radians() noise (~1e-17) would
        # otherwise leak a border row through the ceil below
        c, s = float(round(c)), float(round(s))
    w, h = p.size
    # positive angle = clockwise on a y-down canvas
    corners = np.array([[0, 0], [w, 0], [w, h], [0, h]], dtype=float)
    rot = np.array([[c, -s], [s, c]])
    moved = corners @ rot.T
    shift = moved.min(axis=0)
    out_w = int(math.ceil((moved[:, 0] - shift[0]).max()))
    out_h = int(math.ceil((moved[:, 1] - shift[1]).max()))
    matrix = np.array([[c, -s, -shift[0]],
                       [s, c, -shift[1]],
                       [0, 0, 1.0]])
    p.note("rotate", {"angle_deg": angle})
    p.warp_homography(matrix, (out_w, out_h))


def _apply_bend(p: _Pipeline, t: Transform) -> None:
    w, h = p.size
    amplitude = _sample(p.rng, t.params.get("amplitude"), (2, 10))
    wavelength = _sample(p.rng, t.params.get("wavelength"), (200, 800))
    axis = t.params.get("axis", "y")
    phase = float(p.rng.uniform(0, 2 * math.pi))
    margin = int(math.ceil(abs(amplitude)))
    if axis == "y":
        out_w, out_h = w, h + 2 * margin
        xs = np.arange(out_w, dtype=np.float32) + 0.5
        offs = _bend_offsets(xs, amplitude, wavelength, phase) + margin
        map_x = np.tile(np.arange(out_w, dtype=np.float32), (out_h, 1))
        map_y = (np.arange(out_h, dtype=np.float32)[:, None]
                 - offs[None, :].astype(np.float32))
    else:
        out_w, out_h = w + 2 * margin, h
        ys = np.arange(out_h, dtype=np.float32) + 0.5
        offs = _bend_offsets(ys, amplitude, wavelength, phase) + margin
        map_y = np.tile(np.arange(out_h, dtype=np.float32)[:, None], (1, out_w))
        map_x = (np.arange(out_w, dtype=np.float32)[None, :]
                 - offs[:, None].astype(np.float32))
    p.note("bend", {"amplitude": amplitude, "wavelength": wavelength,
                    "axis": axis, "phase": phase})
    p.record.stages.append({
        "type": "bend", "axis": axis, "amplitude": amplitude,
        "wavelength": wavelength, "phase": phase, "margin": margin,
    })
    p.record.output_size = (out_w, out_h)
    p.remap(map_x, map_y)


def _apply_wrinkle(p: _Pipeline, t: Transform) -> None:
    w, h = p.size
    n = int(t.params.get("grid_n", 5))
    sigma = _sample(p.rng, t.params.get("displacement_sigma"), 2.0)
    dx = p.rng.normal(0.0, sigma, size=(n, n))
    dy = p.rng.normal(0.0, sigma, size=(n, n))
    dx[0, :] = dx[-1, :] = dx[:, 0] = dx[:, -1] = 0.0  # pin page borders
    dy[0, :] = dy[-1, :] = dy[:, 0] = dy[:, -1] = 0.0
    xs = np.arange(w, dtype=np.float32) + 0.5
    ys = np.arange(h, dtype=np.float32) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    full_dx = _bilinear_grid_sample(dx, gx, gy, (w, h)).astype(np.float32)
    full_dy = _bilinear_grid_sample(dy, gx, gy, (w, h)).astype(np.float32)
    # backward approximation of the recorded forward map; error is
    # O(|D||grad D|), far below a pixel for the allowed sigmas
    map_x = gx - 0.5 - full_dx
    map_y = gy - 0.5 - full_dy
    p.note("wrinkle", {"grid_n": n, "displacement_sigma": sigma})
    p.record.stages.append({
        "type": "wrinkle", "dx": dx.tolist(), "dy": dy.tolist(),
        "size": [w, h],
    })
    p.remap(map_x, map_y)


def _apply_illumination(p: _Pipeline, t: Transform) -> None:
    w, h = p.size
    g0 = _sample(p.rng, t.params.get("gain"), (0.7, 1.3))
    g1 = _sample(p.rng, t.params.get("gain"), (0.7, 1.3))
    direction = t.params.get("direction", "vertical")
    xs = np.linspace(0.0, 1.0, w, dtype=np.float32)[None, :]
    ys = np.linspace(0.0, 1.0, h, dtype=np.float32)[:, None]
    if direction == "horizontal":
        ramp = np.broadcast_to(xs, (h, w))
    elif direction == "vertical":
        ramp = np.broadcast_to(ys, (h, w))
    else:
        ramp = (xs + ys) / 2
    gain = (g0 + (g1 - g0) * ramp).astype(np.float32)
    if p.channels == 3:
        gain = gain[:, :, None]
    p.img = np.clip(p.img.astype(np.float32) * gain, 0, 255).astype(np.uint8)
    p.note("illumination", {"gain": [g0, g1], "direction": direction})


def _apply_exposure(p: _Pipeline, t: Transform) -> None:
    gamma = _sample(p.rng, t.params.get("gamma"), (0.8, 1.25))
    lut = np.clip(
        np.round(((np.arange(256) / 255.0) ** gamma) * 255.0), 0, 255
    ).astype(np.uint8)
    p.img = lut[p.img]
    p.note("exposure", {"gamma": gamma})


def _texture(name: str, w: int, h: int, channels: int,
             rng: np.random.Generator) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float32)
    if name == "wood":
        grain = np.sin(ys / 9.0 + 2.5 * np.sin(xs / 160.0))
        base = 120 + 25 * grain + rng.normal(0, 6, size=(h, w))
        rgb_scale = (1.05, 0.82, 0.55)
    elif name == "desk":
        cx, cy = w / 2, h / 2
        r = np.sqrt(((xs - cx) / w) ** 2 + ((ys - cy) / h) ** 2)
        base = 95 - 55 * r + rng.normal(0, 4, size=(h, w))
        rgb_scale = (0.9, 0.95, 1.05)
    else:  # moire: interference stripes, a stand-in for screen capture
        a = np.sin(2 * math.pi * (xs * 0.071 + ys * 0.018))
        b = np.sin(2 * math.pi * (xs * 0.0695 + ys * 0.021))
        base = 128 + 48 * a * b
        rgb_scale = (0.95, 1.0, 1.05)
    base = np.clip(base, 0, 255)
    if channels == 1:
        return base.astype(np.uint8)
    out = np.stack([np.clip(base * s, 0, 255) for s in rgb_scale], axis=-1)
    return out.astype(np.uint8)


def _apply_background(p: _Pipeline, t: Transform) -> None:
    w, h = p.size
    scale = _sample(p.rng, t.params.get("page_scale"), (0.75, 0.95))
    name = t.params.get("texture", "desk")
    out_w = int(math.ceil(w / scale))
    out_h = int(math.ceil(h / scale))
    ox = int(p.rng.integers(0, out_w - w + 1))
    oy = int(p.rng.integers(0, out_h - h + 1))
    canvas = _texture(name, out_w, out_h, p.channels, p.rng)
    window = canvas[oy:oy + h, ox:ox + w]
    inside = p.mask > 127
    window[inside] = p.img[inside]
    p.img = canvas
    new_mask = np.zeros((out_h, out_w), dtype=np.uint8)
    new_mask[oy:oy + h, ox:ox + w] = p.mask
    p.mask = new_mask
    p.note("background", {"texture": name, "page_scale": scale,
                          "offset": [ox, oy]})
    matrix = np.array([[1.0, 0.0, ox], [0.0, 1.0, oy], [0.0, 0.0, 1.0]])
    p.record.add_homography(matrix)
    p.record.output_size = (out_w, out_h)


_APPLIERS = {
    "perspective": _apply_perspective,
    "rotate": _apply_rotate,
    "bend": _apply_bend,
    "wrinkle": _apply_wrinkle,
    "illumination": _apply_illumination,
    "exposure": _apply_exposure,
    "background": _apply_background,
}


def augment(canvas: Canvas, spec: AugmentationSpec,
            seed: int = 0) -> tuple[Canvas, AugmentationRecord]:
    """Apply the spec's transforms (capture order: geometric, photometric,
    background) and return the new canvas plus the remapping record."""
    spec.validate()
    pipeline = _Pipeline(canvas, derive_seed("augment", seed))
    ordered = sorted(enumerate(spec.transforms),
                     key=lambda it: (_CATEGORY_RANK[it[1].name], it[0]))
    for _, transform in ordered:
        _APPLIERS[transform.name](pipeline, transform)
    out_w, out_h = pipeline.size
    pipeline.record.output_size = (out_w, out_h)
    out = Canvas(out_w, out_h, canvas.channels, pipeline.img)
    return out, pipeline.record
