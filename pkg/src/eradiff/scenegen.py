"""Procedural object/background scene pairs and the random-mask families.

A scene pair is a smooth background image, the same background with one
synthetic object (disc / regular polygon / radial blob) pasted after a random
scale in [0.5, 1.2] and rotation in [0, 360), and the exact binary footprint
of the paste.  Masks use the convention 1 = hole / erase region; the visible
(masked) image is ``image * (1 - mask)``.

Generation is a pure function of (seed, config): all draws come from Philox
streams through uniform doubles only, so outputs are byte-identical across
runs and platforms.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .rng import choice, stream, uniform, uniform_int

OBJECT_KINDS = ("disc", "polygon", "blob")
MASK_KINDS = ("rectangle", "ellipse", "irregular", "combined")

_PLACEMENT_RETRIES = 20


class SceneError(RuntimeError):
    """Scene or mask synthesis could not satisfy its constraints."""


@dataclass(frozen=True)
class SceneConfig:
    size: int = 32
    channels: int = 3
    area_min: float = 0.02
    area_max: float = 0.35
    scale_range: tuple[float, float] = (0.5, 1.2)
    background_band: tuple[float, float] = (0.18, 0.82)

    def validate(self) -> "SceneConfig":
        if self.size < 16:
            raise ValueError(f"image size must be at least 16, got {self.size}")
        if self.channels < 1:
            raise ValueError("need at least one channel")
        if not 0.0 < self.area_min < self.area_max < 1.0:
            raise ValueError(f"bad mask area bounds [{self.area_min}, {self.area_max}]")
        lo, hi = self.scale_range
        if not 0.0 < lo <= hi:
            raise ValueError(f"bad scale range {self.scale_range}")
        return self


@dataclass
class TransformLog:
    """How the pasted object was built; enough to audit a scene."""

    seed: int
    shape_kind: str
    sides: int
    radius: float
    scale: float
    rotation_deg: float
    paste_yx: tuple[int, int]
    footprint_hw: tuple[int, int]
    attempts: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["paste_yx"] = list(d["paste_yx"])
        d["footprint_hw"] = list(d["footprint_hw"])
        return d


@dataclass
class ScenePair:
    """Background image, object-augmented image, and the exact erase mask."""

    background: np.ndarray  # (C, S, S) in [0, 1]
    composite: np.ndarray  # (C, S, S) in [0, 1]
    mask: np.ndarray  # (S, S) of {0.0, 1.0}; 1 = hole / object footprint
    log: TransformLog

    @property
    def seed(self) -> int:
        return self.log.seed

    def masked_image(self, image: np.ndarray | None = None) -> np.ndarray:
        """Visible scene: ``image * (1 - mask)``; defaults to the composite."""
        img = self.composite if image is None else image
        return img * (1.0 - self.mask)[None, :, :]


# ---------------------------------------------------------------------------
# background and source objects
# ---------------------------------------------------------------------------


def _bilinear_upsample(grid: np.ndarray, size: int) -> np.ndarray:
    gh, gw = grid.shape
    ys = np.linspace(0.0, gh - 1.0, size)
    xs = np.linspace(0.0, gw - 1.0, size)
    y0 = np.clip(np.floor(ys).astype(int), 0, gh - 2)
    x0 = np.clip(np.floor(xs).astype(int), 0, gw - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = grid[np.ix_(y0, x0)]
    b = grid[np.ix_(y0, x0 + 1)]
    c = grid[np.ix_(y0 + 1, x0)]
    d = grid[np.ix_(y0 + 1, x0 + 1)]
    return a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx


def _background(rng: np.random.Generator, cfg: SceneConfig) -> np.ndarray:
    s = cfg.size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) / max(s - 1, 1)
    ang = uniform(rng, 0.0, 2.0 * math.pi)
    ramp = (xx * math.cos(ang) + yy * math.sin(ang)) * 0.5
    img = np.empty((cfg.channels, s, s), dtype=np.float64)
    noise = _bilinear_upsample(rng.random((5, 5)) - 0.5, s)
    for ch in range(cfg.channels):
        base = uniform(rng, 0.35, 0.65)
        grad_amp = uniform(rng, -0.35, 0.35)
        noise_amp = uniform(rng, 0.08, 0.22)
        img[ch] = base + grad_amp * (ramp - ramp.mean()) + noise_amp * noise
    lo, hi = cfg.background_band
    return np.clip(img, lo, hi)


def _object_color(rng: np.random.Generator, cfg: SceneConfig) -> np.ndarray:
    color = np.empty(cfg.channels, dtype=np.float64)
    for ch in range(cfg.channels):
        if rng.random() < 0.5:
            color[ch] = uniform(rng, 0.0, 0.10)
        else:
            color[ch] = uniform(rng, 0.90, 1.0)
    return color


def _render_source(rng: np.random.Generator, cfg: SceneConfig) -> tuple[np.ndarray, np.ndarray, str, int, float]:
    """Draw a source object on its own canvas: (footprint, texture, kind, sides, radius)."""
    kind = choice(rng, list(OBJECT_KINDS))
    unit = cfg.size / 32.0  # radii below are tuned for 32x32 and scale with size
    if kind == "disc":
        sides, radius = 0, uniform(rng, 5.6, 8.6) * unit
        reach = radius
    elif kind == "polygon":
        sides = uniform_int(rng, 3, 6)
        radius_range = {3: (8.6, 12.0), 4: (7.0, 10.8), 5: (6.4, 9.9), 6: (6.1, 9.5)}[sides]
        radius = uniform(rng, *radius_range) * unit
        reach = radius
    else:
        sides, radius = 0, uniform(rng, 5.8, 7.8) * unit
        reach = radius * 1.3

    side = 2 * math.ceil(reach) + 3
    c = (side - 1) / 2.0
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    dy, dx = yy - c, xx - c

    if kind == "disc":
        fp = dy * dy + dx * dx <= radius * radius
    elif kind == "polygon":
        phase = uniform(rng, 0.0, 2.0 * math.pi)
        angles = phase + 2.0 * math.pi * np.arange(sides) / sides
        vy, vx = radius * np.sin(angles), radius * np.cos(angles)
        fp = np.ones((side, side), dtype=bool)
        for m in range(sides):
            ey, ex = vy[(m + 1) % sides] - vy[m], vx[(m + 1) % sides] - vx[m]
            fp &= ex * (dy - vy[m]) - ey * (dx - vx[m]) >= 0.0
    else:
        k1, k2 = uniform_int(rng, 2, 4), uniform_int(rng, 5, 7)
        a1, a2 = uniform(rng, 0.08, 0.2), uniform(rng, 0.04, 0.1)
        p1, p2 = uniform(rng, 0, 2 * math.pi), uniform(rng, 0, 2 * math.pi)
        theta = np.arctan2(dy, dx)
        rb = radius * (1.0 + a1 * np.sin(k1 * theta + p1) + a2 * np.sin(k2 * theta + p2))
        fp = np.sqrt(dy * dy + dx * dx) <= rb

    color = _object_color(rng, cfg)
    texture = np.clip(
        color[:, None, None] + 0.1 * (rng.random((cfg.channels, side, side)) - 0.5), 0.0, 1.0
    )
    return fp, texture, kind, sides, radius


# ---------------------------------------------------------------------------
# object transforms
# ---------------------------------------------------------------------------


def _nn_resize(footprint: np.ndarray, texture: np.ndarray, scale: float) -> tuple[np.ndarray, np.ndarray]:
    h, w = footprint.shape
    oh, ow = max(1, round(h * scale)), max(1, round(w * scale))
    iy = np.floor((np.arange(oh) + 0.5) * h / oh).astype(int)
    ix = np.floor((np.arange(ow) + 0.5) * w / ow).astype(int)
    return footprint[np.ix_(iy, ix)], texture[:, iy[:, None], ix[None, :]]


def _nn_rotate(footprint: np.ndarray, texture: np.ndarray, deg: float) -> tuple[np.ndarray, np.ndarray]:
    deg = deg % 360.0
    if deg == 0.0:
        return footprint, texture
    if deg in (90.0, 180.0, 270.0):
        k = int(deg) // 90
        return np.rot90(footprint, k).copy(), np.ascontiguousarray(np.rot90(texture, k, axes=(1, 2)))
    h, w = footprint.shape
    side = math.ceil(math.hypot(h, w)) + 1
    cy_in, cx_in = (h - 1) / 2.0, (w - 1) / 2.0
    cy_out = cx_out = (side - 1) / 2.0
    rad = math.radians(deg)
    cos_t, sin_t = math.cos(rad), math.sin(rad)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    dy, dx = yy - cy_out, xx - cx_out
    # inverse map: rotate output coordinates back into the source frame
    sy = np.rint(cos_t * dy + sin_t * dx + cy_in).astype(int)
    sx = np.rint(-sin_t * dy + cos_t * dx + cx_in).astype(int)
    valid = (sy >= 0) & (sy < h) & (sx >= 0) & (sx < w)
    syc, sxc = np.clip(sy, 0, h - 1), np.clip(sx, 0, w - 1)
    fp = np.where(valid, footprint[syc, sxc], False)
    tex = np.where(valid[None], texture[:, syc, sxc], 0.0)
    return fp, tex


def _crop_to_footprint(footprint: np.ndarray, texture: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.nonzero(footprint)
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    return footprint[y0:y1, x0:x1].copy(), np.ascontiguousarray(texture[:, y0:y1, x0:x1])


def transform_object(
    footprint: np.ndarray, texture: np.ndarray, scale: float, rotation_deg: float
) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-neighbour rescale + rotate; footprints stay binary.

    Rotations that are multiples of 90 degrees are exact array flips, so
    rotating by 180 twice reproduces the input pixel for pixel.
    """
    if scale <= 0.0:
        raise ValueError(f"scale must be positive, got {scale}")
    if footprint.shape != texture.shape[1:]:
        raise ValueError(f"footprint {footprint.shape} does not match texture {texture.shape}")
    fp, tex = footprint.astype(bool), texture
    if scale != 1.0:
        fp, tex = _nn_resize(fp, tex, scale)
    fp, tex = _nn_rotate(fp, tex, rotation_deg)
    if not fp.any():
        raise SceneError(f"object footprint became empty after scale={scale} rotation={rotation_deg}")
    return fp, tex


# ---------------------------------------------------------------------------
# scene assembly
# ---------------------------------------------------------------------------


def generate_scene(seed: int, cfg: SceneConfig | None = None) -> ScenePair:
    """Pure function of (seed, config); see module docstring for the recipe."""
    cfg = (cfg or SceneConfig()).validate()
    s = cfg.size
    bg_rng = stream(seed, "background")
    background = _background(bg_rng, cfg)

    for attempt in range(_PLACEMENT_RETRIES):
        rng = stream(seed, "object", attempt)
        fp0, tex0, kind, sides, radius = _render_source(rng, cfg)
        scale_f = uniform(rng, *cfg.scale_range)
        rotation = uniform(rng, 0.0, 360.0)
        try:
            fp, tex = transform_object(fp0, tex0, scale_f, rotation)
        except SceneError:
            continue
        fp, tex = _crop_to_footprint(fp, tex)
        h, w = fp.shape
        if h > s or w > s:
            continue
        area = fp.sum() / (s * s)
        if not cfg.area_min <= area <= cfg.area_max:
            continue
        oy = uniform_int(rng, 0, s - h)
        ox = uniform_int(rng, 0, s - w)
        mask = np.zeros((s, s), dtype=np.float64)
        mask[oy : oy + h, ox : ox + w][fp] = 1.0
        composite = background.copy()
        composite[:, oy : oy + h, ox : ox + w][:, fp] = tex[:, fp]
        log = TransformLog(
            seed=int(seed), shape_kind=kind, sides=sides, radius=float(radius),
            scale=float(scale_f), rotation_deg=float(rotation), paste_yx=(int(oy), int(ox)),
            footprint_hw=(int(h), int(w)), attempts=attempt + 1,
        )
        return ScenePair(background=background, composite=composite, mask=mask, log=log)
    raise SceneError(f"could not place an object within {_PLACEMENT_RETRIES} attempts (seed={seed})")


def generate_scenes(seeds, cfg: SceneConfig | None = None) -> list[ScenePair]:
    return [generate_scene(s, cfg) for s in seeds]


# ---------------------------------------------------------------------------
# random-mask families (baseline training regimes)
# ---------------------------------------------------------------------------


@dataclass
class MaskSpec:
    """One renderable mask: a family name plus explicit geometry."""

    kind: str
    seed: int = 0
    geometry: dict = field(default_factory=dict)
    parts: list["MaskSpec"] = field(default_factory=list)

    def validate(self) -> "MaskSpec":
        if self.kind not in MASK_KINDS:
            raise ValueError(f"unknown mask kind {self.kind!r}; valid: {MASK_KINDS}")
        if self.kind == "ellipse" and (
            self.geometry.get("ry", 0.0) <= 0.0 or self.geometry.get("rx", 0.0) <= 0.0
        ):
            raise ValueError("ellipse radii must be positive (mask would be empty)")
        if self.kind == "combined" and len(self.parts) < 2:
            raise ValueError("combined mask needs at least two parts")
        return self


def random_mask(spec: MaskSpec, size: int) -> np.ndarray:
    """Render the spec to a binary (size, size) mask; raises if it comes out empty."""
    spec.validate()
    mask = _render_mask(spec, size)
    if mask.sum() == 0:
        raise SceneError(f"mask spec rendered empty: {spec.kind} {spec.geometry}")
    return mask


def _render_mask(spec: MaskSpec, size: int) -> np.ndarray:
    g = spec.geometry
    if spec.kind == "rectangle":
        mask = np.zeros((size, size), dtype=np.float64)
        y0, x0 = int(g["y0"]), int(g["x0"])
        mask[max(y0, 0) : min(y0 + int(g["h"]), size), max(x0, 0) : min(x0 + int(g["w"]), size)] = 1.0
        return mask
    if spec.kind == "ellipse":
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
        inside = ((yy - g["cy"]) / g["ry"]) ** 2 + ((xx - g["cx"]) / g["rx"]) ** 2 <= 1.0
        return inside.astype(np.float64)
    if spec.kind == "irregular":
        return _random_walk_brush(spec, size)
    mask = np.zeros((size, size), dtype=np.float64)
    for part in spec.parts:
        mask = np.maximum(mask, _render_mask(part, size))
    return mask


def _random_walk_brush(spec: MaskSpec, size: int) -> np.ndarray:
    g = spec.geometry
    rng = stream(spec.seed, "brush")
    steps = int(g.get("steps", 2 * size))
    brush = float(g.get("brush", 2.0))
    y = float(g.get("y0", uniform(rng, 0.25 * size, 0.75 * size)))
    x = float(g.get("x0", uniform(rng, 0.25 * size, 0.75 * size)))
    ang = uniform(rng, 0.0, 2.0 * math.pi)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(steps):
        mask |= (yy - y) ** 2 + (xx - x) ** 2 <= brush * brush
        ang += uniform(rng, -0.9, 0.9)
        y = min(max(y + 1.2 * math.sin(ang), brush), size - 1 - brush)
        x = min(max(x + 1.2 * math.cos(ang), brush), size - 1 - brush)
    return mask.astype(np.float64)


def sample_mask_spec(rng: np.random.Generator, size: int, kind: str | None = None) -> MaskSpec:
    """Random geometry for one of the mask families, sized for the given image."""
    kind = kind or choice(rng, list(MASK_KINDS))
    seed = uniform_int(rng, 0, 2**31 - 1)
    if kind == "rectangle":
        h = uniform_int(rng, max(3, int(0.15 * size)), int(0.45 * size))
        w = uniform_int(rng, max(3, int(0.15 * size)), int(0.45 * size))
        geometry = {
            "y0": uniform_int(rng, 0, size - h), "x0": uniform_int(rng, 0, size - w),
            "h": h, "w": w,
        }
    elif kind == "ellipse":
        ry = uniform(rng, 0.08 * size, 0.22 * size)
        rx = uniform(rng, 0.08 * size, 0.22 * size)
        geometry = {
            "cy": uniform(rng, ry, size - 1 - ry), "cx": uniform(rng, rx, size - 1 - rx),
            "ry": ry, "rx": rx,
        }
    elif kind == "irregular":
        geometry = {
            "steps": uniform_int(rng, size, 3 * size),
            "brush": uniform(rng, 1.4, 0.09 * size),
            "y0": uniform(rng, 0.2 * size, 0.8 * size),
            "x0": uniform(rng, 0.2 * size, 0.8 * size),
        }
    else:
        parts = [
            sample_mask_spec(rng, size, kind=choice(rng, ["rectangle", "ellipse", "irregular"]))
            for _ in range(uniform_int(rng, 2, 3))
        ]
        return MaskSpec(kind="combined", seed=seed, parts=parts).validate()
    return MaskSpec(kind=kind, seed=seed, geometry=geometry).validate()


def background_constrained_mask(pair: ScenePair, spec: MaskSpec) -> np.ndarray:
    """A mask of the requested family lying entirely in the scene's background.

    Retries with re-derived geometry when the candidate touches the object
    footprint; fails after 20 attempts.
    """
    size = pair.mask.shape[0]
    candidate = random_mask(spec, size)
    for attempt in range(_PLACEMENT_RETRIES):
        if float((candidate * pair.mask).sum()) == 0.0:
            return candidate
        rng = stream(spec.seed, "bg_retry", attempt)
        candidate = random_mask(sample_mask_spec(rng, size, kind=spec.kind), size)
    raise SceneError(
        f"no background-only {spec.kind} mask found in {_PLACEMENT_RETRIES} attempts (seed={spec.seed})"
    )
