"""Procedural 2-D scenes, categorized edits, pair preprocessing and
non-semantic augmentations.

Rasters are ``uint8`` numpy arrays of shape ``[H, W, 3]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import kernels

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (220, 40, 40),
    "green": (40, 170, 60),
    "blue": (40, 70, 220),
    "yellow": (235, 210, 40),
    "purple": (140, 50, 190),
    "cyan": (40, 200, 210),
    "orange": (240, 130, 30),
    "black": (25, 25, 25),
}
TEXTURES = ("solid", "striped")
SIZES = ("small", "large")
RADIUS = {"small": 0.09, "large": 0.14}
BACKGROUNDS = ((200, 200, 200), (215, 205, 185), (190, 205, 215))
CATEGORIES = ("Color", "Texture", "Move", "Add", "Drop", "Same")

MARGIN = 0.05  # keeps objects inside the canvas under camera jitter
GAP = 0.02  # extra clearance between objects
MOVE_MIN = 0.15
MAX_RETRIES = 1000
SQUARE_HALF = 0.7  # half-side of a square, as a fraction of its radius
STRIPE_PX = 2


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    texture: str
    center: tuple[float, float]
    size: str

    @property
    def radius(self) -> float:
        return RADIUS[self.size]

    def to_dict(self) -> dict:
        return {
            "shape": self.shape,
            "color": self.color,
            "texture": self.texture,
            "center": list(self.center),
            "size": self.size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> SceneObject:
        return cls(d["shape"], d["color"], d["texture"], tuple(d["center"]), d["size"])


@dataclass(frozen=True)
class Scene:
    background: int
    objects: tuple[SceneObject, ...]

    def to_dict(self) -> dict:
        return {"background": self.background, "objects": [o.to_dict() for o in self.objects]}

    @classmethod
    def from_dict(cls, d: dict) -> Scene:
        return cls(d["background"], tuple(SceneObject.from_dict(o) for o in d["objects"]))


@dataclass(frozen=True)
class EditInstruction:
    category: str
    target: int | None = None
    value: object = None
    text: str = ""


class SceneError(ValueError):
    pass


def _fits(obj: SceneObject) -> bool:
    r = obj.radius + MARGIN
    x, y = obj.center
    return r <= x <= 1 - r and r <= y <= 1 - r


def _clear(obj: SceneObject, others) -> bool:
    for o in others:
        d = math.dist(obj.center, o.center)
        if d <= obj.radius + o.radius + GAP:
            return False
    return True


def validate_scene(scene: Scene, min_objects: int = 1, max_objects: int = 5) -> None:
    """Raise :class:`SceneError` describing the first violated invariant."""
    n = len(scene.objects)
    if not min_objects <= n <= max_objects:
        raise SceneError(f"scene has {n} objects, expected {min_objects}..{max_objects}")
    if not 0 <= scene.background < len(BACKGROUNDS):
        raise SceneError(f"unknown background id {scene.background}")
    for i, o in enumerate(scene.objects):
        if o.shape not in SHAPES or o.color not in COLORS or o.texture not in TEXTURES or o.size not in SIZES:
            raise SceneError(f"object {i} has an unknown attribute: {o}")
        if not _fits(o):
            raise SceneError(f"object {i} at {o.center} leaves the canvas")
        for j in range(i):
            if math.dist(o.center, scene.objects[j].center) <= o.radius + scene.objects[j].radius:
                raise SceneError(f"objects {j} and {i} overlap")


def _random_object(rng: np.random.Generator, others) -> SceneObject:
    for _ in range(MAX_RETRIES):
        size = SIZES[rng.integers(len(SIZES))]
        r = RADIUS[size] + MARGIN
        center = (float(rng.uniform(r, 1 - r)), float(rng.uniform(r, 1 - r)))
        obj = SceneObject(
            shape=SHAPES[rng.integers(len(SHAPES))],
            color=list(COLORS)[rng.integers(len(COLORS))],
            texture=TEXTURES[rng.integers(len(TEXTURES))],
            center=center,
            size=size,
        )
        if _clear(obj, others):
            return obj
    raise SceneError(f"could not place an object after {MAX_RETRIES} attempts")


def sample_scene(rng: np.random.Generator, min_objects: int = 2, max_objects: int = 5) -> Scene:
    for _ in range(MAX_RETRIES):
        n = int(rng.integers(min_objects, max_objects + 1))
        objs: list[SceneObject] = []
        try:
            for _ in range(n):
                objs.append(_random_object(rng, objs))
        except SceneError:
            continue
        return Scene(int(rng.integers(len(BACKGROUNDS))), tuple(objs))
    raise SceneError("could not sample a scene")


def move_direction(old: tuple[float, float], new: tuple[float, float]) -> str:
    """Dominant-axis direction of a displacement (image y grows downward)."""
    dx, dy = new[0] - old[0], new[1] - old[1]
    if abs(dx) >= abs(dy):
        return "right" if dx > 0 else "left"
    return "down" if dy > 0 else "up"


def sample_edit(rng: np.random.Generator, category: str, scene: Scene) -> EditInstruction:
    """Draw a random edit of ``category`` that keeps the scene valid."""
    from .captions import caption_template

    if category not in CATEGORIES:
        raise ValueError(f"unknown edit category {category!r}")
    objs = scene.objects
    n = len(objs)
    if category == "Drop" and n < 2:
        raise SceneError("Drop needs at least 2 objects")
    if category == "Add" and n > 4:
        raise SceneError("Add needs at most 4 objects")

    for _ in range(MAX_RETRIES):
        if category == "Same":
            edit = EditInstruction("Same")
        elif category == "Add":
            try:
                obj = _random_object(rng, objs)
            except SceneError:
                continue
            edit = EditInstruction("Add", None, obj)
        else:
            target = int(rng.integers(n))
            old = objs[target]
            if category == "Color":
                choices = [c for c in COLORS if c != old.color]
                edit = EditInstruction("Color", target, choices[rng.integers(len(choices))])
            elif category == "Texture":
                edit = EditInstruction("Texture", target, "striped" if old.texture == "solid" else "solid")
            elif category == "Drop":
                edit = EditInstruction("Drop", target)
            else:
                r = old.radius + MARGIN
                new = (float(rng.uniform(r, 1 - r)), float(rng.uniform(r, 1 - r)))
                dx, dy = abs(new[0] - old.center[0]), abs(new[1] - old.center[1])
                if math.hypot(dx, dy) < MOVE_MIN or max(dx, dy) < 2 * min(dx, dy):
                    continue
                moved = replace(old, center=new)
                if not _clear(moved, objs[:target] + objs[target + 1 :]):
                    continue
                edit = EditInstruction("Move", target, new)
        try:
            edited = apply_edit(scene, edit)
            validate_scene(edited)
        except SceneError:
            continue
        return replace(edit, text=caption_template(edit, scene))
    raise SceneError(f"could not sample a valid {category} edit after {MAX_RETRIES} attempts")


def apply_edit(scene: Scene, edit: EditInstruction) -> Scene:
    objs = list(scene.objects)
    cat = edit.category
    if cat == "Same":
        return scene
    if cat == "Add":
        return Scene(scene.background, tuple(objs + [edit.value]))
    if edit.target is None or not 0 <= edit.target < len(objs):
        raise SceneError(f"{cat} edit targets object {edit.target}, scene has {len(objs)}")
    old = objs[edit.target]
    if cat == "Color":
        objs[edit.target] = replace(old, color=edit.value)
    elif cat == "Texture":
        objs[edit.target] = replace(old, texture=edit.value)
    elif cat == "Move":
        objs[edit.target] = replace(old, center=tuple(edit.value))
    elif cat == "Drop":
        del objs[edit.target]
    else:
        raise ValueError(f"unknown edit category {cat!r}")
    return Scene(scene.background, tuple(objs))


# -- rendering -------------------------------------------------------------
def _shape_mask(obj: SceneObject, xs: np.ndarray, ys: np.ndarray, cx: float, cy: float, r: float) -> np.ndarray:
    dx, dy = xs - cx, ys - cy
    if obj.shape == "circle":
        return dx * dx + dy * dy <= r * r
    if obj.shape == "square":
        h = SQUARE_HALF * r
        return (np.abs(dx) <= h) & (np.abs(dy) <= h)
    # upward equilateral triangle inscribed in the circle of radius r
    s3 = math.sqrt(3.0)
    return (dy <= r / 2) & (s3 * dx - dy <= r) & (-s3 * dx - dy <= r)


def render(scene: Scene, jitter_seed: int | None = None, side: int = 48) -> np.ndarray:
    """Rasterize ``scene`` at ``side`` x ``side``.

    ``jitter_seed`` draws a global brightness offset in [-8, 8] and a camera
    translation in [-2, 2] px; ``None`` renders without jitter.
    """
    bright, ox, oy = 0, 0, 0
    if jitter_seed is not None:
        jr = np.random.default_rng(jitter_seed)
        bright = int(jr.integers(-8, 9))
        ox, oy = (int(v) for v in jr.integers(-2, 3, size=2))
    img = np.empty((side, side, 3), dtype=np.int16)
    img[:] = BACKGROUNDS[scene.background]
    ys, xs = np.mgrid[0:side, 0:side].astype(np.float64) + 0.5
    for obj in scene.objects:
        cx = obj.center[0] * side + ox
        cy = obj.center[1] * side + oy
        r = obj.radius * side
        mask = _shape_mask(obj, xs, ys, cx, cy, r)
        color = np.array(COLORS[obj.color], dtype=np.int16)
        if obj.texture == "striped":
            band = (np.floor((xs - (cx - r)) / STRIPE_PX).astype(np.int64) % 2) == 1
            img[mask & ~band] = color
            img[mask & band] = 255 - (255 - color) // 3
        else:
            img[mask] = color
    return np.clip(img + bright, 0, 255).astype(np.uint8)


# -- pair preprocessing ----------------------------------------------------
def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resampling, rounded to nearest, uint8 out."""
    return kernels.resize_bilinear(np.ascontiguousarray(img, dtype=np.uint8), out_h, out_w)


def concat_and_resize(img_ref: np.ndarray, img_mod: np.ndarray, out_side: int = 64) -> np.ndarray:
    """Stack reference on top of modified, then stretch to a square."""
    if img_ref.shape != img_mod.shape:
        raise ValueError(f"pair dimensions differ: {img_ref.shape} vs {img_mod.shape}")
    return resize_bilinear(np.concatenate([img_ref, img_mod], axis=0), out_side, out_side)


# -- augmentation ----------------------------------------------------------
def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(math.ceil(3 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    return kernels.blur_separable(np.ascontiguousarray(img, dtype=np.uint8), gaussian_kernel(sigma))


def quantize(img: np.ndarray, levels: int) -> np.ndarray:
    """Uniform per-channel quantization to ``levels`` levels (bin centres)."""
    step = 256 // levels
    return np.minimum((img // step) * step + step // 2, 255).astype(np.uint8)


def augment(
    img: np.ndarray,
    rng: np.random.Generator,
    p_blur: float = 0.5,
    p_quant: float = 0.5,
    sigma_range: tuple[float, float] = (0.3, 1.0),
    levels: tuple[int, ...] = (16, 32),
) -> np.ndarray:
    """Blur and/or quantize; never geometric or colour-semantic.

    Random draws happen in a fixed order regardless of which transforms fire,
    so a shared ``rng`` stays aligned across calls.
    """
    u_blur, sigma, u_quant, q = rng.random(), rng.uniform(*sigma_range), rng.random(), rng.integers(len(levels))
    out = img
    if u_blur < p_blur:
        out = gaussian_blur(out, sigma)
    if u_quant < p_quant:
        out = quantize(out, levels[q])
    return out


# -- PPM I/O ---------------------------------------------------------------
def write_ppm(path, img: np.ndarray) -> None:
    img = np.ascontiguousarray(img, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM needs an [H, W, 3] raster, got {img.shape}")
    h, w, _ = img.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + img.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P6" or fields[3] != b"255":
        raise ValueError(f"{path}: not a binary P6 PPM with maxval 255")
    w, h = int(fields[1]), int(fields[2])
    body = raw[pos + 1 :]
    if len(body) != w * h * 3:
        raise ValueError(f"{path}: expected {w * h * 3} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()
