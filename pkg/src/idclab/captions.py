"""Caption templates, rule-based paraphrases and template inversion.

Every caption, canonical or paraphrased, is generated from a small table of
phrasings per edit category, and every phrasing compiles to a regex so any
caption maps back to its semantic frame ``(category, object, value)``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .imaging import COLORS, SHAPES, SIZES, TEXTURES, EditInstruction, Scene, move_direction

DIRECTIONS = ("left", "right", "up", "down")

# The first phrasing of each category is canonical.  The rest come from two
# rule families: verb/synonym substitution (turned -> became / changed to,
# removed -> deleted / dropped, ...) and clause reordering ("the color of
# the X changed to Y", "Y is the new color of the X").
PHRASINGS: dict[str, tuple[str, ...]] = {
    "Color": (
        "the {obj} turned {value}",
        "the {obj} became {value}",
        "the {obj} changed to {value}",
        "the {obj} is now {value}",
        "the color of the {obj} changed to {value}",
        "{value} is the new color of the {obj}",
    ),
    "Texture": (
        "the {obj} turned {value}",
        "the {obj} became {value}",
        "the {obj} changed to {value}",
        "the {obj} is now {value}",
        "the texture of the {obj} changed to {value}",
        "{value} is the new texture of the {obj}",
    ),
    "Move": (
        "the {obj} moved {value}",
        "the {obj} was moved {value}",
        "the {obj} shifted {value}",
        "the {obj} went {value}",
        "the position of the {obj} shifted {value}",
        "{value} is where the {obj} moved",
    ),
    "Add": (
        "a {obj} was added",
        "a {obj} appeared",
        "someone added a {obj}",
        "there is a new {obj}",
        "a new {obj} was placed in the scene",
        "a {obj} has been added",
    ),
    "Drop": (
        "the {obj} was removed",
        "the {obj} was deleted",
        "the {obj} was dropped",
        "the {obj} disappeared",
        "someone removed the {obj}",
        "the {obj} is no longer there",
    ),
    "Same": (
        "no change was made",
        "nothing changed",
        "there is no change",
        "the scene is unchanged",
        "nothing was changed",
        "the two images are identical",
    ),
}

VALUE_WORDS = {
    "Color": tuple(COLORS),
    "Texture": TEXTURES,
    "Move": DIRECTIONS,
}


@dataclass(frozen=True)
class CaptionFrame:
    """What a caption asserts, independent of its wording."""

    category: str
    size: str | None = None
    texture: str | None = None
    shape: str | None = None
    value: str | None = None

    @property
    def obj(self) -> str:
        return f"{self.size} {self.texture} {self.shape}"


def _alt(words) -> str:
    return "|".join(sorted(words, key=len, reverse=True))


_OBJ_RE = rf"(?P<size>{_alt(SIZES)}) (?P<texture>{_alt(TEXTURES)}) (?P<shape>{_alt(SHAPES)})"


def _compile(category: str, phrasing: str) -> re.Pattern:
    pat = re.escape(phrasing).replace(r"\{obj\}", _OBJ_RE)
    if category in VALUE_WORDS:
        pat = pat.replace(r"\{value\}", rf"(?P<value>{_alt(VALUE_WORDS[category])})")
    return re.compile(rf"^{pat}$")


_PATTERNS = [(cat, _compile(cat, ph)) for cat, phs in PHRASINGS.items() for ph in phs]


def frame_of(edit: EditInstruction, scene: Scene) -> CaptionFrame:
    cat = edit.category
    if cat == "Same":
        return CaptionFrame("Same")
    if cat == "Add":
        o = edit.value
        return CaptionFrame("Add", o.size, o.texture, o.shape)
    o = scene.objects[edit.target]
    value = None
    if cat in ("Color", "Texture"):
        value = edit.value
    elif cat == "Move":
        value = move_direction(o.center, tuple(edit.value))
    return CaptionFrame(cat, o.size, o.texture, o.shape, value)


def render_frame(frame: CaptionFrame, phrasing: int = 0) -> str:
    tpl = PHRASINGS[frame.category][phrasing]
    return tpl.format(obj=frame.obj, value=frame.value)


def caption_template(edit: EditInstruction, scene: Scene) -> str:
    """Canonical lowercase caption for ``edit`` applied to ``scene``."""
    return render_frame(frame_of(edit, scene), 0)


def parse_caption(caption: str) -> CaptionFrame:
    """Invert any templated caption back to its frame; ``ValueError`` if none fits."""
    text = " ".join(caption.lower().split())
    for cat, pat in _PATTERNS:
        m = pat.match(text)
        if m:
            g = m.groupdict()
            return CaptionFrame(cat, g.get("size"), g.get("texture"), g.get("shape"), g.get("value"))
    raise ValueError(f"caption does not match any template: {caption!r}")


def paraphrase(caption: str, k: int, rng: np.random.Generator) -> list[str]:
    """``k`` distinct rewordings of ``caption`` (never the caption itself)."""
    if k == 0:
        return []
    frame = parse_caption(caption)
    pool = []
    for i in range(len(PHRASINGS[frame.category])):
        text = render_frame(frame, i)
        if text != caption and text not in pool:
            pool.append(text)
    if len(pool) < k:
        raise ValueError(f"only {len(pool)} distinct paraphrases available for {caption!r}, asked for {k}")
    picks = rng.choice(len(pool), size=k, replace=False)
    return [pool[i] for i in picks]
