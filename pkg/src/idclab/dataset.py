"""IDC triplet datasets: generation, vocabulary, tokenization, persistence.

On disk a dataset directory holds::

    manifest.json      seed, generator config, per-split/category counts, file hashes
    triplets.jsonl     one record per line: id, ref, mod, captions, category, variant, split
    vocab.json         train-split vocabulary
    images/*.ppm       binary P6 rasters, paths relative to the directory
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import imaging
from .captions import caption_template, paraphrase
from .imaging import CATEGORIES

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")
PAD_ID, BOS_ID, EOS_ID, UNK_ID = range(4)
RECORD_KEYS = ("id", "ref", "mod", "captions", "category", "variant", "split")
N_TEST_REFS = 5
_SPLIT_STREAM = {"train": 0, "val": 1, "test": 2}


class DatasetError(ValueError):
    pass


@dataclass
class Triplet:
    id: str
    ref: str
    mod: str
    captions: list[str]
    category: str
    variant: int
    split: str

    def to_record(self) -> dict:
        return {k: getattr(self, k) for k in RECORD_KEYS}


@dataclass
class DatasetConfig:
    n_originals: int = 250
    variants_per_original: int = 8
    test_fraction: float = 0.1
    val_fraction: float = 0.0
    seed: int = 0
    image_side: int = 48
    test_shift: bool = True

    def __post_init__(self):
        if self.n_originals < 1 or self.variants_per_original < 1:
            raise ValueError("need at least one original and one variant")
        if self.test_fraction < 0 or self.val_fraction < 0:
            raise ValueError("split fractions must be non-negative")


@dataclass
class DatasetManifest:
    seed: int
    config: dict
    counts: dict[str, int]
    category_counts: dict[str, dict[str, int]]
    files: list[dict] = field(default_factory=list)
    format_version: int = FORMAT_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> DatasetManifest:
        return cls(
            seed=d["seed"],
            config=d["config"],
            counts=d["counts"],
            category_counts=d["category_counts"],
            files=d.get("files", []),
            format_version=d["format_version"],
        )


# -- vocabulary ------------------------------------------------------------
class Vocab:
    """Word-level vocabulary; ids 0..3 are PAD, BOS, EOS, UNK."""

    def __init__(self, words):
        self.itos = list(SPECIALS) + sorted(set(words) - set(SPECIALS))
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    @classmethod
    def build(cls, captions) -> Vocab:
        return cls(w for c in captions for w in c.lower().split())

    @classmethod
    def from_tokens(cls, itos: list[str]) -> Vocab:
        if tuple(itos[:4]) != SPECIALS:
            raise DatasetError("vocabulary must start with the special tokens")
        v = cls(itos[4:])
        if v.itos != itos:
            raise DatasetError("vocabulary tokens are not in canonical order")
        return v


def tokenize(caption: str, vocab: Vocab) -> list[int]:
    return [vocab.stoi.get(w, UNK_ID) for w in caption.lower().split()]


def detokenize(ids, vocab: Vocab) -> str:
    words = []
    for i in ids:
        i = int(i)
        if i == EOS_ID:
            break
        if i in (PAD_ID, BOS_ID):
            continue
        words.append(vocab.itos[i] if 0 <= i < len(vocab) else SPECIALS[UNK_ID])
    return " ".join(words)


# -- generation ------------------------------------------------------------
def _split_sizes(cfg: DatasetConfig) -> dict[str, int]:
    pool = cfg.n_originals * cfg.variants_per_original
    return {
        "train": pool,
        "val": int(round(cfg.val_fraction * pool)),
        "test": int(round(cfg.test_fraction * pool)),
    }


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _make_pair(rng, scene, category, side, shift: bool):
    edit = imaging.sample_edit(rng, category, scene)
    edited = imaging.apply_edit(scene, edit)
    s_ref, s_mod = (int(s) for s in rng.integers(0, 2**31 - 1, size=2))
    ref = imaging.render(scene, s_ref, side)
    mod = imaging.render(edited, s_mod, side)
    if shift:
        mod = imaging.augment(mod, rng)
    return edit, ref, mod


def generate_triplets(cfg: DatasetConfig):
    """Yield ``(Triplet, ref_raster, mod_raster)`` in a fixed order.

    Each original draws from its own stream seeded by ``(seed, split, index)``,
    so output does not depend on how generation is scheduled.
    """
    sizes = _split_sizes(cfg)
    V = cfg.variants_per_original
    for i in range(cfg.n_originals):
        rng = np.random.default_rng([cfg.seed, _SPLIT_STREAM["train"], i])
        scene = imaging.sample_scene(rng, 2, 4)
        for v in range(V):
            cat = CATEGORIES[(i * V + v) % len(CATEGORIES)]
            edit, ref, mod = _make_pair(rng, scene, cat, cfg.image_side, False)
            tid = f"train-{i:05d}-{v}"
            yield Triplet(tid, f"images/{tid}_ref.ppm", f"images/{tid}_mod.ppm", [edit.text], cat, v, "train"), ref, mod
    for split in ("val", "test"):
        for j in range(sizes[split]):
            rng = np.random.default_rng([cfg.seed, _SPLIT_STREAM[split], j])
            scene = imaging.sample_scene(rng, 2, 4)
            cat = CATEGORIES[j % len(CATEGORIES)]
            edit, ref, mod = _make_pair(rng, scene, cat, cfg.image_side, cfg.test_shift)
            caps = [edit.text] + paraphrase(edit.text, N_TEST_REFS - 1, rng)
            tid = f"{split}-{j:05d}-0"
            yield Triplet(tid, f"images/{tid}_ref.ppm", f"images/{tid}_mod.ppm", caps, cat, 0, split), ref, mod


def build_dataset(cfg: DatasetConfig, out_dir) -> DatasetManifest:
    """Generate, write and return the manifest of a dataset in ``out_dir``."""
    root = Path(out_dir)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create {root / 'images'}: {exc}") from exc
    triplets: list[Triplet] = []
    for t, ref, mod in generate_triplets(cfg):
        for rel, img in ((t.ref, ref), (t.mod, mod)):
            try:
                imaging.write_ppm(root / rel, img)
            except OSError as exc:
                raise DatasetError(f"cannot write {root / rel}: {exc}") from exc
        triplets.append(t)
    lines = "".join(json.dumps(t.to_record(), sort_keys=True, ensure_ascii=False) + "\n" for t in triplets)
    (root / "triplets.jsonl").write_text(lines, encoding="utf-8")
    vocab = Vocab.build(c for t in triplets if t.split == "train" for c in t.captions)
    (root / "vocab.json").write_text(json.dumps(vocab.itos, indent=1) + "\n", encoding="utf-8")
    manifest = _manifest_for(cfg.seed, asdict(cfg), triplets, root)
    (root / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
    return manifest


def _manifest_for(seed, config, triplets, root: Path) -> DatasetManifest:
    counts = {s: 0 for s in SPLITS}
    cats: dict[str, Counter] = {s: Counter() for s in SPLITS}
    for t in triplets:
        counts[t.split] += 1
        cats[t.split][t.category] += 1
    files = ["triplets.jsonl", "vocab.json"] + [p for t in triplets for p in (t.ref, t.mod)]
    listing = [{"path": p, "sha256": _sha256(root / p)} for p in sorted(files)]
    return DatasetManifest(
        seed=seed,
        config=config,
        counts=counts,
        category_counts={s: {c: cats[s][c] for c in CATEGORIES} for s in SPLITS},
        files=listing,
    )


# -- loading ---------------------------------------------------------------
@dataclass
class Dataset:
    root: Path
    manifest: DatasetManifest
    triplets: list[Triplet]
    _cache: dict = field(default_factory=dict, repr=False)

    def split(self, name: str) -> list[Triplet]:
        return [t for t in self.triplets if t.split == name]

    def load_pair(self, t: Triplet) -> tuple[np.ndarray, np.ndarray]:
        if t.id not in self._cache:
            self._cache[t.id] = (imaging.read_ppm(self.root / t.ref), imaging.read_ppm(self.root / t.mod))
        return self._cache[t.id]

    def vocab(self) -> Vocab:
        return Vocab.build(c for t in self.split("train") for c in t.captions)


def _parse_record(line: str, lineno: int, path: Path) -> Triplet:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}:{lineno}: malformed JSON line ({exc.msg})") from None
    if not isinstance(rec, dict) or set(rec) != set(RECORD_KEYS):
        raise DatasetError(f"{path}:{lineno}: record keys must be exactly {RECORD_KEYS}")
    return Triplet(**rec)


def validate_triplet(t: Triplet, root: Path) -> None:
    if t.split not in SPLITS:
        raise DatasetError(f"record {t.id}: unknown split {t.split!r}")
    if t.category not in CATEGORIES:
        raise DatasetError(f"record {t.id}: category {t.category!r} outside taxonomy {CATEGORIES}")
    if not isinstance(t.captions, list) or not t.captions or not all(isinstance(c, str) for c in t.captions):
        raise DatasetError(f"record {t.id}: captions must be a non-empty list of strings")
    if t.split == "test" and len(t.captions) != N_TEST_REFS:
        raise DatasetError(f"record {t.id}: test triplets need exactly {N_TEST_REFS} captions, got {len(t.captions)}")
    if not 0 <= t.variant <= 7:
        raise DatasetError(f"record {t.id}: variant index {t.variant} outside 0..7")
    for rel in (t.ref, t.mod):
        if not (root / rel).is_file():
            raise DatasetError(f"record {t.id}: missing image file {root / rel}")


def load_dataset(path, verify_hashes: bool = False) -> Dataset:
    """Read and validate a dataset directory, failing on the first violation."""
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise DatasetError(f"missing manifest {mpath}")
    manifest = DatasetManifest.from_dict(json.loads(mpath.read_text(encoding="utf-8")))
    if manifest.format_version != FORMAT_VERSION:
        raise DatasetError(f"{mpath}: format version {manifest.format_version}, expected {FORMAT_VERSION}")
    jpath = root / "triplets.jsonl"
    if not jpath.is_file():
        raise DatasetError(f"missing record file {jpath}")
    triplets: list[Triplet] = []
    seen: set[str] = set()
    with jpath.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            t = _parse_record(line, lineno, jpath)
            if t.id in seen:
                raise DatasetError(f"{jpath}:{lineno}: duplicate id {t.id}")
            seen.add(t.id)
            validate_triplet(t, root)
            triplets.append(t)
    counts = Counter(t.split for t in triplets)
    for s in SPLITS:
        if counts.get(s, 0) != manifest.counts.get(s, 0):
            raise DatasetError(f"manifest says {manifest.counts.get(s, 0)} {s} records, found {counts.get(s, 0)}")
    if verify_hashes:
        for f in manifest.files:
            if _sha256(root / f["path"]) != f["sha256"]:
                raise DatasetError(f"hash mismatch for {root / f['path']}")
    return Dataset(root, manifest, triplets)


def summary_table(manifest: DatasetManifest) -> str:
    """Plain-text summary: pair counts and per-category split counts."""
    c = manifest.counts
    lines = [
        f"{c['train']} train pairs, {c['val']} val triplets, {c['test']} test triplets (seed {manifest.seed})",
        f"{'category':<10}" + "".join(f"{s:>8}" for s in SPLITS),
    ]
    for cat in CATEGORIES:
        lines.append(f"{cat:<10}" + "".join(f"{manifest.category_counts[s][cat]:>8}" for s in SPLITS))
    return "\n".join(lines)
