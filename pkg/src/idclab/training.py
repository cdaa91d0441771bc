"""Training loop, evaluation, checkpoints and the comparison studies.

A run is fully determined by its ``TrainConfig``: the model init, batch order
and any input augmentation all derive from ``config.seed``.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import imaging
from . import tensor as T
from .dataset import BOS_ID, EOS_ID, PAD_ID, Dataset, Triplet, Vocab, detokenize, load_dataset, tokenize
from .metrics import MetricReport, corpus_evaluate, cider_d
from .imaging import CATEGORIES
from .model import MODULES, IdcModel, ModelConfig, apply_lora, count_params, generate, greedy_decode

log = logging.getLogger(__name__)

CKPT_MAGIC = b"IDCK"
CKPT_VERSION = 1

# Model overrides used by the comparison studies (see README).
STUDY_MODEL: dict = {"image_side": 48, "d_model": 64, "vit_layers": 2, "init_std": 0.2}


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# -- configuration ---------------------------------------------------------
@dataclass
class LoraSettings:
    enabled: bool = False
    rank: int = 8
    alpha: float = 16.0


@dataclass
class TrainConfig:
    seed: int = 0
    steps: int = 1000
    batch_size: int = 16
    lr: float = 3e-4
    warmup_frac: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float = 1.0
    lora: LoraSettings = field(default_factory=LoraSettings)
    tune: dict = field(default_factory=lambda: {m: True for m in MODULES})
    encoder_mode: str = "joint"
    augment: bool = False
    datasets: list = field(default_factory=list)
    eval_dataset: str | None = None
    model: dict = field(default_factory=dict)
    init_checkpoint: str | None = None
    val_every: int = 0
    eval_decode: str = "greedy"
    beam_size: int = 3

    def __post_init__(self):
        if isinstance(self.lora, dict):
            self.lora = LoraSettings(**self.lora)
        self.betas = tuple(self.betas)
        self.datasets = [str(d) for d in self.datasets]
        self.validate()

    def validate(self) -> None:
        if self.steps <= 0:
            raise ValueError("steps must be > 0")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be > 0")
        bad = set(self.tune) - set(MODULES)
        if bad:
            raise ValueError(f"unknown tune flag(s) {sorted(bad)}; expected {MODULES}")
        if not any(self.tune.get(m, False) for m in MODULES) and not self.lora.enabled:
            raise ValueError("nothing to train: every tune flag is off and LoRA is disabled")
        if self.encoder_mode not in ("joint", "two_stream"):
            raise ValueError(f"unknown encoder_mode {self.encoder_mode!r}")
        if self.eval_decode not in ("greedy", "beam"):
            raise ValueError(f"unknown eval_decode {self.eval_decode!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return cls(**d)

    def key(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def config_diff(a: TrainConfig, b: TrainConfig) -> set[str]:
    """Top-level field names whose values differ (``tune`` reported per flag)."""
    da, db = a.to_dict(), b.to_dict()
    out = set()
    for k in da:
        if da[k] != db[k]:
            if k == "tune":
                out |= {f"tune.{m}" for m in MODULES if da[k].get(m) != db[k].get(m)}
            else:
                out.add(k)
    return out


# -- optimisation ----------------------------------------------------------
class Adam:
    def __init__(self, params, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        T.zero_grad(self.params)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup over the first ``warmup_frac`` of steps, then cosine to 0."""
    warm = max(1, int(round(cfg.warmup_frac * cfg.steps)))
    if step < warm:
        return cfg.lr * (step + 1) / warm
    span = max(1, cfg.steps - warm)
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * (step - warm) / span))


def grad_norm(params) -> float:
    return math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))


# -- batches ---------------------------------------------------------------
def model_inputs(mcfg: ModelConfig, ref: np.ndarray, mod: np.ndarray) -> dict:
    side = mcfg.image_side
    if mcfg.encoder_mode == "joint":
        return {"pair": imaging.concat_and_resize(ref, mod, side)}
    return {"ref": imaging.resize_bilinear(ref, side, side), "mod": imaging.resize_bilinear(mod, side, side)}


def stack_inputs(items: list[dict]) -> dict:
    return {k: np.stack([it[k] for it in items]) for k in items[0]}


def encode_captions(captions: list[str], vocab: Vocab, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Teacher-forcing arrays: inputs ``[BOS, w...]`` and targets ``[w..., EOS]``."""
    seqs = [tokenize(c, vocab) for c in captions]
    L = max(len(s) for s in seqs) + 1
    if L > max_len:
        raise TrainingError(f"caption of {L - 1} tokens does not fit max_caption_len {max_len}")
    inputs = np.full((len(seqs), L), PAD_ID, dtype=np.int64)
    targets = np.full((len(seqs), L), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        inputs[i, : len(s) + 1] = [BOS_ID] + s
        targets[i, : len(s) + 1] = s + [EOS_ID]
    return inputs, targets


class TripletSource:
    """Raw rasters for a list of triplets, loaded once."""

    def __init__(self, items: list[tuple[Dataset, Triplet]]):
        self.items = items

    def __len__(self) -> int:
        return len(self.items)

    def raw(self, i: int):
        ds, t = self.items[i]
        return ds.load_pair(t)

    def triplet(self, i: int) -> Triplet:
        return self.items[i][1]


def batch_order(n: int, steps: int, batch_size: int, rng: np.random.Generator):
    """Yield index arrays: shuffled epochs concatenated, cut into batches."""
    buf = np.empty(0, dtype=np.int64)
    for _ in range(steps):
        while len(buf) < batch_size:
            buf = np.concatenate([buf, rng.permutation(n)])
        yield buf[:batch_size]
        buf = buf[batch_size:]


# -- model construction ----------------------------------------------------
def build_model(cfg: TrainConfig, vocab: Vocab) -> IdcModel:
    mc = dict(cfg.model)
    mc.update(vocab_size=len(vocab), encoder_mode=cfg.encoder_mode)
    model = IdcModel(ModelConfig(**mc), seed=cfg.seed)
    if cfg.init_checkpoint:
        base, _ = load_checkpoint(cfg.init_checkpoint)
        if base.config != model.config:
            raise TrainingError("init checkpoint model config differs from the requested one")
        model.load_state_dict(base.state_dict())
    if cfg.lora.enabled:
        targets = [m for m in MODULES if cfg.tune.get(m, False)] or list(MODULES)
        apply_lora(model, cfg.lora.rank, cfg.lora.alpha, targets, seed=cfg.seed)
    else:
        model.set_trainable(cfg.tune)
    return model


@dataclass
class TrainResult:
    model: IdcModel
    vocab: Vocab
    config: TrainConfig
    losses: list[float]
    records: list[dict]
    val_history: list[dict] = field(default_factory=list)
    rng_state: dict | None = None


def _load_sources(paths) -> list[Dataset]:
    if not paths:
        raise TrainingError("no training dataset given")
    return [load_dataset(p) for p in paths]


def train(cfg: TrainConfig, out_dir=None, datasets: list[Dataset] | None = None) -> TrainResult:
    """Teacher-forced cross-entropy training.

    Writes ``loss.csv`` (every step), ``val.csv`` and ``checkpoint.idck`` when
    ``out_dir`` is given.  A non-finite loss aborts with the step, learning
    rate and gradient norm.
    """
    cfg.validate()
    sets = datasets if datasets is not None else _load_sources(cfg.datasets)
    items = [(ds, t) for ds in sets for t in ds.split("train")]
    if not items:
        raise TrainingError("training split is empty")
    if cfg.init_checkpoint:
        _, header = load_checkpoint(cfg.init_checkpoint)
        vocab = Vocab.from_tokens(header["vocab"])
    else:
        vocab = Vocab.build(c for _, t in items for c in t.captions)
    model = build_model(cfg, vocab)
    mcfg = model.config
    params = model.trainable_parameters()
    opt = Adam(params, cfg.lr, cfg.betas, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    src = TripletSource(items)
    cache: dict[int, dict] = {}
    val_items = [t for ds in sets[:1] for t in ds.split("val")]

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = (out / "loss.csv").open("w", newline="", encoding="utf-8")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "lr", "loss", "grad_norm"])
    losses, records, val_hist = [], [], []
    try:
        for step, idx in enumerate(batch_order(len(src), cfg.steps, cfg.batch_size, rng)):
            feats, caps = [], []
            for i in idx:
                i = int(i)
                t = src.triplet(i)
                caps.append(t.captions[int(rng.integers(len(t.captions)))] if len(t.captions) > 1 else t.captions[0])
                if cfg.augment:
                    ref, mod = src.raw(i)
                    feats.append(model_inputs(mcfg, imaging.augment(ref, rng), imaging.augment(mod, rng)))
                else:
                    if i not in cache:
                        cache[i] = model_inputs(mcfg, *src.raw(i))
                    feats.append(cache[i])
            inputs, targets = encode_captions(caps, vocab, mcfg.max_caption_len)
            batch = stack_inputs(feats)
            batch.update(inputs=inputs, targets=targets)
            lr = lr_at(step, cfg)
            opt.zero_grad()
            loss = model.loss(batch)
            lv = float(loss.data)
            if math.isfinite(lv):
                T.backward(loss)
            gn = grad_norm(params)
            if not (math.isfinite(lv) and math.isfinite(gn)):
                raise TrainingError(f"non-finite loss at step {step}: loss={lv}, lr={lr:.3e}, grad-norm={gn:.3e}")
            if cfg.grad_clip and gn > cfg.grad_clip:
                scale = cfg.grad_clip / gn
                for p in params:
                    if p.grad is not None:
                        p.grad *= scale
            opt.step(lr)
            losses.append(lv)
            rec = {"step": step, "lr": lr, "loss": lv, "grad_norm": gn}
            records.append(rec)
            if out is not None:
                writer.writerow([step, repr(lr), repr(lv), repr(gn)])
            if cfg.val_every and val_items and (step + 1) % cfg.val_every == 0:
                preds = predict(model, vocab, sets[0], val_items, decode="greedy")
                score = float(np.mean(cider_d([preds[t.id] for t in val_items], [t.captions for t in val_items])))
                val_hist.append({"step": step + 1, "cider": score})
                log.info("step %d val CIDEr-D %.4f", step + 1, score)
    finally:
        if out is not None:
            fh.close()
    result = TrainResult(model, vocab, cfg, losses, records, val_hist, rng.bit_generator.state)
    if out is not None:
        if val_hist:
            with (out / "val.csv").open("w", newline="", encoding="utf-8") as vf:
                w = csv.writer(vf, lineterminator="\n")
                w.writerow(["step", "cider_d"])
                for r in val_hist:
                    w.writerow([r["step"], f"{r['cider']:.6f}"])
        save_checkpoint(out / "checkpoint.idck", result)
    return result


# -- evaluation ------------------------------------------------------------
def predict(model: IdcModel, vocab: Vocab, ds: Dataset, triplets, decode: str = "greedy", beam_size: int = 3, batch_size: int = 32, transform=None) -> dict[str, str]:
    """Caption every triplet; ``transform(t, ref, mod) -> (ref, mod)`` edits inputs first."""
    preds: dict[str, str] = {}
    triplets = list(triplets)
    mcfg = model.config
    for s in range(0, len(triplets), batch_size):
        chunk = triplets[s : s + batch_size]
        feats = []
        for t in chunk:
            ref, mod = ds.load_pair(t)
            if transform is not None:
                ref, mod = transform(t, ref, mod)
            feats.append(model_inputs(mcfg, ref, mod))
        with T.no_grad():
            q = model.encode(stack_inputs(feats))
            if decode == "greedy":
                outs = greedy_decode(model, q)
            else:
                outs = [generate(model, q[i], "beam", beam_size) for i in range(len(chunk))]
        for t, toks in zip(chunk, outs):
            preds[t.id] = detokenize(toks, vocab)
    return preds


@dataclass
class EvalResult:
    predictions: dict[str, str]
    report: MetricReport

    @property
    def cider(self) -> float:
        return self.report.overall["C"]


def evaluate(model: IdcModel, vocab: Vocab, ds: Dataset, split: str = "test", decode: str = "greedy", beam_size: int = 3, transform=None) -> EvalResult:
    triplets = ds.split(split)
    if not triplets:
        raise TrainingError(f"dataset {ds.root} has no {split} triplets")
    preds = predict(model, vocab, ds, triplets, decode, beam_size, transform=transform)
    return EvalResult(preds, corpus_evaluate(preds, triplets, CATEGORIES))


def exact_match_by_category(preds: dict[str, str], triplets) -> dict[str, float]:
    """Share of predictions that equal one of the references, per category."""
    hits: dict[str, list[int]] = {}
    for t in triplets:
        hits.setdefault(t.category, []).append(int(preds[t.id] in t.captions))
    return {c: float(np.mean(v)) for c, v in hits.items()}


def robustness_check(model: IdcModel, vocab: Vocab, ds: Dataset, seed: int = 0, split: str = "test") -> dict:
    """Exact-match per category on clean inputs vs. blurred/quantized inputs."""
    triplets = ds.split(split)
    clean = predict(model, vocab, ds, triplets)
    rng = np.random.default_rng(seed)
    noisy_inputs = {}
    for t in triplets:
        ref, mod = ds.load_pair(t)
        noisy_inputs[t.id] = (imaging.augment(ref, rng), imaging.augment(mod, rng))
    noisy = predict(model, vocab, ds, triplets, transform=lambda t, ref, mod: noisy_inputs[t.id])
    a, b = exact_match_by_category(clean, triplets), exact_match_by_category(noisy, triplets)
    return {"clean": a, "augmented": b, "delta_pp": {c: 100.0 * (b[c] - a[c]) for c in a}}


# -- checkpoints -----------------------------------------------------------
def _digest(state: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f8")
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def base_id(model: IdcModel) -> str:
    """Hash of every non-adapter tensor."""
    return _digest({k: v for k, v in model.state_dict().items() if ".lora." not in k})


def save_checkpoint(path, result: TrainResult, lora_only: bool = False, step: int | None = None) -> int:
    """Write the ``IDCK`` container; returns the file size in bytes."""
    model = result.model
    state = model.state_dict()
    if lora_only:
        if model.lora_config is None:
            raise CheckpointError("model has no adapters; cannot write a LoRA-only checkpoint")
        state = {k: v for k, v in state.items() if ".lora." in k}
    names = sorted(state)
    header = {
        "config": result.config.to_dict(),
        "model_config": model.config.to_dict(),
        "lora": model.lora_config,
        "lora_only": lora_only,
        "base_id": base_id(model),
        "step": len(result.losses) if step is None else step,
        "vocab": result.vocab.itos,
        "rng_state": result.rng_state,
        "tensors": [{"name": n, "shape": list(state[n].shape)} for n in names],
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(hb)))
        fh.write(hb)
        for n in names:
            fh.write(np.ascontiguousarray(state[n], dtype="<f8").tobytes())
    return Path(path).stat().st_size


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes {raw[:4]!r}")
    version, hlen = struct.unpack_from("<IQ", raw, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    off = 4 + struct.calcsize("<IQ")
    header = json.loads(raw[off : off + hlen].decode("utf-8"))
    off += hlen
    tensors = {}
    for spec in header["tensors"]:
        n = int(np.prod(spec["shape"], dtype=np.int64))
        end = off + 8 * n
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated payload for {spec['name']}")
        tensors[spec["name"]] = np.frombuffer(raw[off:end], dtype="<f8").reshape(spec["shape"]).astype(np.float64)
        off = end
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return header, tensors


def load_checkpoint(path, base=None) -> tuple[IdcModel, dict]:
    """Rebuild the model stored at ``path``.

    LoRA-only files need ``base``: a model (or checkpoint path) whose base
    tensors hash to the recorded ``base_id``.
    """
    header, tensors = read_checkpoint(path)
    mcfg = ModelConfig(**header["model_config"])
    if header["lora_only"]:
        if base is None:
            raise CheckpointError(f"{path} holds LoRA deltas only; a base checkpoint is required")
        base_model = base if isinstance(base, IdcModel) else load_checkpoint(base)[0]
        if base_id(base_model) != header["base_id"]:
            raise CheckpointError(f"{path}: base checkpoint id does not match {header['base_id'][:12]}...")
        model = IdcModel(mcfg)
        lc = header["lora"]
        apply_lora(model, lc["rank"], lc["alpha"], lc["target_modules"])
        state = {k: v for k, v in base_model.state_dict().items() if ".lora." not in k}
        state.update(tensors)
    else:
        model = IdcModel(mcfg)
        lc = header["lora"]
        if lc is not None:
            apply_lora(model, lc["rank"], lc["alpha"], lc["target_modules"])
        state = tensors
    expected = dict(model.named_parameters())
    for name, arr in state.items():
        if name not in expected:
            raise CheckpointError(f"{path}: unexpected tensor {name}")
        if expected[name].shape != arr.shape:
            raise CheckpointError(f"{path}: shape mismatch for {name}: {arr.shape} vs config {expected[name].shape}")
    model.load_state_dict(state)
    return model, header


# -- studies ---------------------------------------------------------------
ABLATION_SUBSETS = [dict(zip(MODULES, bits)) for bits in itertools.product((True, False), repeat=3) if any(bits)]


@dataclass
class RunOutcome:
    config: TrainConfig
    cider: float
    n_train: int
    n_params: int
    test_ids: list[str]
    result: TrainResult
    evaluation: EvalResult


class RunCache:
    """Memoises ``train_and_evaluate`` by config so studies can share runs."""

    def __init__(self):
        self.runs: dict[str, RunOutcome] = {}

    def get(self, cfg: TrainConfig) -> RunOutcome:
        key = cfg.key()
        if key not in self.runs:
            self.runs[key] = train_and_evaluate(cfg)
        return self.runs[key]


def train_and_evaluate(cfg: TrainConfig) -> RunOutcome:
    sets = _load_sources(cfg.datasets)
    res = train(cfg, datasets=sets)
    ev_ds = load_dataset(cfg.eval_dataset) if cfg.eval_dataset else sets[0]
    ev = evaluate(res.model, res.vocab, ev_ds, "test", cfg.eval_decode, cfg.beam_size)
    log.info("run seed=%d mode=%s tune=%s -> CIDEr-D %.4f", cfg.seed, cfg.encoder_mode, cfg.tune, ev.cider)
    return RunOutcome(
        cfg,
        ev.cider,
        sum(len(d.split("train")) for d in sets),
        count_params(res.model).total,
        [t.id for t in ev_ds.split("test")],
        res,
        ev,
    )


def _check_single_factor(cfgs: list[TrainConfig], allowed: set[str]) -> None:
    for a, b in itertools.combinations(cfgs, 2):
        d = config_diff(a, b)
        if not d <= allowed:
            raise TrainingError(f"study rows differ in more than the studied factor: {sorted(d - allowed)}")


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def run_ablation(base: TrainConfig, seeds=(0, 1, 2), subsets=None, out_csv=None, cache: RunCache | None = None) -> list[dict]:
    """CIDEr-D for each non-empty {vit, qformer, lm} fine-tuning subset."""
    cache = cache or RunCache()
    subsets = subsets or ABLATION_SUBSETS
    rows = []
    for seed in seeds:
        _check_single_factor([replace(base, seed=seed, tune=dict(s)) for s in subsets], {f"tune.{m}" for m in MODULES})
    for s in subsets:
        scores = [cache.get(replace(base, seed=seed, tune=dict(s))).cider for seed in seeds]
        rows.append({**{m: s[m] for m in MODULES}, "label": "+".join(m for m in MODULES if s[m]), "scores": scores, "mean": float(np.mean(scores))})
    if out_csv:
        _write_csv(
            out_csv,
            ["modules", *MODULES, *[f"cider_seed{s}" for s in seeds], "cider_mean"],
            [[r["label"], *[int(r[m]) for m in MODULES], *map(_fmt, r["scores"]), _fmt(r["mean"])] for r in rows],
        )
    return rows


def run_encoder_comparison(base: TrainConfig, seeds=(0, 1, 2), out_csv=None, cache: RunCache | None = None) -> list[dict]:
    """Joint (concatenated pair) vs two-stream encoding, everything else equal."""
    cache = cache or RunCache()
    rows = []
    for seed in seeds:
        _check_single_factor([replace(base, seed=seed, encoder_mode=m) for m in ("joint", "two_stream")], {"encoder_mode"})
    for mode in ("joint", "two_stream"):
        outs = [cache.get(replace(base, seed=seed, encoder_mode=mode)) for seed in seeds]
        scores = [o.cider for o in outs]
        rows.append({"encoder_mode": mode, "seeds": list(seeds), "n_params": outs[0].n_params, "scores": scores, "mean": float(np.mean(scores))})
    if out_csv:
        _write_csv(
            out_csv,
            ["encoder_mode", "n_params", *[f"cider_seed{s}" for s in seeds], "cider_mean"],
            [[r["encoder_mode"], r["n_params"], *map(_fmt, r["scores"]), _fmt(r["mean"])] for r in rows],
        )
    return rows


def run_augmentation_study(base: TrainConfig, base_datasets, synthetic_datasets, eval_dataset, seeds=(0, 1, 2), out_csv=None, cache: RunCache | None = None) -> list[dict]:
    """Base training data vs. base + synthetic variants on one shared test set."""
    cache = cache or RunCache()
    settings = {
        "base": [str(p) for p in base_datasets],
        "base+synthetic": [str(p) for p in base_datasets] + [str(p) for p in synthetic_datasets],
    }
    for seed in seeds:
        _check_single_factor([replace(base, seed=seed, datasets=d, eval_dataset=str(eval_dataset)) for d in settings.values()], {"datasets"})
    rows = []
    for name, paths in settings.items():
        outs = [cache.get(replace(base, seed=seed, datasets=paths, eval_dataset=str(eval_dataset))) for seed in seeds]
        scores = [o.cider for o in outs]
        rows.append({"setting": name, "n_train": outs[0].n_train, "test_ids": outs[0].test_ids, "scores": scores, "mean": float(np.mean(scores))})
    if rows[0]["test_ids"] != rows[1]["test_ids"]:
        raise TrainingError("augmentation study runs were evaluated on different test sets")
    base_mean = rows[0]["mean"]
    for r in rows:
        r["improvement_pct"] = 100.0 * (r["mean"] - base_mean) / base_mean if base_mean else float("nan")
    if out_csv:
        _write_csv(
            out_csv,
            ["setting", "n_train_pairs", *[f"cider_seed{s}" for s in seeds], "cider_mean", "improvement_pct"],
            [[r["setting"], r["n_train"], *map(_fmt, r["scores"]), _fmt(r["mean"]), f"{r['improvement_pct']:.2f}"] for r in rows],
        )
    return rows
