"""Miniature BLIP2-style difference captioner.

ViT over pixel patches -> QFormer (learned queries cross-attending to vision
tokens) -> causal text decoder cross-attending to the query outputs.  The
encoder runs either on one vertically concatenated pair image ("joint") or on
each image separately with features fused afterwards ("two_stream").
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

PAD, BOS, EOS, UNK = 0, 1, 2, 3
MODULES = ("vit", "qformer", "lm")
NEG_INF = -1e9


@dataclass
class ModelConfig:
    image_side: int = 64
    patch_side: int = 8
    channels: int = 3
    d_model: int = 128
    n_heads: int = 4
    vit_layers: int = 4
    qformer_layers: int = 2
    decoder_layers: int = 2
    n_queries: int = 8
    vocab_size: int = 64
    max_caption_len: int = 24
    encoder_mode: str = "joint"
    mlp_ratio: int = 4
    init_std: float = 0.02

    def __post_init__(self):
        if self.image_side % self.patch_side:
            raise ValueError(f"image_side {self.image_side} not divisible by patch_side {self.patch_side}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_queries < 1:
            raise ValueError("n_queries must be >= 1")
        if self.encoder_mode not in ("joint", "two_stream"):
            raise ValueError(f"unknown encoder_mode {self.encoder_mode!r}")

    @property
    def n_patches(self) -> int:
        return (self.image_side // self.patch_side) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_side**2 * self.channels

    def to_dict(self) -> dict:
        return asdict(self)


# -- building blocks -------------------------------------------------------
class Module:
    """Just enough structure to walk named parameters in a fixed order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
            elif isinstance(val, dict):
                for k in sorted(val):
                    item = val[k]
                    if isinstance(item, Tensor):
                        yield f"{name}.{k}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{k}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


def _normal(rng: np.random.Generator, shape, std: float) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, std: float):
        self.weight = _normal(rng, (d_in, d_out), std)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.bias = Tensor(np.zeros(d), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, eps=1e-5)


class LoraAdapter(Module):
    """Rank-``r`` delta ``(alpha / r) * A @ B`` added to a ``d x d`` weight."""

    def __init__(self, rng, d: int, rank: int, alpha: float):
        if rank < 1:
            raise ValueError("LoRA rank must be >= 1")
        self.A = Tensor(rng.normal(0.0, 1.0 / rank, size=(d, rank)), requires_grad=True)
        self.B = Tensor(np.zeros((rank, d)), requires_grad=True)
        self._rank = rank
        self._alpha = alpha

    @property
    def scale(self) -> float:
        return self._alpha / self._rank

    def delta(self) -> Tensor:
        return T.matmul(self.A, self.B) * self.scale


class AttentionLayer(Module):
    """Multi-head attention with square Q/K/V/O projections (no biases)."""

    def __init__(self, rng, d: int, n_heads: int, std: float, causal: bool = False):
        self.wq = _normal(rng, (d, d), std)
        self.wk = _normal(rng, (d, d), std)
        self.wv = _normal(rng, (d, d), std)
        self.wo = _normal(rng, (d, d), std)
        self.lora: dict[str, LoraAdapter] = {}
        self._heads = n_heads
        self._causal = causal

    @property
    def causal(self) -> bool:
        return self._causal

    def _weight(self, which: str) -> Tensor:
        w = getattr(self, which)
        adapter = self.lora.get(which)
        if adapter is None:
            return w
        return w + adapter.delta()

    def _split(self, x: Tensor) -> Tensor:
        B, L, d = x.shape
        return x.reshape(B, L, self._heads, d // self._heads).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, ctx: Tensor | None = None) -> Tensor:
        ctx = x if ctx is None else ctx
        B, L, d = x.shape
        q = self._split(T.matmul(x, self._weight("wq")))
        k = self._split(T.matmul(ctx, self._weight("wk")))
        v = self._split(T.matmul(ctx, self._weight("wv")))
        mask = causal_mask(L) if self._causal else None
        out = T.attention(q, k, v, mask).transpose(0, 2, 1, 3).reshape(B, L, d)
        return T.matmul(out, self.wo)


_MASKS: dict[int, np.ndarray] = {}


def causal_mask(n: int) -> np.ndarray:
    if n not in _MASKS:
        _MASKS[n] = np.triu(np.full((n, n), NEG_INF), k=1)
    return _MASKS[n]


class MLP(Module):
    def __init__(self, rng, d: int, ratio: int, std: float):
        self.fc1 = Linear(rng, d, d * ratio, std)
        self.fc2 = Linear(rng, d * ratio, d, std)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class EncoderBlock(Module):
    """Pre-LN self-attention block used by the ViT."""

    def __init__(self, rng, cfg: ModelConfig):
        d = cfg.d_model
        self.ln1 = LayerNorm(d)
        self.attn = AttentionLayer(rng, d, cfg.n_heads, cfg.init_std)
        self.ln2 = LayerNorm(d)
        self.mlp = MLP(rng, d, cfg.mlp_ratio, cfg.init_std)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class CrossBlock(Module):
    """Self-attention, cross-attention to a context, then MLP (pre-LN).

    Used for QFormer layers (queries over vision tokens) and decoder layers
    (causal text over query outputs).
    """

    def __init__(self, rng, cfg: ModelConfig, causal: bool):
        d = cfg.d_model
        self.ln1 = LayerNorm(d)
        self.self_attn = AttentionLayer(rng, d, cfg.n_heads, cfg.init_std, causal=causal)
        self.ln2 = LayerNorm(d)
        self.cross_attn = AttentionLayer(rng, d, cfg.n_heads, cfg.init_std)
        self.ln3 = LayerNorm(d)
        self.mlp = MLP(rng, d, cfg.mlp_ratio, cfg.init_std)

    def __call__(self, x: Tensor, ctx: Tensor) -> Tensor:
        x = x + self.self_attn(self.ln1(x))
        x = x + self.cross_attn(self.ln2(x), ctx)
        return x + self.mlp(self.ln3(x))


class ViT(Module):
    def __init__(self, rng, cfg: ModelConfig):
        self.patch_embed = Linear(rng, cfg.patch_dim, cfg.d_model, cfg.init_std)
        # learned, but started from a 2-D sin-cos grid so patches are told apart from step 0
        self.pos = Tensor(grid_positions(cfg.image_side // cfg.patch_side, cfg.d_model), requires_grad=True)
        self.blocks = [EncoderBlock(rng, cfg) for _ in range(cfg.vit_layers)]
        self.ln = LayerNorm(cfg.d_model)

    def __call__(self, patches: Tensor) -> Tensor:
        x = self.patch_embed(patches) + self.pos
        for blk in self.blocks:
            x = blk(x)
        return self.ln(x)


class QFormer(Module):
    def __init__(self, rng, cfg: ModelConfig):
        self.queries = _normal(rng, (cfg.n_queries, cfg.d_model), cfg.init_std)
        self.blocks = [CrossBlock(rng, cfg, causal=False) for _ in range(cfg.qformer_layers)]
        self.ln = LayerNorm(cfg.d_model)
        if cfg.encoder_mode == "two_stream":
            self.stream_embed = _normal(rng, (2, cfg.d_model), cfg.init_std)

    def __call__(self, vision: Tensor) -> Tensor:
        B = vision.shape[0]
        x = self.queries + Tensor(np.zeros((B,) + self.queries.shape))
        for blk in self.blocks:
            x = blk(x, vision)
        return self.ln(x)


class TextDecoder(Module):
    def __init__(self, rng, cfg: ModelConfig):
        self.tok_embed = _normal(rng, (cfg.vocab_size, cfg.d_model), cfg.init_std)
        self.blocks = [CrossBlock(rng, cfg, causal=True) for _ in range(cfg.decoder_layers)]
        self.ln = LayerNorm(cfg.d_model)
        self.head = Linear(rng, cfg.d_model, cfg.vocab_size, cfg.init_std)
        self._pos = sinusoidal_positions(cfg.max_caption_len, cfg.d_model)

    def __call__(self, tokens: np.ndarray, ctx: Tensor) -> Tensor:
        L = tokens.shape[1]
        x = T.take_rows(self.tok_embed, tokens) + self._pos[:L]
        for blk in self.blocks:
            x = blk(x, ctx)
        return self.head(self.ln(x))


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d)
    out = np.zeros((n, d))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)
    return out


def grid_positions(g: int, d: int) -> np.ndarray:
    """2-D sin-cos table for a ``g x g`` patch grid: half the channels encode rows, half columns."""
    ys, xs = np.meshgrid(np.arange(g), np.arange(g), indexing="ij")
    q = d // 4
    omega = 1.0 / np.power(10000.0, np.arange(q) / q)
    cols = []
    for c in (ys, xs):
        a = c.reshape(-1, 1) * omega[None]
        cols += [np.sin(a), np.cos(a)]
    out = np.zeros((g * g, d))
    out[:, : 4 * q] = np.concatenate(cols, axis=1)
    return out


# -- image plumbing --------------------------------------------------------
def patchify(image: np.ndarray, patch_side: int, image_side: int | None = None) -> np.ndarray:
    """Cut ``[H, W, C]`` (or ``[B, H, W, C]``) 8-bit rasters into row-major patches.

    Values are centred to ``[-0.5, 0.5]``; output is ``[n_patches, patch_side**2 * C]``
    (with a leading batch axis when given one).
    """
    img = np.asarray(image)
    single = img.ndim == 3
    if single:
        img = img[None]
    if img.ndim != 4:
        raise ValueError(f"expected [H, W, C] or [B, H, W, C] raster, got shape {np.shape(image)}")
    B, H, W, C = img.shape
    if image_side is not None and (H != image_side or W != image_side):
        raise ValueError(f"raster is {H}x{W}, model expects {image_side}x{image_side}")
    if H % patch_side or W % patch_side:
        raise ValueError(f"raster {H}x{W} not divisible into {patch_side}px patches")
    gh, gw = H // patch_side, W // patch_side
    p = img.reshape(B, gh, patch_side, gw, patch_side, C).transpose(0, 1, 3, 2, 4, 5)
    p = p.reshape(B, gh * gw, patch_side * patch_side * C).astype(np.float64) / 255.0 - 0.5
    return p[0] if single else p


# -- the model -------------------------------------------------------------
@dataclass
class ParamCount:
    total: int
    by_module: dict[str, int] = field(default_factory=dict)
    lora: int = 0


class IdcModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self._cfg = cfg
        rng = np.random.default_rng(seed)
        self.vit = ViT(rng, cfg)
        self.qformer = QFormer(rng, cfg)
        self.lm = TextDecoder(rng, cfg)
        self._lora_cfg: dict | None = None

    @property
    def config(self) -> ModelConfig:
        return self._cfg

    @property
    def lora_config(self) -> dict | None:
        return self._lora_cfg

    # parameter bookkeeping
    def module_of(self, name: str) -> str:
        return name.split(".", 1)[0]

    def attention_layers(self, module: str) -> list[AttentionLayer]:
        root = getattr(self, module)
        found: list[AttentionLayer] = []

        def walk(m):
            if isinstance(m, AttentionLayer):
                found.append(m)
                return
            for key, val in vars(m).items():
                if key.startswith("_"):
                    continue
                if isinstance(val, Module):
                    walk(val)
                elif isinstance(val, list):
                    for item in val:
                        if isinstance(item, Module):
                            walk(item)

        walk(root)
        return found

    def set_trainable(self, tune: dict[str, bool] | None = None) -> None:
        """Mark parameters trainable according to module flags.

        With adapters attached, only adapters (which live in tuned modules)
        train and every base weight is frozen.
        """
        tune = tune or {m: True for m in MODULES}
        lora_on = self._lora_cfg is not None
        for name, p in self.named_parameters():
            is_adapter = ".lora." in name
            if lora_on:
                p.requires_grad = is_adapter and tune.get(self.module_of(name), False)
            else:
                p.requires_grad = tune.get(self.module_of(name), False)

    def trainable_parameters(self) -> list[Tensor]:
        return [p for p in self.parameters() if p.requires_grad]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        if strict and set(state) != set(params):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for name, arr in state.items():
            p = params[name]
            if p.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = np.array(arr, dtype=np.float64)

    # encoders
    def _patches(self, images) -> Tensor:
        return Tensor(patchify(images, self._cfg.patch_side, self._cfg.image_side))

    def encode_joint(self, pair_input: np.ndarray) -> Tensor:
        """Encode concatenated pair raster(s) into ``[(B,) n_queries, d_model]``."""
        single = np.ndim(pair_input) == 3
        patches = self._patches(pair_input if not single else pair_input[None])
        out = self.qformer(self.vit(patches))
        return out[0] if single else out

    def encode_two_stream(self, img_a: np.ndarray, img_b: np.ndarray) -> Tensor:
        """Shared ViT per image, stream-tagged feature concatenation, QFormer."""
        if "stream_embed" not in vars(self.qformer):
            raise ValueError("model was built for joint encoding; no stream embeddings")
        single = np.ndim(img_a) == 3
        a = np.asarray(img_a)[None] if single else np.asarray(img_a)
        b = np.asarray(img_b)[None] if single else np.asarray(img_b)
        if a.shape != b.shape:
            raise ValueError(f"stream shapes differ: {a.shape} vs {b.shape}")
        n = a.shape[0]
        feats = self.vit(self._patches(np.concatenate([a, b], axis=0)))
        se = self.qformer.stream_embed
        fa = feats[:n] + se[0]
        fb = feats[n:] + se[1]
        out = self.qformer(T.concat([fa, fb], axis=1))
        return out[0] if single else out

    def encode(self, batch: dict) -> Tensor:
        if self._cfg.encoder_mode == "joint":
            return self.encode_joint(batch["pair"])
        return self.encode_two_stream(batch["ref"], batch["mod"])

    # decoder
    def decoder_logits(self, queries_out: Tensor, tokens: np.ndarray) -> Tensor:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.shape[1] > self._cfg.max_caption_len:
            raise ValueError(f"prefix of {tokens.shape[1]} tokens exceeds max_caption_len")
        return self.lm(tokens, queries_out)

    def decode_step(self, queries_out: Tensor, prefix_tokens) -> np.ndarray:
        """Next-token logits ``[vocab_size]`` for one prefix (starting with BOS)."""
        prefix = np.asarray(prefix_tokens, dtype=np.int64).reshape(1, -1)
        if prefix.shape[1] >= self._cfg.max_caption_len:
            raise ValueError(
                f"prefix length {prefix.shape[1]} must be < max_caption_len {self._cfg.max_caption_len}"
            )
        q = queries_out if queries_out.ndim == 3 else queries_out.reshape((1,) + queries_out.shape)
        with T.no_grad():
            return self.lm(prefix, q).data[0, -1]

    def loss(self, batch: dict) -> Tensor:
        q = self.encode(batch)
        logits = self.decoder_logits(q, batch["inputs"])
        return T.cross_entropy(logits, batch["targets"], pad_id=PAD)


def count_params(model: IdcModel, trainable_only: bool = False) -> ParamCount:
    by_module = {m: 0 for m in MODULES}
    lora = 0
    for name, p in model.named_parameters():
        if trainable_only and not p.requires_grad:
            continue
        by_module[model.module_of(name)] += p.size
        if ".lora." in name:
            lora += p.size
    return ParamCount(sum(by_module.values()), by_module, lora)


def apply_lora(
    model: IdcModel,
    rank: int = 8,
    alpha: float = 16.0,
    target_modules=MODULES,
    seed: int = 0,
) -> IdcModel:
    """Attach zero-initialised adapters to W_Q, W_K, W_V of every attention layer
    in ``target_modules`` and freeze everything else."""
    if rank < 1:
        raise ValueError("LoRA rank must be >= 1")
    bad = [m for m in target_modules if m not in MODULES]
    if bad:
        raise ValueError(f"unknown target module(s) {bad}; expected a subset of {MODULES}")
    rng = np.random.default_rng(seed)
    d = model.config.d_model
    for m in MODULES:
        if m not in target_modules:
            continue
        for layer in model.attention_layers(m):
            layer.lora = {w: LoraAdapter(rng, d, rank, alpha) for w in ("wq", "wk", "wv")}
    model._lora_cfg = {"rank": rank, "alpha": alpha, "target_modules": list(target_modules)}
    model.set_trainable({m: m in target_modules for m in MODULES})
    return model


def lora_closed_form(cfg: ModelConfig, rank: int, target_modules=MODULES) -> int:
    """3 adapted projections x 2 factors x d x r per attention layer."""
    per_module = {
        "vit": cfg.vit_layers,
        "qformer": 2 * cfg.qformer_layers,
        "lm": 2 * cfg.decoder_layers,
    }
    n_layers = sum(per_module[m] for m in target_modules)
    return 3 * 2 * cfg.d_model * rank * n_layers


# -- decoding --------------------------------------------------------------
def _next_logprobs(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64).copy()
    z[..., PAD] = NEG_INF
    z[..., BOS] = NEG_INF
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def greedy_decode(model: IdcModel, queries_out: Tensor) -> list[list[int]]:
    """Batched greedy decoding; returns token lists without BOS/EOS."""
    q = queries_out if queries_out.ndim == 3 else queries_out.reshape((1,) + queries_out.shape)
    B = q.shape[0]
    max_len = model.config.max_caption_len
    seqs = np.full((B, 1), BOS, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    with T.no_grad():
        for _ in range(max_len - 1):
            logits = model.lm(seqs, q).data[:, -1]
            nxt = _next_logprobs(logits).argmax(axis=-1)
            nxt[done] = PAD
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
            done |= nxt == EOS
            if done.all():
                break
    out = []
    for row in seqs[:, 1:]:
        toks = []
        for t in row:
            if t in (EOS, PAD):
                break
            toks.append(int(t))
        out.append(toks)
    return out


def sequence_logprob(model: IdcModel, queries_out: Tensor, tokens: list[int]) -> float:
    """Log-probability of ``tokens`` (EOS included when present) after BOS."""
    q = queries_out if queries_out.ndim == 3 else queries_out.reshape((1,) + queries_out.shape)
    seq = np.array([[BOS] + list(tokens)], dtype=np.int64)
    with T.no_grad():
        lp = _next_logprobs(model.lm(seq[:, :-1], q).data[0])
    return float(sum(lp[i, t] for i, t in enumerate(tokens)))


def beam_decode(model: IdcModel, queries_out: Tensor, k: int = 4) -> list[int]:
    """Beam search for one sample; returns generated tokens including a final
    EOS when the sequence completed.

    The winner is the highest log-prob finished hypothesis; ties go to the
    shorter, then the lexicographically smaller, token sequence.
    """
    if k < 1:
        raise ValueError("beam width must be >= 1")
    q = queries_out if queries_out.ndim == 3 else queries_out.reshape((1,) + queries_out.shape)
    max_steps = model.config.max_caption_len - 1
    alive: list[tuple[float, list[int]]] = [(0.0, [])]
    finished: list[tuple[float, list[int]]] = []

    def key(h):
        return (-h[0], len(h[1]), h[1])

    with T.no_grad():
        for step in range(max_steps):
            seqs = np.array([[BOS] + toks for _, toks in alive], dtype=np.int64)
            ctx = Tensor(np.broadcast_to(q.data[:1], (len(alive),) + q.shape[1:]))
            lp = _next_logprobs(model.lm(seqs, ctx).data[:, -1])
            cands = []
            for (score, toks), row in zip(alive, lp):
                for t in np.argsort(-row, kind="stable")[:k]:
                    cands.append((score + float(row[t]), toks + [int(t)]))
            cands.sort(key=key)
            alive = []
            for c in cands[:k]:
                if c[1][-1] == EOS:
                    finished.append(c)
                else:
                    alive.append(c)
            if not alive:
                break
            best_done = max((f[0] for f in finished), default=-math.inf)
            if best_done >= max(a[0] for a in alive):
                break
    if alive and step == max_steps - 1:
        finished.extend(alive)
    finished.sort(key=key)
    return finished[0][1]


def generate(model: IdcModel, queries_out: Tensor, mode: str = "greedy", k: int = 4) -> list[int]:
    """Decode one sample; returns tokens without BOS/EOS."""
    if mode == "greedy":
        return greedy_decode(model, queries_out)[0]
    if mode == "beam":
        toks = beam_decode(model, queries_out, k=k)
        return toks[:-1] if toks and toks[-1] == EOS else toks
    raise ValueError(f"unknown decoding mode {mode!r}")
