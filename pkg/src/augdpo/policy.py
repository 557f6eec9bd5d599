"""Vision-conditioned autoregressive token policy.

The raster is flattened per cell and linearly projected into a sequence of
prefix embeddings; question and answer tokens follow.  A small causal trunk
(self-attention by default, a gated recurrent variant as an option) predicts
next-token logits, so the model both scores answer sequences exactly and
generates them greedily or by seeded sampling.  Low-rank adapters can be
attached for preference training with the base weights frozen.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .optim import Adam
from .world import Episode, Question, ToyImage, WorldConfig

PAD, BOS, EOS, SEP = "<pad>", "<bos>", "<eos>", "<sep>"
SPECIALS = (PAD, BOS, EOS, SEP)

_WORDS = ("read", "row", "col", "count", "glyph", "at", "exists", "blank", "yes", "no")
_DIGITS = tuple(str(d) for d in range(10))


class Tokenizer:
    """Whitespace token <-> id map over a fixed small vocabulary."""

    def __init__(self, tokens: list[str]):
        if len(set(tokens)) != len(tokens):
            raise ValueError("tokenizer: duplicate tokens")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        for special in SPECIALS:
            if special not in self.index:
                raise ValueError(f"tokenizer: missing special token {special}")
        self.pad_id = self.index[PAD]
        self.bos_id = self.index[BOS]
        self.eos_id = self.index[EOS]
        self.sep_id = self.index[SEP]

    @classmethod
    def for_world(cls, config: WorldConfig) -> "Tokenizer":
        return cls(list(SPECIALS) + config.glyph_names() + list(_DIGITS) + list(_WORDS))

    @property
    def size(self) -> int:
        return len(self.tokens)

    def encode(self, text: str | list[str] | tuple[str, ...]) -> list[int]:
        parts = text.split() if isinstance(text, str) else list(text)
        try:
            return [self.index[t] for t in parts]
        except KeyError as e:
            raise KeyError(f"tokenizer: unknown token {e.args[0]!r}") from None

    def decode(self, ids: list[int]) -> str:
        return " ".join(self.tokens[i] for i in ids)

    def decode_tokens(self, ids: list[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


@dataclass
class TokenSequence:
    """EOS-terminated token id sequence with an optional model log-prob."""

    tokens: list[int]
    logprob: float | None = None

    def __post_init__(self):
        if not self.tokens:
            raise ValueError("token sequence must be nonempty")

    def content(self, eos_id: int) -> list[int]:
        toks = list(self.tokens)
        while toks and toks[-1] == eos_id:
            toks.pop()
        return toks


@dataclass
class PolicyConfig:
    d_model: int = 64
    n_layers: int = 2
    d_ff: int = 128
    max_text_len: int = 24
    trunk: str = "attention"  # or "recurrent"
    grid_h: int = 8
    grid_w: int = 8
    cell_px: int = 4
    ln_eps: float = 1e-5
    init_scale: float = 0.02

    @property
    def n_patches(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def patch_dim(self) -> int:
        return self.cell_px * self.cell_px

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "d_ff": self.d_ff,
            "max_text_len": self.max_text_len,
            "trunk": self.trunk,
            "grid_h": self.grid_h,
            "grid_w": self.grid_w,
            "cell_px": self.cell_px,
            "ln_eps": self.ln_eps,
            "init_scale": self.init_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        return cls(**d)

    @classmethod
    def for_world(cls, world: WorldConfig, **overrides) -> "PolicyConfig":
        return cls(grid_h=world.height, grid_w=world.width, cell_px=world.cell_px, **overrides)


@dataclass
class LoraAdapter:
    """Low-rank update for one weight: W_eff = W + (alpha/rank) * down @ up."""

    down: Tensor  # (d_in, rank), random init
    up: Tensor  # (rank, d_out), zero init so the adapted model starts as the base
    rank: int
    alpha: float


class Policy:
    """Token policy pi(y | image, question) with optional low-rank adapters."""

    def __init__(self, config: PolicyConfig, tokenizer: Tokenizer, seed: int = 0):
        if config.trunk not in ("attention", "recurrent"):
            raise ValueError(f"unknown trunk {config.trunk!r}")
        self.config = config
        self.tokenizer = tokenizer
        self.params: dict[str, Tensor] = {}
        self.lora: dict[str, LoraAdapter] = {}
        self._mask_cache: dict[int, Tensor] = {}
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xA11C])))
        self._init_params(rng)

    # -- parameters -----------------------------------------------------

    def _p(self, name: str, shape: tuple[int, ...], rng, kind: str = "normal") -> None:
        if kind == "normal":
            data = rng.normal(0.0, self.config.init_scale, size=shape)
        elif kind == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        self.params[name] = Tensor(data, requires_grad=True)

    def _init_params(self, rng) -> None:
        c = self.config
        V, d = self.tokenizer.size, c.d_model
        self._p("enc.w", (c.patch_dim, d), rng)
        self._p("enc.row_pos", (c.grid_h, d), rng)
        self._p("enc.col_pos", (c.grid_w, d), rng)
        self._p("tok_emb", (V, d), rng)
        self._p("text_pos", (c.max_text_len, d), rng)
        for i in range(c.n_layers):
            if c.trunk == "attention":
                for w in ("wq", "wk", "wv", "wo"):
                    self._p(f"l{i}.attn.{w}", (d, d), rng)
            else:
                for w in ("wz", "uz", "wh", "uh"):
                    self._p(f"l{i}.rec.{w}", (d, d), rng)
            self._p(f"l{i}.ln1.g", (d,), rng, "ones")
            self._p(f"l{i}.ln1.b", (d,), rng, "zeros")
            self._p(f"l{i}.mlp.w1", (d, c.d_ff), rng)
            self._p(f"l{i}.mlp.w2", (c.d_ff, d), rng)
            self._p(f"l{i}.ln2.g", (d,), rng, "ones")
            self._p(f"l{i}.ln2.b", (d,), rng, "zeros")
        self._p("ln_f.g", (d,), rng, "ones")
        self._p("ln_f.b", (d,), rng, "zeros")
        self._p("head.w", (d, V), rng)

    def adapted_weight_names(self) -> list[str]:
        names = []
        for i in range(self.config.n_layers):
            if self.config.trunk == "attention":
                names += [f"l{i}.attn.{w}" for w in ("wq", "wk", "wv", "wo")]
            else:
                names += [f"l{i}.rec.{w}" for w in ("wz", "uz", "wh", "uh")]
        names.append("head.w")
        return names

    def trainable_params(self) -> dict[str, Tensor]:
        if self.lora:
            out = {}
            for name, adapter in self.lora.items():
                out[f"{name}.lora_down"] = adapter.down
                out[f"{name}.lora_up"] = adapter.up
            return out
        return {k: p for k, p in self.params.items() if p.requires_grad}

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def _weight(self, name: str) -> Tensor:
        base = self.params[name]
        adapter = self.lora.get(name)
        if adapter is None:
            return base
        update = ad.matmul(adapter.down, adapter.up)
        return ad.add(base, ad.scale(update, adapter.alpha / adapter.rank))

    # -- forward --------------------------------------------------------

    def _normalize_pixels(self, image: ToyImage) -> np.ndarray:
        px = image.pixels
        if image.norm_range is not None:
            lo, hi = image.norm_range
            px = (px - lo) / (hi - lo + 1e-12)
            px = np.clip(px, 0.0, 1.0)
        return px

    def _patches(self, image: ToyImage) -> np.ndarray:
        c = self.config
        px = self._normalize_pixels(image)
        if px.shape != (c.grid_h * c.cell_px, c.grid_w * c.cell_px):
            raise ad.ShapeError("encode_image", px.shape, (c.grid_h * c.cell_px, c.grid_w * c.cell_px))
        s = c.cell_px
        return (
            px.reshape(c.grid_h, s, c.grid_w, s)
            .transpose(0, 2, 1, 3)
            .reshape(c.n_patches, c.patch_dim)
        )

    def _causal_mask(self, n: int) -> Tensor:
        cached = self._mask_cache.get(n)
        if cached is None:
            m = np.triu(np.full((n, n), -1e9), k=1)
            cached = Tensor(m)
            self._mask_cache[n] = cached
        return cached

    def _encode_prefix(self, image: ToyImage) -> Tensor:
        c = self.config
        x = ad.matmul(Tensor(self._patches(image)), self.params["enc.w"])
        rows = np.repeat(np.arange(c.grid_h), c.grid_w)
        cols = np.tile(np.arange(c.grid_w), c.grid_h)
        x = ad.add(x, ad.take_rows(self.params["enc.row_pos"], rows))
        x = ad.add(x, ad.take_rows(self.params["enc.col_pos"], cols))
        return x

    def _embed_text(self, ids: list[int]) -> Tensor:
        if len(ids) > self.config.max_text_len:
            raise ValueError(
                f"text length {len(ids)} exceeds max_text_len {self.config.max_text_len}"
            )
        tok = ad.take_rows(self.params["tok_emb"], np.asarray(ids, dtype=np.intp))
        pos = ad.take_rows(self.params["text_pos"], np.arange(len(ids)))
        return ad.add(tok, pos)

    def _attention_block(self, i: int, x: Tensor) -> Tensor:
        c = self.config
        n = x.shape[0]
        a_in = ad.layer_norm(x, self.params[f"l{i}.ln1.g"], self.params[f"l{i}.ln1.b"], c.ln_eps)
        q = ad.matmul(a_in, self._weight(f"l{i}.attn.wq"))
        k = ad.matmul(a_in, self._weight(f"l{i}.attn.wk"))
        v = ad.matmul(a_in, self._weight(f"l{i}.attn.wv"))
        scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(c.d_model))
        scores = ad.add(scores, self._causal_mask(n))
        ctx = ad.matmul(ad.softmax(scores), v)
        x = ad.add(x, ad.matmul(ctx, self._weight(f"l{i}.attn.wo")))
        m_in = ad.layer_norm(x, self.params[f"l{i}.ln2.g"], self.params[f"l{i}.ln2.b"], c.ln_eps)
        h = ad.gelu(ad.matmul(m_in, self.params[f"l{i}.mlp.w1"]))
        return ad.add(x, ad.matmul(h, self.params[f"l{i}.mlp.w2"]))

    def _recurrent_block(self, i: int, x: Tensor) -> Tensor:
        """Minimal gated recurrence; causal by construction, O(T) python loop."""
        c = self.config
        n = x.shape[0]
        r_in = ad.layer_norm(x, self.params[f"l{i}.ln1.g"], self.params[f"l{i}.ln1.b"], c.ln_eps)
        xz = ad.matmul(r_in, self._weight(f"l{i}.rec.wz"))
        xh = ad.matmul(r_in, self._weight(f"l{i}.rec.wh"))
        uz = self._weight(f"l{i}.rec.uz")
        uh = self._weight(f"l{i}.rec.uh")
        h_prev = Tensor(np.zeros((1, c.d_model)))
        outs = []
        for t in range(n):
            row = np.asarray([t], dtype=np.intp)
            z = ad.sigmoid(ad.add(ad.take_rows(xz, row), ad.matmul(h_prev, uz)))
            cand = ad.tanh(ad.add(ad.take_rows(xh, row), ad.matmul(h_prev, uh)))
            keep = ad.mul(ad.sub(Tensor(np.ones((1, c.d_model))), z), h_prev)
            h_prev = ad.add(keep, ad.mul(z, cand))
            outs.append(h_prev)
        rec = ad.concat_rows(outs)
        x = ad.add(x, rec)
        m_in = ad.layer_norm(x, self.params[f"l{i}.ln2.g"], self.params[f"l{i}.ln2.b"], c.ln_eps)
        h = ad.gelu(ad.matmul(m_in, self.params[f"l{i}.mlp.w1"]))
        return ad.add(x, ad.matmul(h, self.params[f"l{i}.mlp.w2"]))

    def _trunk(self, image: ToyImage, text_ids: list[int]) -> Tensor:
        x = ad.concat_rows([self._encode_prefix(image), self._embed_text(text_ids)])
        for i in range(self.config.n_layers):
            if self.config.trunk == "attention":
                x = self._attention_block(i, x)
            else:
                x = self._recurrent_block(i, x)
        return ad.layer_norm(x, self.params["ln_f.g"], self.params["ln_f.b"], self.config.ln_eps)

    def logits_at(self, image: ToyImage, text_ids: list[int], positions: np.ndarray) -> Tensor:
        """Next-token logits at the given text positions (0 = first text token)."""
        h = self._trunk(image, text_ids)
        sel = ad.take_rows(h, np.asarray(positions, dtype=np.intp) + self.config.n_patches)
        return ad.matmul(sel, self._weight("head.w"))

    def _prompt_ids(self, question: Question) -> list[int]:
        tk = self.tokenizer
        return [tk.bos_id] + tk.encode(question.text_tokens) + [tk.sep_id]

    def sequence_logprob(self, image: ToyImage, question: Question, answer: TokenSequence) -> Tensor:
        """Scalar sum_i log pi(y_i | y_<i, image, question); differentiable."""
        tk = self.tokenizer
        ids = answer.tokens
        if not ids or ids[-1] != tk.eos_id:
            raise ValueError("answer must be nonempty and EOS-terminated")
        if max(ids) >= tk.size or min(ids) < 0:
            raise ValueError("answer contains token id outside vocabulary")
        prompt = self._prompt_ids(question)
        text = prompt + list(ids)
        # Position p predicts text[p + 1]; answer tokens start at len(prompt).
        positions = np.arange(len(prompt) - 1, len(text) - 1)
        logits = self.logits_at(image, text, positions)
        logp = ad.log_softmax(logits)
        picked = ad.gather_index(logp, np.asarray(ids, dtype=np.intp))
        return ad.reduce_sum(picked)

    def next_token_distribution(self, image: ToyImage, text_ids: list[int]) -> np.ndarray:
        """Probability vector over the vocabulary at the last position."""
        with no_grad():
            logits = self.logits_at(image, text_ids, np.asarray([len(text_ids) - 1]))
            return np.exp(ad.log_softmax(logits).data[0])

    def generate(
        self,
        image: ToyImage,
        question: Question,
        temperature: float = 0.0,
        max_len: int = 10,
        seed: int = 0,
    ) -> TokenSequence:
        """Greedy (temperature 0) or seeded-sampled decoding; always
        EOS-terminated, forcing EOS at the max_len-th step."""
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        if temperature < 0:
            raise ValueError("temperature must be >= 0")
        tk = self.tokenizer
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
        text = self._prompt_ids(question)
        out: list[int] = []
        logprob = 0.0
        with no_grad():
            for step in range(max_len):
                logits = self.logits_at(image, text, np.asarray([len(text) - 1])).data[0]
                logits = logits - logits.max()
                logp = logits - np.log(np.exp(logits).sum())
                if step == max_len - 1:
                    tok = tk.eos_id
                elif temperature == 0.0:
                    tok = int(np.argmax(logits))
                else:
                    scaled = logits / temperature
                    scaled -= scaled.max()
                    p = np.exp(scaled)
                    p /= p.sum()
                    tok = int(rng.choice(len(p), p=p))
                out.append(tok)
                logprob += float(logp[tok])
                if tok == tk.eos_id:
                    break
                text.append(tok)
        return TokenSequence(tokens=out, logprob=logprob)

    def answer_text(self, seq: TokenSequence) -> list[str]:
        return self.tokenizer.decode_tokens(seq.content(self.tokenizer.eos_id))

    # -- copying / adapters ----------------------------------------------

    def clone(self, frozen: bool = False) -> "Policy":
        other = object.__new__(Policy)
        other.config = replace(self.config)
        other.tokenizer = self.tokenizer
        other.params = {
            k: Tensor(p.data.copy(), requires_grad=(p.requires_grad and not frozen))
            for k, p in self.params.items()
        }
        other.lora = {
            name: LoraAdapter(
                down=Tensor(a.down.data.copy(), requires_grad=not frozen),
                up=Tensor(a.up.data.copy(), requires_grad=not frozen),
                rank=a.rank,
                alpha=a.alpha,
            )
            for name, a in self.lora.items()
        }
        other._mask_cache = {}
        return other

    def checkpoint_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        for name in sorted(self.lora):
            a = self.lora[name]
            h.update(name.encode())
            h.update(a.down.data.tobytes())
            h.update(a.up.data.tobytes())
        return h.hexdigest()[:16]

    def save(self, path) -> None:
        meta = {
            "version": 1,
            "config": self.config.to_dict(),
            "vocab": self.tokenizer.tokens,
            "lora": {
                name: {"rank": a.rank, "alpha": a.alpha} for name, a in self.lora.items()
            },
            "hash": self.checkpoint_hash(),
        }
        arrays = {f"param/{k}": p.data for k, p in self.params.items()}
        for name, a in self.lora.items():
            arrays[f"lora_down/{name}"] = a.down.data
            arrays[f"lora_up/{name}"] = a.up.data
        np.savez(path, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)

    @classmethod
    def load(cls, path) -> "Policy":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            config = PolicyConfig.from_dict(meta["config"])
            tokenizer = Tokenizer(meta["vocab"])
            policy = cls(config, tokenizer, seed=0)
            for k in list(policy.params):
                policy.params[k] = Tensor(z[f"param/{k}"], requires_grad=True)
            for name, info in meta.get("lora", {}).items():
                policy.params[name].requires_grad = False
                policy.lora[name] = LoraAdapter(
                    down=Tensor(z[f"lora_down/{name}"], requires_grad=True),
                    up=Tensor(z[f"lora_up/{name}"], requires_grad=True),
                    rank=int(info["rank"]),
                    alpha=float(info["alpha"]),
                )
            if policy.lora:
                for p in policy.params.values():
                    p.requires_grad = False
        return policy


def attach_lora(policy: Policy, r: int, alpha: float | None = None, seed: int = 0) -> Policy:
    """Return a copy with trainable low-rank adapters on the trunk projections
    and output head; base weights frozen.  The zero-initialized up-projection
    makes the adapted model output-identical to the base at step 0.

    At full scale the customary preset is r=1024, alpha=2048; toy widths cap
    r at min(d_in, d_out).
    """
    if r < 1:
        raise ValueError("lora rank must be >= 1")
    if alpha is None:
        alpha = 2.0 * r
    adapted = policy.clone(frozen=True)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x10EA])))
    for name in adapted.adapted_weight_names():
        d_in, d_out = adapted.params[name].data.shape
        if r > min(d_in, d_out):
            raise ValueError(
                f"lora rank {r} exceeds min dimension {min(d_in, d_out)} of {name}"
            )
        adapted.lora[name] = LoraAdapter(
            down=Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, r)), requires_grad=True),
            up=Tensor(np.zeros((r, d_out)), requires_grad=True),
            rank=r,
            alpha=float(alpha),
        )
    return adapted


def lora_param_count(policy: Policy) -> int:
    return sum(a.down.data.size + a.up.data.size for a in policy.lora.values())


# ---------------------------------------------------------------------------
# Supervised pretraining on clean episodes (the starting checkpoint).
# ---------------------------------------------------------------------------


@dataclass
class SftConfig:
    steps: int = 2400
    batch_size: int = 32
    learning_rate: float = 3e-3
    weight_decay: float = 0.0
    seed: int = 0
    holdout_fraction: float = 0.1
    eval_every: int = 200

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "seed": self.seed,
            "holdout_fraction": self.holdout_fraction,
            "eval_every": self.eval_every,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SftConfig":
        return cls(**d)


class TrainingDiverged(RuntimeError):
    pass


def _instances(episodes: list[Episode]) -> list[tuple[ToyImage, Question, list[str]]]:
    out = []
    for ep in episodes:
        if ep.truth is None:
            raise ValueError("supervised training requires episodes with truth")
        for q, t in zip(ep.questions, ep.truth):
            out.append((ep.image, q, t))
    return out


def _answer_seq(tokenizer: Tokenizer, answer_tokens: list[str]) -> TokenSequence:
    return TokenSequence(tokenizer.encode(answer_tokens) + [tokenizer.eos_id])


def holdout_cross_entropy(policy: Policy, items) -> float:
    """Mean per-token negative log-likelihood over (image, question, truth)."""
    total, n_tok = 0.0, 0
    with no_grad():
        for image, question, truth in items:
            seq = _answer_seq(policy.tokenizer, truth)
            total -= policy.sequence_logprob(image, question, seq).item()
            n_tok += len(seq.tokens)
    return total / max(n_tok, 1)


def sft_train(
    policy: Policy,
    episodes: list[Episode],
    config: SftConfig,
    history: list | None = None,
) -> Policy:
    """Teacher-forced cross-entropy training on clean answers; returns the
    trained policy (the caller freezes it as the reference checkpoint)."""
    items = _instances(episodes)
    if not items:
        raise ValueError("sft_train: empty corpus")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, 0x5F7])))
    n_holdout = int(len(items) * config.holdout_fraction)
    perm = rng.permutation(len(items))
    holdout = [items[i] for i in perm[:n_holdout]]
    train = [items[i] for i in perm[n_holdout:]]
    if not train:
        raise ValueError("sft_train: holdout fraction leaves no training items")

    opt = Adam(
        policy.trainable_params(),
        lr=config.learning_rate,
        weight_decay=config.weight_decay,
    )
    start_ce = holdout_cross_entropy(policy, holdout) if holdout else None
    for step in range(config.steps):
        batch_idx = rng.integers(0, len(train), size=config.batch_size)
        opt.zero_grad()
        loss = None
        for i in batch_idx:
            image, question, truth = train[i]
            seq = _answer_seq(policy.tokenizer, truth)
            nll = ad.scale(policy.sequence_logprob(image, question, seq), -1.0 / len(seq.tokens))
            loss = nll if loss is None else ad.add(loss, nll)
        loss = ad.scale(loss, 1.0 / config.batch_size)
        if not np.isfinite(loss.data):
            raise TrainingDiverged(
                "sft_train: non-finite loss at step "
                f"{step}; config = {json.dumps(config.to_dict(), sort_keys=True)}"
            )
        ad.backward(loss)
        opt.step()
        if history is not None and (step % config.eval_every == 0 or step == config.steps - 1):
            ce = holdout_cross_entropy(policy, holdout) if holdout else float("nan")
            history.append({"step": step, "train_loss": float(loss.data), "holdout_ce": ce})
    if history is not None and start_ce is not None:
        history.insert(0, {"step": -1, "train_loss": float("nan"), "holdout_ce": start_ce})
    return policy
