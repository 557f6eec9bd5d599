"""Preference optimization: implicit rewards, pairwise and multi-negative
losses, the contrastive-loss bridge, the training loop, and KL diagnostics.

The loss kernel is softplus(-z) with z the scaled log-ratio margin; at
policy == reference every margin is zero and the loss is exactly ln 2, which
the trainer asserts at step 0 (zero-initialized adapters guarantee it).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .optim import Adam
from .policy import Policy, TokenSequence
from .prefgen import PreferenceDataset, PreferenceRecord
from .world import Episode, Question, ToyImage

LN2 = math.log(2.0)


@dataclass
class DpoConfig:
    beta: float = 0.1
    epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    lora_rank: int = 16
    lora_alpha: float | None = None  # default 2 * rank
    multi_mode: str = "sum"  # "sum" (displayed form) or "softmax" (cross-entropy form)

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        if self.multi_mode not in ("sum", "softmax"):
            raise ValueError("multi_mode must be 'sum' or 'softmax'")

    def to_dict(self) -> dict:
        return {
            "beta": self.beta,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "seed": self.seed,
            "lora_rank": self.lora_rank,
            "lora_alpha": self.lora_alpha,
            "multi_mode": self.multi_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DpoConfig":
        return cls(**d)


# The batch size / learning rate used at full model scale; kept as a preset,
# not the toy default (2e-6 presumes billions of parameters).
PAPER_SCALE_PRESET = {"epochs": 1, "batch_size": 128, "learning_rate": 2e-6, "weight_decay": 0.0}


def bt_probability(r_c: float, r_r, multi: bool = False) -> float:
    """Probability that the chosen response is preferred, as a softmax over
    scalar rewards; `multi` admits a sequence of rival rewards."""
    if multi:
        rivals = [float(r) for r in r_r]
    else:
        rivals = [float(r_r)]
    scores = np.array([float(r_c)] + rivals)
    return float(np.exp(scores[0] - logsumexp(scores)))


def sequence_from_tokens(policy: Policy, tokens: list[str]) -> TokenSequence:
    tk = policy.tokenizer
    return TokenSequence(tk.encode(tokens) + [tk.eos_id])


def implicit_reward(
    policy: Policy,
    ref: Policy,
    image: ToyImage,
    question: Question,
    answer: TokenSequence,
    beta: float,
) -> Tensor:
    """beta * log(pi(y|x) / pi_ref(y|x)); the additive constant of the exact
    reward cancels in every pairwise difference and is never materialized."""
    lp = policy.sequence_logprob(image, question, answer)
    with no_grad():
        lp_ref = ref.sequence_logprob(image, question, answer).item()
    return ad.scale(ad.add(lp, Tensor(-lp_ref)), beta)


def _resolve_image(record: PreferenceRecord, corpus: list[Episode]) -> ToyImage:
    image = corpus[record.image_ref["episode"]].image
    if image.content_hash() != record.image_ref["hash"]:
        raise ValueError("record image hash does not match corpus (wrong corpus?)")
    return image


def _margin_terms(
    policy: Policy, ref: Policy, record: PreferenceRecord, image: ToyImage, beta: float
):
    """Autodiff margin pieces for one record: (beta*delta_chosen, [beta*delta_rejected...])."""
    q = record.question
    chosen = sequence_from_tokens(policy, record.chosen)
    d_c = implicit_reward(policy, ref, image, q, chosen, beta)
    d_rs = []
    for rej in record.rejected:
        seq = sequence_from_tokens(policy, rej)
        d_rs.append(implicit_reward(policy, ref, image, q, seq, beta))
    return d_c, d_rs


def _pair_loss(d_c: Tensor, d_r: Tensor) -> Tensor:
    return ad.softplus(ad.scale(ad.sub(d_c, d_r), -1.0))


def _logsumexp2(a: Tensor, b: Tensor) -> Tensor:
    # log(e^a + e^b) = a + softplus(b - a); exact and differentiable.
    return ad.add(a, ad.softplus(ad.sub(b, a)))


def dpo_loss(
    policy: Policy,
    ref: Policy,
    batch: list[PreferenceRecord],
    beta: float,
    corpus: list[Episode],
) -> Tensor:
    """Mean softplus(-(beta*delta_chosen - beta*delta_rejected)) over a batch
    of single-negative records; gradient flows only into the policy."""
    if not batch:
        raise ValueError("dpo_loss: empty batch")
    total = None
    for record in batch:
        if len(record.rejected) != 1:
            raise ValueError(
                "dpo_loss: record has multiple negatives; use dpo_loss_multi"
            )
        image = _resolve_image(record, corpus)
        d_c, d_rs = _margin_terms(policy, ref, record, image, beta)
        term = _pair_loss(d_c, d_rs[0])
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / len(batch))


def dpo_loss_multi(
    policy: Policy,
    ref: Policy,
    batch: list[PreferenceRecord],
    beta: float,
    corpus: list[Episode],
    mode: str = "sum",
) -> Tensor:
    """Generalized loss for records with one or more negatives.

    mode="sum": -log sigma(beta*delta_c - sum_r beta*delta_r), the displayed
    generalization; reduces exactly to the pairwise loss when |rejected| = 1.
    mode="softmax": cross-entropy of the chosen response against all
    negatives, -log softmax(beta*delta_c over {chosen} + rivals); the two
    modes coincide for a single negative but differ for more.
    """
    if not batch:
        raise ValueError("dpo_loss_multi: empty batch")
    if mode not in ("sum", "softmax"):
        raise ValueError("mode must be 'sum' or 'softmax'")
    total = None
    for record in batch:
        if not record.rejected:
            raise ValueError("dpo_loss_multi: record has no negatives")
        image = _resolve_image(record, corpus)
        d_c, d_rs = _margin_terms(policy, ref, record, image, beta)
        if mode == "sum":
            acc = d_rs[0]
            for d_r in d_rs[1:]:
                acc = ad.add(acc, d_r)
            term = ad.softplus(ad.scale(ad.sub(d_c, acc), -1.0))
        else:
            lse = d_c
            for d_r in d_rs:
                lse = _logsumexp2(lse, d_r)
            term = ad.sub(lse, d_c)
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / len(batch))


def infonce_bridge(f_pos: float, f_negs, tau: float = 1.0):
    """Contrastive losses from caller-supplied scores.

    Returns (L_n, L_1): L_n is the full multi-negative loss, the negative log
    softmax of the positive over one positive and n negatives at temperature
    tau; L_1 is the single-negative form (defined only when exactly one
    negative is given), identically softplus(-(s_pos - s_neg)) — the same
    scalar function of its scores as the pairwise preference log-likelihood.
    """
    negs = [float(x) for x in np.atleast_1d(f_negs)]
    if not negs:
        raise ValueError("infonce_bridge: needs at least one negative score")
    if tau <= 0:
        raise ValueError("infonce_bridge: tau must be > 0")
    s_pos = float(f_pos) / tau
    s_negs = [x / tau for x in negs]
    scores = np.array([s_pos] + s_negs)
    l_n = float(logsumexp(scores) - s_pos)
    l_1 = None
    if len(s_negs) == 1:
        z = s_pos - s_negs[0]
        l_1 = float(np.maximum(-z, 0.0) + np.log1p(np.exp(-abs(z))))
    return l_n, l_1


@dataclass
class StepRow:
    step: int
    epoch: int
    loss: float
    margin: float
    margin_pos_frac: float
    kl_estimate: float | None = None


@dataclass
class EpochProbe:
    epoch: int
    mean_margin: float
    margin_pos_frac: float
    mean_loss: float


@dataclass
class TrainLog:
    rows: list[StepRow] = field(default_factory=list)
    epoch_probes: list[EpochProbe] = field(default_factory=list)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "epoch", "loss", "margin", "margin_pos_frac", "kl_estimate"])
            for r in self.rows:
                w.writerow(
                    [
                        r.step,
                        r.epoch,
                        repr(r.loss),
                        repr(r.margin),
                        repr(r.margin_pos_frac),
                        "" if r.kl_estimate is None else repr(r.kl_estimate),
                    ]
                )

    def assert_finite(self) -> None:
        for r in self.rows:
            if not (math.isfinite(r.loss) and math.isfinite(r.margin)):
                raise ValueError(f"non-finite telemetry at step {r.step}")


class DpoDiverged(RuntimeError):
    def __init__(self, msg: str, last_good: Policy | None = None):
        super().__init__(msg)
        self.last_good = last_good


def margin_stats(
    policy: Policy,
    ref: Policy,
    records: list[PreferenceRecord],
    beta: float,
    corpus: list[Episode],
) -> tuple[float, float, float]:
    """(mean margin, margin-positive fraction, mean loss) without gradients.

    The margin of a record is beta * (delta_chosen - mean delta_rejected).
    """
    margins, losses = [], []
    with no_grad():
        for record in records:
            image = _resolve_image(record, corpus)
            d_c, d_rs = _margin_terms(policy, ref, record, image, beta)
            dc = d_c.item()
            drs = [d.item() for d in d_rs]
            margin = dc - sum(drs) / len(drs)
            margins.append(margin)
            z = dc - sum(drs)
            losses.append(float(np.maximum(-z, 0.0) + np.log1p(np.exp(-abs(z)))))
    margins = np.array(margins)
    return float(margins.mean()), float((margins > 0).mean()), float(np.mean(losses))


def train_dpo(
    policy: Policy,
    ref: Policy,
    dataset: PreferenceDataset,
    config: DpoConfig,
    corpus: list[Episode],
) -> tuple[Policy, TrainLog]:
    """Optimize the adapted policy on the preference dataset.

    `ref` must be the frozen starting checkpoint and `policy` an adapted copy
    of it; with zero-initialized adapters the step-0 logged loss is ln 2.
    Aborts on non-finite loss, carrying the last good parameter state.
    """
    if not dataset.records:
        raise ValueError("train_dpo: empty dataset")
    multi = any(len(r.rejected) != 1 for r in dataset.records)
    trainable = policy.trainable_params()
    if not trainable:
        raise ValueError("train_dpo: policy has no trainable parameters")
    opt = Adam(
        trainable,
        lr=config.learning_rate,
        weight_decay=config.weight_decay,
    )
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, 0xD90])))
    log = TrainLog()
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset.records))
        for lo in range(0, len(order), config.batch_size):
            batch = [dataset.records[i] for i in order[lo : lo + config.batch_size]]
            opt.zero_grad()
            if multi:
                loss = dpo_loss_multi(policy, ref, batch, config.beta, corpus, config.multi_mode)
            else:
                loss = dpo_loss(policy, ref, batch, config.beta, corpus)
            loss_val = float(loss.data)
            if not math.isfinite(loss_val):
                last_good = policy.clone()
                ad.clear_graph()
                raise DpoDiverged(
                    f"train_dpo: non-finite loss at step {step}; "
                    f"config = {json.dumps(config.to_dict(), sort_keys=True)}",
                    last_good=last_good,
                )
            with no_grad():
                m_mean, m_pos, _ = margin_stats(policy, ref, batch, config.beta, corpus)
            log.rows.append(
                StepRow(step=step, epoch=epoch, loss=loss_val, margin=m_mean, margin_pos_frac=m_pos)
            )
            ad.backward(loss)
            opt.step()
            step += 1
        mm, mp, ml = margin_stats(policy, ref, dataset.records, config.beta, corpus)
        log.epoch_probes.append(
            EpochProbe(epoch=epoch, mean_margin=mm, margin_pos_frac=mp, mean_loss=ml)
        )
    log.assert_finite()
    return policy, log


@dataclass
class KlEstimate:
    mean: float
    stderr: float
    n: int


def kl_diagnostic(
    policy: Policy,
    ref: Policy,
    prompts: list[tuple[ToyImage, Question]],
    n_samples: int = 4,
    seed: int = 0,
    max_len: int = 10,
) -> KlEstimate:
    """Monte Carlo estimate of E_x KL(pi(.|x) || pi_ref(.|x)) from sampled
    sequences' log-ratios.  Exactly zero pointwise when policy == ref."""
    if n_samples < 1:
        raise ValueError("kl_diagnostic: n_samples must be >= 1")
    terms = []
    with no_grad():
        for pi, (image, question) in enumerate(prompts):
            for si in range(n_samples):
                draw_seed = int(
                    np.random.SeedSequence([seed, pi, si]).generate_state(1)[0]
                )
                sample = policy.generate(
                    image, question, temperature=1.0, max_len=max_len, seed=draw_seed
                )
                lp = policy.sequence_logprob(image, question, sample).item()
                lp_ref = ref.sequence_logprob(image, question, sample).item()
                terms.append(lp - lp_ref)
    arr = np.array(terms)
    stderr = float(arr.std(ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else 0.0
    return KlEstimate(mean=float(arr.mean()), stderr=stderr, n=len(arr))
