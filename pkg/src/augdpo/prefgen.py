"""Unsupervised preference-pair synthesis.

The frozen starting policy answers each question twice — once on the clean
image (chosen) and once on an augmented view (rejected) — then pairs whose
answers came out token-identical are filtered away.  No answer labels are
consulted anywhere in this module; the only inputs are (image, question)
pairs, the policy, and augmentation specs.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import AugmentSpec, apply
from .policy import Policy, TokenSequence
from .world import Episode, Question, ToyImage, sample_pairs


@dataclass
class PreferenceRecord:
    """One (prompt, chosen, rejected...) tuple; tokens stored as strings."""

    image_ref: dict  # {"episode": i, "question": j, "hash": content hash}
    question: Question
    chosen: list[str]
    rejected: list[list[str]]
    augment_provenance: list[AugmentSpec]

    def __post_init__(self):
        if len(self.rejected) != len(self.augment_provenance):
            raise ValueError("record: |rejected| != |augment_provenance|")
        for rej in self.rejected:
            if rej == self.chosen:
                raise ValueError("record: rejected equals chosen (must be filtered)")

    def to_dict(self) -> dict:
        return {
            "image_ref": self.image_ref,
            "question_tokens": list(self.question.text_tokens),
            "question": {"template": self.question.template_id, "args": list(self.question.args)},
            "chosen_tokens": list(self.chosen),
            "rejected_tokens": [list(r) for r in self.rejected],
            "augment": [s.to_dict() for s in self.augment_provenance],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PreferenceRecord":
        q = Question(
            d["question"]["template"], tuple(d["question"]["args"]), tuple(d["question_tokens"])
        )
        return cls(
            image_ref=d["image_ref"],
            question=q,
            chosen=list(d["chosen_tokens"]),
            rejected=[list(r) for r in d["rejected_tokens"]],
            augment_provenance=[AugmentSpec.from_dict(s) for s in d["augment"]],
        )


@dataclass
class PreferenceDataset:
    records: list[PreferenceRecord]
    raw_count: int  # pre-filter instance count (the reported "data scale")
    manifest: dict = field(default_factory=dict)

    @property
    def kept_count(self) -> int:
        return len(self.records)

    @property
    def retention_ratio(self) -> float:
        return self.kept_count / self.raw_count if self.raw_count else 0.0

    def save_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as f:
            for rec in self.records:
                f.write(json.dumps(rec.to_dict(), sort_keys=True))
                f.write("\n")

    def save_manifest(self, path: str | Path) -> None:
        doc = dict(self.manifest)
        doc["raw_count"] = self.raw_count
        doc["kept_count"] = self.kept_count
        with open(path, "w") as f:
            json.dump(doc, f, sort_keys=True, indent=2)
            f.write("\n")

    @classmethod
    def load_jsonl(cls, path: str | Path, manifest_path: str | Path | None = None) -> "PreferenceDataset":
        records = []
        with open(path) as f:
            for lineno, line in enumerate(f, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    records.append(PreferenceRecord.from_dict(json.loads(line)))
                except (json.JSONDecodeError, KeyError, ValueError) as e:
                    raise ValueError(f"{path}: corrupt record at line {lineno}: {e}") from e
        manifest = {}
        raw = len(records)
        if manifest_path is not None and Path(manifest_path).exists():
            with open(manifest_path) as f:
                manifest = json.load(f)
            raw = manifest.get("raw_count", raw)
        return cls(records=records, raw_count=raw, manifest=manifest)


class EmptyDatasetError(RuntimeError):
    """Filtering removed every pair; the augmentation is too weak to change
    any answer (e.g. identity).  Use a stronger augmentation."""


def _trimmed(policy: Policy, seq: TokenSequence) -> list[str]:
    return policy.answer_text(seq)


def generate_pair(
    policy: Policy,
    image: ToyImage,
    question: Question,
    spec: AugmentSpec,
    max_len: int = 10,
) -> tuple[TokenSequence, TokenSequence]:
    """Greedy answers on the clean and augmented image; the raw pair."""
    chosen = policy.generate(image, question, temperature=0.0, max_len=max_len)
    rejected = policy.generate(apply(spec, image), question, temperature=0.0, max_len=max_len)
    return chosen, rejected


@dataclass
class RawPair:
    image_ref: dict
    question: Question
    chosen: list[str]
    rejected: list[str]
    spec: AugmentSpec


def filter_equal(pairs: list[RawPair]) -> PreferenceDataset:
    """Keep exactly the pairs whose answers differ token-for-token."""
    records = [
        PreferenceRecord(
            image_ref=p.image_ref,
            question=p.question,
            chosen=p.chosen,
            rejected=[p.rejected],
            augment_provenance=[p.spec],
        )
        for p in pairs
        if p.chosen != p.rejected
    ]
    return PreferenceDataset(records=records, raw_count=len(pairs))


def _record_seed(seed: int, index: int, spec_index: int = 0) -> int:
    return int(np.random.SeedSequence([int(seed), int(index), int(spec_index)]).generate_state(1)[0])


def _pair_refs(corpus: list[Episode], k_per_episode: int, seed: int):
    """sample_pairs plus (episode, question) indices for provenance."""
    pairs = sample_pairs(corpus, k_per_episode, seed)
    refs = []
    cursor = 0
    for i, ep in enumerate(corpus):
        for _ in range(k_per_episode):
            image, question = pairs[cursor]
            qj = next(
                j for j, q in enumerate(ep.questions) if q is question
            )
            refs.append((i, qj, image, question))
            cursor += 1
    return refs


def build_dataset(
    corpus: list[Episode],
    policy: Policy,
    spec: AugmentSpec,
    n_pairs: int,
    seed: int,
    k_per_episode: int = 2,
    threads: int = 1,
    max_len: int = 10,
) -> PreferenceDataset:
    """Full synthesis: sample instances, answer clean vs augmented, filter.

    Deterministic for fixed inputs: the i-th record's augmentation seed is
    derived from (seed, i), so results are independent of thread count.
    """
    refs = _pair_refs(corpus, k_per_episode, seed)
    if n_pairs > len(refs):
        raise ValueError(f"build_dataset: n_pairs={n_pairs} exceeds available {len(refs)}")
    refs = refs[:n_pairs]

    def work(item):
        idx, (ei, qj, image, question) = item
        per_spec = spec.reseeded(_record_seed(seed, idx))
        chosen, rejected = generate_pair(policy, image, question, per_spec, max_len=max_len)
        return RawPair(
            image_ref={"episode": ei, "question": qj, "hash": image.content_hash()},
            question=question,
            chosen=_trimmed(policy, chosen),
            rejected=_trimmed(policy, rejected),
            spec=per_spec,
        )

    items = list(enumerate(refs))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            raw = list(pool.map(work, items))
    else:
        raw = [work(it) for it in items]

    dataset = filter_equal(raw)
    if not dataset.records:
        raise EmptyDatasetError(
            "all generated pairs were equal after filtering; "
            "use a stronger augmentation than "
            f"{spec.kind}({json.dumps(spec.params, sort_keys=True)})"
        )
    dataset.manifest = {
        "seed": seed,
        "n_pairs": n_pairs,
        "k_per_episode": k_per_episode,
        "augment": spec.to_dict(),
        "policy_hash": policy.checkpoint_hash(),
        "max_len": max_len,
    }
    return dataset


def build_multi_negative(
    corpus: list[Episode],
    policy: Policy,
    specs: list[AugmentSpec],
    n_pairs: int,
    seed: int,
    k_per_episode: int = 2,
    max_len: int = 10,
) -> PreferenceDataset:
    """One chosen answer per instance, one candidate negative per spec; each
    negative is filtered against the chosen answer and empty records drop."""
    if not specs:
        raise ValueError("build_multi_negative: needs at least one augmentation spec")
    refs = _pair_refs(corpus, k_per_episode, seed)
    if n_pairs > len(refs):
        raise ValueError(f"build_multi_negative: n_pairs={n_pairs} exceeds available {len(refs)}")
    refs = refs[:n_pairs]

    records = []
    for idx, (ei, qj, image, question) in enumerate(refs):
        chosen_seq = policy.generate(image, question, temperature=0.0, max_len=max_len)
        chosen = _trimmed(policy, chosen_seq)
        rejected, provenance = [], []
        for sj, spec in enumerate(specs):
            per_spec = spec.reseeded(_record_seed(seed, idx, sj))
            rej_seq = policy.generate(
                apply(per_spec, image), question, temperature=0.0, max_len=max_len
            )
            rej = _trimmed(policy, rej_seq)
            if rej != chosen:
                rejected.append(rej)
                provenance.append(per_spec)
        if rejected:
            records.append(
                PreferenceRecord(
                    image_ref={"episode": ei, "question": qj, "hash": image.content_hash()},
                    question=question,
                    chosen=chosen,
                    rejected=rejected,
                    augment_provenance=provenance,
                )
            )
    if not records:
        raise EmptyDatasetError(
            "all generated pairs were equal after filtering; use stronger augmentations"
        )
    dataset = PreferenceDataset(records=records, raw_count=len(refs))
    dataset.manifest = {
        "seed": seed,
        "n_pairs": n_pairs,
        "k_per_episode": k_per_episode,
        "augment": [s.to_dict() for s in specs],
        "policy_hash": policy.checkpoint_hash(),
        "max_len": max_len,
    }
    return dataset


def rebuild_from_manifest(
    corpus: list[Episode], policy: Policy, manifest: dict, threads: int = 1
) -> PreferenceDataset:
    """Replay a synthesis run from its manifest; bit-exact for the same
    corpus and checkpoint."""
    if manifest.get("policy_hash") not in (None, policy.checkpoint_hash()):
        raise ValueError("rebuild_from_manifest: policy checkpoint hash mismatch")
    aug = manifest["augment"]
    if isinstance(aug, list):
        return build_multi_negative(
            corpus,
            policy,
            [AugmentSpec.from_dict(a) for a in aug],
            n_pairs=manifest["n_pairs"],
            seed=manifest["seed"],
            k_per_episode=manifest.get("k_per_episode", 2),
            max_len=manifest.get("max_len", 10),
        )
    return build_dataset(
        corpus,
        policy,
        AugmentSpec.from_dict(aug),
        n_pairs=manifest["n_pairs"],
        seed=manifest["seed"],
        k_per_episode=manifest.get("k_per_episode", 2),
        threads=threads,
        max_len=manifest.get("max_len", 10),
    )
