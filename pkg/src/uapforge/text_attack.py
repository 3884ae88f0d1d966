"""Universal trigger words mined from the training corpus by masking and substitution."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .dataset import PairedDataset, expand_by_captions
from .errors import ContractError, DatasetError, ParameterError
from .objectives import kl_rows
from .toyworld import MASK_TOKEN

log = logging.getLogger(__name__)

POLICIES = ("random", "importance")


@dataclass(frozen=True)
class TextConfig:
    epsilon_T: int = 1
    iterations: int = 15
    top_k: int = 3
    sample_count: int = 32
    mask_token: str = MASK_TOKEN
    policy: str = "importance"
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.epsilon_T < 1:
            problems.append("epsilon_T must be >= 1")
        if self.iterations < 1:
            problems.append("iterations must be >= 1")
        if self.top_k < 1:
            problems.append("top_k must be >= 1")
        if self.sample_count < 1:
            problems.append("sample_count must be >= 1")
        if self.policy not in POLICIES:
            problems.append(f"policy must be one of {POLICIES}")
        if not self.temperature > 0:
            problems.append("temperature must be > 0")
        if problems:
            raise ParameterError("; ".join(problems))


@dataclass(frozen=True)
class TriggerLexicon:
    ranked: tuple  # ((token, score), ...), score desc then token asc

    def __post_init__(self):
        ranked = tuple((str(t), float(s)) for t, s in self.ranked)
        keys = [(-s, t) for t, s in ranked]
        if any(a >= b for a, b in zip(keys, keys[1:])):
            raise ContractError("lexicon must be strictly sorted by (score desc, token asc)")
        object.__setattr__(self, "ranked", ranked)

    @property
    def top(self) -> str:
        if not self.ranked:
            raise ContractError("empty lexicon")
        return self.ranked[0][0]

    def __len__(self):
        return len(self.ranked)


@dataclass(frozen=True)
class TextTrigger:
    token: str
    budget: int = 1
    policy: str = "importance"

    def __post_init__(self):
        if self.budget < 1:
            raise ParameterError("substitution budget must be >= 1")
        if self.policy not in POLICIES:
            raise ParameterError(f"policy must be one of {POLICIES}")


def _encode_pair_refs(bundle, images, captions):
    with torch.no_grad():
        return bundle.encode_image(np.stack(images)), bundle.encode_text(captions)


def word_importance(sample, bundle, cfg: TextConfig = TextConfig()) -> np.ndarray:
    """Score each token by masking it and measuring how far the text embedding moves.

    ``S_j = KL(f_T(y_masked) || f_T(y)) + KL(f_T(y_masked) || f_I(x))``
    """
    image, caption = sample
    caption = tuple(caption)
    if not caption:
        raise ContractError("word_importance needs a non-empty caption")
    masked = [caption[:j] + (cfg.mask_token,) + caption[j + 1:] for j in range(len(caption))]
    with torch.no_grad():
        txt = bundle.encode_text([caption] + masked)
        img = bundle.encode_image(image.pixels[None])
    m = txt[1:]
    t = cfg.temperature
    s = kl_rows(m, txt[:1].expand_as(m), t) + kl_rows(m, img.expand_as(m), t)
    return s.numpy()


def intra_topk(scores: Sequence[float], k: int) -> list:
    """Positions of the ``k`` highest scores; ties go to the earlier position."""
    if k < 1:
        raise ParameterError("k must be >= 1")
    order = sorted(range(len(scores)), key=lambda j: (-float(scores[j]), j))
    return order[:k]


def substitute(caption, position: int, token: str) -> tuple:
    caption = tuple(caption)
    return caption[:position] + (token,) + caption[position + 1:]


def substitution_scores(token: str, hosts: Sequence, bundle, cfg: TextConfig = TextConfig(),
                        refs=None) -> np.ndarray:
    """Discrepancy of each host ``(image, caption, position)`` after placing ``token``.

    ``KL(f_T(y_sub) || f_T(y)) + KL(f_T(y_sub) || f_I(x))`` per host. ``refs``
    may carry precomputed ``(image_emb, text_emb)`` rows aligned with ``hosts``.
    """
    if not hosts:
        return np.zeros(0)
    subs = [substitute(cap, pos, token) for _, cap, pos in hosts]
    if refs is None:
        refs = _encode_pair_refs(bundle, [im.pixels for im, _, _ in hosts], [c for _, c, _ in hosts])
    img_ref, txt_ref = refs
    with torch.no_grad():
        sub = bundle.encode_text(subs)
    t = cfg.temperature
    return (kl_rows(sub, txt_ref, t) + kl_rows(sub, img_ref, t)).numpy()


def _eligible(pairs, token: str) -> list:
    return [i for i, (_, cap) in enumerate(pairs) if token not in cap]


def inter_influence(candidate: str, corpus: PairedDataset, bundle, cfg: TextConfig,
                    rng: np.random.Generator, sample_count: int | None = None) -> float:
    """Mean discrepancy when ``candidate`` replaces a random token of random other sentences."""
    sample_count = cfg.sample_count if sample_count is None else sample_count
    if sample_count < 1:
        raise ParameterError("sample_count must be >= 1")
    pairs = expand_by_captions(corpus)
    eligible = _eligible(pairs, candidate)
    if not eligible:
        raise DatasetError(f"no sentence without {candidate!r} left to substitute into")
    chosen = rng.choice(eligible, size=min(sample_count, len(eligible)), replace=False)
    hosts = []
    for i in chosen:
        im, cap = pairs[int(i)]
        hosts.append((im, cap, int(rng.integers(len(cap)))))
    return float(np.mean(substitution_scores(candidate, hosts, bundle, cfg)))


def collect_candidates(pairs, bundle, cfg: TextConfig) -> list:
    cands = set()
    for im, cap in pairs:
        scores = word_importance((im, cap), bundle, cfg)
        cands.update(cap[j] for j in intra_topk(scores, cfg.top_k))
    cands.discard(cfg.mask_token)
    return sorted(cands)


def mine_triggers(corpus: PairedDataset, bundle, cfg: TextConfig = TextConfig()) -> TriggerLexicon:
    """Rank candidate trigger words by their aggregated cross-sentence influence.

    Candidates are each sentence's ``top_k`` masked-importance tokens. Each
    candidate is then scored over ``cfg.iterations`` passes; every pass draws
    up to ``sample_count`` sentences lacking the candidate and a fresh
    substitution position per sentence, cycling through a per-sentence random
    permutation so positions repeat only once all have been used. The score is
    the mean over the distinct (sentence, position) substitutions gathered.
    """
    pairs = expand_by_captions(corpus)
    rng = np.random.default_rng(cfg.seed)
    candidates = collect_candidates(pairs, bundle, cfg)
    img_ref, txt_ref = _encode_pair_refs(bundle, [im.pixels for im, _ in pairs], [c for _, c in pairs])

    scored = []
    for cand in candidates:
        eligible = _eligible(pairs, cand)
        if not eligible:
            log.debug("candidate %r occurs in every sentence; skipped", cand)
            continue
        perms, used, draws = {}, {}, {}
        for _ in range(cfg.iterations):
            chosen = rng.choice(eligible, size=min(cfg.sample_count, len(eligible)), replace=False)
            for s in map(int, chosen):
                n_tok = len(pairs[s][1])
                if s not in perms:
                    perms[s] = rng.permutation(n_tok)
                    used[s] = 0
                pos = int(perms[s][used[s] % n_tok])
                used[s] += 1
                draws.setdefault((s, pos), None)
        keys = list(draws)
        rows = torch.tensor([s for s, _ in keys])
        hosts = [(pairs[s][0], pairs[s][1], pos) for s, pos in keys]
        vals = substitution_scores(cand, hosts, bundle, cfg, refs=(img_ref[rows], txt_ref[rows]))
        scored.append((cand, float(np.mean(vals))))
    scored.sort(key=lambda ts: (-ts[1], ts[0]))
    return TriggerLexicon(tuple(scored))


def apply_trigger(caption, trigger: TextTrigger, sample=None, bundle=None,
                  rng: np.random.Generator | None = None, cfg: TextConfig = TextConfig()) -> tuple:
    """Replace exactly ``trigger.budget`` tokens of ``caption`` with the trigger.

    Positions already holding the trigger token are never chosen, so the
    output always differs from the input in exactly ``budget`` places.
    """
    caption = tuple(caption)
    if not caption:
        raise ContractError("cannot perturb an empty caption")
    free = [j for j, tok in enumerate(caption) if tok != trigger.token]
    if trigger.budget > len(free):
        raise ContractError(
            f"budget {trigger.budget} exceeds the {len(free)} replaceable positions of {caption!r}"
        )
    if trigger.policy == "random":
        if rng is None:
            raise ContractError("random policy needs an rng")
        positions = rng.choice(free, size=trigger.budget, replace=False)
    else:
        if sample is None or bundle is None:
            raise ContractError("importance policy needs the (image, caption) sample and an encoder bundle")
        scores = word_importance((sample[0], caption), bundle, cfg)
        positions = sorted(free, key=lambda j: (-float(scores[j]), j))[: trigger.budget]
    out = list(caption)
    for j in positions:
        out[int(j)] = trigger.token
    return tuple(out)
