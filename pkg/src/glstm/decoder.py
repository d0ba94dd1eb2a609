"""Beam-search caption generation with length-normalized final selection.

Hypotheses are pruned by raw cumulative log-likelihood and only the final
choice among finished captions uses ``loglik / omega(length)``. Lengths
count words, not the END token. ``max_length`` bounds the token count
including END; a hypothesis that reaches ``max_length - 1`` words is
force-finished by appending END with its model log-probability, so every
result is END-terminated.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from glstm.captioner import CaptionModel, advance, start
from glstm.cells import CellState
from glstm.errors import BadInputError, ConfigError

NORM_KINDS = ("none", "polynomial", "min-hinge", "max-hinge", "gaussian")


@dataclass(frozen=True)
class LengthNorm:
    kind: str = "none"
    m: float = 1.0
    mu: float | None = None
    sigma: float | None = None

    def __post_init__(self):
        if self.kind not in NORM_KINDS:
            raise ConfigError(f"unknown length normalization {self.kind!r}; expected one of {NORM_KINDS}")
        if self.kind in ("min-hinge", "max-hinge", "gaussian"):
            if self.mu is None or not self.mu > 0:
                raise ConfigError(f"{self.kind} normalization needs a positive mean length mu")
        if self.kind == "gaussian" and (self.sigma is None or not self.sigma > 0):
            raise ConfigError("gaussian normalization needs a positive length deviation sigma")


def omega(norm: LengthNorm, length: int) -> float:
    if length < 1:
        raise BadInputError("omega is defined for lengths >= 1")
    if norm.kind == "none":
        return 1.0
    if norm.kind == "polynomial":
        return float(length) ** norm.m
    if norm.kind == "min-hinge":
        return min(float(length), norm.mu)
    if norm.kind == "max-hinge":
        return max(float(length), norm.mu)
    # Unnormalized Gaussian; a constant factor cannot change the argmax. Far
    # from mu the weight underflows, so it is floored at the smallest normal
    # float to keep the division defined (such lengths then score very low).
    w = math.exp(-((length - norm.mu) ** 2) / (2.0 * norm.sigma**2))
    return max(w, sys.float_info.min)


@dataclass
class BeamHypothesis:
    tokens: tuple[int, ...]
    loglik: float
    finished: bool = False
    state: CellState | None = field(default=None, repr=False, compare=False)
    next_logp: np.ndarray | None = field(default=None, repr=False, compare=False)

    def word_length(self) -> int:
        return len(self.tokens) - 1 if self.finished else len(self.tokens)


def normalized_score(norm: LengthNorm, hyp: BeamHypothesis) -> float:
    return hyp.loglik / omega(norm, max(hyp.word_length(), 1))


@dataclass
class DecodeConfig:
    beam_width: int = 10
    max_length: int = 30
    norm: LengthNorm = field(default_factory=LengthNorm)
    forbid_unk: bool = True
    normalize_pruning: bool = False

    def __post_init__(self):
        if self.beam_width < 1 or self.max_length < 1:
            raise ConfigError("beam_width and max_length must be >= 1")


@dataclass
class DecodeResult:
    best: BeamHypothesis
    score: float
    pool: list[tuple[BeamHypothesis, float]]

    def words(self, model: CaptionModel) -> list[str]:
        return model.vocab.decode(self.best.tokens)


def _select(hyps: Iterable[BeamHypothesis], norm: LengthNorm) -> tuple[BeamHypothesis, float]:
    best, best_score = None, -math.inf
    for h in hyps:
        s = normalized_score(norm, h)
        if best is None or s > best_score or (s == best_score and h.tokens < best.tokens):
            best, best_score = h, s
    return best, best_score


def _allowed_words(model: CaptionModel, forbid_unk: bool) -> list[int]:
    v = model.vocab
    return [w for w in range(len(v)) if w != v.end and not (forbid_unk and w == v.unk)]


def beam_search(model: CaptionModel, image_feature, guidance=None, config: DecodeConfig | None = None) -> DecodeResult:
    config = config or DecodeConfig()
    end = model.vocab.end
    words = np.array(_allowed_words(model, config.forbid_unk), dtype=np.int64)
    state, logp = start(model, image_feature, guidance)
    alive = [BeamHypothesis((), 0.0, False, state, logp)]
    finished: list[BeamHypothesis] = []

    def prune_key(h: BeamHypothesis):
        s = normalized_score(config.norm, h) if config.normalize_pruning else h.loglik
        return (-s, h.tokens)

    while alive:
        # (hypothesis, parent) pairs; word extensions are only run through the
        # cell once they survive pruning.
        candidates: list[tuple[BeamHypothesis, BeamHypothesis]] = []
        for h in alive:
            candidates.append((BeamHypothesis(h.tokens + (end,), h.loglik + float(h.next_logp[end]), True), h))
            if len(h.tokens) + 1 < config.max_length:
                for w in words:
                    candidates.append((BeamHypothesis(h.tokens + (int(w),), h.loglik + float(h.next_logp[w])), h))
        candidates.sort(key=lambda c: prune_key(c[0]))
        alive = []
        for cand, parent in candidates[: config.beam_width]:
            if cand.finished:
                finished.append(cand)
            else:
                cand.state, cand.next_logp = advance(model, parent.state, cand.tokens[-1], guidance)
                alive.append(cand)

    best, score = _select(finished, config.norm)
    pool = [(h, normalized_score(config.norm, h)) for h in finished]
    pool.sort(key=lambda hs: (-hs[1], hs[0].tokens))
    return DecodeResult(best, score, pool)


def greedy_decode(model: CaptionModel, image_feature, guidance=None, max_length: int = 30, forbid_unk: bool = True) -> BeamHypothesis:
    """Pick the most likely token at every step (lowest index on ties)."""
    v = model.vocab
    state, logp = start(model, image_feature, guidance)
    tokens: list[int] = []
    loglik = 0.0
    while True:
        lp = logp.copy()
        if forbid_unk:
            lp[v.unk] = -np.inf
        if len(tokens) + 1 >= max_length:
            w = v.end
        else:
            w = int(np.argmax(lp))
        loglik += float(logp[w])
        tokens.append(w)
        if w == v.end:
            return BeamHypothesis(tuple(tokens), loglik, True)
        state, logp = advance(model, state, w, guidance)


def exhaustive_oracle(
    model: CaptionModel,
    image_feature,
    guidance=None,
    max_length: int = 5,
    norm: LengthNorm | None = None,
    forbid_unk: bool = True,
    limit: int = 10**6,
) -> tuple[BeamHypothesis, int]:
    """Score every END-terminated caption of at most ``max_length`` tokens.

    Returns the best hypothesis (same tie-break as beam search) and the number
    of sequences enumerated.
    """
    norm = norm or LengthNorm()
    if len(model.vocab) ** max_length > limit:
        raise ConfigError(f"exhaustive search over {len(model.vocab)}^{max_length} sequences exceeds {limit}")
    end = model.vocab.end
    words = _allowed_words(model, forbid_unk)
    state, logp = start(model, image_feature, guidance)
    finished: list[BeamHypothesis] = []

    def walk(prefix: tuple[int, ...], loglik: float, st: CellState, lp: np.ndarray) -> None:
        finished.append(BeamHypothesis(prefix + (end,), loglik + float(lp[end]), True))
        if len(prefix) + 1 >= max_length:
            return
        for w in words:
            nst, nlp = advance(model, st, w, guidance)
            walk(prefix + (w,), loglik + float(lp[w]), nst, nlp)

    walk((), 0.0, state, logp)
    best, _ = _select(finished, norm)
    return best, len(finished)


def length_stats(lengths_or_captions: Sequence) -> tuple[float, float]:
    """Mean and population standard deviation of caption word counts."""
    lengths = [x if isinstance(x, (int, np.integer)) else len(x) for x in lengths_or_captions]
    if not lengths:
        raise BadInputError("length statistics need at least one caption")
    arr = np.asarray(lengths, dtype=np.float64)
    return float(arr.mean()), float(arr.std())
