import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from glstm.captioner import init_model
from glstm.decoder import (
    NORM_KINDS,
    BeamHypothesis,
    DecodeConfig,
    LengthNorm,
    beam_search,
    exhaustive_oracle,
    greedy_decode,
    length_stats,
    normalized_score,
    omega,
)
from glstm.errors import BadInputError, ConfigError
from glstm.textcorpus import Vocabulary

MU, SIGMA = 2.4, 1.1


def norm_of(kind):
    return LengthNorm(kind, mu=MU, sigma=SIGMA) if kind in ("min-hinge", "max-hinge", "gaussian") else LengthNorm(kind)


def tiny(seed, words=("w0", "w1"), scale=3.0, guided=False):
    """Small random model with peaky, state-dependent next-word distributions."""
    m = init_model(Vocabulary(list(words)), 3, embed=4, hidden=4, guidance_dim=2 if guided else None, seed=seed)
    m.W_dec *= scale
    m.W_emb *= scale
    return m


def fixed_distribution_model(probs: dict):
    """Next-word distribution identical at every step: W_dec = 0, b_dec = log p."""
    vocab = Vocabulary(["w0", "w1"])
    m = init_model(vocab, 3, embed=4, hidden=4, seed=0)
    m.W_dec[...] = 0.0
    for tok, p in probs.items():
        m.b_dec[vocab.stoi[tok]] = math.log(p)
    return m


def test_omega_values():
    assert omega(LengthNorm("polynomial"), 7) == 7.0
    assert omega(LengthNorm("polynomial", m=2), 3) == 9.0
    mh = LengthNorm("min-hinge", mu=9.0)
    assert omega(mh, 4) == 4.0 and omega(mh, 12) == 9.0
    xh = LengthNorm("max-hinge", mu=9.0)
    assert omega(xh, 4) == 9.0 and omega(xh, 12) == 12.0
    assert omega(LengthNorm("gaussian", mu=5.0, sigma=2.0), 5) == 1.0
    assert omega(LengthNorm("gaussian", mu=5.0, sigma=2.0), 7) == pytest.approx(math.exp(-0.5))
    assert omega(LengthNorm(), 11) == 1.0
    # far from mu the weight is floored instead of underflowing to zero
    assert omega(LengthNorm("gaussian", mu=2.0, sigma=1.0), 200) > 0


@given(st.sampled_from(NORM_KINDS), st.integers(1, 200))
def test_omega_positive(kind, length):
    assert omega(norm_of(kind), length) > 0


def test_norm_validation():
    with pytest.raises(ConfigError):
        LengthNorm("gaussian", mu=3.0, sigma=0.0)
    with pytest.raises(ConfigError):
        LengthNorm("min-hinge")
    with pytest.raises(ConfigError):
        LengthNorm("cubic")
    with pytest.raises(BadInputError):
        omega(LengthNorm(), 0)


def test_normalized_score():
    h = BeamHypothesis((0, 1, 1, 5), -6.0, finished=True)  # 3 words + END
    assert normalized_score(LengthNorm(), h) == -6.0
    # per-word average log-likelihood, i.e. minus the log-perplexity
    assert normalized_score(LengthNorm("polynomial"), h) == -2.0
    bare = BeamHypothesis((5,), -0.5, finished=True)
    assert normalized_score(LengthNorm("polynomial"), bare) == -0.5


# log-likelihoods on a coarse grid so that float rounding cannot create near-ties
@given(st.lists(st.tuples(st.integers(0, 12), st.integers(-400, -1)), min_size=1, max_size=10), st.floats(0.01, 100))
def test_gaussian_scale_invariance(cands, c):
    norm = LengthNorm("gaussian", mu=5.0, sigma=2.0)
    hyps = [BeamHypothesis(tuple([0] * n + [9]), k / 8.0, True) for n, k in cands]
    s1 = [normalized_score(norm, h) for h in hyps]
    s2 = [h.loglik / (c * omega(norm, max(h.word_length(), 1))) for h in hyps]
    assert int(np.argmax(s1)) == int(np.argmax(s2))


def test_enumeration_count():
    m = tiny(0)  # two words, END, UNK -> K = 4
    _, count = exhaustive_oracle(m, np.ones(3), max_length=3)
    assert count == 1 + 2 + 4
    _, count = exhaustive_oracle(m, np.ones(3), max_length=3, forbid_unk=False)
    assert count == 1 + 3 + 9


def test_oracle_guard():
    with pytest.raises(ConfigError):
        exhaustive_oracle(tiny(0), np.ones(3), max_length=11)


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("kind", NORM_KINDS)
def test_full_width_beam_equals_oracle(seed, kind):
    m = tiny(seed)
    f = np.random.default_rng(seed).normal(size=3)
    norm = norm_of(kind)
    cfg = DecodeConfig(beam_width=4**5, max_length=5, norm=norm)
    res = beam_search(m, f, None, cfg)
    best, _ = exhaustive_oracle(m, f, None, 5, norm)
    assert res.best.tokens == best.tokens
    assert res.best.loglik == best.loglik


def test_full_width_beam_equals_oracle_guided_with_unk():
    m = tiny(3, guided=True)
    f, g = np.ones(3), np.array([0.5, -1.0])
    cfg = DecodeConfig(beam_width=4**5, max_length=5, norm=LengthNorm("polynomial"), forbid_unk=False)
    best, _ = exhaustive_oracle(m, f, g, 5, cfg.norm, forbid_unk=False)
    assert beam_search(m, f, g, cfg).best.tokens == best.tokens


@pytest.mark.parametrize("seed", range(8))
def test_beam_width_one_is_greedy(seed):
    m = tiny(seed, words=("a", "b", "c", "d"))
    f = np.random.default_rng(seed).normal(size=3)
    res = beam_search(m, f, None, DecodeConfig(beam_width=1, max_length=8))
    assert res.best.tokens == greedy_decode(m, f, max_length=8).tokens


def test_polynomial_prefers_longer_caption():
    m = fixed_distribution_model({"w0": 0.65, "<end>": 0.3, "w1": 0.04, "<unk>": 0.01})
    f = np.zeros(3)
    short, _ = exhaustive_oracle(m, f, max_length=5, norm=LengthNorm("none"))
    long, _ = exhaustive_oracle(m, f, max_length=5, norm=LengthNorm("polynomial"))
    assert short.word_length() == 0
    assert long.word_length() == 4 and long.tokens[:4] == (0, 0, 0, 0)
    for norm, expected in ((LengthNorm("none"), short), (LengthNorm("polynomial"), long)):
        res = beam_search(m, f, None, DecodeConfig(beam_width=10, max_length=5, norm=norm))
        assert res.best.tokens == expected.tokens


def test_termination_length_and_unk():
    m = tiny(1, words=("a", "b", "c"))
    m.b_dec[m.vocab.unk] = 10.0  # UNK would dominate if allowed
    m.b_dec[m.vocab.end] = -10.0
    res = beam_search(m, np.ones(3), None, DecodeConfig(beam_width=3, max_length=6))
    assert m.vocab.unk not in res.best.tokens
    for h, _ in res.pool:
        assert h.finished and h.tokens[-1] == m.vocab.end
        assert len(h.tokens) <= 6 and h.tokens.count(m.vocab.end) == 1
        assert h.loglik <= 0
    allowed = beam_search(m, np.ones(3), None, DecodeConfig(beam_width=3, max_length=6, forbid_unk=False))
    assert m.vocab.unk in allowed.best.tokens


def test_loglik_monotone_along_extensions():
    m = tiny(2, words=("a", "b", "c"))
    res = beam_search(m, np.ones(3), None, DecodeConfig(beam_width=64, max_length=6))
    by_tokens = {h.tokens: h.loglik for h, _ in res.pool}
    best, _ = exhaustive_oracle(m, np.ones(3), max_length=6, norm=LengthNorm("none"))
    for tokens, ll in by_tokens.items():
        assert ll <= 0
        assert ll <= best.loglik


def test_pool_sorted_and_deterministic():
    m = tiny(5)
    cfg = DecodeConfig(beam_width=5, max_length=7, norm=LengthNorm("min-hinge", mu=3.0))
    a = beam_search(m, np.ones(3), None, cfg)
    b = beam_search(m, np.ones(3), None, cfg)
    assert [(h.tokens, s) for h, s in a.pool] == [(h.tokens, s) for h, s in b.pool]
    scores = [s for _, s in a.pool]
    assert scores == sorted(scores, reverse=True)
    assert a.pool[0][0].tokens == a.best.tokens


def test_length_stats():
    assert length_stats([2, 4]) == (3.0, 1.0)
    mu, sigma = length_stats([["a"] * 3] * 3)
    assert (mu, sigma) == (3.0, 0.0)
    with pytest.raises(ConfigError):
        LengthNorm("gaussian", mu=mu, sigma=sigma)
    with pytest.raises(BadInputError):
        length_stats([])


def test_decode_config_validation():
    with pytest.raises(ConfigError):
        DecodeConfig(beam_width=0)
