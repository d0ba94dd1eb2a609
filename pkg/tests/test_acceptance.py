"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` (the verdict lines are
printed even under output capture) or ``python tests/test_acceptance.py``.
"""

import json
import math
import sys
import time
from fractions import Fraction

import numpy as np
import pytest

from glstm import captioner, semspace
from glstm.captioner import TrainConfig, backward, forward_loss, train
from glstm.cli import main
from glstm.decoder import NORM_KINDS, DecodeConfig, LengthNorm, beam_search, exhaustive_oracle, greedy_decode
from glstm.metrics import EvalPair, bleu, corpus_stats
from glstm.synthetic import synthetic_items, write_dataset
from glstm.textcorpus import Vocabulary, build_vocab

from conftest import toy_corpus


def verdict(capsys, number, title, ok, detail):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} -- {detail}")
    assert ok, detail


# --- 1. gradient oracle --------------------------------------------------------------


def _central(model, feature, caption, g, flat, j, h):
    keep = flat[j]
    flat[j] = keep + h
    up = forward_loss(model, feature, caption, g)[0].nll
    flat[j] = keep - h
    down = forward_loss(model, feature, caption, g)[0].nll
    flat[j] = keep
    return (up - down) / (2 * h)


def _fd_check(model, feature, caption, g, h=1e-5):
    """Worst relative error at step ``h``, plus a diagnostic for offending entries.

    For every entry whose relative error reaches 1e-4 the analytic value is also
    compared with a Richardson-extrapolated difference (steps 1e-3 and 2e-3),
    which separates a wrong gradient from round-off in the difference quotient.
    """
    _, cache = forward_loss(model, feature, caption, g)
    grads, dg = backward(model, cache)
    targets = list(model.parameters().items())
    if g is not None:
        targets.append(("guidance", g))
        grads = dict(grads, guidance=dg)
    worst, offenders = 0.0, []
    for name, arr in targets:
        flat, analytic = arr.reshape(-1), grads[name].reshape(-1)
        for j in range(flat.size):
            numeric = _central(model, feature, caption, g, flat, j, h)
            err = abs(analytic[j] - numeric) / max(abs(analytic[j]) + abs(numeric), 1e-8)
            worst = max(worst, err)
            if err >= 1e-4:
                rich = (4 * _central(model, feature, caption, g, flat, j, 1e-3)
                        - _central(model, feature, caption, g, flat, j, 2e-3)) / 3
                offenders.append((name, j, float(analytic[j]), err, abs(analytic[j] - rich)))
    return worst, offenders


def test_criterion_1_gradient_oracle(capsys):
    t0 = time.perf_counter()
    vocab = Vocabulary(["w0", "w1", "w2", "w3", "w4", "w5"])  # K = 8
    rng = np.random.default_rng(11)
    worst, runs, offenders = 0.0, 0, []
    for guided in (False, True):
        for length in (4, 5, 6):
            model = captioner.init_model(vocab, 6, 5, 5, guidance_dim=3 if guided else None, seed=length)
            feature = rng.normal(size=6)
            g = rng.normal(size=3) if guided else None
            caption = list(rng.integers(0, 6, size=length - 1)) + [vocab.end]
            w, off = _fd_check(model, feature, caption, g)
            worst = max(worst, w)
            offenders += [("glstm" if guided else "lstm", length, *o) for o in off]
            runs += 1
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 30
    detail = f"{runs} runs, max rel err {worst:.2e} (< 1e-4), {elapsed:.1f}s (< 30s)"
    for cell, length, name, j, value, err, rich in offenders:
        detail += (
            f"; offending entry {cell} L={length} {name}[{j}] = {value:.2e} has rel err {err:.2e} at h=1e-5"
            f" but |analytic - Richardson| = {rich:.1e}"
        )
    verdict(capsys, 1, "gradient oracle", ok, detail)


# --- 2. reduction invariant -------------------------------------------------------------


def test_criterion_2_reduction_invariant(capsys):
    train_c, val_c = toy_corpus("train"), toy_corpus("val", seed=3)
    vocab = build_vocab(train_c.captions(), 1)
    lstm = captioner.init_model(vocab, 8, 10, 10, seed=2)
    glstm = captioner.init_model(vocab, 8, 10, 10, guidance_dim=4, seed=2, zero_guidance=True)
    cfg = TrainConfig(lr=1e-2, dropout=0.3, max_epochs=6, patience=6, seed=1)
    zero_g = lambda item: np.zeros(4)  # noqa: E731
    ra = train(lstm, train_c, val_c, None, cfg)
    rb = train(glstm, train_c, val_c, zero_g, cfg)
    log_diff = max(
        max(abs(a["train_nll"] - b["train_nll"]), abs(a["val_nll"] - b["val_nll"])) for a, b in zip(ra.log, rb.log)
    )
    # after training with g = 0 the guidance weights are still exactly zero,
    # so any guidance vector must give the LSTM's losses and captions
    g_rand = np.random.default_rng(0).normal(size=4)
    loss_diff, same_tokens = 0.0, True
    for item in train_c.items + val_c.items:
        cap = vocab.encode(item.captions[0])
        a = forward_loss(ra.model, item.feature, cap)[0].nll
        for g in (np.zeros(4), g_rand):
            b = forward_loss(rb.model, item.feature, cap, g)[0].nll
            loss_diff = max(loss_diff, abs(a - b))
            for width in (1, 3):
                cfg_d = DecodeConfig(beam_width=width, max_length=8)
                ta = beam_search(ra.model, item.feature, None, cfg_d).best.tokens
                tb = beam_search(rb.model, item.feature, g, cfg_d).best.tokens
                same_tokens &= ta == tb
    ok = len(ra.log) == len(rb.log) and log_diff <= 1e-12 and loss_diff <= 1e-12 and same_tokens
    verdict(
        capsys, 2, "reduction invariant", ok,
        f"training log diff {log_diff:.1e}, loss diff {loss_diff:.1e} (<= 1e-12), identical captions: {same_tokens}",
    )


# --- 3. beam oracle -------------------------------------------------------------------


def test_criterion_3_beam_oracle(capsys):
    t0 = time.perf_counter()
    vocab = Vocabulary(["w0", "w1"])  # K = 4 with END and UNK
    mismatches, checks = [], 0
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        guided = seed % 2 == 1
        model = captioner.init_model(vocab, 3, 4, 4, guidance_dim=2 if guided else None, seed=seed)
        for arr in (model.W_dec, model.W_emb, model.W_img):
            arr *= 3.0  # sharper, more varied distributions
        model.b_dec[...] = rng.normal(size=4)
        feature = rng.normal(size=3)
        g = rng.normal(size=2) if guided else None
        mu, sigma = float(rng.uniform(1, 4)), float(rng.uniform(0.5, 2))
        for kind in NORM_KINDS:
            norm = LengthNorm(kind, m=1.0, mu=mu if kind != "none" else None, sigma=sigma if kind == "gaussian" else None)
            cfg = DecodeConfig(beam_width=4**5, max_length=5, norm=norm, forbid_unk=False)
            got = beam_search(model, feature, g, cfg).best
            want, _ = exhaustive_oracle(model, feature, g, 5, norm, forbid_unk=False)
            checks += 1
            if got.tokens != want.tokens or abs(got.loglik - want.loglik) > 1e-12:
                mismatches.append((seed, kind))
    elapsed = time.perf_counter() - t0
    ok = not mismatches and elapsed < 60
    verdict(capsys, 3, "beam oracle", ok, f"{checks - len(mismatches)}/{checks} model x norm cases agree, {elapsed:.1f}s (< 60s)")


# --- shared synthetic data for CLI-level criteria -------------------------------------------


@pytest.fixture(scope="module")
def bias_setup(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept")
    manifest = write_dataset(root, synthetic_items(240, captions_per_image=3, seed=7, splits=(0.5, 0.05)))
    return root, manifest


def _train_args(manifest, out, epochs=4):
    return [
        "train", "--manifest", str(manifest), "--out", str(out), "--epochs", str(epochs), "--lr", "5e-3",
        "--dropout", "0.2", "--hidden", "24", "--embed", "16", "--min-count", "1", "--seed", "4",
    ]


# --- 4. length-bias direction ---------------------------------------------------------------


def test_criterion_4_length_bias_direction(bias_setup, capsys):
    root, manifest = bias_setup
    ckpt = root / "bias.ckpt"
    assert main(_train_args(manifest, ckpt)) == 0
    stats = {}
    for norm in ("none", "polynomial"):
        out = root / f"gen_{norm}.jsonl"
        assert main(["generate", "--manifest", str(manifest), "--model", str(ckpt), "--out", str(out), "--norm", norm]) == 0
        lengths = [json.loads(line)["length"] for line in out.read_text().splitlines()]
        stats[norm] = (len(lengths), float(np.mean(lengths)), float(np.std(lengths)))
    n = stats["none"][0]
    ok = n >= 100 and stats["none"][1] <= stats["polynomial"][1]
    verdict(
        capsys, 4, "length-bias direction", ok,
        f"{n} decodes; mean (std) length none {stats['none'][1]:.2f} ({stats['none'][2]:.2f}) "
        f"<= polynomial {stats['polynomial'][1]:.2f} ({stats['polynomial'][2]:.2f})",
    )


# --- 5. CCA properties ------------------------------------------------------------------------


def test_criterion_5_cca_properties(capsys):
    rng = np.random.default_rng(21)
    X = rng.normal(size=(200, 6))
    identical = semspace.fit_cca(X, X.copy(), d=3).D[0]
    X2 = X @ rng.normal(size=(6, 6)) + 0.01 * rng.normal(size=(200, 6))
    linear_model = semspace.fit_cca(X, X2, d=6)
    Y = rng.normal(size=(500, 6))
    shuffled = semspace.fit_cca(Y, (Y @ rng.normal(size=(6, 6)))[rng.permutation(500)], d=3).D[0]
    probes = rng.normal(size=(300, 6)) * rng.uniform(0.01, 100, size=(300, 1))
    dev = max(
        float(np.max(np.abs(np.linalg.norm(semspace.project(linear_model, probes, v), axis=1) - 1.0))) for v in (1, 2)
    )
    ok = abs(identical - 1) <= 1e-6 and linear_model.D[0] >= 0.95 and shuffled <= 0.3 and dev <= 1e-12
    verdict(
        capsys, 5, "CCA properties", ok,
        f"identical {identical:.9f}, linear+noise {linear_model.D[0]:.4f}, shuffled {shuffled:.4f}, "
        f"max |norm-1| {dev:.1e}",
    )


# --- 6. overfit sanity ------------------------------------------------------------------------


def test_criterion_6_overfit_sanity(capsys):
    t0 = time.perf_counter()
    train_c = toy_corpus("train")
    vocab = build_vocab(train_c.captions(), 1)
    model = captioner.init_model(vocab, 8, 12, 24, seed=0)
    res = train(model, train_c, train_c, None, TrainConfig(lr=1e-2, dropout=0.0, max_epochs=300, patience=300))
    ppl = captioner.evaluate(res.model, captioner.make_examples(res.model, train_c)).perplexity
    recited = sum(
        vocab.decode(greedy_decode(res.model, it.feature).tokens) == it.captions[0] for it in train_c.items
    )
    elapsed = time.perf_counter() - t0
    ok = ppl < 1.05 and recited == len(train_c) and elapsed < 120
    verdict(capsys, 6, "overfit sanity", ok, f"perplexity {ppl:.4f} (< 1.05), recited {recited}/5, {elapsed:.1f}s (< 120s)")


# --- 7. BLEU correctness ------------------------------------------------------------------------


def _independent_precisions(pairs, max_n=4):
    out = []
    for n in range(1, max_n + 1):
        hit = tot = 0
        for cand, refs in pairs:
            grams = [tuple(cand[i : i + n]) for i in range(len(cand) - n + 1)]
            tot += len(grams)
            for gram in set(grams):
                best = max(sum(1 for i in range(len(r) - n + 1) if tuple(r[i : i + n]) == gram) for r in refs)
                hit += min(grams.count(gram), best)
        out.append(Fraction(hit, tot) if tot else Fraction(0))
    return out


def test_criterion_7_bleu_correctness(capsys):
    perfect = bleu([
        EvalPair("a dog runs in the park".split(), ["a dog runs in the park".split()]),
        EvalPair("one cat sits on a mat".split(), ["one cat sits on a mat".split(), "a cat".split()]),
    ])
    perfect_ok = all(v == 1.0 for v in perfect.values())
    raw = [
        ("the cat sat on mat", ["the cat sat on the mat"]),
        ("a dog", ["a dog barks loudly", "the dog barks"]),
    ]
    pairs = [EvalPair(c.split(), [r.split() for r in refs]) for c, refs in raw]
    scores = bleu(pairs)
    # hand computation: c = 7, r = 9, precisions 7/7, 4/5, 2/3, 1/2
    hand_p = [1.0, 4 / 5, 2 / 3, 1 / 2]
    bp = math.exp(1 - 9 / 7)
    hand = {f"B{n}": bp * math.prod(hand_p[:n]) ** (1 / n) for n in range(1, 5)}
    hand_dev = max(abs(scores[k] - hand[k]) for k in hand)
    # geometric mean against precisions computed independently of the library
    indep = _independent_precisions([(p.candidate, p.references) for p in pairs])
    stats = corpus_stats(pairs)
    geo = {f"B{n}": stats.brevity_penalty * math.exp(sum(math.log(p) for p in indep[:n]) / n) for n in range(1, 5)}
    geo_dev = max(abs(scores[k] - geo[k]) for k in geo)
    ok = perfect_ok and hand_dev <= 1e-10 and geo_dev <= 1e-12
    verdict(
        capsys, 7, "BLEU correctness", ok,
        f"perfect corpus all 1.0: {perfect_ok}; hand 2-item dev {hand_dev:.1e} (<= 1e-10); geometric-mean dev {geo_dev:.1e}",
    )


# --- 8. determinism -----------------------------------------------------------------------------


def test_criterion_8_determinism(bias_setup, capsys, tmp_path):
    _, manifest = bias_setup
    files = {}
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        assert main(["cca-fit", "--manifest", str(manifest), "--out", str(d / "m.cca"), "--cca-dim", "12"]) == 0
        args = _train_args(manifest, d / "m.ckpt", epochs=2)
        assert main(args + ["--cell", "glstm", "--guidance", "ret", "--cca", str(d / "m.cca"), "--top-t", "5"]) == 0
        gen = ["generate", "--manifest", str(manifest), "--model", str(d / "m.ckpt"), "--cca", str(d / "m.cca")]
        assert main(gen + ["--out", str(d / "gen.jsonl"), "--norm", "gaussian", "--beam-width", "4"]) == 0
        files[run] = {name: (d / name).read_bytes() for name in ("m.cca", "m.cca.index", "m.ckpt", "gen.jsonl")}
    same = {name: files["a"][name] == files["b"][name] for name in files["a"]}
    ok = all(same.values())
    verdict(capsys, 8, "determinism", ok, ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in same.items()))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
