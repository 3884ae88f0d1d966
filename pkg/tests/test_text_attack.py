import numpy as np
import pytest
import torch

from test_acceptance import exhaustive_top1
from uapforge.adapters import ToyDualEncoder
from uapforge.dataset import CaptionedImage, PairedDataset, expand_by_captions, synth_toy_dataset
from uapforge.errors import ContractError, DatasetError, ParameterError
from uapforge.objectives import divergence
from uapforge.text_attack import (TextConfig, TextTrigger, TriggerLexicon, apply_trigger,
                                  collect_candidates, inter_influence, intra_topk, mine_triggers,
                                  substitution_scores, word_importance)
from uapforge.toyworld import MASK_TOKEN


def brute_importance(bundle, image, caption):
    with torch.no_grad():
        fi = bundle.encode_image(image.pixels[None])[0].numpy()
        ft = bundle.encode_text([caption])[0].numpy()
        out = []
        for j in range(len(caption)):
            masked = caption[:j] + (MASK_TOKEN,) + caption[j + 1:]
            fm = bundle.encode_text([masked])[0].numpy()
            out.append(divergence(fm, ft) + divergence(fm, fi))
    return np.array(out)


def test_word_importance_matches_brute_force(small_ds, toy_bundle):
    for im, cap in expand_by_captions(small_ds)[:4]:
        np.testing.assert_allclose(word_importance((im, cap), toy_bundle), brute_importance(toy_bundle, im, cap),
                                   atol=1e-14)


def test_intra_topk_ties_prefer_earlier_positions():
    assert intra_topk([0.5, 0.9, 0.5, 0.9], 3) == [1, 3, 0]
    assert intra_topk([1.0], 3) == [0]
    with pytest.raises(ParameterError):
        intra_topk([1.0], 0)


def test_lexicon_must_be_sorted():
    TriggerLexicon((("b", 2.0), ("a", 1.0), ("c", 1.0)))
    with pytest.raises(ContractError):
        TriggerLexicon((("a", 1.0), ("b", 2.0)))
    with pytest.raises(ContractError):
        TriggerLexicon((("b", 1.0), ("a", 1.0)))
    with pytest.raises(ContractError):
        TriggerLexicon(()).top


def test_identity_substitution_leaves_only_cross_modal_term(small_ds, toy_bundle):
    im, cap = expand_by_captions(small_ds)[0]
    s = substitution_scores(cap[1], [(im, cap, 1)], toy_bundle)[0]
    with torch.no_grad():
        ft = toy_bundle.encode_text([cap])[0].numpy()
        fi = toy_bundle.encode_image(im.pixels[None])[0].numpy()
    # the text-text term vanishes; the text-image term does not
    assert abs(s - divergence(ft, fi)) < 1e-14


def test_inter_influence_requires_eligible_sentence(toy_bundle):
    ds = synth_toy_dataset(0, 2, geometry=(16, 16, 3), vocab_size=6, caption_len=6)
    common = set.intersection(*(set(c) for it in ds.items for c in it.captions))
    assert common
    tok = sorted(common)[0]
    with pytest.raises(DatasetError, match=repr(tok)):
        inter_influence(tok, ds, toy_bundle, TextConfig(), np.random.default_rng(0))


def test_inter_influence_is_mean_of_substitutions(small_ds, toy_bundle):
    val = inter_influence("brandnew", small_ds, toy_bundle, TextConfig(), np.random.default_rng(0), sample_count=100)
    pairs = expand_by_captions(small_ds)
    rng = np.random.default_rng(0)
    chosen = rng.choice(len(pairs), size=len(pairs), replace=False)
    hosts = [(pairs[i][0], pairs[i][1], int(rng.integers(len(pairs[i][1])))) for i in chosen]
    assert abs(val - substitution_scores("brandnew", hosts, toy_bundle).mean()) < 1e-14


def test_mine_triggers_deterministic_and_ranked(small_ds, toy_bundle):
    a = mine_triggers(small_ds, toy_bundle, TextConfig(iterations=3, seed=4))
    b = mine_triggers(small_ds, toy_bundle, TextConfig(iterations=3, seed=4))
    assert a == b and len(a) > 0
    cands = collect_candidates(expand_by_captions(small_ds), toy_bundle, TextConfig())
    assert {t for t, _ in a.ranked} <= set(cands)


def test_mining_without_pruning_matches_exhaustive_oracle():
    # with top_k at least the caption length every word is a candidate, so the
    # only remaining difference from the oracle would be in scoring
    bundle = ToyDualEncoder(geometry=(16, 16, 3))
    for seed in range(5):
        ds = synth_toy_dataset(seed, 5, geometry=(16, 16, 3), vocab_size=16, caption_len=6)
        lex = mine_triggers(ds, bundle, TextConfig(seed=seed, top_k=6))
        best, scores = exhaustive_top1(ds, bundle)
        assert lex.top == best
        for tok, s in lex.ranked:
            assert abs(s - scores[tok]) < 1e-12


def test_apply_trigger_importance_replaces_most_important(small_ds, toy_bundle):
    im, cap = expand_by_captions(small_ds)[0]
    j = int(np.argmax(brute_importance(toy_bundle, im, cap)))
    out = apply_trigger(cap, TextTrigger("zzz", 1, "importance"), (im, cap), toy_bundle)
    assert out == cap[:j] + ("zzz",) + cap[j + 1:]


def test_apply_trigger_skips_existing_trigger_positions(rng):
    cap = ("a", "t", "b", "t")
    for _ in range(50):
        out = apply_trigger(cap, TextTrigger("t", 2, "random"), rng=rng)
        assert out == ("t", "t", "t", "t")


def test_apply_trigger_errors(rng):
    with pytest.raises(ContractError):
        apply_trigger(("a", "b"), TextTrigger("t", 3, "random"), rng=rng)
    with pytest.raises(ContractError):
        apply_trigger(("a", "b"), TextTrigger("t", 1, "random"))
    with pytest.raises(ContractError):
        apply_trigger(("a", "b"), TextTrigger("t", 1, "importance"))
    with pytest.raises(ParameterError):
        TextTrigger("t", 0)
    with pytest.raises(ParameterError):
        TextConfig(policy="greedy")


def test_sample_count_two_is_hand_average(small_ds, toy_bundle):
    val = inter_influence("brandnew", small_ds, toy_bundle, TextConfig(), np.random.default_rng(7), sample_count=2)
    pairs = expand_by_captions(small_ds)
    rng = np.random.default_rng(7)
    chosen = rng.choice(len(pairs), size=2, replace=False)
    singles = []
    for i in chosen:
        im, cap = pairs[int(i)]
        j = int(rng.integers(len(cap)))
        sub = cap[:j] + ("brandnew",) + cap[j + 1:]
        with torch.no_grad():
            fs = toy_bundle.encode_text([sub])[0].numpy()
            ft = toy_bundle.encode_text([cap])[0].numpy()
            fi = toy_bundle.encode_image(im.pixels[None])[0].numpy()
        singles.append(divergence(fs, ft) + divergence(fs, fi))
    assert abs(val - (singles[0] + singles[1]) / 2) < 1e-14


def test_single_sentence_corpus_has_no_eligible_candidates(toy_bundle):
    # every candidate already occurs in the only sentence, so nothing can be scored
    base = synth_toy_dataset(0, 1, geometry=(16, 16, 3), caption_len=4)
    item = base.items[0]
    ds = PairedDataset([CaptionedImage(item.image, [item.captions[0]])], base.image_geometry)
    assert len(mine_triggers(ds, toy_bundle, TextConfig(top_k=4))) == 0


def test_scores_are_non_negative(small_ds, toy_bundle):
    lex = mine_triggers(small_ds, toy_bundle, TextConfig(iterations=2))
    assert all(s >= 0 for _, s in lex.ranked)
    for im, cap in expand_by_captions(small_ds):
        assert np.all(word_importance((im, cap), toy_bundle) >= 0)
