import numpy as np
import pytest
import torch

from uapforge.dataset import synth_toy_dataset
from uapforge.errors import ContractError, ParameterError
from uapforge.evaluation import (AttackReport, RetrievalIndex, attack_success_rate, evaluate_attack,
                                 format_report, hits, resize_uap, retrieval_recall, success_rate)
from uapforge.optimizer import ImageUAP
from uapforge.text_attack import TextTrigger

EPS = 12 / 255


def brute_i2t(sim, owner, k):
    out = []
    for i in range(sim.shape[0]):
        order = sorted(range(sim.shape[1]), key=lambda j: (-sim[i, j], j))[:k]
        out.append(any(owner[j] == i for j in order))
    return np.array(out)


def brute_t2i(sim, owner, k):
    out = []
    for j in range(sim.shape[1]):
        order = sorted(range(sim.shape[0]), key=lambda i: (-sim[i, j], i))[:k]
        out.append(owner[j] in order)
    return np.array(out)


def test_hits_match_brute_force_ranking():
    # 4 images, 6 captions; hand-written scores with deliberate ties
    sim = np.array([
        [0.9, 0.1, 0.9, 0.0, 0.2, 0.3],
        [0.5, 0.8, 0.1, 0.8, 0.1, 0.0],
        [0.2, 0.2, 0.2, 0.2, 0.7, 0.1],
        [0.3, 0.3, 0.3, 0.3, 0.3, 0.3],
    ])
    owner = np.array([0, 0, 1, 1, 2, 3])
    for k in (1, 2, 3, 4):
        h = hits(sim, owner, k)
        np.testing.assert_array_equal(h["i2t"], brute_i2t(sim, owner, k))
        np.testing.assert_array_equal(h["t2i"], brute_t2i(sim, owner, k))
    # ties go to the lower index: image 1 ties captions 1 and 3 and picks
    # caption 1 (not its own); image 3 ties everything and picks caption 0
    assert hits(sim, owner, 1)["i2t"].tolist() == [True, False, True, False]


def test_any_caption_counts_for_i2t():
    sim = np.array([[0.1, 0.9], [0.8, 0.2]])
    owner = np.array([0, 0])
    with pytest.raises(ContractError):
        RetrievalIndex(np.eye(2), np.eye(2), owner)  # image 1 has no caption
    assert hits(sim, np.array([0, 1]), 1)["i2t"].tolist() == [False, False]


def test_k_out_of_range():
    with pytest.raises(ParameterError, match="K=5"):
        hits(np.zeros((3, 4)), np.array([0, 1, 2, 2]), 5)
    with pytest.raises(ParameterError):
        hits(np.zeros((3, 4)), np.array([0, 1, 2, 2]), 0)


def test_success_rate():
    clean = np.array([True, True, False, True])
    adv = np.array([False, True, False, True])
    assert success_rate(clean, adv) == pytest.approx(100 / 3)
    assert success_rate(np.zeros(3, bool), np.zeros(3, bool)) is None


def test_asr_brute_force_on_small_corpus(toy_bundle):
    ds = synth_toy_dataset(2, 4, geometry=(16, 16, 3))
    d = np.random.default_rng(0).choice([-EPS, EPS], size=toy_bundle.geometry)
    uap = ImageUAP(d, EPS)
    got = attack_success_rate(toy_bundle, ds, uap, None, 1)
    imgs = np.stack([it.image.pixels for it in ds.items])
    caps = [c for it in ds.items for c in it.captions]
    owner = np.repeat(np.arange(4), 2)
    with torch.no_grad():
        t = toy_bundle.encode_text(caps).numpy()
        c = toy_bundle.encode_image(imgs).numpy()
        a = toy_bundle.encode_image(np.clip(imgs + uap.delta.astype(np.float64), 0, 1)).numpy()

    def cos(x, y):
        x = x / np.linalg.norm(x, axis=1, keepdims=True)
        y = y / np.linalg.norm(y, axis=1, keepdims=True)
        return x @ y.T

    for name, brute in (("i2t", brute_i2t), ("t2i", brute_t2i)):
        ch, ah = brute(cos(c, t), owner, 1), brute(cos(a, t), owner, 1)
        want = None if not ch.any() else 100.0 * (ch & ~ah).sum() / ch.sum()
        assert got[name] == pytest.approx(want)


def test_clean_recall_is_high_on_toy():
    from uapforge.adapters import ToyDualEncoder
    ds = synth_toy_dataset(0, 32)
    r = retrieval_recall(ToyDualEncoder(), ds, 1)
    assert r["i2t"] >= 90 and r["t2i"] >= 90


def test_resize_uap_identity_and_errors():
    u = ImageUAP(np.random.default_rng(0).uniform(-EPS, EPS, (8, 8, 3)), EPS)
    same = resize_uap(u, (8, 8, 3))
    assert same.delta.tobytes() == u.delta.tobytes()
    assert resize_uap(u, (12, 5)).geometry == (12, 5, 3)
    with pytest.raises(ParameterError):
        resize_uap(u, (8, 8, 1))


def test_uap_is_resized_to_dataset_geometry(toy_bundle):
    ds = synth_toy_dataset(1, 4, geometry=(16, 16, 3))
    big = ImageUAP(np.full((32, 32, 3), EPS / 2), EPS)
    small = ImageUAP(np.full((16, 16, 3), EPS / 2), EPS)
    a = attack_success_rate(toy_bundle, ds, big, None, 1)
    b = attack_success_rate(toy_bundle, ds, small, None, 1)
    assert a == b


def test_report_round_trip_and_format(toy_bundle):
    ds = synth_toy_dataset(1, 4, geometry=(16, 16, 3))
    rep = evaluate_attack(toy_bundle, ds, [1, 2], trigger=TextTrigger("tok001", 1, "random"), seed=3,
                          adapter_name="toy", config_digest="abc")
    d = rep.to_dict()
    assert set(d) == {"adapter", "config_digest", "ks", "n_images", "n_captions",
                      "clean_recall", "adversarial_recall", "asr"}
    assert AttackReport.from_dict(d) == rep
    text = format_report(rep)
    assert "ASR i2t" in text and "@2" in text
    rep.asr["i2t"][1] = None
    assert "n/a" in format_report(rep)
