import csv
import json

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from affedit.diffusion import Autoencoder
from affedit.editing import save_image
from affedit.errors import InvalidInputError
from affedit.evaluation import (EvalHandles, EvalRecord, GaussianSummary, LatentFeatures, evaluate_suite,
                                frechet_distance, kld_score, load_eval_manifest, per_image_clarity, sem_c)
from affedit.spectrum import EmotionDistribution, estimate_distribution
from affedit.toy import BrightnessSceneClassifier, ColorEmotionClassifier, HueObjectClassifier

# KL(one-hot || uniform(8)) with 1e-8 smoothing, frozen by tests/fixtures/make_fixtures.py (mpmath).
KL_ONEHOT_UNIFORM = 2.0794401822322894574


def random_psd(d, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((d, d + 3))
    return a @ a.T / (d + 3)


def simplex():
    return arrays(np.float64, 8, elements=st.floats(0.0, 1.0)).filter(lambda v: v.sum() > 1e-3).map(
        lambda v: v / v.sum())


# ----------------------------------------------------------- GaussianSummary


def test_gaussian_summary_validation():
    with pytest.raises(InvalidInputError):
        GaussianSummary(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(InvalidInputError):
        GaussianSummary(np.zeros(2), np.array([[1.0, 0.0], [0.0, -0.1]]))
    with pytest.raises(InvalidInputError):
        GaussianSummary(np.zeros(3), np.eye(2))
    GaussianSummary(np.zeros(2), np.array([[1.0, 0.0], [0.0, -1e-10]]))  # within jitter


def test_gaussian_from_features_needs_two_rows():
    with pytest.raises(InvalidInputError):
        GaussianSummary.from_features(np.zeros((1, 3)))


# ---------------------------------------------------------- frechet_distance


def test_frechet_identical_is_zero():
    g = GaussianSummary(np.ones(4), random_psd(4, 0))
    assert frechet_distance(g, g) == pytest.approx(0.0, abs=1e-9)


def test_frechet_mean_shift_only():
    a = GaussianSummary(np.zeros(2), np.eye(2))
    b = GaussianSummary(np.array([3.0, 4.0]), np.eye(2))
    assert frechet_distance(a, b) == pytest.approx(25.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_frechet_matches_oracles(seed):
    rng = np.random.default_rng(100 + seed)
    d = 6
    mu_a, mu_b = rng.standard_normal(d), rng.standard_normal(d)
    ca, cb = random_psd(d, seed), random_psd(d, seed + 50)
    got = frechet_distance(GaussianSummary(mu_a, ca), GaussianSummary(mu_b, cb))
    assert abs(got - oracles.frechet_eigvals(mu_a, ca, mu_b, cb)) <= 1e-6
    assert abs(got - oracles.frechet_sqrtm(mu_a, ca, mu_b, cb)) <= 1e-6


def test_frechet_dimension_mismatch():
    with pytest.raises(InvalidInputError):
        frechet_distance(GaussianSummary(np.zeros(2), np.eye(2)), GaussianSummary(np.zeros(3), np.eye(3)))


def test_frechet_rank_deficient_covariance():
    c = np.zeros((3, 3))
    c[0, 0] = 1.0
    a, b = GaussianSummary(np.zeros(3), c), GaussianSummary(np.zeros(3), np.eye(3))
    assert frechet_distance(a, b) == pytest.approx(oracles.frechet_eigvals(np.zeros(3), c, np.zeros(3), np.eye(3)),
                                                   abs=1e-9)


@given(st.integers(0, 10_000), st.integers(1, 6))
def test_frechet_symmetric_nonnegative(seed, d):
    rng = np.random.default_rng(seed)
    a = GaussianSummary(rng.standard_normal(d), random_psd(d, seed))
    b = GaussianSummary(rng.standard_normal(d), random_psd(d, seed + 1))
    ab, ba = frechet_distance(a, b), frechet_distance(b, a)
    assert ab >= 0
    assert ab == pytest.approx(ba, rel=1e-8, abs=1e-9)


# --------------------------------------------------------------------- sem_c


def uniform(n):
    return lambda img: np.full(n, 1.0 / n)


def test_sem_c_uniform_scene_wins():
    assert sem_c([None, None], uniform(10), uniform(4)) == pytest.approx(0.25)


def test_sem_c_one_hot_saturates():
    assert sem_c([None], lambda img: np.eye(10)[2], uniform(4)) == 1.0


def test_sem_c_recorded_fixture():
    obj = {0: [0.6, 0.4], 1: [0.2, 0.8], 2: [0.5, 0.5]}
    scene = {0: [0.3, 0.7], 1: [0.9, 0.1], 2: [0.25, 0.75]}
    expected = (0.7 + 0.9 + 0.75) / 3
    assert sem_c([0, 1, 2], lambda i: np.array(obj[i]), lambda i: np.array(scene[i])) == pytest.approx(expected)


def test_sem_c_errors():
    with pytest.raises(InvalidInputError):
        sem_c([], uniform(10), uniform(4))
    with pytest.raises(InvalidInputError):
        sem_c([None], lambda img: np.array([0.5, 0.7]), uniform(4))


@given(st.lists(st.integers(0, 10_000), min_size=1, max_size=6))
def test_sem_c_in_unit_interval_and_permutation_invariant(seeds):
    def clf(n):
        return lambda s: np.random.default_rng(s * n).dirichlet(np.ones(n))

    v = sem_c(seeds, clf(10), clf(4))
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(sem_c(seeds[::-1], clf(10), clf(4)), rel=1e-12)


# ----------------------------------------------------------------- kld_score


def test_kld_identical_is_zero():
    p = EmotionDistribution(np.random.default_rng(0).dirichlet(np.ones(8)))
    assert kld_score(p, p) <= 1e-6


def test_kld_one_hot_vs_uniform():
    got = kld_score(EmotionDistribution([0.125] * 8), EmotionDistribution.one_hot("awe"))
    assert got == pytest.approx(KL_ONEHOT_UNIFORM, rel=1e-12)
    assert abs(got - np.log(8)) <= 1e-3


@given(simplex(), simplex())
def test_kld_matches_elementwise_oracle(p, q):
    got = kld_score(EmotionDistribution(q), EmotionDistribution(p))
    assert got >= 0
    assert abs(got - oracles.kld(list(p), list(q))) <= 1e-9


def test_kld_direction_flag():
    p, q = EmotionDistribution.one_hot("awe"), EmotionDistribution([0.125] * 8)
    fwd = kld_score(q, p)
    rev = kld_score(q, p, direction="predicted||target")
    assert rev == pytest.approx(oracles.kld([0.125] * 8, list(np.eye(8)[1])), rel=1e-12)
    assert fwd != pytest.approx(rev)
    with pytest.raises(InvalidInputError):
        kld_score(q, p, direction="sideways")


# -------------------------------------------------------------------- suite


def suite_handles(config=None):
    ae = Autoencoder(width=16).eval()
    return EvalHandles(LatentFeatures(ae), HueObjectClassifier(), BrightnessSceneClassifier(),
                       ColorEmotionClassifier(gain=8), None, config=config or {"run": 1})


def records(n=3, seed=0):
    g = torch.Generator().manual_seed(seed)
    out = []
    for i in range(n):
        img = torch.rand(3, 64, 64, generator=g)
        out.append(EvalRecord(f"r{i}", img, img.clone(), EmotionDistribution(np.eye(8)[i % 8] * 0.5 + 0.0625)))
    return out


def test_suite_identical_sets_zero_fid(tmp_path):
    h = suite_handles()
    rep = evaluate_suite(records(4), h, tmp_path)
    assert rep["fid"] == pytest.approx(0.0, abs=1e-9)
    assert rep["errors"] == {} and rep["n"] == 4
    stored = json.loads((tmp_path / "report.json").read_text())
    assert set(stored) >= {"fid", "sem_c", "mean_kld", "n", "config_hash"}
    rows = list(csv.DictReader(open(tmp_path / "records.csv")))
    assert [r["id"] for r in rows] == ["r0", "r1", "r2", "r3"]


def test_suite_fields_equal_individual_metric_calls():
    h = suite_handles()
    recs = records(3, seed=1)
    for i, r in enumerate(recs):
        r.edited = torch.rand(3, 64, 64, generator=torch.Generator().manual_seed(50 + i))
    rep = evaluate_suite(recs, h)
    edited = torch.stack([r.edited for r in recs])
    originals = torch.stack([r.original for r in recs])
    assert rep["sem_c"] == pytest.approx(sem_c(list(edited), h.object_classifier, h.scene_classifier), rel=1e-12)
    klds = [kld_score(estimate_distribution(e, h.emotion_classifier), r.target) for e, r in zip(edited, recs)]
    assert rep["mean_kld"] == pytest.approx(np.mean(klds), rel=1e-12)
    fid = frechet_distance(GaussianSummary.from_features(h.features(edited)),
                           GaussianSummary.from_features(h.features(originals)))
    assert rep["fid"] == pytest.approx(fid, rel=1e-12)


def test_suite_permutation_invariant():
    h = suite_handles()
    recs = records(5, seed=2)
    for i, r in enumerate(recs):
        r.edited = r.original.flip(-1) * (0.5 + 0.1 * i)
    a, b = evaluate_suite(recs, h), evaluate_suite(recs[::-1], h)
    for k in ("fid", "sem_c", "mean_kld"):
        assert a[k] == pytest.approx(b[k], rel=1e-9, abs=1e-12)


def test_suite_empty_records():
    with pytest.raises(InvalidInputError):
        evaluate_suite([], suite_handles())


def test_suite_metric_failure_gives_partial_report():
    h = suite_handles()
    h.scene_classifier = lambda img: np.array([0.9, 0.9])
    rep = evaluate_suite(records(3), h)
    assert rep["sem_c"] is None and "sem_c" in rep["errors"]
    assert rep["fid"] is not None and rep["mean_kld"] is not None


def test_suite_config_hash_tracks_config():
    a = evaluate_suite(records(2), suite_handles({"x": 1}))["config_hash"]
    b = evaluate_suite(records(2), suite_handles({"x": 2}))["config_hash"]
    assert a != b


def test_per_image_clarity():
    assert per_image_clarity(None, lambda i: np.array([0.2, 0.8]), uniform(4)) == 0.8


def test_manifest_with_paths(tmp_path):
    img = torch.rand(3, 64, 64, generator=torch.Generator().manual_seed(0))
    save_image(img, tmp_path / "o.png")
    save_image(img, tmp_path / "e.png")
    (tmp_path / "m.jsonl").write_text(json.dumps({"id": 1, "original": "o.png", "edited": "e.png",
                                                  "target": [0.125] * 8, "text": "calm"}) + "\n")
    recs = load_eval_manifest(tmp_path / "m.jsonl") * 2
    from affedit.editing import load_image

    h = suite_handles()
    h.image_loader = load_image
    rep = evaluate_suite(recs, h)
    assert rep["errors"] == {}
    assert rep["fid"] == pytest.approx(0.0, abs=1e-9)
