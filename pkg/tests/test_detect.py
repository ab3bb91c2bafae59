import json
import random

import numpy as np
import pytest

from gam_audit.dataset import split_by_group
from gam_audit.detect import (
    CONFIRMED,
    FOUND,
    NONE,
    DetectionConfig,
    RankedModel,
    candidate_set,
    detect,
    detect_dataset,
    nullification_score,
    rank_models,
    step1_search,
    step2_nullify,
)
from gam_audit.errors import ConfigError, DetectionError
from gam_audit.gam import FittedGam, optimize_lambdas
from gam_audit.synth import generate, preset

from conftest import make_dataset


@pytest.fixture(scope="module")
def liver_small():
    return generate(preset("liver").with_rows(15000))


def test_rank_models_orders_and_breaks_ties():
    models = [
        RankedModel(("a",), 0.900, 5.0),
        RankedModel(("b",), 0.898, 3.0),  # within epsilon of the leader, simpler
        RankedModel(("a", "b"), 0.903, 9.0),
        RankedModel(("c",), 0.80, 2.0),
        RankedModel(("d",), None, None, status="failed"),
        RankedModel(("e",), 0.898, 3.0),  # same edf as b: name decides
    ]
    ranked = rank_models(models, epsilon=0.005)
    assert [m.features for m in ranked] == [("b",), ("e",), ("a",), ("a", "b"), ("c",), ("d",)]
    assert [m.rank for m in ranked] == [1, 2, 3, 4, 5, 6]
    strict = rank_models(models, epsilon=0.0)
    assert strict[0].features == ("a", "b")


def test_ranking_total_under_permutation(additive_data):
    train, ev = split_by_group(additive_data, 0.25, 3)
    cand = candidate_set(train, ["x1", "x2", "z", "b"])
    ranked, _ = step1_search(train, ev, cand, DetectionConfig(max_candidates=4))
    assert len(ranked) == 15
    rng = random.Random(0)
    for _ in range(20):
        shuffled = list(ranked)
        rng.shuffle(shuffled)
        again = rank_models(shuffled, 0.005)
        assert [m.features for m in again] == [m.features for m in ranked]


def test_step1_finds_generating_features():
    rng = np.random.default_rng(5)
    n = 1200
    cols = {"x1": rng.uniform(-2, 2, n), "x2": rng.uniform(-2, 2, n), "z": rng.normal(size=n)}
    y = np.sin(1.5 * cols["x1"]) + 0.4 * cols["x2"] ** 2 + 0.05 * rng.normal(size=n)
    d = make_dataset(cols, y, groups=np.arange(n) // 3)
    rep = detect_dataset(d, DetectionConfig(max_candidates=3))
    assert rep.defining == ("x1", "x2") or set(rep.defining) == {"x1", "x2"}
    assert rep.confirmed
    assert rep.step2.scores["z"] < 0.05


def test_noise_labels_give_no_defining_set():
    hits = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        n = 300
        cols = {f"x{i}": rng.normal(size=n) for i in range(3)}
        d = make_dataset(cols, rng.normal(size=n), groups=np.arange(n) // 3)
        rep = detect_dataset(d, DetectionConfig(max_candidates=3))
        if rep.step1_verdict == NONE:
            hits += 1
            assert rep.step2 is None
            assert "step2" not in rep.to_dict()
    assert hits >= 19


def test_monotone_flagging(additive_data):
    train, ev = split_by_group(additive_data, 0.25, 3)
    cand = candidate_set(train, ["x1", "x2", "z", "b"])
    verdicts = []
    for delta in np.linspace(0.05, 1.0, 40):
        _, c = step1_search(train, ev, cand, DetectionConfig(delta=float(delta), max_candidates=4))
        verdicts.append(c is not None)
    # found for low delta, then none from some point on, never back
    assert verdicts[0] and not verdicts[-1]
    first_none = verdicts.index(False)
    assert not any(verdicts[first_none:])


def test_argmax_invariance_under_label_scaling(additive_data):
    cfg = DetectionConfig(max_candidates=4, delta=0.5)
    base = detect_dataset(additive_data, cfg, ["x1", "x2", "z", "b"])
    scaled = make_dataset(
        dict(additive_data.columns), additive_data.label * 7.3, kinds=dict(additive_data.kinds),
        groups=additive_data.group_id,
    )
    other = detect_dataset(scaled, cfg, ["x1", "x2", "z", "b"])
    assert [m.features for m in base.ranked] == [m.features for m in other.ranked]
    assert base.defining == other.defining
    for a, b in zip(base.ranked, other.ranked):
        assert a.d2 == pytest.approx(b.d2, abs=1e-9)


def test_config_validation():
    for bad in ({"delta": 0.0}, {"delta": 1.2}, {"epsilon": 0.96}, {"epsilon": -0.1}, {"tau": 0.0},
                {"tau": 1.0}, {"max_candidates": 9}, {"max_candidates": 0}, {"n_basis": 3}, {"workers": 0}):
        with pytest.raises(ConfigError):
            DetectionConfig(**bad)
    with pytest.raises(ConfigError):
        DetectionConfig.from_dict({"delta": 0.9, "gamma": 1})
    assert DetectionConfig.from_dict({"delta": 0.9}).delta == 0.9


def test_too_many_candidates(additive_data):
    train, ev = split_by_group(additive_data, 0.25, 3)
    cand = candidate_set(train, ["x1", "x2", "z"])
    with pytest.raises(ConfigError):
        step1_search(train, ev, cand, DetectionConfig(max_candidates=2))
    with pytest.raises(DetectionError):
        step2_nullify(train, ev, [], cand)


def test_nullification_score_zero_for_zero_coefficients(additive_data):
    g = optimize_lambdas(additive_data, ["x1", "z"])
    assert 0 <= nullification_score(g, "z")
    zeroed_coefs = dict(g.coefs)
    zeroed_coefs["z"] = np.zeros_like(g.coefs["z"])
    term_sd = dict(g.term_sd, z=0.0)
    zeroed = FittedGam(**{**g.__dict__, "coefs": zeroed_coefs, "term_sd": term_sd})
    assert nullification_score(zeroed, "z") == 0.0
    flat = FittedGam(**{**g.__dict__, "fitted_sd": 0.0})
    assert nullification_score(flat, "x1") is None
    with pytest.raises(ConfigError):
        nullification_score(g, "missing")


def test_nullification_score_matches_definition(additive_data):
    g = optimize_lambdas(additive_data, ["x1", "x2", "b"])
    from gam_audit.gam import predict

    f = g.term_values("x2", additive_data.column("x2"))
    yhat = predict(g, additive_data)
    assert nullification_score(g, "x2") == pytest.approx(np.std(f) / np.std(yhat), rel=1e-9)


def test_liver_extended_and_reduced_models(liver_small):
    rep = detect_dataset(liver_small, DetectionConfig())
    assert rep.defining == ("bilirubin",)
    assert rep.step2.verdict == CONFIRMED
    assert rep.step2.extended_d2 >= 0.99
    assert rep.step2.reduced_d2 <= 0.6
    others = [n for n in rep.candidates.names if n != "bilirubin"]
    assert all(rep.step2.scores[n] < 0.05 for n in others)
    assert rep.step2.scores["bilirubin"] >= 0.05
    # without bilirubin the same features carry the fit
    reduced = rep.step2.reduced
    assert all(nullification_score(reduced, n) >= 0.05 for n in others)


def test_report_contract(liver_small):
    rep = detect_dataset(liver_small, DetectionConfig())
    payload = json.loads(rep.to_json())
    assert payload["step1"]["verdict"] == FOUND
    assert len(payload["step1"]["ranked"]) == 31
    assert "workers" not in payload["config"]
    assert set(payload["step2"]["scores"]) == set(rep.candidates.names)
    assert "NaN" not in rep.to_json()
    text = rep.to_text()
    assert "verdict: confirmed" in text and "bilirubin" in text


def test_report_identical_across_workers(additive_data):
    outs = []
    for workers in (1, 4):
        rep = detect_dataset(additive_data, DetectionConfig(max_candidates=4, delta=0.5, workers=workers))
        outs.append((rep.to_json(), rep.to_text()))
    assert outs[0] == outs[1]


def test_singular_subset_ranked_last():
    rng = np.random.default_rng(2)
    n = 200
    b = rng.integers(0, 2, n).astype(float)
    x = rng.normal(size=n)
    d = make_dataset({"b": b, "b_copy": b.copy(), "x": x}, b + 0.1 * x, kinds={"b": "binary", "b_copy": "binary"},
                     groups=np.arange(n) // 2)
    train, ev = split_by_group(d, 0.25, 1)
    ranked, _ = step1_search(train, ev, candidate_set(train, ["b", "b_copy", "x"]),
                             DetectionConfig(max_candidates=3))
    failed = [m for m in ranked if m.status == "failed"]
    assert failed and all(m.rank > max(r.rank for r in ranked if r.status == "ok") for m in failed)
    assert all("b_copy" in m.message or "b" in m.message for m in failed)
