import math

import numpy as np
import pytest

from pstest.errors import ValidationError
from pstest.simulate import (
    Covariance,
    RefinementScenario,
    Region,
    Scenario,
    bundled_scenario,
    coefficient_weights,
    desk_scenario,
    generate_design,
    grid_refinement_study,
    linear_predictor,
    parse_method,
    refinement_statistics,
    run_study,
    simulate_outcome,
)


def small_scenario(**kw):
    regions = (Region("neg", "negative", (0, 1)), Region("pos", "positive", (2,)),
               Region("rest", "null", (3, 4)))
    base = dict(n=5, p=5, regions=regions, methods=("pca:2",), replicates=2)
    base.update(kw)
    return Scenario(**base)


def test_identity_design_sample_covariance():
    sc = Scenario(n=10_000, p=4, regions=(Region("all", "null", range(4)),), center=False,
                  methods=("sum",))
    g = generate_design(sc, 1)
    np.testing.assert_allclose(np.cov(g.T), np.eye(4), atol=0.05)


def test_ar1_lag_one_correlation():
    sc = Scenario(n=10_000, p=6, regions=(Region("all", "null", range(6), Covariance("ar1", 0.5)),),
                  methods=("sum",))
    g = generate_design(sc, 2)
    lag1 = np.mean([np.corrcoef(g[:, j], g[:, j + 1])[0, 1] for j in range(5)])
    assert lag1 == pytest.approx(0.5, abs=0.03)
    np.testing.assert_allclose(g.mean(axis=0), 0.0, atol=1e-12)


@pytest.mark.parametrize("cov, match", [
    (Covariance("identity", variance=0.0), "variance"),
    (Covariance("ar1", rho=1.0), "rho"),
    (Covariance("matrix", matrix=((1.0, 2.0), (2.0, 1.0))), "semidefinite"),
    (Covariance("matrix", matrix=((0.0, 0.0), (0.0, 1.0))), "zero"),
    (Covariance("matrix", matrix=((1.0, 0.5), (0.0, 1.0))), "symmetric"),
])
def test_bad_covariances_rejected(cov, match):
    with pytest.raises(ValidationError, match=match):
        Scenario(n=5, p=2, regions=(Region("r", "null", (0, 1), cov),), methods=("sum",))


def test_region_layout_validation():
    with pytest.raises(ValidationError, match="overlap"):
        Scenario(n=5, p=3, regions=(Region("a", "null", (0, 1)), Region("b", "negative", (1, 2))))
    with pytest.raises(ValidationError, match="missing"):
        Scenario(n=5, p=3, regions=(Region("a", "null", (0, 1)),))
    with pytest.raises(ValidationError, match="outside"):
        Scenario(n=5, p=2, regions=(Region("a", "null", (0, 1, 2)),))


def test_linear_predictor_hand_arithmetic():
    sc = small_scenario(alpha0=0.3)
    g = np.arange(25.0).reshape(5, 5) / 10
    beta = 0.7
    direct = [0.3 - beta * (row[0] + row[1]) + 2 * beta * row[2] for row in g]
    np.testing.assert_allclose(linear_predictor(g, sc, beta), direct, rtol=1e-14)


def test_uniform_coefficients_in_range_and_fixed():
    sc = small_scenario(coefficients="uniform")
    w = coefficient_weights(sc)
    assert np.all((-1.5 <= w[:2]) & (w[:2] <= -0.5))
    assert 1.0 <= w[2] <= 3.0 and np.all(w[3:] == 0)
    np.testing.assert_array_equal(w, coefficient_weights(sc))


def test_outcome_validation_and_monotonicity():
    sc = small_scenario(n=400)
    g = generate_design(sc, 3)
    with pytest.raises(ValidationError):
        simulate_outcome(g, sc, -0.1, 3)
    score = g @ coefficient_weights(sc)
    ys = [simulate_outcome(g, sc, b, 3) for b in (0.0, 1.0, 5.0, 50.0)]
    # coupled uniforms: an outcome can only move towards sign(score) as beta grows
    for lo, hi in zip(ys[:-1], ys[1:]):
        assert np.all(hi[score > 0] >= lo[score > 0]) and np.all(hi[score < 0] <= lo[score < 0])
    far = np.abs(score) > 0.2
    np.testing.assert_array_equal(ys[-1][far], (score[far] > 0).astype(float))


def test_parse_method():
    assert parse_method("pca:10") == ("pca", 10)
    assert parse_method("spu:inf")[1] == math.inf
    assert parse_method("aspu") == ("aspu", None)
    for bad in ("pca", "pca:x", "spu:0", "skat", "apca:3"):
        with pytest.raises(ValidationError):
            parse_method(bad)


def test_scenario_round_trip_and_unknown_keys(tmp_path):
    sc = desk_scenario(betas=(0.0, 0.1))
    assert Scenario.from_dict(sc.to_dict()) == sc
    d = sc.to_dict()
    d["replicaets"] = 5
    with pytest.raises(ValidationError, match="replicaets"):
        Scenario.from_dict(d)


def test_desk_layout_proportions():
    sc = bundled_scenario("desk")
    sizes = {r.name: len(r.indices) for r in sc.regions}
    assert sizes == {"negative_a": 7, "negative_b": 7, "positive": 4, "null": 182}
    assert sc.alpha0 == pytest.approx(math.log(399 / 229))
    assert sc.n == 200 and sc.p == 200


def test_study_is_deterministic_across_workers():
    sc = desk_scenario(p=40, n=60, betas=(0.0, 0.1), replicates=6, b=1000, b_perm=50,
                       methods=("apca", "pca:3", "spu:inf", "aspu", "partition:4"))
    a = run_study(sc, n_jobs=1)
    b = run_study(sc, n_jobs=2)
    assert a.rows == b.rows
    for row in a.rows:
        for k, v in row.items():
            if isinstance(v, float) and not k.endswith("_se") and not math.isnan(v) and k != "beta":
                assert 0.0 <= v <= 1.0
        se = row["power_se"]
        r = row["power"]
        assert se == pytest.approx(math.sqrt(r * (1 - r) / row["replicates"]))


def test_replicate_failures_are_counted():
    sc = desk_scenario(p=60, n=40, betas=(0.0,), replicates=3, methods=("rao", "pca:2"), b=1000)
    rep = run_study(sc, n_jobs=1)
    rao = rep.get("rao", 0.0)
    assert rao["failures"] == 3 and rao["replicates"] == 0
    assert rep.get("pca:2", 0.0)["replicates"] == 3
    assert rep.failures == ({"method": "rao", "beta": 0.0, "error": "ValidationError", "count": 3},)
    names = rep.tables()["failures"][1]
    assert names == [["rao", 0.0, "ValidationError", 3]]


def test_refinement_constant_field_is_exact():
    rs = RefinementScenario(field="constant", replicates=3, grids=(32, 64, 128, 4096))
    for i in range(3):
        s = refinement_statistics(rs, i)
        np.testing.assert_allclose(s, s[0], rtol=1e-10)


def test_refinement_rejects_non_nested_grids():
    with pytest.raises(ValidationError, match="nested"):
        RefinementScenario(grids=(32, 48, 96))
    with pytest.raises(ValidationError, match="nested"):
        RefinementScenario(grids=(64, 32))


def test_refinement_converges():
    rep = grid_refinement_study(RefinementScenario(replicates=10, grids=(32, 64, 128, 256, 512)),
                                n_jobs=1)
    cols, rows = rep.table()
    medians = [r[cols.index("median_relative_change")] for r in rows]
    assert medians[-1] < medians[0] and medians[-1] < 1e-3
