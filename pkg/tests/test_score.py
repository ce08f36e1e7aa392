"""Standard scores, matching, delta stats, and the verdict report."""

from dataclasses import dataclass

import numpy as np
import pytest

from rawscore import score
from rawscore.errors import (
    DegenerateSpread,
    DimMismatch,
    EmptyPairing,
    InvalidSpec,
    SchemaViolation,
    TooFewReplicates,
)
from rawscore.imgio import ImageStack
from rawscore.score import (
    MatchResult,
    ParamSample,
    averaged_scores,
    build_report,
    delta_distribution,
    delta_table_csv,
    match_objects,
    operator_scores,
    per_object_scores,
    predictive_uncertainty,
    report_from_json,
    report_to_json,
    standard_score,
    validate_report,
)


@dataclass(frozen=True)
class Rec:
    x_cm: float
    y_cm: float
    area: float = 0.0
    tally: float = 42.0  # integer-like parameter that never varies


def _recs(centroids, areas=None):
    areas = areas if areas is not None else [0.0] * len(centroids)
    return [Rec(x, y, a) for (x, y), a in zip(centroids, areas)]


# ---------------------------------------------------------------------------
# uncertainty and scores
# ---------------------------------------------------------------------------


def test_predictive_uncertainty_basics():
    assert predictive_uncertainty(ParamSample("a", (10, 10, 10))) == (10.0, 0.0)
    mean, sigma = predictive_uncertainty(ParamSample("a", (9, 11)))
    assert mean == 10.0
    assert sigma == pytest.approx(np.sqrt(2.0), abs=1e-12)
    with pytest.raises(TooFewReplicates):
        predictive_uncertainty(ParamSample("a", (5.0,)))


def test_standard_score_formula():
    assert standard_score(7.0, 7.0, 2.0) == 0.0
    assert standard_score(100.0, 98.0, 0.5) == 4.0
    with pytest.raises(DegenerateSpread):
        standard_score(1.0, 2.0, 0.0)
    with pytest.raises(InvalidSpec):
        standard_score(1.0, 2.0, -1.0)


def test_score_antisymmetry_and_scaling():
    rng = np.random.default_rng(0)
    for _ in range(200):
        a, b = rng.normal(0, 50, 2)
        s = float(rng.uniform(0.01, 10.0))
        k = float(rng.uniform(0.1, 7.0))
        assert standard_score(a, b, s) == -standard_score(b, a, s)
        assert standard_score(a, b, s / k) == pytest.approx(
            k * standard_score(a, b, s), rel=1e-12
        )


# ---------------------------------------------------------------------------
# matching
# ---------------------------------------------------------------------------


def test_identical_sets_pair_identically():
    pts = [(3.0, 4.0), (10.0, 2.0), (7.5, 9.0)]
    m = match_objects(_recs(pts), _recs(pts))
    assert m.n_pairs == 3
    assert all(d == 0.0 for _, _, d in m.pairs)
    assert {(i, j) for i, j, _ in m.pairs} == {(0, 0), (1, 1), (2, 2)}
    assert m.unpaired_raw == () and m.unpaired_other == ()


def test_uniform_shift_pairs_at_distance_one():
    pts = [(3.0, 4.0), (10.0, 2.0), (20.0, 14.0)]
    shifted = [(x + 1.0, y) for x, y in pts]
    m = match_objects(_recs(pts), _recs(shifted))
    assert m.n_pairs == 3
    assert all(d == pytest.approx(1.0) for _, _, d in m.pairs)


def test_extra_object_reported_unpaired():
    raw = _recs([(3.0, 4.0), (10.0, 2.0)])
    comp = _recs([(3.0, 4.0), (10.0, 2.0), (30.0, 30.0)])
    m = match_objects(raw, comp)
    assert m.n_pairs == 2
    assert m.unpaired_other == (2,)


def test_max_distance_caps_pairs():
    m = match_objects(_recs([(0.0, 0.0)]), _recs([(8.0, 0.0)]))
    assert m.n_pairs == 0
    assert m.unpaired_raw == (0,) and m.unpaired_other == (0,)
    m = match_objects(_recs([(0.0, 0.0)]), _recs([(8.0, 0.0)]), max_distance=10)
    assert m.n_pairs == 1


def test_greedy_takes_closest_first():
    raw = _recs([(0.0, 0.0), (3.0, 0.0)])
    comp = _recs([(1.0, 0.0)])
    m = match_objects(raw, comp)
    assert m.pairs == ((0, 0, 1.0),)
    assert m.unpaired_raw == (1,)


def test_matching_invariant_to_input_order():
    rng = np.random.default_rng(3)
    pts = rng.uniform(0, 100, (30, 2))
    jit = pts + rng.uniform(-0.3, 0.3, pts.shape)
    raw = _recs([tuple(p) for p in pts])
    comp = _recs([tuple(p) for p in jit])
    m1 = match_objects(raw, comp)
    perm = rng.permutation(30)
    m2 = match_objects(raw, [comp[k] for k in perm])
    back = {(i, tuple(np.round([comp2.x_cm, comp2.y_cm], 9)))
            for i, j, _ in m2.pairs
            for comp2 in [[comp[k] for k in perm][j]]}
    want = {(i, tuple(np.round([comp[j].x_cm, comp[j].y_cm], 9)))
            for i, j, _ in m1.pairs}
    assert back == want


def test_3d_default_distance_is_tighter():
    a = np.array([[0.0, 0.0, 0.0]])
    b = np.array([[4.0, 0.0, 0.0]])
    assert match_objects(a, b).n_pairs == 0  # 4 > 3 voxel default
    a2 = np.array([[0.0, 0.0]])
    b2 = np.array([[4.0, 0.0]])
    assert match_objects(a2, b2).n_pairs == 1  # 4 < 5 px default
    with pytest.raises(DimMismatch):
        match_objects(a, b2)


# ---------------------------------------------------------------------------
# delta distributions
# ---------------------------------------------------------------------------


def test_delta_of_self_is_zero():
    recs = _recs([(1.0, 1.0), (5.0, 5.0)], areas=[50.0, 80.0])
    stats = delta_distribution(match_objects(recs, recs), "area")
    assert stats.deltas == (0.0, 0.0)
    assert stats.mean == 0.0 and stats.std == 0.0
    assert sum(stats.counts) == 2


def test_delta_mean_std_and_bins():
    raw = _recs([(1.0, 1.0), (5.0, 5.0)], areas=[11.0, 13.0])
    comp = _recs([(1.0, 1.0), (5.0, 5.0)], areas=[10.0, 10.0])
    stats = delta_distribution(match_objects(raw, comp), "area")
    assert stats.mean == 2.0
    assert stats.std == pytest.approx(np.sqrt(2.0))
    assert set(stats.deltas) == {1.0, 3.0}
    edges = np.asarray(stats.bin_edges)
    assert np.allclose(np.diff(edges), 0.5)
    assert edges[0] <= 1.0 and edges[-1] >= 3.0
    assert sum(stats.counts) == 2


def test_delta_errors():
    far = match_objects(_recs([(0.0, 0.0)]), _recs([(50.0, 50.0)]))
    with pytest.raises(EmptyPairing):
        delta_distribution(far, "area")
    bare = match_objects(np.zeros((2, 2)), np.zeros((2, 2)))
    with pytest.raises(InvalidSpec):
        delta_distribution(bare, "area")
    ok = match_objects(_recs([(0.0, 0.0)]), _recs([(0.0, 0.0)]))
    with pytest.raises(InvalidSpec):
        delta_distribution(ok, "area", bin_width=0.0)


def test_delta_table_csv():
    raw = _recs([(1.0, 1.0), (5.0, 5.0)], areas=[11.0, 13.0])
    comp = _recs([(1.5, 1.0), (5.0, 5.0)], areas=[10.0, 10.0])
    text = delta_table_csv(match_objects(raw, comp), ["area"])
    lines = text.strip().splitlines()
    assert lines[0] == "raw_index,other_index,distance,delta_area"
    assert len(lines) == 3
    cells = lines[1].split(",")
    assert int(cells[0]) in (0, 1)
    float(cells[2]), float(cells[3])


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


def test_averaged_scores_basics():
    out = averaged_scores({"a": (0.0, 0.0, 0.0), "b": (-1.0, 1.0)})
    assert out["a"].mean == 0.0 and out["a"].std == 0.0
    assert out["b"].mean == 0.0
    assert out["b"].std == pytest.approx(np.sqrt(2.0))
    assert out["b"].n == 2 and out["b"].n_degenerate == 0


def test_averaged_scores_counts_degenerates():
    out = averaged_scores({"a": (1.0, None, 3.0, None)})
    assert out["a"].n == 2
    assert out["a"].n_degenerate == 2
    assert out["a"].mean == 2.0
    empty = averaged_scores({"a": (None, None)})
    assert np.isnan(empty["a"].mean)
    assert empty["a"].n == 0 and empty["a"].n_degenerate == 2


def test_self_scoring_is_calibrated():
    """Held-out replicate scored against replicate spread: epsilon is
    t-flavored, centered, with std a bit above 1."""
    rng = np.random.default_rng(11)
    eps = []
    for _ in range(300):
        replicates = rng.normal(100.0, 2.0, 10)
        chi_raw = rng.normal(100.0, 2.0)
        held_out = rng.normal(100.0, 2.0)
        _, sigma = predictive_uncertainty(ParamSample("x", tuple(replicates)))
        eps.append(standard_score(chi_raw, held_out, sigma))
    eps = np.asarray(eps)
    assert abs(eps.mean()) <= 0.3
    assert 0.7 <= eps.std(ddof=1) <= 1.4 * np.sqrt(2.0)


def test_per_object_scores_self_consistency():
    rng = np.random.default_rng(21)
    n_obj = 60
    pts = rng.uniform(10, 490, (n_obj, 2))
    mu = rng.uniform(80, 400, n_obj)
    sigma_true = 3.0

    def one_set(drop=None):
        recs = []
        for k in range(n_obj):
            if k == drop:
                continue
            jitter = rng.uniform(-0.4, 0.4, 2)
            recs.append(
                Rec(
                    pts[k, 0] + jitter[0],
                    pts[k, 1] + jitter[1],
                    mu[k] + rng.normal(0, sigma_true),
                )
            )
        return recs

    raw = one_set()
    reps = [one_set() for _ in range(10)]
    comp = one_set(drop=7)  # one object lost by the "codec"
    scores = per_object_scores(raw, reps, comp, ("area", "tally"))
    assert scores.n_unmatched_comp == 1
    assert 7 not in scores.raw_indices
    assert len(scores.raw_indices) == n_obj - 1

    summary = averaged_scores(scores.epsilons)
    assert abs(summary["area"].mean) <= 0.5
    assert 0.6 <= summary["area"].std <= 1.5 * np.sqrt(2.0)
    assert summary["area"].n >= 50
    # the constant parameter never varies: degenerate everywhere
    assert summary["tally"].n == 0
    assert summary["tally"].n_degenerate == n_obj - 1


def test_per_object_scores_needs_replicates():
    recs = _recs([(1.0, 1.0)])
    with pytest.raises(TooFewReplicates):
        per_object_scores(recs, [recs], recs, ("area",))


# ---------------------------------------------------------------------------
# operator scores
# ---------------------------------------------------------------------------


def _smooth_stack(seed, n=48, jitter=0.0, jitter_seed=0):
    rng = np.random.default_rng(seed)
    base = rng.normal(2000, 300, (n, n))
    from scipy.ndimage import gaussian_filter

    img = gaussian_filter(base, 3.0)
    if jitter:
        jrng = np.random.default_rng((seed, jitter_seed, 7))
        img = img + jrng.normal(0, jitter, (n, n))
    return ImageStack(
        data=np.clip(np.rint(img), 0, 65535).astype(np.uint16)[np.newaxis]
    )


def test_operator_scores_of_identity_are_zero():
    raw = _smooth_stack(0)
    reps = [_smooth_stack(0, jitter=20.0, jitter_seed=i) for i in range(4)]
    out = operator_scores(
        raw, raw, reps, ("raw_intensity", "gaussian"), (1.0, 2.0)
    )
    assert set(out) == {
        ("raw_intensity", None), ("gaussian", 1.0), ("gaussian", 2.0)
    }
    for summary in out.values():
        assert summary.mean == 0.0
        assert summary.std == 0.0
        assert summary.n > 0


def test_operator_scores_validation():
    raw = _smooth_stack(0)
    small = ImageStack(data=np.zeros((1, 8, 8), np.uint16))
    reps = [_smooth_stack(0, jitter=10.0, jitter_seed=i) for i in range(3)]
    with pytest.raises(DimMismatch):
        operator_scores(raw, small, reps, ("gaussian",), (1.0,))
    with pytest.raises(DimMismatch):
        operator_scores(raw, raw, [small, small], ("gaussian",), (1.0,))
    with pytest.raises(TooFewReplicates):
        operator_scores(raw, raw, reps[:1], ("gaussian",), (1.0,))


def test_operator_scores_self_replicate_calibrated():
    raw = _smooth_stack(5, jitter=25.0, jitter_seed=100)
    reps = [_smooth_stack(5, jitter=25.0, jitter_seed=i) for i in range(8)]
    comp = _smooth_stack(5, jitter=25.0, jitter_seed=200)
    out = operator_scores(raw, comp, reps, ("gaussian",), (1.5,))
    summary = out[("gaussian", 1.5)]
    assert abs(summary.mean) <= 0.3
    assert 0.8 <= summary.std <= 2.0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def _report_inputs():
    samples = {
        "a_tot": ParamSample("a_tot", (99.0, 101.0, 100.0, 100.4, 99.6)),
        "n_tot": ParamSample("n_tot", (40.0, 40.0, 40.0, 40.0, 40.0)),
    }
    chi_raw = {"a_tot": 100.2, "n_tot": 40.0}
    chi_c = {
        "bit8": {"a_tot": 97.0, "n_tot": 40.0},
        "identity": {"a_tot": 100.2, "n_tot": 40.0},
    }
    return samples, chi_raw, chi_c


def test_build_report_verdicts_and_invariants():
    samples, chi_raw, chi_c = _report_inputs()
    m = match_objects(_recs([(0.0, 0.0)]), _recs([(0.0, 0.0)]))
    stats = delta_distribution(m, "area")
    report = build_report(
        samples, chi_raw, chi_c,
        matching={"bit8": m},
        delta_histograms=[("bit8", stats)],
        provenance={"model_hash": "abc123", "seeds": {"global": 7}},
    )
    a = report["parameters"]["a_tot"]
    sigma = a["sigma_raw"]
    assert a["codecs"]["bit8"]["epsilon"] == pytest.approx(
        (100.2 - 97.0) / sigma
    )
    assert a["codecs"]["bit8"]["verdict"] == "intolerable"
    assert a["codecs"]["identity"]["epsilon"] == 0.0
    assert a["codecs"]["identity"]["verdict"] == "tolerable"
    n = report["parameters"]["n_tot"]
    assert n["degenerate"] is True
    assert n["codecs"]["bit8"]["epsilon"] is None
    assert n["codecs"]["bit8"]["verdict"] == "indeterminate"
    assert report["matching"]["bit8"]["n_pairs"] == 1


def test_report_roundtrip_bit_identical():
    samples, chi_raw, chi_c = _report_inputs()
    report = build_report(samples, chi_raw, chi_c)
    text = report_to_json(report)
    back = report_from_json(text)
    assert back == report
    assert report_to_json(back) == text


def test_report_validation_catches_tampering():
    samples, chi_raw, chi_c = _report_inputs()
    report = build_report(samples, chi_raw, chi_c)

    bad = report_to_json(report).replace('"version": 1', '"version": 2')
    with pytest.raises(SchemaViolation):
        report_from_json(bad)

    import copy

    t = copy.deepcopy(report)
    t["parameters"]["a_tot"]["codecs"]["bit8"]["epsilon"] = 0.0
    with pytest.raises(SchemaViolation):
        validate_report(t)

    t = copy.deepcopy(report)
    t["parameters"]["a_tot"]["codecs"]["identity"]["verdict"] = "intolerable"
    with pytest.raises(SchemaViolation):
        validate_report(t)

    t = copy.deepcopy(report)
    t["extra_section"] = {}
    with pytest.raises(SchemaViolation):
        validate_report(t)

    with pytest.raises(SchemaViolation):
        build_report(samples, {"a_tot": 1.0}, chi_c)


def test_verdict_monotone_in_shift():
    samples, chi_raw, _ = _report_inputs()
    sigma = predictive_uncertainty(samples["a_tot"])[1]
    order = []
    for shift in (3.0, 1.5, 0.7, 0.3, 0.0):
        report = build_report(
            samples, chi_raw, {"c": {"a_tot": 100.2 - shift, "n_tot": 40.0}}
        )
        order.append(report["parameters"]["a_tot"]["codecs"]["c"]["verdict"])
    first_ok = order.index("tolerable")
    assert all(v == "tolerable" for v in order[first_ok:])
    assert abs(3.0 / sigma) >= 1.0  # the widest shift really is outside


def test_report_from_json_rejects_garbage():
    with pytest.raises(SchemaViolation):
        report_from_json("{ not json")
    with pytest.raises(SchemaViolation):
        report_from_json('{"version": 1}')
