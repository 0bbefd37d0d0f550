import math

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from treeradar.core import TimeAxis, BScan
from treeradar.filtering import free_space_removal
from treeradar.gating import (Cluster, GateCurve, GatingConfig, HyperbolaParams, NoBoundariesError,
                              NonHyperbolicClusterError, NoSurfaceClutterError, Segment,
                              adaptive_threshold, apply_zero_gate, binarize, c3_cluster,
                              extract_segments, fit_hyperbola, gate_curve, hyperbolic_prior,
                              select_target_cluster, sobel_magnitude, zero_gating)
from treeradar.synth import AcquisitionSpec, TrunkScene, ground_truth, simulate

AXIS = TimeAxis(1e-10, 200)


# Sobel / threshold

def test_sobel_constant_is_zero():
    assert not sobel_magnitude(np.full((6, 7), 2.5)).any()


def test_sobel_unit_step():
    img = np.zeros((8, 10))
    img[:, 5:] = 1.0
    mag = sobel_magnitude(img)
    assert np.allclose(mag[:, 4], 4.0) and np.allclose(mag[:, 5], 4.0)
    assert not mag[:, :4].any() and not mag[:, 6:].any()


def test_sobel_transpose_symmetry():
    img = np.random.default_rng(0).standard_normal((9, 12))
    assert np.allclose(sobel_magnitude(img.T), sobel_magnitude(img).T)


def test_sobel_uses_magnitude():
    img = np.random.default_rng(1).standard_normal((9, 12))
    assert np.array_equal(sobel_magnitude(img), sobel_magnitude(np.abs(img)))


@pytest.mark.parametrize("rule", ["rms", "mean"])
def test_threshold_of_two_level_step(rule):
    img = np.zeros((12, 12))
    img[:, 6:] = 10.0
    assert adaptive_threshold(img, rule) == pytest.approx(5.0)


@pytest.mark.parametrize("rule", ["rms", "mean"])
def test_uniform_image_has_no_boundaries(rule):
    with pytest.raises(NoBoundariesError):
        adaptive_threshold(np.ones((5, 5)), rule)


@given(st.integers(0, 2 ** 31), st.floats(0.01, 100.0), st.sampled_from(["rms", "mean"]))
def test_threshold_homogeneous_and_bounded(seed, k, rule):
    img = np.random.default_rng(seed).standard_normal((10, 8))
    thr = adaptive_threshold(img, rule)
    assert adaptive_threshold(k * img, rule) == pytest.approx(k * thr, rel=1e-9)
    assert np.abs(img).min() <= thr <= np.abs(img).max()


def test_binarize_examples():
    img = np.random.default_rng(2).standard_normal((6, 6))
    assert not binarize(img, np.abs(img).max()).any()
    assert binarize(img, -1).all()
    m = binarize(img, 0.5)
    assert np.array_equal(binarize(m.astype(float), 0.5), m)


# segments

def test_extract_segments_example():
    col = np.array([0, 1, 1, 1, 0, 1, 1], dtype=bool)[:, None]
    assert extract_segments(col, 3) == [Segment(0, 1, 3)]
    assert extract_segments(col, 1) == [Segment(0, 1, 3), Segment(0, 5, 6)]


def test_segment_invariants():
    s = Segment(2, 3, 7)
    assert s.length == 5 and s.mid_row == 5.0
    with pytest.raises(ValueError):
        Segment(0, 5, 4)
    with pytest.raises(ValueError):
        extract_segments(np.ones((3, 3), bool), 0)


@given(st.integers(0, 2 ** 31), st.integers(1, 6))
def test_extract_segments_are_maximal_runs(seed, s_min):
    b = np.random.default_rng(seed).random((20, 6)) < 0.6
    segs = extract_segments(b, s_min)
    rebuilt = np.zeros_like(b)
    for s in segs:
        assert s.length >= s_min
        assert b[s.row_start:s.row_end + 1, s.col].all()
        assert s.row_start == 0 or not b[s.row_start - 1, s.col]
        assert s.row_end == 19 or not b[s.row_end + 1, s.col]
        rebuilt[s.row_start:s.row_end + 1, s.col] = True
    # every long enough run was found
    assert len(segs) == len(extract_segments(rebuilt, 1))


# C3

def test_c3_examples():
    a, b, c = Segment(0, 3, 7), Segment(1, 5, 9), Segment(2, 3, 7)
    assert len(c3_cluster([a, b])) == 1
    assert len(c3_cluster([a, c])) == 2


def _oracle(segments):
    g = nx.Graph()
    g.add_nodes_from(segments)
    for i, s in enumerate(segments):
        for t in segments[i + 1:]:
            if abs(s.col - t.col) == 1 and s.row_start <= t.row_end and t.row_start <= s.row_end:
                g.add_edge(s, t)
    return {frozenset(c) for c in nx.connected_components(g)}


segment_sets = st.lists(
    st.tuples(st.integers(0, 7), st.integers(0, 25), st.integers(0, 6)).map(
        lambda t: Segment(t[0], t[1], t[1] + t[2])),
    max_size=30, unique=True)


@settings(max_examples=1000)
@given(segment_sets, st.randoms(use_true_random=False))
def test_c3_matches_union_find(segments, rnd):
    shuffled = list(segments)
    rnd.shuffle(shuffled)
    got = {frozenset(c.segments) for c in c3_cluster(shuffled)}
    assert got == _oracle(segments)
    assert sum(len(c) for c in got) == len(segments)


@settings(max_examples=300)
@given(st.integers(0, 2 ** 31))
def test_c3_on_extracted_runs(seed):
    b = np.random.default_rng(seed).random((30, 12)) < 0.5
    segs = extract_segments(b, 1)
    got = {frozenset(c.segments) for c in c3_cluster(segs)}
    assert got == _oracle(segs)


# cluster selection

def _arc(depth, cols=range(5, 40), width=5):
    segs = []
    for n in cols:
        r = int(round(depth + 0.05 * (n - 22) ** 2))
        segs.append(Segment(n, r, r + width - 1))
    return Cluster(segs)


def test_select_prefers_wide_cluster():
    blob = Cluster([Segment(n, 2, 8) for n in (1, 2, 3)])
    arc = _arc(40)
    assert select_target_cluster([blob, arc], 51) is arc


def test_select_prefers_shallower_of_identical():
    deep, shallow = _arc(80), _arc(30)
    assert select_target_cluster([deep, shallow], 51) is shallow


def test_select_demotes_non_hyperbolic_shapes():
    flat = Cluster([Segment(n, 20, 24) for n in range(5, 40)])
    inverted = Cluster([Segment(n, 80 - int(0.05 * (n - 22) ** 2), 84 - int(0.05 * (n - 22) ** 2))
                        for n in range(5, 40)])
    arc = _arc(60)
    assert hyperbolic_prior(arc) and not hyperbolic_prior(inverted)
    assert select_target_cluster([flat, inverted, arc], 51) is arc


def test_select_uses_strength_when_image_given():
    img = np.zeros((200, 51))
    weak, strong = _arc(30), _arc(90)
    for c, amp in ((weak, 0.1), (strong, 1.0)):
        for s in c.segments:
            img[s.row_start:s.row_end + 1, s.col] = amp
    assert select_target_cluster([weak, strong], 51, image=img) is strong


def test_select_without_clusters():
    with pytest.raises(NoSurfaceClutterError):
        select_target_cluster([], 51)


# hyperbola fit

def test_unit_curve_plug_in():
    p = HyperbolaParams(1.0, 1.0, 0.0, "ellipse")
    assert p.evaluate([0.0])[0] == 1.0
    assert math.isnan(p.evaluate([2.0])[0])


@pytest.mark.parametrize("branch", ["ellipse", "hyperbola"])
def test_fit_recovers_reference_curve(branch):
    truth = HyperbolaParams(30.0, 20.0, 25.0, branch)
    n = np.arange(51.0)
    t = truth.evaluate(n)
    ok = np.isfinite(t) & (t > 0)
    fit = fit_hyperbola(n[ok], t[ok], (17.0, 34.0), branch)
    assert abs(fit.d - 25.0) <= 0.1
    assert abs(fit.a - 30.0) / 30.0 <= 1e-3 and abs(fit.b - 20.0) / 20.0 <= 1e-3
    assert fit.residual <= 1e-9


@settings(max_examples=100)
@given(st.floats(5.0, 80.0), st.floats(20.0, 400.0), st.floats(18.0, 33.0))
def test_fit_random_exact_curves(a, b, d):
    truth = HyperbolaParams(a, b, d)
    n = np.arange(51.0)
    fit = fit_hyperbola(n, truth.evaluate(n), (17.0, 34.0))
    assert abs(fit.d - d) <= 0.1
    assert abs(fit.a - a) / a <= 1e-3 and abs(fit.b - b) / b <= 1e-3


def test_fit_grid_only_is_within_half_step():
    truth = HyperbolaParams(20.0, 100.0, 24.33)
    n = np.arange(51.0)
    fit = fit_hyperbola(n, truth.evaluate(n), (17.0, 34.0), refine=False)
    assert abs(fit.d - 24.33) <= 0.05 + 1e-9


def test_fit_errors():
    with pytest.raises(ValueError):
        fit_hyperbola([1, 1, 2], [3, 3, 4], (0, 5))
    with pytest.raises(ValueError):
        fit_hyperbola([1, 2, 3], [3, 3, 4], (5, 5))
    # delay shrinking away from the apex cannot be a diffraction hyperbola
    n = np.arange(20.0)
    with pytest.raises(NonHyperbolicClusterError):
        fit_hyperbola(n, 50 - 0.1 * (n - 10) ** 2, (7, 13))


# gate curve and zero gate

def test_gate_curve_arithmetic():
    p = HyperbolaParams(1e9, 10.0, 5.0)  # effectively flat at 10 samples
    g0 = gate_curve(p, 0.0, 11, AXIS)
    assert np.allclose(g0.t_gate, p.evaluate(np.arange(11.0)))
    g4 = gate_curve(p, 4 * AXIS.dt, 11, AXIS)
    assert np.allclose(g4.t_gate, 14.0)
    with pytest.raises(ValueError):
        gate_curve(p, -1e-12, 11, AXIS)


def test_gate_holds_nearest_value_outside_ellipse():
    p = HyperbolaParams(5.0, 40.0, 10.0, "ellipse")
    g = gate_curve(p, 0.0, 21, AXIS)
    assert np.all(np.isfinite(g.t_gate))
    assert g.t_gate[0] == g.t_gate[5] == pytest.approx(0.0)
    assert g.t_gate[20] == g.t_gate[15]


def test_shifted_gates_step_by_w():
    p = HyperbolaParams(20.0, 50.0, 10.0)
    g = gate_curve(p, 0.4e-9, 21, TimeAxis(31.25e-12, 400))
    curves = [g.shifted(0.03e-9 * k) for k in range(10)]
    for prev, nxt in zip(curves, curves[1:]):
        assert np.allclose((nxt.t_gate - prev.t_gate) * g.dt, 0.03e-9)
        assert nxt.w == pytest.approx(prev.w + 0.03e-9)


def test_gate_json_round_trip():
    g = gate_curve(HyperbolaParams(20.0, 50.0, 10.0), 0.4e-9, 21, AXIS)
    back = GateCurve.from_dict(g.to_dict())
    assert np.array_equal(back.t_gate, g.t_gate) and back.params.to_dict() == g.params.to_dict()


def test_apply_zero_gate_examples():
    scan = BScan(TimeAxis(1.0, 10), np.arange(1.0, 31.0).reshape(10, 3))
    same = apply_zero_gate(scan, GateCurve(np.zeros(3), None, 0.0, 1.0))
    assert np.array_equal(same.data, scan.data)
    full = apply_zero_gate(scan, GateCurve(np.full(3, 50.0), None, 0.0, 1.0))
    assert not full.data.any()
    g = GateCurve(np.array([2.0, 2.5, 0.2]), None, 0.0, 1.0)
    once = apply_zero_gate(scan, g)
    assert np.array_equal(apply_zero_gate(once, g).data, once.data)
    assert not once.data[:2, 0].any() and once.data[2, 0] == scan.data[2, 0]
    assert not once.data[:3, 1].any() and once.data[3, 1] == scan.data[3, 1]
    assert not once.data[0, 2] and np.array_equal(once.data[1:, 2], scan.data[1:, 2])
    with pytest.raises(ValueError):
        apply_zero_gate(scan, GateCurve(np.zeros(2), None, 0.0, 1.0))


# end to end on simulated scenes

@pytest.fixture(scope="module")
def noiseless_scene():
    scene = TrunkScene(radius=0.16)
    spec = AcquisitionSpec()
    raw, ref, truth = simulate(scene, spec)
    return free_space_removal(raw, ref), truth


def test_target_cluster_covers_bark(noiseless_scene):
    scan, _ = noiseless_scene
    res = zero_gating(scan, 3.5e9)
    assert res.target.col_span >= 0.9 * scan.n_traces


def test_fitted_curve_tracks_bark(noiseless_scene):
    scan, truth = noiseless_scene
    res = zero_gating(scan, 3.5e9, GatingConfig(w=0.0))
    err = res.gate.t_gate - truth.bark_delay / scan.axis.dt
    assert np.sqrt(np.mean(err ** 2)) <= 2.0


def test_literal_ellipse_branch_is_available(noiseless_scene):
    scan, _ = noiseless_scene
    with pytest.raises(NonHyperbolicClusterError):
        zero_gating(scan, 3.5e9, GatingConfig(branch="ellipse"))


def test_mean_rule_runs(noiseless_scene):
    scan, _ = noiseless_scene
    res = zero_gating(scan, 3.5e9, GatingConfig(boundary_rule="mean"))
    assert res.gate.t_gate.shape == (51,)


def test_default_w_is_pulse_width():
    assert GatingConfig().w_for(3.5e9) == pytest.approx(1.5 / 3.5e9)
    assert GatingConfig().window_for(51) == (17.0, 34.0)
