import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate
from scipy.stats import norm

from protoldpc.channel import ebn0_to_sigma
from protoldpc.decoders import DecoderParams
from protoldpc.texit import (LlrHistogram, build_exit, collect_llrs, curve_intersection,
                             estimate_ami, exit_from_ami)


def j_function(mu):
    """AMI of a consistent Gaussian LLR N(mu, 2 mu) by quadrature."""
    s = np.sqrt(2 * mu)
    f = lambda y: norm.pdf(y, mu, s) * np.logaddexp(0.0, -y) / np.log(2)
    val, _ = integrate.quad(f, mu - 20 * s, mu + 20 * s, limit=200)
    return 1.0 - val


def _gaussian_llrs(n, mu, seed):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 2, n)
    y = (1 - 2.0 * x) * mu + rng.standard_normal(n) * np.sqrt(2 * mu)
    return y, x


def test_j_function_oracle_values():
    # sanity of the oracle itself: J(0) -> 0 and J grows toward 1
    assert j_function(1e-8) == pytest.approx(0.0, abs=1e-6)
    assert 0.4 < j_function(2.0) < 0.6
    assert j_function(40.0) > 0.999


@pytest.mark.parametrize("mu", [0.5, 2.0, 8.0])
def test_gaussian_ami_matches_j_function(mu):
    y, x = _gaussian_llrs(1_000_000, mu, seed=int(mu * 10))
    assert estimate_ami(y, x) == pytest.approx(j_function(mu), abs=0.01)


def test_degenerate_ami():
    x = np.array([0, 1] * 50)
    assert estimate_ami(np.zeros(100), x) == 0.0
    sep = np.where(x == 0, 60.0, -60.0)
    assert estimate_ami(sep, x) == 1.0
    est = estimate_ami(np.ones(10), np.zeros(10), detail=True)
    assert est.value == 0.0 and not est.equiprobable


def test_ami_errors():
    with pytest.raises(ValueError):
        estimate_ami(np.ones(3), np.zeros(4))
    with pytest.raises(ValueError):
        estimate_ami(np.ones(3), np.zeros(3), bins=1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.05, 30.0))
def test_ami_bounds_and_label_symmetry(seed, mu):
    y, x = _gaussian_llrs(2000, mu, seed)
    a = estimate_ami(y, x)
    assert 0.0 <= a <= 1.0
    assert estimate_ami(-y, 1 - x) == pytest.approx(a, abs=1e-12)


def test_bin_count_stability():
    y, x = _gaussian_llrs(200_000, 3.0, seed=1)
    assert abs(estimate_ami(y, x, bins=100) - estimate_ami(y, x, bins=200)) < 0.005


def test_streaming_histogram_matches_direct():
    y, x = _gaussian_llrs(100_000, 2.0, seed=4)
    h = LlrHistogram()
    for part in np.array_split(np.arange(y.size), 7):
        h.add(y[part], x[part])
    assert h.total == y.size
    assert h.ami().value == pytest.approx(estimate_ami(y, x), abs=0.003)
    with pytest.raises(ValueError):
        LlrHistogram().ami()


def test_single_frame_counts(code3):
    s = collect_llrs(code3, DecoderParams.classical("sp"), 2.0, K=1, I=1,
                     rng=np.random.default_rng(0))
    assert s.iterations == 1
    assert s.vn[0].total == code3.num_edges and s.cn[0].total == code3.num_edges


def test_collection_high_snr_first_iteration(code3):
    snr = 40.0
    mag = 2.0 / ebn0_to_sigma(snr, code3.rate) ** 2
    s = collect_llrs(code3, DecoderParams.classical("ms"), snr, K=3, I=2,
                     rng=np.random.default_rng(1), keep_samples=True)
    first = np.abs(s.raw_vn[0])
    tx = np.zeros(code3.n, dtype=bool)
    tx[code3.tx_positions] = True
    on_tx = tx[code3.edge_vn]
    # relative noise is sigma ~ 0.016 here, so 0.85 leaves a 9-sigma margin
    assert np.all(first[:, on_tx] >= 0.85 * mag)
    assert np.all(first[:, ~on_tx] == 0.0)
    assert s.raw_labels.shape == (3, code3.num_edges)


def test_collection_is_deterministic(code3):
    p = DecoderParams.classical("nms")
    a = collect_llrs(code3, p, 2.0, 50, 4, np.random.default_rng(7), batch=20)
    b = collect_llrs(code3, p, 2.0, 50, 4, np.random.default_rng(7), batch=20)
    for ha, hb in zip(a.vn + a.cn, b.vn + b.cn):
        assert np.array_equal(ha.counts, hb.counts) and ha.max_abs == hb.max_abs


def test_decoder_bin_stability(code3):
    s = collect_llrs(code3, DecoderParams.classical("sp"), 3.0, 1000, 6, np.random.default_rng(2))
    for h in s.vn + s.cn:
        assert abs(h.ami(100).value - h.ami(200).value) < 0.005


def test_exit_geometry():
    vn = [0.3, 0.5, 0.6, 0.6, 0.6]
    cn = [0.2, 0.4, 0.5, 0.5, 0.5]
    rec = exit_from_ami(vn, cn)
    assert rec.trajectory.shape == (10, 2)
    assert np.array_equal(rec.curve_v[0], [0.0, 0.3])
    assert np.array_equal(rec.curve_v[2], [0.4, 0.6])
    assert np.array_equal(rec.curve_c_inv[1], [0.4, 0.5])
    assert np.array_equal(rec.trajectory[1], rec.curve_c_inv[0])
    # a stalled decoder's fixed point is the stall point
    assert rec.fixed_point == pytest.approx((0.5, 0.6))
    assert rec.summary() == "fixed_point,0.5000,0.6000"


def test_exit_no_crossing():
    rec = exit_from_ami([0.2, 0.4, 0.6], [0.1, 0.3, 0.5])
    assert rec.fixed_point is None and rec.summary() == "fixed_point,none"
    with pytest.raises(ValueError):
        exit_from_ami([0.5], [0.5])


def test_curve_intersection_earliest():
    a = np.array([[0.0, 0.0], [1.0, 1.0]])
    b = np.array([[0.0, 0.5], [0.25, 0.0], [0.75, 1.0], [1.0, 0.5]])
    hit = curve_intersection(a, b)
    assert hit == pytest.approx((1 / 6, 1 / 6))


def test_exit_csv(tmp_path, code3):
    s = collect_llrs(code3, DecoderParams.classical("sp"), 4.0, 40, 5, np.random.default_rng(3))
    rec = build_exit(s)
    paths = rec.write_csv(tmp_path)
    lines = paths["trajectory"].read_text().splitlines()
    assert lines[0] == "x,y" and len(lines) == 11
    assert len(paths["ami"].read_text().splitlines()) == 6
    assert np.all((rec.i_e_vn >= 0) & (rec.i_e_vn <= 1))
    with pytest.raises(ValueError):
        build_exit(collect_llrs(code3, DecoderParams.classical("sp"), 4.0, 2, 1,
                                np.random.default_rng(0)))


@pytest.mark.slow
def test_sp_trajectory_monotone(code16):
    s = collect_llrs(code16, DecoderParams.classical("sp"), 1.5, 10_000, 25,
                     np.random.default_rng(11), batch=500)
    rec = build_exit(s)
    assert np.all(np.diff(rec.i_e_vn) >= -0.005)
