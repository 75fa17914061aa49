import numpy as np
import pytest

from phi4flow.noise import (
    NoiseStream,
    OuState,
    c_t_infty,
    make_wick,
    ou_step,
    restart,
    sup_norm_profile,
    white_fields,
    wick_constant,
    wick_moments,
)
from phi4flow.spectral import TorusGrid


def loop_sum(N, L, m, fn):
    """Independent double-loop summation over the active band."""
    total = 0.0
    for k1 in range(-N // 2 + 1, N // 2):
        for k2 in range(-N // 2 + 1, N // 2):
            lam = m + (2 * np.pi / L) ** 2 * (k1 * k1 + k2 * k2)
            total += fn(lam) / (lam * L * L)
    return total


def test_stream_determinism_and_independence():
    a = NoiseStream(5, 3)
    b = NoiseStream(5, 3)
    x = a.next_normals((64,))
    assert np.array_equal(x, b.next_normals((64,)))
    assert a.counter == 1
    # pure function of the counter
    assert np.array_equal(NoiseStream(5, 3).normals_at(0, (64,)), x)
    y = NoiseStream(5, 4).next_normals((20000,))
    z = NoiseStream(5, 3).next_normals((20000,))
    assert abs(np.corrcoef(y, z)[0, 1]) < 4 / np.sqrt(20000)
    # aux lane never touches the counter and differs from the noise lane
    s = NoiseStream(1, 0)
    aux = s.aux_normals(0, (32,))
    assert s.counter == 0 and not np.array_equal(aux, s.normals_at(0, (32,)))
    assert NoiseStream.from_spec(a.spec()).counter == 1
    with pytest.raises(ValueError):
        NoiseStream(-1, 0)


def test_white_fields_are_standard_normal():
    g = TorusGrid(32)
    w = white_fields(g, [NoiseStream(0, r) for r in range(50)])
    assert w.shape == (50, 32, 32)
    assert abs(w.mean()) < 4 / np.sqrt(w.size)
    assert abs(w.var() - 1) < 4 * np.sqrt(2 / w.size)


def test_wick_constant_oracle_and_limits():
    g = TorusGrid(16, 1.0)
    want = loop_sum(16, 1.0, 1.0, lambda lam: 1 - np.exp(-2 * lam * 1.0))
    assert abs(wick_constant(g, 1.0, 1.0) - want) <= 1e-12 * want
    assert wick_constant(g, 1.0, 0.0) == 0.0
    stat = loop_sum(16, 1.0, 1.0, lambda lam: 1.0)
    assert abs(wick_constant(g, 1.0, 1e3) - stat) <= 1e-12 * stat
    es = np.linspace(0, 2, 21)
    vals = wick_constant(g, 1.0, es)
    assert np.all(np.diff(vals) > 0)
    assert wick_constant(g, 2.0, 0.5) < wick_constant(g, 1.0, 0.5)
    with pytest.raises(ValueError):
        wick_constant(g, 1.0, -0.1)
    # large mass: stationary variance vanishes
    assert wick_constant(g, 1e8, 10.0) < 1e-5


def test_c_t_infty_oracle_and_monotonicity():
    g = TorusGrid(64, 1.0)
    want = loop_sum(64, 1.0, 1.0, lambda lam: np.exp(-2 * lam * 0.01))
    assert abs(c_t_infty(g, 1.0, 0.01) - want) <= 1e-12 * want
    ts = np.geomspace(1e-3, 1, 30)
    c = c_t_infty(g, 1.0, ts)
    assert np.all(np.diff(c) < 0)
    assert np.all(c_t_infty(g, 2.0, ts) < c)
    assert c_t_infty(g, 1.0, 50.0) < 1e-40
    # stationary variance = variance at age t + tail at t
    stat = wick_constant(g, 1.0, 1e4)
    assert abs(wick_constant(g, 1.0, 0.3) + c_t_infty(g, 1.0, 0.3) - stat) < 1e-12 * stat
    with pytest.raises(ValueError):
        c_t_infty(g, 1.0, 0.0)


def test_ou_step_validation_and_zero_birth():
    g = TorusGrid(8)
    st = OuState.zero(g, 1.0)
    assert np.all(st.coeffs == 0)
    with pytest.raises(ValueError):
        ou_step(st, 0.0, NoiseStream(0, 0))
    with pytest.raises(ValueError):
        OuState.zero(g, -1.0)


def test_ou_single_mode_autocovariance():
    # scalar OU closed form for the retained mode k = (1, 0) at N = 8
    g = TorusGrid(8, 1.0)
    m, dt, R, lag = 1.0, 0.005, 4000, 4
    lam = m + (2 * np.pi) ** 2
    streams = [NoiseStream(9, r) for r in range(R)]
    st = OuState.zero(g, m, 0.0, (R,))
    for _ in range(400):  # relax to stationarity (lam * 2 s >> 1)
        st = ou_step(st, dt, streams)
    a = st.coeffs[:, 1, 0].real.copy()
    for _ in range(lag):
        st = ou_step(st, dt, streams)
    b = st.coeffs[:, 1, 0].real
    var = 1 / (2 * lam)  # real part of a Hermitian-paired mode carries half the variance
    cov = np.mean(a * b)
    se = np.std(a * b) / np.sqrt(R)
    assert abs(np.mean(a * a) - var) < 4 * np.std(a * a) / np.sqrt(R)
    assert abs(cov - np.exp(-lam * lag * dt) * var) < 4 * se


def test_n_steps_equal_one_step_in_law():
    g = TorusGrid(16)
    R, m = 3000, 1.0
    s1 = [NoiseStream(1, r) for r in range(R)]
    s2 = [NoiseStream(2, r) for r in range(R)]
    a = OuState.zero(g, m, 0.0, (R,))
    for _ in range(8):
        a = ou_step(a, 0.05, s1)
    b = ou_step(OuState.zero(g, m, 0.0, (R,)), 0.4, s2)
    va = np.mean(g.inv(a.coeffs) ** 2, axis=(-2, -1))
    vb = np.mean(g.inv(b.coeffs) ** 2, axis=(-2, -1))
    se = np.hypot(va.std(), vb.std()) / np.sqrt(R)
    assert abs(va.mean() - vb.mean()) < 3 * se


def test_substeps_reproduce_fine_path_exactly():
    g = TorusGrid(16)
    a = OuState.zero(g, 1.0)
    sa = NoiseStream(3, 0)
    for _ in range(8):
        a = ou_step(a, 0.01, sa)
    b = OuState.zero(g, 1.0)
    sb = NoiseStream(3, 0)
    for _ in range(2):
        b = ou_step(b, 0.04, sb, substeps=4)
    np.testing.assert_allclose(a.coeffs, b.coeffs, rtol=0, atol=1e-14)
    assert sa.counter == sb.counter == 8


def test_make_wick_definitions():
    g = TorusGrid(16)
    zero = OuState(g, 1.0, 0.7, np.zeros((16, 9), complex), 0.2)
    w = make_wick(zero)
    c = wick_constant(g, 1.0, 0.5)
    assert np.allclose(w.W2, -c) and np.all(w.W3 == 0)
    st = ou_step(OuState.zero(g, 1.0), 0.3, NoiseStream(0, 0))
    w1, w2 = make_wick(st), make_wick(st)
    assert np.array_equal(w1.W2, w2.W2) and np.array_equal(w1.W3, w2.W3)
    np.testing.assert_allclose(w1.W2, w1.W1**2 - w1.c_now, atol=1e-13)
    np.testing.assert_allclose(w1.W3, w1.W1**3 - 3 * w1.c_now * w1.W1, atol=1e-12)


def test_wick_moments_isserlis():
    g = TorusGrid(32, 1.0)
    checks = wick_moments(g, 1.0, 0.5, 0.5, 4000, base_seed=4)
    for mc in checks:
        assert mc.passes(3.0), (mc.name, mc.estimate, mc.target, mc.se)
    # a wrong constant is caught
    bad = {mc.name: mc for mc in wick_moments(g, 1.0, 0.5, 0.5, 4000, base_seed=4, scale=1.1)}
    assert not bad["mean_W2"].passes(3.0)


def test_restart_zero_and_law():
    g = TorusGrid(16)
    R = 3000
    streams = [NoiseStream(6, r) for r in range(R)]
    st = OuState.zero(g, 1.0, 0.0, (R,))
    for _ in range(5):
        st = ou_step(st, 0.1, streams)
    pre = g.inv(st.coeffs)[:, 0, 0].copy()
    st = restart(streams, 0.5, state=st)
    w = make_wick(st)
    assert np.all(w.W2 == 0) and np.all(w.W3 == 0)
    st = ou_step(st, 0.3, streams)
    post = g.inv(st.coeffs)
    c = wick_constant(g, 1.0, 0.3)
    v = np.mean(post**2, axis=(-2, -1))
    assert abs(v.mean() - c) < 3 * v.std() / np.sqrt(R)
    r = np.corrcoef(pre, post[:, 0, 0])[0, 1]
    assert abs(r) < 4 / np.sqrt(R)
    mask = np.zeros(R, dtype=bool)
    mask[:10] = True
    part = restart(streams, 0.8, state=st, mask=mask)
    assert np.all(part.coeffs[:10] == 0) and np.array_equal(part.coeffs[10:], st.coeffs[10:])
    assert np.all(part.birth[:10] == 0.8) and np.all(part.birth[10:] == 0.5)
    with pytest.raises(ValueError):
        restart(streams, -1.0, grid=g)


def test_sup_norm_profile():
    g = TorusGrid(16)
    a = sup_norm_profile(3, 0.2, 0.02, 0.3, replicas=1, grid=g)
    b = sup_norm_profile(3, 0.2, 0.02, 0.3, replicas=1, grid=g)
    assert a.sups[0] == b.sups[0]
    small = sup_norm_profile(0, 0.01, 0.01, 0.3, replicas=200, grid=g)
    big = sup_norm_profile(0, 1.0, 0.01, 0.3, replicas=200, grid=g)
    assert small.quantiles[0.5] < big.quantiles[0.5]
    assert all(np.isfinite(v) for v in big.moments.values())
    # at most polynomial growth in T of the second moment
    m2 = [sup_norm_profile(0, T, 0.05, 0.3, replicas=100, grid=g).moments[2] for T in (1, 2, 4)]
    slope = np.polyfit(np.log([1, 2, 4]), np.log(m2), 1)[0]
    assert slope < 2.0
    with pytest.raises(ValueError):
        sup_norm_profile(0, 1.0, 0.1, 0.0, replicas=2, grid=g)
