import numpy as np
import pytest
from scipy.optimize import brentq

from mflab.errors import QuadratureError, ToleranceError, ValidationError
from mflab.operators import DensityMatrix, Operator, bell_ket, ket, pauli
from mflab.model import SiteModel, SystemModel
from mflab.reservoir import ChannelCorrelated, ProductState, bell_channel_kraus
from mflab.exact import FiniteMRun, propagate_exact
from mflab.analysis import (
    FieldOverlapSpec,
    SpectralProblem,
    bound_state_count,
    concurrence,
    field_overlap_decay,
    m_sweep,
    negativity,
    partial_transpose,
    stark_halfline_spectrum,
    summary_report,
    trace_distance,
    write_summary,
)

SX, SZ = pauli("x"), pauli("z")


def dm(mat, dims):
    return DensityMatrix(np.asarray(mat, dtype=complex), dims)


def random_density(rng, dims):
    d = int(np.prod(dims))
    a = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    rho = a @ a.conj().T
    return DensityMatrix(rho / np.trace(rho).real, dims)


def random_unitary(rng, d):
    a = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    q, r = np.linalg.qr(a)
    return q * (np.diag(r) / np.abs(np.diag(r)))


class TestTraceDistance:
    def test_identical_states(self):
        rho = dm(np.diag([0.25, 0.75]), (2,))
        assert trace_distance(rho, rho) == 0.0

    def test_orthogonal_pure_states(self):
        a = dm(np.diag([1.0, 0.0]), (2,))
        b = dm(np.diag([0.0, 1.0]), (2,))
        assert abs(trace_distance(a, b) - 1.0) < 1e-14

    def test_zero_vs_plus(self):
        a = dm(np.diag([1.0, 0.0]), (2,))
        b = DensityMatrix.pure(ket("+"), (2,))
        assert abs(trace_distance(a, b) - np.sqrt(2) / 2) < 1e-12

    def test_triangle_inequality_on_random_triples(self):
        rng = np.random.default_rng(42)
        for _ in range(25):
            a, b, c = (random_density(rng, (2, 2)) for _ in range(3))
            assert trace_distance(a, c) <= (trace_distance(a, b)
                                            + trace_distance(b, c) + 1e-10)

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError, match="shape"):
            trace_distance(np.eye(2) / 2, np.eye(4) / 4)


class TestNegativity:
    def test_product_state_is_zero(self):
        rho = dm(np.kron(np.diag([0.3, 0.7]), np.diag([0.9, 0.1])), (2, 2))
        assert negativity(rho, 0) < 1e-14

    def test_bell_state_is_half(self):
        rho = DensityMatrix.pure(bell_ket(), (2, 2))
        assert abs(negativity(rho, 0) - 0.5) < 1e-14
        assert abs(negativity(rho, 1) - 0.5) < 1e-14

    def test_werner_state_closed_form(self):
        # (3p-1)/4 above the separability point, 0 below
        proj = np.outer(bell_ket(), bell_ket().conj())
        for p, want in ((0.8, 0.35), (0.5, 0.125), (0.3, 0.0)):
            rho = dm(p * proj + (1 - p) * np.eye(4) / 4, (2, 2))
            assert abs(negativity(rho, 0) - want) < 1e-12

    def test_local_unitary_invariance(self):
        rng = np.random.default_rng(7)
        rho = random_density(rng, (2, 3))
        base = negativity(rho, 0)
        for _ in range(5):
            u = np.kron(random_unitary(rng, 2), random_unitary(rng, 3))
            rotated = DensityMatrix(u @ rho.data @ u.conj().T, (2, 3))
            assert abs(negativity(rotated, 0) - base) < 1e-10

    def test_partial_transpose_is_involutive(self):
        rng = np.random.default_rng(3)
        rho = random_density(rng, (2, 2))
        pt = partial_transpose(rho, 1)
        back = partial_transpose(DensityMatrix(pt, (2, 2), validate=False), 1)
        assert np.allclose(back, rho.data)

    def test_invalid_splits(self):
        rho = dm(np.eye(4) / 4, (2, 2))
        with pytest.raises(ValidationError, match="empty"):
            negativity(rho, ())
        with pytest.raises(ValidationError, match="full transpose"):
            negativity(rho, (0, 1))
        with pytest.raises(ValidationError, match="outside"):
            negativity(rho, 2)
        with pytest.raises(ValidationError, match="repeats"):
            negativity(rho, (0, 0))
        single = dm(np.eye(2) / 2, (2,))
        with pytest.raises(ValidationError, match="two declared factors"):
            negativity(single, 0)


class TestConcurrence:
    def test_bell_state(self):
        rho = DensityMatrix.pure(bell_ket(), (2, 2))
        assert abs(concurrence(rho) - 1.0) < 1e-12

    def test_product_state(self):
        rho = dm(np.kron(np.diag([1.0, 0.0]), np.diag([0.5, 0.5])), (2, 2))
        assert concurrence(rho) < 1e-12

    def test_werner_closed_form(self):
        proj = np.outer(bell_ket(), bell_ket().conj())
        for p, want in ((0.8, 0.7), (0.5, 0.25), (0.3, 0.0)):
            rho = dm(p * proj + (1 - p) * np.eye(4) / 4, (2, 2))
            assert abs(concurrence(rho) - want) < 1e-12

    def test_pure_states_relate_to_negativity(self):
        # for two-qubit pure states the negativity is half the concurrence;
        # the square root in the closed form turns eigenvalue noise eps
        # into sqrt(eps), so the match is only ~1e-8
        rng = np.random.default_rng(11)
        for _ in range(10):
            psi = rng.normal(size=4) + 1j * rng.normal(size=4)
            rho = DensityMatrix.pure(psi, (2, 2))
            assert abs(concurrence(rho) - 2 * negativity(rho, 0)) < 1e-7

    def test_dimension_guard(self):
        with pytest.raises(ValidationError, match="two-qubit"):
            concurrence(dm(np.eye(8) / 8, (2, 2, 2)))


def sweep_fixture():
    sys = SystemModel.single(SZ, [(SX, 0)])
    site = SiteModel(h=SZ, interactions=(SX,))
    res = ProductState(DensityMatrix.pure(ket("+"), (2,)))
    rho0 = dm(np.diag([1.0, 0.0]), (2,))
    return sys, site, res, rho0


class TestMSweep:
    def test_rows_and_ratios(self):
        sys, site, res, rho0 = sweep_fixture()
        grid = np.linspace(0.0, 2.0, 41)
        rows = m_sweep(sys, site, res, rho0, grid, (1, 2, 4))
        assert [r.m_count for r in rows] == [1, 2, 4]
        gaps = [r.gap for r in rows]
        assert all(a > b for a, b in zip(gaps, gaps[1:]))
        assert np.isnan(rows[0].ratio)
        assert rows[1].ratio == pytest.approx(gaps[1] / gaps[0])
        assert all(r.ratio < 1 for r in rows[1:])

    def test_threaded_sweep_matches_serial(self):
        sys, site, res, rho0 = sweep_fixture()
        grid = np.linspace(0.0, 1.0, 11)
        serial = m_sweep(sys, site, res, rho0, grid, (1, 3), threads=1)
        threaded = m_sweep(sys, site, res, rho0, grid, (1, 3), threads=2)
        for a, b in zip(serial, threaded):
            assert a.gap == pytest.approx(b.gap, abs=1e-15)

    def test_m_list_validation(self):
        sys, site, res, rho0 = sweep_fixture()
        grid = np.linspace(0.0, 1.0, 5)
        with pytest.raises(ValidationError, match="strictly increasing"):
            m_sweep(sys, site, res, rho0, grid, (3, 2))
        with pytest.raises(ValidationError, match="positive"):
            m_sweep(sys, site, res, rho0, grid, (0, 2))
        with pytest.raises(ValidationError, match="empty"):
            m_sweep(sys, site, res, rho0, grid, ())

    def test_correlated_and_product_reservoirs_share_the_limit(self):
        # the channel-correlated ensemble differs from the product one at
        # finite size but drifts to the same limit trajectory
        sys, site, _, rho0 = sweep_fixture()
        zero = DensityMatrix.pure(ket("0"), (2,))
        prod = ProductState(zero)
        chan = ChannelCorrelated(zero, corr_length=2,
                                 kraus=bell_channel_kraus())
        grid = np.linspace(0.0, 2.0, 21)
        spreads = []
        for m in (3, 6):
            a = propagate_exact(FiniteMRun(sys, site, m, prod, rho0, grid))
            b = propagate_exact(FiniteMRun(sys, site, m, chan, rho0, grid))
            spreads.append(max(trace_distance(x, y)
                               for x, y in zip(a.states, b.states)))
        assert spreads[0] > 1e-3
        assert spreads[1] < spreads[0]


class TestBoundStates:
    def test_zero_potential_has_none(self):
        prob = SpectralProblem(x_max=10.0, potential=lambda x: 0.0 * x,
                               n_grid=128)
        count, ev = bound_state_count(prob)
        assert count == 0 and ev.size == 0

    def test_halfline_square_well_counts_match_transcendental_oracle(self):
        # matching condition for a unit-width well on the half line:
        # k*cot(k) = -sqrt(V0 - k^2), one solution per branch
        def oracle_count(v0):
            s = np.sqrt(v0)
            count, j = 0, 1
            while (2 * j - 1) * np.pi / 2 < s:
                lo = (2 * j - 1) * np.pi / 2 + 1e-9
                hi = min(j * np.pi, s) - 1e-9
                f = lambda k: k / np.tan(k) + np.sqrt(v0 - k * k)
                if hi > lo and f(lo) * f(hi) < 0:
                    brentq(f, lo, hi)
                    count += 1
                j += 1
            return count

        for v0, want in ((1.5, 0), (5.0, 1), (30.0, 2)):
            assert oracle_count(v0) == want
            prob = SpectralProblem(
                x_max=12.0,
                potential=lambda x, v=v0: np.where(x < 1.0, -v, 0.0),
                n_grid=600, half_line=True)
            count, ev = bound_state_count(prob)
            assert count == want
            assert np.all(ev < 0)

    def test_well_energy_converges_to_oracle_root(self):
        # the sampled step potential limits the scheme to first order, so
        # check shrinking error rather than a tight absolute match
        v0 = 5.0
        f = lambda k: k / np.tan(k) + np.sqrt(v0 - k * k)
        k = brentq(f, np.pi / 2 + 1e-9, np.sqrt(v0) - 1e-9)
        want = k * k - v0
        errs = []
        for n in (599, 1199, 2399):
            prob = SpectralProblem(
                x_max=12.0, potential=lambda x: np.where(x < 1.0, -v0, 0.0),
                n_grid=n, half_line=True)
            _, ev = bound_state_count(prob)
            errs.append(abs(ev[0] - want))
        assert errs[0] < 0.05
        assert errs[2] < errs[1] < errs[0]
        assert 1.7 < errs[0] / errs[1] < 2.3

    def test_deepening_never_loses_states(self):
        counts = []
        for v0 in (1.0, 4.0, 9.0, 16.0, 36.0):
            prob = SpectralProblem(
                x_max=12.0,
                potential=lambda x, v=v0: np.where(x < 1.0, -v, 0.0),
                n_grid=600, half_line=True)
            counts.append(bound_state_count(prob)[0])
        assert counts == sorted(counts)

    def test_unresolved_feature_raises(self):
        # a well thinner than the coarse spacing, centered on a node that
        # only the refined grid has: invisible at n, binding at 2n+1
        x_max, n = 10.0, 64
        h = 2 * x_max / (n + 1)
        center = h * (n / 2 + 0.5) - x_max

        def needle(x):
            return np.where(np.abs(x - center) < 0.2 * h, -5e3, 0.0)

        prob = SpectralProblem(x_max=x_max, potential=needle, n_grid=n)
        with pytest.raises(ToleranceError, match="grid doubling"):
            bound_state_count(prob)

    def test_problem_validation(self):
        with pytest.raises(ValidationError, match="x_max"):
            SpectralProblem(x_max=0.0, potential=lambda x: x)
        with pytest.raises(ValidationError, match="64"):
            SpectralProblem(x_max=1.0, potential=lambda x: x, n_grid=32)
        with pytest.raises(ValidationError, match="callable"):
            SpectralProblem(x_max=1.0, potential=3.0)
        bad = SpectralProblem(x_max=1.0, potential=lambda x: x * 1j)
        with pytest.raises(ValidationError, match="real"):
            bound_state_count(bad)


class TestStarkHalfline:
    def test_airy_zero_targets(self):
        got = stark_halfline_spectrum(1.0, 3)
        want = np.array([2.33811, 4.08795, 5.52056])
        assert np.max(np.abs(got - want) / want) < 0.01

    def test_two_thirds_power_scaling(self):
        base = stark_halfline_spectrum(1.0, 3)
        for slope in (0.5, 2.0):
            scaled = stark_halfline_spectrum(slope, 3)
            dev = np.abs(scaled / base - slope ** (2 / 3)) / slope ** (2 / 3)
            assert np.max(dev) < 0.005

    def test_levels_increasing_and_simple(self):
        got = stark_halfline_spectrum(1.0, 6)
        diffs = np.diff(got)
        assert np.all(diffs > 0.1)

    def test_small_slope_limit(self):
        lows = [stark_halfline_spectrum(s, 1)[0]
                for s in (1.0, 0.1, 0.01)]
        assert all(a > b for a, b in zip(lows, lows[1:]))
        assert lows[-1] < 0.2

    def test_validation_and_nonconvergence(self):
        with pytest.raises(ValidationError, match="slope"):
            stark_halfline_spectrum(0.0, 3)
        with pytest.raises(ValidationError, match="level"):
            stark_halfline_spectrum(1.0, 0)
        with pytest.raises(ToleranceError, match="Richardson"):
            stark_halfline_spectrum(1.0, 3, n_grid=64, rel_tol=1e-14)


def gaussian_spec(scale=1.0):
    return FieldOverlapSpec(
        f_prime=lambda r: scale * np.exp(-r * r),
        h_prime=lambda r: np.exp(-r * r),
        r_max=8.0)


def faddeeva_oracle(t):
    # I(t) = int_0^inf r^2 e^{-2 r^2} e^{irt} dr = -J''(t) with
    # J(t) = (1/2) sqrt(pi/2) w(t / (2 sqrt(2)))
    from scipy.special import wofz
    beta = 1.0 / (2.0 * np.sqrt(2.0))
    c = 0.5 * np.sqrt(np.pi / 2.0)
    z = beta * t
    w = wofz(z)
    wpp = (4.0 * z * z - 2.0) * w - 4.0j * z / np.sqrt(np.pi)
    return -(c * beta * beta) * wpp


class TestFieldOverlap:
    def test_static_value_is_plain_integral(self):
        got = field_overlap_decay(gaussian_spec(), 0.0)[0]
        want = (np.sqrt(2.0 * np.pi) / 16.0) ** 2
        assert abs(got - want) < 1e-12

    def test_gaussian_matches_faddeeva_oracle(self):
        times = np.array([0.0, 0.5, 1.0, 2.0, 5.0, 10.0, 40.0])
        got = field_overlap_decay(gaussian_spec(), times)
        want = np.abs(faddeeva_oracle(times)) ** 2
        assert np.max(np.abs(got - want)) < 1e-6

    def test_profile_scaling_is_quadratic(self):
        times = np.array([0.0, 1.5, 4.0])
        base = field_overlap_decay(gaussian_spec(), times)
        scaled = field_overlap_decay(gaussian_spec(scale=2.5), times)
        assert np.allclose(scaled, 2.5 ** 2 * base, rtol=1e-9)

    def test_output_nonnegative(self):
        got = field_overlap_decay(gaussian_spec(), np.linspace(0, 20, 9))
        assert np.all(got >= 0)

    def test_smooth_compact_profiles_decay(self):
        def bump(r):
            u = (r - 3.0) / 2.0
            out = np.zeros_like(r)
            inside = np.abs(u) < 1.0
            out[inside] = np.exp(-1.0 / (1.0 - u[inside] ** 2))
            return out

        spec = FieldOverlapSpec(f_prime=bump, h_prime=bump, r_max=6.0)
        static = field_overlap_decay(spec, 0.0)[0]
        late = field_overlap_decay(spec, np.array([50.0, 75.0, 100.0]))
        assert np.max(late) < 1e-3 * static

    def test_quadrature_cap_raises(self):
        with pytest.raises(QuadratureError, match="panels"):
            field_overlap_decay(gaussian_spec(), 3.0, tol=1e-16,
                                max_panels=256)

    def test_spec_validation(self):
        with pytest.raises(ValidationError, match="callable"):
            FieldOverlapSpec(f_prime=1.0, h_prime=lambda r: r, r_max=1.0)
        with pytest.raises(ValidationError, match="r_max"):
            FieldOverlapSpec(f_prime=lambda r: r, h_prime=lambda r: r,
                             r_max=-1.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            with pytest.raises(ValidationError, match="finite"):
                FieldOverlapSpec(f_prime=lambda r: r / (r - r),
                                 h_prime=lambda r: r, r_max=1.0)


class TestSummary:
    def test_report_counts(self):
        doc = summary_report([("a", True, "ok"), ("b", False, "bad")],
                             extra={"seed": 5})
        assert doc["n_passed"] == 1 and doc["n_failed"] == 1
        assert doc["seed"] == 5

    def test_write_round_trip(self, tmp_path):
        import json
        path = tmp_path / "summary.json"
        write_summary(path, [("a", True, "ok")])
        loaded = json.loads(path.read_text())
        assert loaded["criteria"][0]["name"] == "a"
        assert loaded["n_failed"] == 0
