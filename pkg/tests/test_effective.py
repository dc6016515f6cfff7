import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp
from scipy.linalg import expm

import mflab.effective as eff
from mflab.effective import (
    EffectivePotential,
    QuasiPeriodicSignal,
    SampledSignal,
    effective_hamiltonian,
    effective_potential,
    effective_trajectory,
    evolve_state,
    propagate_definetti,
    propagate_effective,
    propagate_subsystems,
)
from mflab.errors import ToleranceError, ValidationError
from mflab.model import Coupling, SiteModel, SystemModel, oscillator_site
from mflab.operators import DensityMatrix, Operator, partial_trace, pauli
from mflab.reservoir import DeFinettiMixture, MacroscopicParts, ProductState

SX, SY, SZ = pauli("x"), pauli("y"), pauli("z")
PLUS = DensityMatrix(np.full((2, 2), 0.5, dtype=complex), (2,))
GROUND = DensityMatrix(np.diag([1.0, 0.0]).astype(complex), (2,))


def qubit_site(h_mat, v_mat):
    return SiteModel(h=Operator(np.asarray(h_mat, complex), (2,), hermitian=True),
                     interactions=(Operator(np.asarray(v_mat, complex), (2,), hermitian=True),))


def qubit_sys(h_mat, g_mat):
    return SystemModel.single(Operator(np.asarray(h_mat, complex), (2,), hermitian=True),
                              [Coupling(g=Operator(np.asarray(g_mat, complex), (2,), hermitian=True))])


def direct_signal_oracle(rho, h, v, t):
    u = expm(1j * t * h)
    return np.trace(rho @ u @ v @ u.conj().T).real


# potentials

def test_plus_state_potential_is_cosine():
    pot = effective_potential(PLUS, qubit_site(SZ.data, SX.data))
    ts = np.linspace(0, 6, 61)
    assert np.allclose(pot.signals[0].evaluate(ts), np.cos(2 * ts), atol=1e-12)


def test_quasiperiodic_matches_direct_sampling():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
    rho = a @ a.conj().T
    rho /= np.trace(rho).real
    h = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
    h = (h + h.conj().T) / 2
    v = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
    v = (v + v.conj().T) / 2
    site = SiteModel(h=Operator(h, (3,), hermitian=True),
                     interactions=(Operator(v, (3,), hermitian=True),))
    pot = effective_potential(DensityMatrix(rho, (3,)), site)
    for t in rng.uniform(0, 10, size=40):
        assert abs(pot.signals[0].evaluate(t) - direct_signal_oracle(rho, h, v, t)) < 1e-10


def test_gauge_invariant_oscillator_potential_vanishes():
    site = oscillator_site(n_levels=6)
    occ = np.exp(-np.arange(6.0))
    rho = DensityMatrix(np.diag(occ / occ.sum()).astype(complex), (6,))
    pot = effective_potential(rho, site)
    assert pot.signals[0].is_zero(atol=1e-12)


def test_single_part_macroscopic_equals_product():
    site = qubit_site(SZ.data, SX.data)
    a = effective_potential(MacroscopicParts(((1.0, PLUS),)), site)
    b = effective_potential(ProductState(PLUS), site)
    ts = np.linspace(0, 5, 40)
    assert np.allclose(a.signals[0].evaluate(ts), b.signals[0].evaluate(ts), atol=1e-14)


def test_mixture_has_no_single_potential():
    site = qubit_site(SZ.data, SX.data)
    mixture = DeFinettiMixture(((0.5, PLUS), (0.5, GROUND)))
    with pytest.raises(ValidationError):
        effective_potential(mixture, site)


def test_signal_realness_enforced():
    with pytest.raises(ValidationError):
        QuasiPeriodicSignal(np.array([1.0]), np.array([1.0 + 0j]))
    sig = QuasiPeriodicSignal(np.array([1.0, -1.0]), np.array([0.5 + 0j, 0.5 + 0j]))
    assert abs(sig.evaluate(0.7) - math.cos(0.7)) < 1e-14
    assert sig.amplitude() == 1.0


def test_sampled_signal_interpolation():
    grid = np.linspace(0, 3, 61)
    sig = SampledSignal(grid, np.sin(grid))
    probe = np.linspace(0.01, 2.99, 77)
    assert np.max(np.abs(sig.evaluate(probe) - np.sin(probe))) < 1e-6
    cubic = SampledSignal(grid, grid ** 3 - 2 * grid)
    assert abs(cubic.evaluate(1.234) - (1.234 ** 3 - 2 * 1.234)) < 1e-12
    with pytest.raises(ValidationError):
        sig.evaluate(3.5)


# propagation

def test_zero_potential_free_evolution():
    sys = qubit_sys(SZ.data, SX.data)
    grid = np.linspace(0, 2, 9)
    prop = propagate_effective(sys, EffectivePotential.zero(), grid)
    for t, u in zip(grid, prop.unitaries):
        assert np.max(np.abs(u - expm(-1j * t * SZ.data))) < 1e-8


def test_constant_commuting_potential_exact():
    w = 0.8
    sys = qubit_sys(SZ.data, SZ.data)
    pot = EffectivePotential((QuasiPeriodicSignal.constant(w),))
    grid = np.linspace(0, 3, 7)
    prop = propagate_effective(sys, pot, grid)
    for t, u in zip(grid, prop.unitaries):
        assert np.max(np.abs(u - expm(-1j * t * (1 + w) * SZ.data))) < 1e-8


def test_cosine_potential_against_adaptive_oracle():
    sys = qubit_sys(SZ.data, SX.data)
    pot = effective_potential(PLUS, qubit_site(SZ.data, SX.data))
    grid = np.array([0.0, 2.0])
    prop = propagate_effective(sys, pot, grid, step_target=1e-9)

    def rhs(t, y):
        u = y.reshape(2, 2)
        h = SZ.data + math.cos(2 * t) * SX.data
        return (-1j * h @ u).ravel()

    sol = solve_ivp(rhs, (0, 2), np.eye(2, dtype=complex).ravel(),
                    rtol=1e-11, atol=1e-13)
    oracle = sol.y[:, -1].reshape(2, 2)
    assert np.max(np.abs(prop.unitaries[-1] - oracle)) < 1e-6


def test_propagator_unitarity_and_identity_start():
    rng = np.random.default_rng(7)
    h = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
    sys = SystemModel.single(Operator((h + h.conj().T) / 2, (4,), hermitian=True), [])
    grid = np.linspace(0, 5, 21)
    prop = propagate_effective(sys, EffectivePotential.zero(), grid)
    assert np.max(np.abs(prop.unitaries[0] - np.eye(4))) == 0
    for u in prop.unitaries:
        assert np.max(np.abs(u.conj().T @ u - np.eye(4))) < 1e-8


def test_step_halving_is_second_order():
    rng = np.random.default_rng(11)
    for _ in range(3):
        h0 = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
        g = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
        sys = qubit_sys((h0 + h0.conj().T) / 2, (g + g.conj().T) / 2)
        freq = rng.uniform(0.5, 3.0)
        pot = EffectivePotential((QuasiPeriodicSignal(
            np.array([freq, -freq]), np.array([0.5 + 0j, 0.5 + 0j])),))
        grid = np.array([0.0, 1.5])
        us = [propagate_effective(sys, pot, grid, n_substeps=n).unitaries[-1]
              for n in (8, 16, 32)]
        num = np.max(np.abs(us[0] - us[1]))
        den = np.max(np.abs(us[1] - us[2]))
        assert 3.5 <= num / den <= 4.5


def test_grid_validation():
    sys = qubit_sys(SZ.data, SX.data)
    pot = EffectivePotential.zero()
    with pytest.raises(ValidationError):
        propagate_effective(sys, pot, [0.5, 1.0])
    with pytest.raises(ValidationError):
        propagate_effective(sys, pot, [0.0, 1.0, 1.0])
    with pytest.raises(ValidationError):
        propagate_effective(sys, pot, [0.0])


def test_step_halving_failure_reports_estimate(monkeypatch):
    monkeypatch.setattr(eff, "MAX_STEP_DOUBLINGS", 2)
    sys = qubit_sys(SZ.data, SX.data)
    pot = effective_potential(PLUS, qubit_site(SZ.data, SX.data))
    with pytest.raises(ToleranceError, match="achieved"):
        propagate_effective(sys, pot, [0.0, 3.0], step_target=1e-14)


def test_effective_hamiltonian_assembly():
    sys = qubit_sys(SZ.data, SX.data)
    pot = effective_potential(PLUS, qubit_site(SZ.data, SX.data))
    h = effective_hamiltonian(sys, pot, 0.0)
    assert np.allclose(h, SZ.data + SX.data)  # cos(0) = 1


# product propagation over system factors

def two_qubit_sys(rng):
    ha = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
    hb = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
    ga = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
    gb = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
    return SystemModel(
        local_h=(Operator((ha + ha.conj().T) / 2, (2,), hermitian=True),
                 Operator((hb + hb.conj().T) / 2, (2,), hermitian=True)),
        couplings=(Coupling(g=Operator((ga + ga.conj().T) / 2, (2,), hermitian=True), subsystem=0),
                   Coupling(g=Operator((gb + gb.conj().T) / 2, (2,), hermitian=True), subsystem=1)))


def test_single_factor_product_equals_plain():
    sys = qubit_sys(SZ.data, SX.data)
    pot = effective_potential(PLUS, qubit_site(SZ.data, SX.data))
    grid = np.linspace(0, 1, 5)
    a = propagate_effective(sys, pot, grid, n_substeps=64)
    b = propagate_subsystems(sys, pot, grid, n_substeps=64)
    for ua, ub in zip(a.unitaries, b.unitaries):
        assert np.max(np.abs(ua - ub)) < 1e-12


def test_two_factor_product_matches_joint_propagation():
    rng = np.random.default_rng(13)
    sys = two_qubit_sys(rng)
    pot = effective_potential(PLUS, qubit_site(SZ.data, SX.data))
    grid = np.linspace(0, 1.5, 7)
    joint = propagate_effective(sys, pot, grid, step_target=1e-9)
    product = propagate_subsystems(sys, pot, grid, step_target=1e-9)
    for ua, ub in zip(joint.unitaries, product.unitaries):
        assert np.max(np.abs(ua - ub)) < 1e-8


def negativity_2q(rho_mat):
    pt = rho_mat.reshape(2, 2, 2, 2).transpose(0, 3, 2, 1).reshape(4, 4)
    evals = np.linalg.eigvalsh(pt)
    return float(-evals[evals < 0].sum())


def test_product_propagation_preserves_negativity():
    # local unitaries leave negativity alone no matter the step error,
    # so the default step target suffices for a 1e-10 invariance check
    rng = np.random.default_rng(17)
    sys = two_qubit_sys(rng)
    pot = effective_potential(PLUS, qubit_site(SZ.data, SX.data))
    grid = np.linspace(0, 3, 13)
    prop = propagate_subsystems(sys, pot, grid)
    bell = np.zeros(4, dtype=complex)
    bell[0] = bell[3] = 1 / math.sqrt(2)
    rho0 = DensityMatrix.pure(bell, (2, 2))
    result = evolve_state(prop, rho0)
    negs = [negativity_2q(s.data) for s in result.states]
    assert abs(negs[0] - 0.5) < 1e-12
    assert max(abs(n - 0.5) for n in negs) < 1e-10


def test_product_propagation_commutes_with_partial_trace():
    rng = np.random.default_rng(19)
    sys = two_qubit_sys(rng)
    pot = effective_potential(PLUS, qubit_site(SZ.data, SX.data))
    grid = np.linspace(0, 2, 5)
    prop = propagate_subsystems(sys, pot, grid)

    couplings = [Coupling(g=c.g, v_index=c.v_index, subsystem=0)
                 for c in sys.couplings if c.subsystem == 0]
    local = SystemModel(local_h=(sys.local_h[0],), couplings=tuple(couplings))
    prop1 = propagate_effective(local, pot, grid)

    rho_a = np.diag([0.7, 0.3]).astype(complex)
    rho_b = PLUS.data
    rho0 = DensityMatrix(np.kron(rho_a, rho_b), (2, 2))
    joint = evolve_state(prop, rho0)
    for k in range(len(grid)):
        reduced = partial_trace(joint.states[k], keep=[0]).data
        u1 = prop1.unitaries[k]
        assert np.max(np.abs(reduced - u1 @ rho_a @ u1.conj().T)) < 1e-10


def test_potential_count_mismatch_rejected():
    rng = np.random.default_rng(23)
    sys = two_qubit_sys(rng)
    pot = effective_potential(PLUS, qubit_site(SZ.data, SX.data))
    with pytest.raises(ValidationError):
        propagate_subsystems(sys, [pot], np.linspace(0, 1, 3))


# state evolution

def test_evolve_state_preserves_spectrum_and_purity():
    sys = qubit_sys(SZ.data, SX.data)
    pot = effective_potential(PLUS, qubit_site(SZ.data, SX.data))
    grid = np.linspace(0, 2, 9)
    prop = propagate_effective(sys, pot, grid)
    pure = DensityMatrix.pure(np.array([1, 1j]) / math.sqrt(2), (2,))
    res = evolve_state(prop, pure)
    assert np.max(np.abs(res.purities() - 1)) < 1e-12
    mixed = DensityMatrix(np.diag([0.8, 0.2]).astype(complex), (2,))
    res2 = evolve_state(prop, mixed)
    for s in res2.states:
        assert np.allclose(np.linalg.eigvalsh(s.data), [0.2, 0.8], atol=1e-10)
    flat = DensityMatrix.maximally_mixed((2,))
    res3 = evolve_state(prop, flat)
    for s in res3.states:
        assert np.max(np.abs(s.data - np.eye(2) / 2)) < 1e-12


def test_evolve_state_dim_mismatch():
    sys = qubit_sys(SZ.data, SX.data)
    prop = propagate_effective(sys, EffectivePotential.zero(), [0.0, 1.0])
    with pytest.raises(ValidationError):
        evolve_state(prop, DensityMatrix.maximally_mixed((3,)))


# mixtures of propagations

def test_single_atom_mixture_reduces_to_unitary_orbit():
    sys = qubit_sys(SZ.data, SX.data)
    pot = effective_potential(PLUS, qubit_site(SZ.data, SX.data))
    grid = np.linspace(0, 2, 9)
    rho0 = DensityMatrix.pure(np.array([1, 0], dtype=complex), (2,))
    mix = propagate_definetti(sys, [(1.0, pot)], rho0, grid, n_substeps=64)
    ref = evolve_state(propagate_effective(sys, pot, grid, n_substeps=64), rho0)
    for a, b in zip(mix.states, ref.states):
        assert np.max(np.abs(a.data - b.data)) < 1e-13


def test_opposite_constant_atoms_decohere():
    sys = qubit_sys(np.zeros((2, 2)), SZ.data)
    up = EffectivePotential((QuasiPeriodicSignal.constant(1.0),))
    down = EffectivePotential((QuasiPeriodicSignal.constant(-1.0),))
    rho0 = PLUS
    grid = np.linspace(0, math.pi / 2, 9)
    res = propagate_definetti(sys, [(0.5, up), (0.5, down)], rho0, grid)
    purities = res.purities()
    assert purities[0] > 1 - 1e-12
    assert purities.min() < 0.51  # full dephasing at t = pi/2
    assert np.max(res.trace_drifts()) < 1e-12
    for s in res.states:
        assert np.max(np.abs(s.data - s.data.conj().T)) < 1e-10
        assert np.linalg.eigvalsh(s.data).min() > -1e-12


def test_equal_atoms_recover_unitary_evolution():
    sys = qubit_sys(SZ.data, SX.data)
    pot = effective_potential(PLUS, qubit_site(SZ.data, SX.data))
    grid = np.linspace(0, 1, 5)
    rho0 = DensityMatrix.pure(np.array([0, 1], dtype=complex), (2,))
    mix = propagate_definetti(sys, [(0.5, pot), (0.5, pot)], rho0, grid,
                              n_substeps=32)
    assert np.max(np.abs(mix.purities() - 1)) < 1e-12


def test_mixture_weight_validation():
    sys = qubit_sys(SZ.data, SX.data)
    pot = EffectivePotential.zero()
    rho0 = PLUS
    with pytest.raises(ValidationError):
        propagate_definetti(sys, [(0.6, pot), (0.6, pot)], rho0, [0.0, 1.0])
    with pytest.raises(ValidationError):
        propagate_definetti(sys, [], rho0, [0.0, 1.0])


# dispatcher

def test_trajectory_dispatch_product_and_mixture():
    sys = qubit_sys(SZ.data, SX.data)
    site = qubit_site(SZ.data, SX.data)
    grid = np.linspace(0, 1.5, 7)
    rho0 = DensityMatrix.pure(np.array([1, 0], dtype=complex), (2,))

    direct = evolve_state(propagate_effective(
        sys, effective_potential(PLUS, site), grid, n_substeps=64), rho0)
    via = effective_trajectory(sys, ProductState(PLUS), site, rho0, grid,
                               n_substeps=64)
    for a, b in zip(direct.states, via.states):
        assert np.max(np.abs(a.data - b.data)) < 1e-13

    mixture = DeFinettiMixture(((0.5, PLUS), (0.5, GROUND)))
    res = effective_trajectory(sys, mixture, site, rho0, grid, n_substeps=64)
    assert np.max(res.trace_drifts()) < 1e-12
