import numpy as np
import pytest

from mflab.errors import ToleranceError, ValidationError
from mflab.operators import (
    DensityMatrix,
    Operator,
    PAULI_X,
    PAULI_Z,
    bell_ket,
    embed_at_site,
    expm_hermitian,
    hermitian_defect,
    identity,
    ket,
    kron,
    kron_all,
    partial_trace,
    pauli,
    permute_factors,
    trace_norm,
    unitary_defect,
)


def random_density(rng, d):
    a = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    rho = a @ a.conj().T
    return rho / rho.trace()


def test_kron_identity():
    out = kron(identity([2]), identity([2]))
    assert out.dims == (2, 2)
    np.testing.assert_array_equal(out.data, np.eye(4))


def test_kron_block_structure():
    out = kron(pauli("x"), identity([2]))
    expected = np.zeros((4, 4), dtype=complex)
    expected[:2, 2:] = np.eye(2)
    expected[2:, :2] = np.eye(2)
    np.testing.assert_array_equal(out.data, expected)


def test_kron_dims_concat():
    a = Operator(np.eye(2), (2,))
    b = Operator(np.eye(3), (3,))
    out = kron(a, b)
    assert out.dims == (2, 3)
    assert out.dim == 6


def test_kron_associative_exact():
    ints = np.array([[1, 2], [3, 4]], dtype=complex)
    a = Operator(ints, (2,))
    b = Operator(PAULI_X, (2,))
    c = Operator(PAULI_Z, (2,))
    left = kron(kron(a, b), c)
    right = kron(a, kron(b, c))
    assert np.array_equal(left.data, right.data)
    assert left.dims == right.dims


def test_embed_first_site():
    out = embed_at_site(pauli("z"), 1, 2)
    np.testing.assert_array_equal(out.data, np.kron(PAULI_Z, np.eye(2)))
    assert out.dims == (2, 2)


def test_embed_second_site():
    out = embed_at_site(pauli("x"), 2, 2)
    np.testing.assert_array_equal(out.data, kron(identity([2]), pauli("x")).data)


def test_embed_identity_any_site():
    for m in (1, 2, 3):
        out = embed_at_site(identity([2]), m, 3)
        np.testing.assert_array_equal(out.data, np.eye(8))


def test_embed_index_errors():
    with pytest.raises(ValidationError):
        embed_at_site(pauli("x"), 0, 2)
    with pytest.raises(ValidationError):
        embed_at_site(pauli("x"), 3, 2)
    with pytest.raises(ValidationError):
        embed_at_site(pauli("x"), 1, 2, site_dim=3)


def test_partial_trace_product():
    rng = np.random.default_rng(7)
    rho_a = random_density(rng, 2)
    rho_b = random_density(rng, 3)
    joint = DensityMatrix(np.kron(rho_a, rho_b), (2, 3))
    out = partial_trace(joint, {0})
    assert out.dims == (2,)
    np.testing.assert_allclose(out.data, rho_a, atol=1e-14)


def test_partial_trace_bell():
    rho = DensityMatrix.pure(bell_ket(), (2, 2))
    out = partial_trace(rho, {0})
    np.testing.assert_allclose(out.data, np.eye(2) / 2, atol=1e-14)


def test_partial_trace_keep_all():
    rng = np.random.default_rng(3)
    rho = DensityMatrix(random_density(rng, 6), (2, 3))
    out = partial_trace(rho, {0, 1})
    np.testing.assert_allclose(out.data, rho.data, atol=0)


def test_partial_trace_keep_order():
    # kept dims stay in original order even if the keep set is given reversed
    rng = np.random.default_rng(11)
    rho = DensityMatrix(random_density(rng, 12), (2, 3, 2))
    out = partial_trace(rho, [2, 0])
    assert out.dims == (2, 2)


def test_partial_trace_invalid_index():
    rho = DensityMatrix.maximally_mixed((2, 2))
    with pytest.raises(ValidationError):
        partial_trace(rho, {2})
    with pytest.raises(ValidationError):
        partial_trace(rho, set())


def test_partial_trace_random_properties():
    # trace- and positivity-preserving across random states, dims <= (4, 4)
    rng = np.random.default_rng(2024)
    for _ in range(100):
        da = int(rng.integers(2, 5))
        db = int(rng.integers(2, 5))
        rho = random_density(rng, da * db)
        out = partial_trace(rho, {0}, dims=(da, db))
        assert abs(out.trace() - 1.0) < 1e-12
        assert np.linalg.eigvalsh(out)[0] > -1e-12


def test_expm_zero_time():
    out = expm_hermitian(pauli("x"), 0.0)
    np.testing.assert_allclose(out.data, np.eye(2), atol=1e-15)


def test_expm_sigma_z_phases():
    t = 0.7
    out = expm_hermitian(pauli("z"), t)
    np.testing.assert_allclose(np.diag(out.data),
                               [np.exp(-1j * t), np.exp(1j * t)], atol=1e-14)


def test_expm_composition():
    h = pauli("x")
    u = expm_hermitian(h, 0.3).data @ expm_hermitian(h, 0.5).data
    np.testing.assert_allclose(u, expm_hermitian(h, 0.8).data, atol=1e-10)


def test_expm_rejects_non_hermitian():
    bad = Operator(np.array([[0, 1], [0, 0]], dtype=complex), (2,))
    with pytest.raises(ValidationError):
        expm_hermitian(bad, 1.0)


def test_expm_unitarity_random():
    rng = np.random.default_rng(5)
    for _ in range(20):
        a = rng.normal(size=(5, 5)) + 1j * rng.normal(size=(5, 5))
        h = (a + a.conj().T) / 2
        h *= 10 / max(np.abs(np.linalg.eigvalsh(h)))
        t = rng.uniform(0, 10)
        u = expm_hermitian(h, t)
        assert unitary_defect(u.data) <= 1e-10


def test_trace_norm_values():
    assert trace_norm(np.diag([1.0, -2.0])) == pytest.approx(3.0, abs=1e-12)
    rng = np.random.default_rng(9)
    rho = random_density(rng, 5)
    assert trace_norm(rho) == pytest.approx(1.0, abs=1e-10)


def test_trace_norm_unitary_invariance():
    rng = np.random.default_rng(13)
    x = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
    a = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
    u = expm_hermitian((a + a.conj().T) / 2, 1.3).data
    assert trace_norm(u @ x @ u.conj().T) == pytest.approx(trace_norm(x), abs=1e-10)


def test_trace_distance_range():
    rng = np.random.default_rng(17)
    for _ in range(20):
        a = random_density(rng, 4)
        b = random_density(rng, 4)
        val = trace_norm(a - b) / 2
        assert 0.0 <= val <= 1.0 + 1e-12


def test_operator_flag_validation():
    with pytest.raises(ValidationError):
        Operator(np.array([[0, 1], [0, 0]]), (2,), hermitian=True)
    with pytest.raises(ValidationError):
        Operator(2 * np.eye(2), (2,), unitary=True)
    with pytest.raises(ValidationError):
        Operator(np.eye(4), (2, 3))


def test_operator_defect_helpers():
    assert hermitian_defect(PAULI_X) == 0.0
    assert unitary_defect(np.eye(3)) == 0.0


def test_density_matrix_validation():
    with pytest.raises(ValidationError):
        DensityMatrix(np.eye(2), (2,))  # trace 2
    with pytest.raises(ValidationError):
        DensityMatrix(np.diag([1.5, -0.5]), (2,))
    rho = DensityMatrix.pure(3.0 * ket("0"), (2,))  # normalizes
    assert rho.purity() == pytest.approx(1.0)


def test_permute_factors_swaps_kron():
    a = kron(pauli("x"), pauli("z"))
    swapped, dims = permute_factors(a.data, a.dims, [1, 0])
    np.testing.assert_array_equal(swapped, kron(pauli("z"), pauli("x")).data)
    assert dims == (2, 2)


def test_permute_factors_three_sites():
    ops = [pauli("x"), pauli("y"), pauli("z")]
    full = kron_all(*ops)
    perm = [2, 0, 1]
    permuted, _ = permute_factors(full.data, full.dims, perm)
    expected = kron_all(*[ops[p] for p in perm])
    np.testing.assert_allclose(permuted, expected.data, atol=0)
