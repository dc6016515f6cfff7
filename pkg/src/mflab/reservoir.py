"""Reservoir ensemble states, their multi-time moments, and growth bounds.

Four ensemble families are supported: plain site products, channel-correlated
states built by averaging a local channel over all placements, finite
exchangeable mixtures of products, and block ensembles whose site fractions
are prescribed. Product-like families evaluate moments of the site-averaged
interaction by an exact combinatorial reduction over index partitions, so no
M-site space is ever built for them; correlated states are materialized
densely below the size cutoff.

The bound helpers at the bottom give per-order moment constants for coherent
and excitation-bounded oscillator or field ensembles, plus a numeric
convergence check for the perturbation series they control.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ResourceLimitError, ToleranceError, ValidationError
from .model import SiteModel
from .operators import DENSE_CUTOFF, DensityMatrix, Operator, embed_at_site

WEIGHT_ATOL = 1e-12
KRAUS_ATOL = 1e-10
IMAG_ATOL = 1e-10


def _check_weights(weights: Sequence[float], what: str) -> None:
    w = np.asarray(weights, dtype=float)
    if w.size == 0:
        raise ValidationError(f"{what}: need at least one entry")
    if (w < 0).any():
        raise ValidationError(f"{what}: negative weight {w.min():.3e}")
    if abs(w.sum() - 1.0) > WEIGHT_ATOL:
        raise ValidationError(f"{what}: weights sum to {w.sum():.15f}, not 1")


def kraus_defect(kraus: Sequence[np.ndarray]) -> float:
    """Max-abs deviation of sum K_i^dag K_i from the identity."""
    acc = sum(k.conj().T @ k for k in kraus)
    return float(np.max(np.abs(acc - np.eye(acc.shape[0]))))


def apply_kraus(kraus: Sequence[np.ndarray], rho: np.ndarray) -> np.ndarray:
    return sum(k @ rho @ k.conj().T for k in kraus)


@dataclass(frozen=True)
class ProductState:
    """All sites independently in the same state."""

    site_state: DensityMatrix


@dataclass(frozen=True)
class ChannelCorrelated:
    """Product state with a local channel averaged over all placements.

    The channel acts on corr_length adjacent sites; the ensemble is the
    uniform average of it applied at every possible position.
    """

    site_state: DensityMatrix
    corr_length: int
    kraus: tuple[np.ndarray, ...]

    def __post_init__(self):
        if self.corr_length < 1:
            raise ValidationError("correlation length must be >= 1")
        d_block = self.site_state.dim ** self.corr_length
        kraus = tuple(np.array(k, dtype=complex) for k in self.kraus)
        if not kraus:
            raise ValidationError("need at least one Kraus operator")
        for k in kraus:
            if k.shape != (d_block, d_block):
                raise ValidationError(
                    f"Kraus operator shape {k.shape} does not match block dim {d_block}")
            k.setflags(write=False)
        defect = kraus_defect(kraus)
        if defect > KRAUS_ATOL:
            raise ValidationError(
                f"Kraus completeness defect {defect:.2e} exceeds {KRAUS_ATOL}")
        object.__setattr__(self, "kraus", kraus)


@dataclass(frozen=True)
class DeFinettiMixture:
    """Convex mixture of site-product ensembles."""

    atoms: tuple[tuple[float, DensityMatrix], ...]

    def __post_init__(self):
        atoms = tuple((float(w), s) for w, s in self.atoms)
        _check_weights([w for w, _ in atoms], "mixture weights")
        dims = {s.dim for _, s in atoms}
        if len(dims) != 1:
            raise ValidationError(f"mixture atoms have mixed dims {sorted(dims)}")
        object.__setattr__(self, "atoms", atoms)

    @property
    def site_dim(self) -> int:
        return self.atoms[0][1].dim


@dataclass(frozen=True)
class MacroscopicParts:
    """Sites split into blocks with prescribed fractions and block states."""

    parts: tuple[tuple[float, DensityMatrix], ...]

    def __post_init__(self):
        parts = tuple((float(f), s) for f, s in self.parts)
        _check_weights([f for f, _ in parts], "part fractions")
        dims = {s.dim for _, s in parts}
        if len(dims) != 1:
            raise ValidationError(f"part states have mixed dims {sorted(dims)}")
        object.__setattr__(self, "parts", parts)

    @property
    def site_dim(self) -> int:
        return self.parts[0][1].dim


ReservoirState = ProductState | ChannelCorrelated | DeFinettiMixture | MacroscopicParts


def largest_remainder_counts(fractions: Sequence[float], m_count: int) -> np.ndarray:
    """Integer site counts per part: floor allocation, remainder to the
    largest fractional parts, ties broken by part order."""
    raw = np.asarray(fractions, dtype=float) * m_count
    base = np.floor(raw).astype(int)
    leftover = m_count - int(base.sum())
    order = np.argsort(-(raw - base), kind="stable")
    base[order[:leftover]] += 1
    return base


def _state_site_dim(state: ReservoirState) -> int:
    if isinstance(state, (ProductState, ChannelCorrelated)):
        return state.site_state.dim
    return state.site_dim


def _kron_power(mat: np.ndarray, count: int) -> np.ndarray:
    out = np.eye(1, dtype=complex)
    for _ in range(count):
        out = np.kron(out, mat)
    return out


def build_channel_correlated(site_state: DensityMatrix, corr_length: int,
                             kraus: Sequence[np.ndarray],
                             m_count: int) -> DensityMatrix:
    """Average of the channel applied at every placement over m_count sites."""
    spec = ChannelCorrelated(site_state, corr_length, tuple(kraus))
    L, d = spec.corr_length, site_state.dim
    if m_count < L:
        raise ValidationError(
            f"need at least {L} sites for correlation length {L}, got {m_count}")
    if d ** m_count > DENSE_CUTOFF:
        raise ResourceLimitError(
            f"correlated state on {m_count} sites of dim {d} exceeds dense cutoff")
    block = apply_kraus(spec.kraus, _kron_power(site_state.data, L))
    acc = np.zeros((d ** m_count,) * 2, dtype=complex)
    for j in range(m_count - L + 1):
        left = _kron_power(site_state.data, j)
        right = _kron_power(site_state.data, m_count - L - j)
        acc += np.kron(np.kron(left, block), right)
    acc /= m_count - L + 1
    return DensityMatrix(acc, (d,) * m_count)


def materialize(state: ReservoirState, m_count: int) -> DensityMatrix:
    """Explicit density matrix of the ensemble on m_count sites."""
    if m_count < 1:
        raise ValidationError("need at least one site")
    d = _state_site_dim(state)
    if d ** m_count > DENSE_CUTOFF:
        raise ResourceLimitError(
            f"materializing {m_count} sites of dim {d} exceeds dense cutoff")
    dims = (d,) * m_count
    if isinstance(state, ProductState):
        return DensityMatrix(_kron_power(state.site_state.data, m_count), dims)
    if isinstance(state, DeFinettiMixture):
        acc = sum(w * _kron_power(s.data, m_count) for w, s in state.atoms)
        return DensityMatrix(acc, dims)
    if isinstance(state, MacroscopicParts):
        counts = largest_remainder_counts([f for f, _ in state.parts], m_count)
        out = np.eye(1, dtype=complex)
        for (_, s), c in zip(state.parts, counts):
            out = np.kron(out, _kron_power(s.data, int(c)))
        return DensityMatrix(out, dims)
    if isinstance(state, ChannelCorrelated):
        return build_channel_correlated(state.site_state, state.corr_length,
                                        state.kraus, m_count)
    raise ValidationError(f"unknown ensemble type {type(state).__name__}")


def reference_site_state(state: ReservoirState) -> DensityMatrix:
    """Single-site state entering the factorized comparison product."""
    if isinstance(state, (ProductState, ChannelCorrelated)):
        return state.site_state
    if isinstance(state, DeFinettiMixture):
        acc = sum(w * s.data for w, s in state.atoms)
        return DensityMatrix(acc, (state.site_dim,))
    if isinstance(state, MacroscopicParts):
        acc = sum(f * s.data for f, s in state.parts)
        return DensityMatrix(acc, (state.site_dim,))
    raise ValidationError(f"unknown ensemble type {type(state).__name__}")


# Single-site expectation of the evolved interaction operator.

def site_signal_terms(rho: np.ndarray, h: np.ndarray, v: np.ndarray,
                      merge_atol: float = 1e-9):
    """Frequencies and coefficients of t -> Tr(rho e^{ith} v e^{-ith}).

    Returned as (freqs, coeffs) with degenerate level gaps merged into a
    single term each, so zero-frequency content appears once as a constant.
    """
    evals, vecs = np.linalg.eigh(h)
    rho_e = vecs.conj().T @ rho @ vecs
    v_e = vecs.conj().T @ v @ vecs
    freqs = (evals[:, None] - evals[None, :]).ravel()
    coeffs = (rho_e.T * v_e).ravel()
    order = np.argsort(freqs, kind="stable")
    freqs, coeffs = freqs[order], coeffs[order]
    scale = max(1.0, float(np.max(np.abs(evals))) if evals.size else 0.0)
    out_f: list[float] = []
    out_c: list[complex] = []
    for f, c in zip(freqs, coeffs):
        if out_f and abs(f - out_f[-1]) <= merge_atol * scale:
            out_c[-1] += c
        else:
            out_f.append(float(f))
            out_c.append(complex(c))
    return np.array(out_f), np.array(out_c)


def site_expectation(state: DensityMatrix, site: SiteModel, t, v_index: int = 0):
    """Expectation of the interaction operator evolved by the site Hamiltonian.

    Accepts a scalar or array of times; the imaginary residue is checked
    against 1e-10 and discarded.
    """
    v = site.interactions[v_index]
    if state.dim != v.dim:
        raise ValidationError(
            f"state dim {state.dim} does not match interaction dim {v.dim}")
    freqs, coeffs = site_signal_terms(state.data, site.h.data, v.data)
    tarr = np.atleast_1d(np.asarray(t, dtype=float))
    vals = np.exp(1j * np.outer(tarr, freqs)) @ coeffs
    resid = float(np.max(np.abs(vals.imag))) if vals.size else 0.0
    if resid > IMAG_ATOL:
        raise ToleranceError(
            f"imaginary residue {resid:.2e} in site expectation; inputs not Hermitian")
    out = vals.real
    if np.asarray(t).ndim == 0:
        return float(out[0])
    return out


# Multi-time moments of the site-averaged interaction.

def set_partitions(items: Sequence[int]):
    """All partitions of items into nonempty blocks, each block in input order."""
    items = list(items)
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in set_partitions(rest):
        for i in range(len(part)):
            yield part[:i] + [[first] + part[i]] + part[i + 1:]
        yield [[first]] + part


def falling_factorial(m: int, k: int) -> int:
    out = 1
    for j in range(k):
        out *= m - j
    return out


def _evolved_interaction(v_e: np.ndarray, evals: np.ndarray, t: float) -> np.ndarray:
    ph = np.exp(1j * evals * t)
    return (ph[:, None] * v_e) * ph.conj()[None, :]


def _block_product_expectation(rho_e: np.ndarray, v_e: np.ndarray,
                               evals: np.ndarray, times: Sequence[float]) -> complex:
    d = len(evals)
    prod = np.eye(d, dtype=complex)
    for t in times:
        prod = prod @ _evolved_interaction(v_e, evals, t)
    return complex(np.trace(rho_e @ prod))


def _partition_moment(part_states: Sequence[np.ndarray], part_counts: Sequence[int],
                      site: SiteModel, times: Sequence[float],
                      v_index: int) -> complex:
    """Moment of the site average over blocks of identical independent sites.

    Sum over index-coincidence partitions of the time slots; each block of
    coincident indices contributes a single-site ordered product, and blocks
    land on distinct sites counted by falling factorials per part.
    """
    n = len(times)
    m_total = int(sum(part_counts))
    evals, vecs = np.linalg.eigh(site.h.data)
    v_e = vecs.conj().T @ site.interactions[v_index].data @ vecs
    rho_es = [vecs.conj().T @ rho @ vecs for rho in part_states]
    n_parts = len(rho_es)
    total = 0.0 + 0.0j
    for partition in set_partitions(range(n)):
        k = len(partition)
        block_vals = [
            [_block_product_expectation(rho_e, v_e, evals,
                                        [times[i] for i in block])
             for rho_e in rho_es]
            for block in partition]
        for assign in itertools.product(range(n_parts), repeat=k):
            weight = 1
            for p in range(n_parts):
                weight *= falling_factorial(int(part_counts[p]), assign.count(p))
            if weight == 0:
                continue
            val = 1.0 + 0.0j
            for b, p in enumerate(assign):
                val *= block_vals[b][p]
            total += weight * val
    return total / m_total ** n


def _dense_moment(state: ReservoirState, m_count: int, site: SiteModel,
                  times: Sequence[float], v_index: int) -> complex:
    d = site.dim
    if d ** m_count > DENSE_CUTOFF:
        raise ResourceLimitError(
            f"dense moment on {m_count} sites of dim {d} exceeds cutoff; "
            "no combinatorial reduction for this ensemble")
    rho = materialize(state, m_count).data
    evals, vecs = np.linalg.eigh(site.h.data)
    v_e = vecs.conj().T @ site.interactions[v_index].data @ vecs
    prod = np.eye(d ** m_count, dtype=complex)
    for t in times:
        vt = vecs @ _evolved_interaction(v_e, evals, t) @ vecs.conj().T
        vbar = sum(embed_at_site(Operator(vt, (d,)), m, m_count).data
                   for m in range(1, m_count + 1)) / m_count
        prod = prod @ vbar
    return complex(np.trace(rho @ prod))


def multitime_moment(state: ReservoirState, m_count: int, site: SiteModel,
                     times: Sequence[float], v_index: int = 0,
                     method: str = "auto") -> complex:
    """Ensemble moment of the site-averaged evolved interaction at the
    given times, in the given order."""
    times = [float(t) for t in times]
    if not times:
        raise ValidationError("need at least one time")
    if m_count < 1:
        raise ValidationError("need at least one site")
    if _state_site_dim(state) != site.dim:
        raise ValidationError("ensemble site dim does not match site model")
    if method not in ("auto", "partition", "dense"):
        raise ValidationError(f"unknown moment method {method!r}")
    if method == "dense":
        return _dense_moment(state, m_count, site, times, v_index)
    if isinstance(state, ProductState):
        return _partition_moment([state.site_state.data], [m_count],
                                 site, times, v_index)
    if isinstance(state, DeFinettiMixture):
        return sum(w * _partition_moment([s.data], [m_count], site, times, v_index)
                   for w, s in state.atoms)
    if isinstance(state, MacroscopicParts):
        counts = largest_remainder_counts([f for f, _ in state.parts], m_count)
        keep = [(s.data, int(c)) for (_, s), c in zip(state.parts, counts) if c > 0]
        return _partition_moment([s for s, _ in keep], [c for _, c in keep],
                                 site, times, v_index)
    if method == "partition":
        raise ValidationError(
            f"no combinatorial reduction for {type(state).__name__}")
    return _dense_moment(state, m_count, site, times, v_index)


def _max_tuple_moment(state: ReservoirState, m_count: int, site: SiteModel,
                      times: Sequence[float], v_index: int) -> float:
    """Largest modulus of a fixed-site-assignment moment over all index tuples."""
    d = site.dim
    rho = materialize(state, m_count).data
    evals, vecs = np.linalg.eigh(site.h.data)
    v_e = vecs.conj().T @ site.interactions[v_index].data @ vecs
    embedded = []
    for t in times:
        vt = vecs @ _evolved_interaction(v_e, evals, t) @ vecs.conj().T
        embedded.append([embed_at_site(Operator(vt, (d,)), m, m_count).data
                         for m in range(1, m_count + 1)])
    best = 0.0
    for tup in itertools.product(range(m_count), repeat=len(times)):
        prod = embedded[0][tup[0]]
        for i in range(1, len(times)):
            prod = prod @ embedded[i][tup[i]]
        best = max(best, abs(complex(np.trace(rho @ prod))))
    return best


def factorization_error(state: ReservoirState, m_count: int, site: SiteModel,
                        times: Sequence[float], v_index: int = 0):
    """Distance between the joint moment and the factorized product of
    single-site expectations.

    Returns a scalar; channel-correlated ensembles return (error, bound)
    where bound = n L C(n) / (M - L + 1) with C(n) the largest fixed-site
    moment modulus.
    """
    times = [float(t) for t in times]
    moment = multitime_moment(state, m_count, site, times, v_index)
    ref = reference_site_state(state)
    factorized = 1.0
    for t in times:
        factorized *= site_expectation(ref, site, t, v_index)
    err = abs(moment - factorized)
    if isinstance(state, ChannelCorrelated):
        n, L = len(times), state.corr_length
        c_n = _max_tuple_moment(state, m_count, site, times, v_index)
        bound = n * L * c_n / (m_count - L + 1)
        return err, bound
    return err


def bell_channel_kraus() -> tuple[np.ndarray, ...]:
    """Unitary two-site channel taking |00> to the maximally entangled pair."""
    h = np.array([[1, 1], [1, -1]], dtype=complex) / np.sqrt(2)
    cnot = np.array([[1, 0, 0, 0],
                     [0, 1, 0, 0],
                     [0, 0, 0, 1],
                     [0, 0, 1, 0]], dtype=complex)
    return (cnot @ np.kron(h, np.eye(2)),)


# Moment growth constants.

def pairing_count(k: int) -> int:
    """Number of perfect pairings of k objects: (k-1)(k-3)...1, with 0 -> 1."""
    if k < 0 or k % 2:
        raise ValidationError(f"pairings need an even nonnegative count, got {k}")
    out = 1
    for j in range(1, k, 2):
        out *= j
    return out


def coherent_bound(n: int, alpha: complex) -> float:
    """Per-order moment constant for a product of oscillator coherent states."""
    if n < 0:
        raise ValidationError("order must be nonnegative")
    return pairing_count(2 * (n // 2)) * (0.5 + abs(alpha)) ** n


def coherent_bound_safe(n: int, alpha: complex) -> float:
    """Looser variant of coherent_bound with base 1 + |alpha|."""
    if n < 0:
        raise ValidationError("order must be nonnegative")
    return pairing_count(2 * (n // 2)) * (1.0 + abs(alpha)) ** n


def scattering_bound(n: int, c: float, nu: float) -> float:
    """Per-order constant for a number-conserving interaction with
    excitation moments bounded by c^k."""
    if n < 0 or c < 0:
        raise ValidationError("order and excitation bound must be nonnegative")
    return (c * abs(nu)) ** n


def field_coherent_bound(n: int, f_norm: float, g_norm: float) -> float:
    """Per-order constant for field coherent states with form factor norms."""
    if n < 0 or f_norm < 0 or g_norm < 0:
        raise ValidationError("order and norms must be nonnegative")
    return pairing_count(2 * (n // 2)) * (0.5 + f_norm) ** n * g_norm ** n


def field_scattering_bound(n: int, c: float, g_norm: float) -> float:
    """Per-order constant for the field number-conserving interaction."""
    if n < 0 or c < 0 or g_norm < 0:
        raise ValidationError("order and norms must be nonnegative")
    return (2 * c * g_norm ** 2) ** n


@dataclass(frozen=True)
class BoundProfile:
    """Per-order constants and time densities controlling the series remainder."""

    c_sys: Callable[[int], float]
    c_res: Callable[[int], float]
    b_sys: Callable[[float], float] | None = None
    b_res: Callable[[float], float] | None = None

    def accumulated(self, t: float, n_nodes: int = 256) -> float:
        """B(t): integral of b_sys * b_res from 0 to t."""
        if t < 0:
            raise ValidationError("time must be nonnegative")
        if self.b_sys is None and self.b_res is None:
            return float(t)
        bs = self.b_sys or (lambda s: 1.0)
        br = self.b_res or (lambda s: 1.0)
        nodes, weights = np.polynomial.legendre.leggauss(n_nodes)
        s = 0.5 * t * (nodes + 1.0)
        vals = np.array([bs(si) * br(si) for si in s])
        out = float(0.5 * t * np.dot(weights, vals))
        if out < -1e-12:
            raise ValidationError(f"accumulated density B({t}) = {out:.3e} is negative")
        return max(out, 0.0)


@dataclass(frozen=True)
class SeriesReport:
    verdict: str  # convergent | divergent | inconclusive
    log_terms: np.ndarray
    partial_sum: float
    ratio_estimate: float
    root_estimate: float


def _series_log_terms(profile: BoundProfile, log_2b: float, depth: int) -> np.ndarray:
    return np.array([
        n * log_2b
        + math.log(max(profile.c_sys(int(n)), 1e-300))
        + math.log(max(profile.c_res(int(n)), 1e-300))
        - math.lgamma(n + 1)
        for n in range(1, depth + 1)])


def series_condition_check(profile: BoundProfile, t: float,
                           n_max: int = 40) -> SeriesReport:
    """Numerically probe sum_n (2B)^n C_sys(n) C_res(n) / n! for convergence.

    Terms are handled in log space. The probe starts at n_max orders and
    deepens while the tail ratio is above one but still falling, so series
    whose terms peak late are not misread; the verdict reflects behavior up
    to the final probing depth.
    """
    if n_max < 8:
        raise ValidationError("need n_max >= 8 for a stable tail")
    b_acc = profile.accumulated(t)
    if b_acc == 0.0:
        return SeriesReport("convergent", np.full(n_max, -np.inf), 0.0, 0.0, 0.0)
    log_2b = math.log(2.0 * b_acc)
    cap = max(64 * n_max, 2048)
    depth = n_max
    while True:
        log_terms = _series_log_terms(profile, log_2b, depth)
        tail = log_terms[-max(8, depth // 5):]
        diffs = np.diff(tail)
        flat = float(np.max(np.abs(np.diff(diffs)))) if diffs.size > 1 else 0.0
        if np.all(diffs < -1e-3):
            verdict = "convergent"
            break
        if np.all(np.abs(diffs) <= 1e-3) and log_terms[-1] > math.log(1e-8):
            # terms neither grow nor vanish
            verdict = "divergent"
            break
        if np.all(diffs > 1e-3) and flat < 1e-9:
            # steady growth factor above one
            verdict = "divergent"
            break
        if depth >= cap:
            verdict = "divergent" if np.all(diffs > 1e-3) else "inconclusive"
            break
        depth = min(2 * depth, cap)
    ratio_estimate = float(np.exp(np.mean(diffs))) if diffs.size else 0.0
    root_estimate = float(np.exp(log_terms[-1] / depth))
    finite = log_terms[np.isfinite(log_terms)]
    if finite.size:
        log_sum = finite.max() + math.log(float(np.sum(np.exp(finite - finite.max()))))
        partial_sum = math.exp(log_sum) if log_sum < 700 else math.inf
    else:
        partial_sum = 0.0
    return SeriesReport(verdict, log_terms, partial_sum, ratio_estimate, root_estimate)
