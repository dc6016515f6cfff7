"""Metrics, convergence sweeps, spectral studies, and overlap decay.

Entanglement is measured by negativity (general bipartitions) with the
two-qubit concurrence closed form as a cross-check. Convergence sweeps
tabulate the gap between finite-size and limit trajectories over a list of
reservoir sizes. The spectral half supplies a second-order finite-difference
bound-state counter with a grid-doubling guard, a Richardson-extrapolated
half-line solver for a linear-slope potential, and an oscillatory radial
overlap integral evaluated by Filon-type quadrature.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh_tridiagonal

from .errors import QuadratureError, ToleranceError, ValidationError
from .exact import FiniteMRun, propagate_exact
from .effective import (EffectivePotential, QuasiPeriodicSignal, evolve_state,
                        effective_trajectory, propagate_effective)
from .matio import atomic_write_text
from .model import (ClusterInteraction, SiteModel, SystemModel,
                    assemble_cluster_interaction)
from .operators import DensityMatrix, embed_at_site, trace_norm
from .reservoir import ProductState, reference_site_state, site_signal_terms
from .results import PropagationResult


def trace_distance(rho, sigma) -> float:
    """Half the trace norm of the difference; a metric on density matrices."""
    a = rho.data if isinstance(rho, DensityMatrix) else np.asarray(rho, dtype=complex)
    b = sigma.data if isinstance(sigma, DensityMatrix) else np.asarray(sigma, dtype=complex)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch {a.shape} vs {b.shape}")
    return 0.5 * trace_norm(a - b)


def _normalize_split(dims: tuple[int, ...], transpose) -> tuple[int, ...]:
    if isinstance(transpose, (int, np.integer)):
        transpose = (int(transpose),)
    split = tuple(int(i) for i in transpose)
    if len(dims) < 2:
        raise ValidationError("negativity needs at least two declared factors")
    if not split:
        raise ValidationError("empty transpose subset does not define a split")
    if len(set(split)) != len(split):
        raise ValidationError(f"transpose subset {split} has repeats")
    if any(not 0 <= i < len(dims) for i in split):
        raise ValidationError(
            f"transpose subset {split} outside factors 0..{len(dims) - 1}")
    if len(split) == len(dims):
        raise ValidationError(
            "transposing every factor is the full transpose, not a split")
    return split


def partial_transpose(rho: DensityMatrix, transpose) -> np.ndarray:
    split = _normalize_split(rho.dims, transpose)
    k = len(rho.dims)
    tensor = rho.data.reshape(rho.dims + rho.dims)
    perm = list(range(2 * k))
    for i in split:
        perm[i], perm[k + i] = perm[k + i], perm[i]
    d = rho.dim
    return tensor.transpose(perm).reshape(d, d)


def negativity(rho: DensityMatrix, transpose) -> float:
    """Sum of |negative eigenvalues| of the partial transpose.

    transpose names the factor indices flipped; together with the rest they
    define the bipartition. Invariant under unitaries local to either side.
    """
    ev = np.linalg.eigvalsh(partial_transpose(rho, transpose))
    return float(-ev[ev < 0].sum())


_SPIN_FLIP = np.array([[0, 0, 0, -1],
                       [0, 0, 1, 0],
                       [0, 1, 0, 0],
                       [-1, 0, 0, 0]], dtype=complex)


def concurrence(rho: DensityMatrix) -> float:
    """Two-qubit closed form: max(0, l1 - l2 - l3 - l4) with li the sorted
    square roots of the spin-flipped product's eigenvalues."""
    if rho.dims != (2, 2):
        raise ValidationError(
            f"concurrence is a two-qubit closed form, got factors {rho.dims}")
    flipped = _SPIN_FLIP @ rho.data.conj() @ _SPIN_FLIP
    lam = np.linalg.eigvals(rho.data @ flipped)
    roots = np.sqrt(np.clip(lam.real, 0.0, None))
    roots[::-1].sort()
    return float(max(0.0, roots[0] - roots[1:].sum()))


@dataclass(frozen=True)
class SweepRow:
    m_count: int
    gap: float
    ratio: float


def m_sweep(sys: SystemModel, site: SiteModel, reservoir_state,
            rho0: DensityMatrix, grid, m_list, threads: int = 1,
            step_target: float = 1e-7) -> list[SweepRow]:
    """Convergence table: per reservoir size, the max-over-grid trace
    distance to the limit trajectory, plus the ratio to the previous row."""
    m_list = [int(m) for m in m_list]
    if not m_list:
        raise ValidationError("M list is empty")
    if any(m < 1 for m in m_list):
        raise ValidationError("M list entries must be positive")
    if any(a >= b for a, b in zip(m_list, m_list[1:])):
        raise ValidationError("M list must be strictly increasing")
    if threads < 1:
        raise ValidationError("threads must be >= 1")
    grid = np.asarray(grid, dtype=float)
    limit = effective_trajectory(sys, reservoir_state, site, rho0, grid,
                                 step_target=step_target)

    def gap_for(m: int) -> float:
        run = FiniteMRun(sys, site, m, reservoir_state, rho0, grid)
        finite = propagate_exact(run)
        return max(trace_distance(a, b)
                   for a, b in zip(finite.states, limit.states))

    if threads == 1:
        gaps = [gap_for(m) for m in m_list]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            gaps = list(pool.map(gap_for, m_list))
    rows = []
    prev = None
    for m, g in zip(m_list, gaps):
        ratio = math.nan if prev is None else g / prev
        rows.append(SweepRow(m_count=m, gap=float(g), ratio=float(ratio)))
        prev = g
    return rows


def negativity_trajectory(result: PropagationResult, transpose) -> np.ndarray:
    return np.array([negativity(s, transpose) for s in result.states])


def cluster_sweep(sys: SystemModel, site: SiteModel, cluster: ClusterInteraction,
                  reservoir_state, rho0: DensityMatrix, grid, m_list,
                  step_target: float = 1e-7) -> list[SweepRow]:
    """Convergence table when the coupling averages a joint operator over
    every ordered subset of cluster.nu reservoir sites.

    The limit signal is the free-evolution expectation of the cluster
    operator in nu reference factors; the finite-size joint model is dense
    only, so keep the size list small.
    """
    m_list = [int(m) for m in m_list]
    if not m_list:
        raise ValidationError("M list is empty")
    if any(m < cluster.nu for m in m_list):
        raise ValidationError(
            f"M list entries must be at least the cluster size {cluster.nu}")
    if any(a >= b for a, b in zip(m_list, m_list[1:])):
        raise ValidationError("M list must be strictly increasing")
    if sys.n_subsystems != 1 or len(sys.couplings) != 1:
        raise ValidationError(
            "cluster sweep needs a single subsystem with one coupling")
    if not isinstance(reservoir_state, ProductState):
        raise ValidationError("cluster sweep needs a product ensemble")
    grid = np.asarray(grid, dtype=float)
    d = site.dim
    if cluster.v_cluster.dims != (d,) * cluster.nu:
        raise ValidationError(
            f"cluster operator dims {cluster.v_cluster.dims} do not match "
            f"{cluster.nu} site factors of dim {d}")
    omega = reference_site_state(reservoir_state).data

    nu = cluster.nu
    h_block = sum(embed_at_site(site.h, j, nu).data for j in range(1, nu + 1))
    rho_block = omega
    for _ in range(nu - 1):
        rho_block = np.kron(rho_block, omega)
    freqs, coeffs = site_signal_terms(rho_block, h_block, cluster.v_cluster.data)
    potential = EffectivePotential((QuasiPeriodicSignal(freqs, coeffs),))
    limit = evolve_state(propagate_effective(sys, potential, grid,
                                             step_target=step_target), rho0)

    ds = sys.dim
    g = sys.couplings[0].g

    def gap_for(m: int) -> float:
        d_res = d ** m
        h = assemble_cluster_interaction(g, cluster, m).data.copy()
        h += np.kron(sys.h_full(), np.eye(d_res))
        h_res = sum(embed_at_site(site.h, j, m).data for j in range(1, m + 1))
        h += np.kron(np.eye(ds), h_res)
        rho_r = omega
        for _ in range(m - 1):
            rho_r = np.kron(rho_r, omega)
        evals, vecs = np.linalg.eigh(h)
        rho_e = vecs.conj().T @ np.kron(rho0.data, rho_r) @ vecs
        worst = 0.0
        for t, ref in zip(grid, limit.states):
            phase = np.exp(-1j * evals * t)
            rho_t = vecs @ (phase[:, None] * rho_e * phase.conj()[None, :]) @ vecs.conj().T
            reduced = np.einsum("irkr->ik", rho_t.reshape(ds, d_res, ds, d_res))
            worst = max(worst, trace_distance(reduced, ref.data))
        return worst

    rows = []
    prev = None
    for m in m_list:
        gap = gap_for(m)
        ratio = math.nan if prev is None else gap / prev
        rows.append(SweepRow(m_count=m, gap=float(gap), ratio=float(ratio)))
        prev = gap
    return rows


# Finite-difference spectral studies on an interval.

@dataclass(frozen=True)
class SpectralProblem:
    """Dirichlet second-derivative operator plus a potential on an interval.

    half_line selects [0, x_max]; otherwise the domain is [-x_max, x_max].
    potential must be a vectorized real-valued callable.
    """

    x_max: float
    potential: object
    n_grid: int = 400
    half_line: bool = False

    def __post_init__(self):
        if self.x_max <= 0:
            raise ValidationError("x_max must be positive")
        if self.n_grid < 64:
            raise ValidationError("grid size must be at least 64")
        if not callable(self.potential):
            raise ValidationError("potential must be callable")

    def grid_points(self, n: int | None = None) -> tuple[np.ndarray, float]:
        n = self.n_grid if n is None else n
        lo = 0.0 if self.half_line else -self.x_max
        h = (self.x_max - lo) / (n + 1)
        return lo + h * np.arange(1, n + 1), h

    def sample_potential(self, x: np.ndarray) -> np.ndarray:
        w = np.asarray(self.potential(x))
        if np.iscomplexobj(w):
            if np.max(np.abs(w.imag)) > 0:
                raise ValidationError("potential samples must be real")
            w = w.real
        if w.shape != x.shape:
            raise ValidationError(
                f"potential returned shape {w.shape} for grid {x.shape}")
        if not np.all(np.isfinite(w)):
            raise ValidationError("potential samples must be finite")
        return w.astype(float)


def _eigs_below(problem: SpectralProblem, n: int, threshold) -> tuple[np.ndarray, float]:
    x, h = problem.grid_points(n)
    w = problem.sample_potential(x)
    # essential-spectrum proxy: the potential floor on the outer quarter of
    # the domain, where a localized state would have decayed
    outer = np.abs(x) > 0.75 * problem.x_max if not problem.half_line \
        else x > 0.75 * problem.x_max
    proxy = float(w[outer].min())
    cut = proxy if threshold is None else float(threshold)
    diag = 2.0 / h ** 2 + w
    off = np.full(n - 1, -1.0 / h ** 2)
    ev = eigh_tridiagonal(diag, off, select="v",
                          select_range=(float(w.min()) - 1.0, cut),
                          eigvals_only=True)
    return ev, cut


def bound_state_count(problem: SpectralProblem,
                      threshold=None) -> tuple[int, np.ndarray]:
    """Eigenvalues below the essential-spectrum proxy (or an explicit
    threshold), counted by second-order finite differences.

    The count must agree between the declared grid and the nested grid with
    halved spacing (2n+1 interior points); the finer eigenvalues are
    returned.
    """
    coarse, _ = _eigs_below(problem, problem.n_grid, threshold)
    fine, cut = _eigs_below(problem, 2 * problem.n_grid + 1, threshold)
    if len(coarse) != len(fine):
        raise ToleranceError(
            f"bound-state count changed from {len(coarse)} to {len(fine)} "
            f"under grid doubling; resolution insufficient")
    return len(fine), fine


def stark_halfline_spectrum(slope: float, n_levels: int,
                            n_grid: int = 1600,
                            rel_tol: float = 1e-4) -> np.ndarray:
    """Lowest eigenvalues of the Dirichlet half-line operator with a linear
    potential, by finite differences with one Richardson extrapolation step.

    The domain length scales with slope**(-1/3) so the requested levels sit
    well inside their classical turning points.
    """
    if slope <= 0:
        raise ValidationError("slope must be positive")
    if n_levels < 1:
        raise ValidationError("need at least one level")
    if n_grid < 64:
        raise ValidationError("grid size must be at least 64")
    x_max = ((3.0 * np.pi * (4 * n_levels + 5) / 8.0) ** (2.0 / 3.0) + 8.0) \
        * slope ** (-1.0 / 3.0)

    def levels(n: int) -> np.ndarray:
        h = x_max / (n + 1)
        x = h * np.arange(1, n + 1)
        return eigh_tridiagonal(2.0 / h ** 2 + slope * x,
                                np.full(n - 1, -1.0 / h ** 2),
                                select="i", select_range=(0, n_levels - 1),
                                eigvals_only=True)

    # nested refinements halve the spacing exactly, n -> 2n+1
    e1, e2, e3 = levels(n_grid), levels(2 * n_grid + 1), levels(4 * n_grid + 3)
    r1 = (4.0 * e2 - e1) / 3.0
    r2 = (4.0 * e3 - e2) / 3.0
    drift = np.max(np.abs(r2 - r1) / np.abs(r2))
    if drift > rel_tol:
        raise ToleranceError(
            f"Richardson extrapolants moved by {drift:.2e} > {rel_tol}; "
            f"spectrum not converged")
    return r2


# Oscillatory radial overlap.

@dataclass(frozen=True)
class FieldOverlapSpec:
    """Radial data for the one-excitation overlap integral.

    f_prime and h_prime are the radial profile callables; the linear
    dispersion in three dimensions reduces the overlap to
    int_0^r_max r^2 conj(h'(r)) f'(r) e^{irt} dr.
    """

    f_prime: object
    h_prime: object
    r_max: float
    base_panels: int = 64

    def __post_init__(self):
        if not (callable(self.f_prime) and callable(self.h_prime)):
            raise ValidationError("profiles must be callable")
        if self.r_max <= 0:
            raise ValidationError("r_max must be positive")
        if self.base_panels < 8:
            raise ValidationError("need at least 8 base panels")
        r = np.linspace(0.0, self.r_max, 257)
        for name, prof in (("f_prime", self.f_prime), ("h_prime", self.h_prime)):
            vals = np.asarray(prof(r), dtype=complex)
            if vals.shape != r.shape or not np.all(np.isfinite(vals)):
                raise ValidationError(f"{name} must be finite on the grid")
            if not np.isfinite(np.trapezoid(np.abs(vals) ** 2 * r * r, r)):
                raise ValidationError(f"{name} has no finite discrete norm")

    def amplitude(self, r: np.ndarray) -> np.ndarray:
        return r * r * np.conj(np.asarray(self.h_prime(r), dtype=complex)) \
            * np.asarray(self.f_prime(r), dtype=complex)


def _filon_moments(theta: np.ndarray):
    """m_k = int_{-1}^{1} s^k e^{i theta s} ds for the quadratic basis."""
    m0 = np.empty(theta.shape, dtype=complex)
    m1 = np.empty(theta.shape, dtype=complex)
    m2 = np.empty(theta.shape, dtype=complex)
    small = np.abs(theta) < 0.1
    ts = theta[small]
    t2 = ts * ts
    # series keep the relative truncation error below 1e-12 at the switch
    m0[small] = 2.0 * (1.0 - t2 / 6.0 + t2 * t2 / 120.0 - t2 * t2 * t2 / 5040.0)
    m1[small] = 2.0j * ts * (1.0 / 3.0 - t2 / 30.0 + t2 * t2 / 840.0)
    m2[small] = 2.0 * (1.0 / 3.0 - t2 / 10.0 + t2 * t2 / 168.0
                       - t2 * t2 * t2 / 6480.0)
    tb = theta[~small]
    s, c = np.sin(tb), np.cos(tb)
    m0[~small] = 2.0 * s / tb
    m1[~small] = 2.0j * (s / tb ** 2 - c / tb)
    m2[~small] = 2.0 * ((tb ** 2 - 2.0) * s / tb ** 3 + 2.0 * c / tb ** 2)
    return m0, m1, m2


def _filon_sum(spec: FieldOverlapSpec, t: float, n_panels: int) -> complex:
    edges = np.linspace(0.0, spec.r_max, n_panels + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    half = 0.5 * (edges[1:] - edges[:-1])
    g0 = spec.amplitude(edges[:-1])
    g1 = spec.amplitude(centers)
    g2 = spec.amplitude(edges[1:])
    m0, m1, m2 = _filon_moments(t * half)
    panel = half * np.exp(1j * t * centers) * (
        g0 * (m2 - m1) / 2.0 + g1 * (m0 - m2) + g2 * (m2 + m1) / 2.0)
    return complex(panel.sum())


def field_overlap_decay(spec: FieldOverlapSpec, times,
                        tol: float = 1e-7,
                        max_panels: int = 16384) -> np.ndarray:
    """Squared modulus of the oscillatory radial overlap on a time grid.

    Each time doubles its panel count until successive Filon sums agree to
    tol on the complex amplitude; the starting count grows with t so the
    oscillation stays resolved.
    """
    times = np.atleast_1d(np.asarray(times, dtype=float))
    out = np.empty(times.shape, dtype=float)
    for i, t in enumerate(times):
        n = max(spec.base_panels,
                int(np.ceil(abs(t) * spec.r_max / 3.0)))
        prev = _filon_sum(spec, t, n)
        while True:
            n *= 2
            cur = _filon_sum(spec, t, n)
            if abs(cur - prev) <= tol:
                break
            if n >= max_panels:
                raise QuadratureError(
                    f"overlap quadrature still moving {abs(cur - prev):.2e} "
                    f"> {tol} at {n} panels (t={t:g})")
            prev = cur
        out[i] = abs(cur) ** 2
    return out


def summary_report(entries, extra: dict | None = None) -> dict:
    """Pass/fail report structure: entries are (name, passed, detail)."""
    criteria = [{"name": str(n), "passed": bool(p), "detail": str(d)}
                for n, p, d in entries]
    doc = {
        "criteria": criteria,
        "n_passed": sum(c["passed"] for c in criteria),
        "n_failed": sum(not c["passed"] for c in criteria),
    }
    if extra:
        doc.update(extra)
    return doc


def write_summary(path, entries, extra: dict | None = None) -> dict:
    doc = summary_report(entries, extra)
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc
