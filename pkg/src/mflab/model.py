"""System and reservoir-site models and Hamiltonian assembly.

The joint Hamiltonian acts on (system) x (site)^M with the system factor
first. Below the dense cutoff everything is one matrix; above it, assembly
returns a term list of site-embedded factors that supports matrix-vector
products without materializing the full operator.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ResourceLimitError, ValidationError
from .operators import (
    DENSE_CUTOFF,
    HERMITIAN_RTOL,
    Operator,
    embed_at_site,
    hermitian_defect,
    permute_factors,
)

# Krylov path upper limit on the joint dimension.
ITERATIVE_CUTOFF = 200_000

DEFAULT_FOCK_LEVELS = 8


def _require_hermitian(arr: np.ndarray, what: str) -> None:
    defect = hermitian_defect(arr)
    if defect > HERMITIAN_RTOL:
        raise ValidationError(f"{what} must be Hermitian, defect {defect:.2e}")


@dataclass(frozen=True)
class SiteModel:
    """One reservoir unit: free Hamiltonian plus its interaction operators."""

    h: Operator
    interactions: tuple[Operator, ...]
    fock_truncation: int | None = None

    def __post_init__(self):
        interactions = tuple(self.interactions)
        _require_hermitian(self.h.data, "site Hamiltonian")
        for k, v in enumerate(interactions):
            _require_hermitian(v.data, f"site interaction {k}")
            if v.dim != self.h.dim:
                raise ValidationError(
                    f"interaction {k} has dim {v.dim}, site has {self.h.dim}")
        object.__setattr__(self, "interactions", interactions)

    @property
    def dim(self) -> int:
        return self.h.dim


@dataclass(frozen=True)
class Coupling:
    """A system coupling operator tied to one site interaction.

    g acts on a single declared subsystem factor; v_index selects which of
    the site's interaction operators it multiplies.
    """

    g: Operator
    v_index: int = 0
    subsystem: int = 0


@dataclass(frozen=True)
class SystemModel:
    """System Hamiltonian data, kept per subsystem factor.

    local_h holds one Hermitian block per subsystem; the full system
    Hamiltonian is the sum of their embeddings. Keeping the local blocks
    explicit is what lets the limit dynamics factor into a product of
    per-subsystem propagators.
    """

    local_h: tuple[Operator, ...]
    couplings: tuple[Coupling, ...] = ()

    def __post_init__(self):
        local_h = tuple(self.local_h)
        couplings = tuple(self.couplings)
        if not local_h:
            raise ValidationError("need at least one subsystem block")
        for j, h in enumerate(local_h):
            _require_hermitian(h.data, f"subsystem Hamiltonian {j}")
        dims = tuple(h.dim for h in local_h)
        for k, c in enumerate(couplings):
            if not 0 <= c.subsystem < len(dims):
                raise ValidationError(
                    f"coupling {k} targets subsystem {c.subsystem}, have {len(dims)}")
            if c.g.dim != dims[c.subsystem]:
                raise ValidationError(
                    f"coupling {k} operator dim {c.g.dim} does not match "
                    f"subsystem dim {dims[c.subsystem]}; couplings must be local")
            _require_hermitian(c.g.data, f"coupling operator {k}")
        object.__setattr__(self, "local_h", local_h)
        object.__setattr__(self, "couplings", couplings)

    @classmethod
    def single(cls, h: Operator, couplings: Sequence[Coupling | tuple]) -> "SystemModel":
        fixed = []
        for c in couplings:
            if isinstance(c, Coupling):
                fixed.append(c)
            else:
                g, v_index = c
                fixed.append(Coupling(g=g, v_index=v_index, subsystem=0))
        return cls(local_h=(h,), couplings=tuple(fixed))

    @property
    def subsystem_dims(self) -> tuple[int, ...]:
        return tuple(h.dim for h in self.local_h)

    @property
    def n_subsystems(self) -> int:
        return len(self.local_h)

    @property
    def dim(self) -> int:
        return math.prod(self.subsystem_dims)

    def _embed(self, mat: np.ndarray, idx: int) -> np.ndarray:
        dims = self.subsystem_dims
        left = math.prod(dims[:idx])
        right = math.prod(dims[idx + 1:])
        return np.kron(np.kron(np.eye(left), mat), np.eye(right))

    def h_full(self) -> np.ndarray:
        out = np.zeros((self.dim, self.dim), dtype=complex)
        for j, h in enumerate(self.local_h):
            out += self._embed(h.data, j)
        return out

    @property
    def h_sys(self) -> Operator:
        return Operator(self.h_full(), self.subsystem_dims, hermitian=True)

    def coupling_full(self, c: Coupling) -> np.ndarray:
        return self._embed(c.g.data, c.subsystem)


@dataclass(frozen=True)
class ClusterInteraction:
    """A reservoir operator acting jointly on nu sites."""

    nu: int
    v_cluster: Operator

    def __post_init__(self):
        if self.nu < 1:
            raise ValidationError("cluster size must be >= 1")
        if len(self.v_cluster.dims) != self.nu:
            raise ValidationError(
                f"cluster operator has {len(self.v_cluster.dims)} factors, expected {self.nu}")
        _require_hermitian(self.v_cluster.data, "cluster interaction")


@dataclass(frozen=True)
class TermListOperator:
    """Hamiltonian stored as sum of coeff * (small factors on named axes).

    dims lists the joint tensor factors (system first). Each term carries a
    dict axis -> small matrix; absent axes act as the identity.
    """

    dims: tuple[int, ...]
    terms: tuple[tuple[float, dict[int, np.ndarray]], ...]

    @property
    def dim(self) -> int:
        return math.prod(self.dims)

    def matvec(self, vec: np.ndarray) -> np.ndarray:
        x = np.asarray(vec, dtype=complex).reshape(self.dims)
        out = np.zeros_like(x)
        for coeff, factors in self.terms:
            y = x
            for axis, mat in factors.items():
                y = np.moveaxis(np.tensordot(mat, y, axes=(1, axis)), 0, axis)
            out += coeff * y
        return out.reshape(-1)

    def expectation(self, vec: np.ndarray) -> float:
        return float(np.vdot(vec, self.matvec(vec)).real)

    def to_dense(self) -> np.ndarray:
        d = self.dim
        if d > DENSE_CUTOFF:
            raise ResourceLimitError(f"refusing to densify dimension {d}")
        out = np.zeros((d, d), dtype=complex)
        for coeff, factors in self.terms:
            blocks = [factors.get(i, np.eye(dim, dtype=complex))
                      for i, dim in enumerate(self.dims)]
            acc = blocks[0]
            for b in blocks[1:]:
                acc = np.kron(acc, b)
            out += coeff * acc
        return out


def _joint_dim(sys_dim: int, site_dim: int, m_count: int) -> int:
    return sys_dim * site_dim ** m_count


def _check_feasible(d_total: int) -> None:
    if d_total > ITERATIVE_CUTOFF:
        raise ResourceLimitError(
            f"joint dimension {d_total} beyond both dense and iterative paths")


def assemble_mean_field_interaction(g: Operator, v: Operator, m_count: int,
                                    form: str = "auto"):
    """G tensor the site average of v over m_count reservoir factors.

    Returns a dense Operator when the joint dimension fits the dense
    cutoff, otherwise a TermListOperator. form forces one representation
    ("dense" or "terms") regardless of size.
    """
    if m_count < 1:
        raise ValidationError("need at least one reservoir site")
    if len(v.dims) != 1:
        raise ValidationError("site interaction must be a single-factor operator")
    _require_hermitian(g.data, "system coupling")
    _require_hermitian(v.data, "site interaction")
    d_total = _joint_dim(g.dim, v.dims[0], m_count)
    _check_feasible(d_total)
    dense = _pick_form(form, d_total)
    if dense:
        avg = sum(embed_at_site(v, m, m_count).data for m in range(1, m_count + 1))
        data = np.kron(g.data, avg) / m_count
        return Operator(data, g.dims + (v.dims[0],) * m_count, hermitian=True)
    terms = tuple((1.0 / m_count, {0: g.data, m: v.data})
                  for m in range(1, m_count + 1))
    return TermListOperator(dims=(g.dim,) + (v.dims[0],) * m_count, terms=terms)


def _pick_form(form: str, d_total: int) -> bool:
    if form == "dense":
        if d_total > DENSE_CUTOFF:
            raise ResourceLimitError(f"dense form refused at dimension {d_total}")
        return True
    if form == "terms":
        return False
    if form != "auto":
        raise ValidationError(f"unknown assembly form {form!r}")
    return d_total <= DENSE_CUTOFF


def _total_terms(sys: SystemModel, site: SiteModel, m_count: int):
    terms = [(1.0, {0: sys.h_full()})]
    for m in range(1, m_count + 1):
        terms.append((1.0, {m: site.h.data}))
    for c in sys.couplings:
        g_full = sys.coupling_full(c)
        v = site.interactions[c.v_index]
        for m in range(1, m_count + 1):
            terms.append((1.0 / m_count, {0: g_full, m: v.data}))
    return terms


def assemble_total(sys: SystemModel, site: SiteModel, m_count: int,
                   form: str = "auto"):
    """Joint Hamiltonian: system + free sites + mean-field couplings."""
    if m_count < 1:
        raise ValidationError("need at least one reservoir site")
    for c in sys.couplings:
        if not 0 <= c.v_index < len(site.interactions):
            raise ValidationError(
                f"coupling references site interaction {c.v_index}, "
                f"site has {len(site.interactions)}")
    d_total = _joint_dim(sys.dim, site.dim, m_count)
    _check_feasible(d_total)
    if not _pick_form(form, d_total):
        flat_dims = (sys.dim,) + (site.dim,) * m_count
        return TermListOperator(dims=flat_dims, terms=tuple(_total_terms(sys, site, m_count)))
    d_r = site.dim ** m_count
    h_res = np.zeros((d_r, d_r), dtype=complex)
    for m in range(1, m_count + 1):
        h_res += embed_at_site(site.h, m, m_count).data
    out = np.kron(sys.h_full(), np.eye(d_r)) + np.kron(np.eye(sys.dim), h_res)
    for c in sys.couplings:
        v = site.interactions[c.v_index]
        v_bar = sum(embed_at_site(v, m, m_count).data
                    for m in range(1, m_count + 1)) / m_count
        out += np.kron(sys.coupling_full(c), v_bar)
    dims = sys.subsystem_dims + (site.dim,) * m_count
    return Operator(out, dims, hermitian=True)


def assemble_multisystem(sys: SystemModel, site: SiteModel, m_count: int,
                         form: str = "auto"):
    """Joint Hamiltonian for several subsystems sharing one reservoir.

    Same assembly as assemble_total; this entry point additionally insists
    that the model really is in multi-subsystem form, i.e. every coupling is
    local to a declared factor (guaranteed by SystemModel construction).
    """
    if sys.n_subsystems < 1:
        raise ValidationError("no subsystem factors declared")
    return assemble_total(sys, site, m_count, form=form)


def embed_cluster(x: Operator, sites: Sequence[int], m_count: int) -> np.ndarray:
    """Embed a multi-factor site operator at the given 1-based site positions."""
    nu = len(x.dims)
    sites = list(sites)
    if len(set(sites)) != nu:
        raise ValidationError(f"cluster positions {sites} contain repeats")
    if any(not 1 <= s <= m_count for s in sites):
        raise ValidationError(f"cluster positions {sites} outside 1..{m_count}")
    d = x.dims[0]
    rest = np.eye(d ** (m_count - nu), dtype=complex)
    big = np.kron(x.data, rest)
    # input factor order: cluster factors first, then identity fillers
    remaining = iter(range(nu, m_count))
    perm = []
    for s in range(1, m_count + 1):
        if s in sites:
            perm.append(sites.index(s))
        else:
            perm.append(next(remaining))
    out, _ = permute_factors(big, (d,) * m_count, perm)
    return out


def assemble_cluster_interaction(g: Operator, cluster: ClusterInteraction,
                                 m_count: int) -> Operator:
    """G tensor the average of the cluster operator over all ordered site subsets."""
    nu = cluster.nu
    if nu > m_count:
        raise ValidationError(f"cluster size {nu} exceeds site count {m_count}")
    d = cluster.v_cluster.dims[0]
    d_total = _joint_dim(g.dim, d, m_count)
    if d_total > DENSE_CUTOFF:
        raise ResourceLimitError(
            f"cluster assembly is dense only; dimension {d_total} > {DENSE_CUTOFF}")
    d_r = d ** m_count
    acc = np.zeros((d_r, d_r), dtype=complex)
    count = 0
    for subset in itertools.combinations(range(1, m_count + 1), nu):
        acc += embed_cluster(cluster.v_cluster, subset, m_count)
        count += 1
    acc /= count
    data = np.kron(g.data, acc)
    return Operator(data, g.dims + (d,) * m_count, hermitian=True)


# Truncated bosonic mode helpers.

def destroy(n_levels: int) -> Operator:
    data = np.diag(np.sqrt(np.arange(1, n_levels, dtype=float)), 1).astype(complex)
    return Operator(data, (n_levels,))


def create(n_levels: int) -> Operator:
    return destroy(n_levels).dagger()


def number_op(n_levels: int) -> Operator:
    return Operator(np.diag(np.arange(n_levels, dtype=float)).astype(complex),
                    (n_levels,), hermitian=True)


def field_op(n_levels: int) -> Operator:
    """(a + a†)/sqrt(2) on the truncated number basis."""
    a = destroy(n_levels).data
    return Operator((a + a.conj().T) / np.sqrt(2), (n_levels,), hermitian=True)


def coherent_ket(alpha: complex, n_levels: int) -> np.ndarray:
    """Truncated coherent state, renormalized on the kept levels."""
    n = np.arange(n_levels)
    log_fact = np.cumsum(np.log(np.maximum(n, 1)))
    amps = np.exp(n * np.log(complex(alpha)) - 0.5 * log_fact) if alpha != 0 \
        else np.eye(n_levels, dtype=complex)[:, 0]
    vec = np.asarray(amps, dtype=complex)
    return vec / np.linalg.norm(vec)


def oscillator_site(n_levels: int = DEFAULT_FOCK_LEVELS, omega: float = 1.0,
                    interaction: str = "field", nu: float = 1.0) -> SiteModel:
    """Truncated oscillator site with a field or number-conserving interaction."""
    h = Operator(omega * number_op(n_levels).data, (n_levels,), hermitian=True)
    if interaction == "field":
        v = field_op(n_levels)
    elif interaction == "number":
        v = Operator(nu * number_op(n_levels).data, (n_levels,), hermitian=True)
    else:
        raise ValidationError(f"unknown oscillator interaction {interaction!r}")
    return SiteModel(h=h, interactions=(v,), fock_truncation=n_levels)


def fock_truncation_check(value_fn: Callable[[int], float], n_levels: int,
                          tol: float = 1e-6):
    """Compare an observable at n_levels and 2*n_levels.

    Returns (converged, change). The doubling criterion is the documented
    adequacy test for truncated-oscillator models.
    """
    base = value_fn(n_levels)
    doubled = value_fn(2 * n_levels)
    change = abs(doubled - base)
    return change < tol, change
