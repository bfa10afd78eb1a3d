"""Power-flow mappings, analytic Jacobians, and the two-instant coupled system.

States are rectangular voltage vectors v = [vr; vi]. Injections follow the
generator convention p + jq = diag(v) Y* v*, so loads show up as negative
injections. All Jacobians returned here are true derivatives and match
central finite differences; at the flat profile they reduce to

    Jm = [2I | 0],   Jq = [-B | -G],   Jp = [G | -B]

using G1 = B1 = 0.

Two assemblies of the coupled two-state system are provided:

* ``analysis``: square (M = O) with one reference-angle anchor row per state
  (residual entry v_i0, derivative a unit row) and the substation magnitude
  rows; this is the matrix used for rank and condition-number studies.
* ``reduced``: drops the two anchor rows and the two v_i0 columns; Newton
  iterates on this square system with v_i0 = 0 enforced by parameterization.

Row order inside each assembly: time-t block (anchor, |V|^2 over S+M, q over
C+M, p over C+M), coupling block (p over O, then q over O), time-t' block.
Buses are sorted ascending within every class set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gridmodel import AdmittanceMatrix, Grid


@dataclass
class State:
    """Rectangular voltage state [vr; vi], arrays of length N+1."""

    vr: np.ndarray
    vi: np.ndarray

    def __post_init__(self):
        self.vr = np.asarray(self.vr, dtype=float)
        self.vi = np.asarray(self.vi, dtype=float)
        if self.vr.shape != self.vi.shape or self.vr.ndim != 1:
            raise ValueError("vr and vi must be 1-d arrays of equal length")
        if not (np.isfinite(self.vr).all() and np.isfinite(self.vi).all()):
            raise ValueError("state entries must be finite")

    @property
    def n_bus(self) -> int:
        return self.vr.size

    def to_complex(self) -> np.ndarray:
        return self.vr + 1j * self.vi

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.vr, self.vi])

    @classmethod
    def from_complex(cls, u) -> "State":
        u = np.asarray(u, dtype=complex)
        return cls(u.real.copy(), u.imag.copy())

    @classmethod
    def from_vector(cls, x) -> "State":
        x = np.asarray(x, dtype=float)
        half = x.size // 2
        return cls(x[:half].copy(), x[half:].copy())

    @classmethod
    def flat(cls, n_bus: int) -> "State":
        return cls(np.ones(n_bus), np.zeros(n_bus))

    def copy(self) -> "State":
        return State(self.vr.copy(), self.vi.copy())


@dataclass
class SpecificationSet:
    """Specified (hatted) values for one time instant.

    vmag2 holds squared voltage magnitudes keyed by bus for S+M; p and q hold
    injections keyed by bus for C+M.
    """

    vmag2: dict[int, float]
    p: dict[int, float]
    q: dict[int, float]

    def validate_against(self, grid: Grid):
        sm = set(grid.buses_of_class("S")) | set(grid.metered)
        cm = set(grid.conventional) | set(grid.metered)
        if set(self.vmag2) != sm:
            raise ValueError(
                f"vmag2 keys {sorted(self.vmag2)} do not match S+M {sorted(sm)}"
            )
        if set(self.p) != cm or set(self.q) != cm:
            raise ValueError("p/q keys do not match the C+M bus set")
        if any(val <= 0 for val in self.vmag2.values()):
            raise ValueError("squared voltage magnitudes must be positive")


@dataclass
class CoupledSpec:
    """Specification sets at two consecutive instants over the same grid."""

    grid: Grid
    t0: SpecificationSet
    t1: SpecificationSet

    def __post_init__(self):
        self.t0.validate_against(self.grid)
        self.t1.validate_against(self.grid)


def vmag2(state: State, n: int) -> float:
    """Squared voltage magnitude vr_n^2 + vi_n^2 at bus n."""
    if not 0 <= n < state.n_bus:
        raise IndexError(f"bus {n} out of range")
    return float(state.vr[n] ** 2 + state.vi[n] ** 2)


def vmag2_all(state: State) -> np.ndarray:
    return state.vr**2 + state.vi**2


def injections(state: State, Y: AdmittanceMatrix):
    """Active/reactive injections p + jq = diag(v) Y* v* at every bus."""
    if Y.n_bus != state.n_bus:
        raise ValueError("state and admittance dimensions differ")
    v = state.to_complex()
    s = v * np.conj(Y.Y @ v)
    return s.real, s.imag


def jacobians(state: State, Y: AdmittanceMatrix):
    """Jacobians (Jm, Jq, Jp) of the magnitude/injection mappings w.r.t.
    [vr; vi], each of shape (N+1) x 2(N+1)."""
    if Y.n_bus != state.n_bus:
        raise ValueError("state and admittance dimensions differ")
    G, B = Y.G, Y.B
    vr, vi = state.vr, state.vi
    a = G @ vr - B @ vi  # Re(Y v)
    c = G @ vi + B @ vr  # Im(Y v)
    dvr, dvi = np.diag(vr), np.diag(vi)
    Jm = np.hstack([2.0 * dvr, 2.0 * dvi])
    Jp = np.hstack(
        [dvr @ G + dvi @ B + np.diag(a), -dvr @ B + dvi @ G + np.diag(c)]
    )
    Jq = np.hstack(
        [dvi @ G - dvr @ B - np.diag(c), -dvi @ B - dvr @ G + np.diag(a)]
    )
    return Jm, Jq, Jp


# --------------------------------------------------------------------------
# coupled two-state system
# --------------------------------------------------------------------------

FORMS = ("analysis", "reduced")


@dataclass(frozen=True)
class RowLayout:
    """Row/column bookkeeping for one assembly of the coupled system."""

    form: str
    sm: tuple[int, ...]  # S+M ascending
    cm: tuple[int, ...]  # C+M ascending
    o: tuple[int, ...]  # O ascending
    n_bus: int
    labels: tuple = field(repr=False, default=())

    @property
    def rows_per_time(self) -> int:
        base = len(self.sm) + 2 * len(self.cm)
        return base + (1 if self.form == "analysis" else 0)

    @property
    def n_rows(self) -> int:
        return 2 * self.rows_per_time + 2 * len(self.o)

    @property
    def cols_per_state(self) -> int:
        return 2 * self.n_bus - (0 if self.form == "analysis" else 1)

    @property
    def n_cols(self) -> int:
        return 2 * self.cols_per_state

    @property
    def coupling_row_start(self) -> int:
        return self.rows_per_time

    def row_cut(self) -> int:
        """First row of the J_C/J_D half: the q-coupling block."""
        return self.rows_per_time + len(self.o)


def row_layout(grid: Grid, form: str = "analysis") -> RowLayout:
    if form not in FORMS:
        raise ValueError(f"unknown assembly form {form!r}")
    sm = tuple(sorted(set(grid.buses_of_class("S")) | set(grid.metered)))
    cm = tuple(sorted(set(grid.conventional) | set(grid.metered)))
    o = tuple(sorted(grid.nonmetered))
    labels = []
    per_time = lambda t: (
        ([("anchor", 0, t)] if form == "analysis" else [])
        + [("vmag2", n, t) for n in sm]
        + [("q", n, t) for n in cm]
        + [("p", n, t) for n in cm]
    )
    labels += per_time(0)
    labels += [("p_couple", n, None) for n in o]
    labels += [("q_couple", n, None) for n in o]
    labels += per_time(1)
    return RowLayout(
        form=form, sm=sm, cm=cm, o=o, n_bus=grid.n_bus, labels=tuple(labels)
    )


def _time_block_residual(state, Y, spec, layout):
    p, q = injections(state, Y)
    m = vmag2_all(state)
    parts = []
    if layout.form == "analysis":
        parts.append([state.vi[0]])
    parts.append([m[n] - spec.vmag2[n] for n in layout.sm])
    parts.append([q[n] - spec.q[n] for n in layout.cm])
    parts.append([p[n] - spec.p[n] for n in layout.cm])
    return np.concatenate([np.asarray(x, dtype=float) for x in parts])


def coupled_residual(
    v: State, v1: State, spec: CoupledSpec, form: str = "analysis"
) -> np.ndarray:
    """Stacked residual of the coupled power-flow equations.

    Zero exactly when (v, v1) satisfy both instants' specifications and the
    non-metered injections agree between instants. In the analysis form the
    length is 4N + 4 when M = O.
    """
    grid = spec.grid
    from .gridmodel import build_admittance

    Y = build_admittance(grid)
    layout = row_layout(grid, form)
    p0, q0 = injections(v, Y)
    p1, q1 = injections(v1, Y)
    o = list(layout.o)
    return np.concatenate(
        [
            _time_block_residual(v, Y, spec.t0, layout),
            p0[o] - p1[o],
            q0[o] - q1[o],
            _time_block_residual(v1, Y, spec.t1, layout),
        ]
    )


def _state_columns(layout):
    """Column indices of [vr; vi] kept in this form (reduced drops vi_0)."""
    n = layout.n_bus
    if layout.form == "analysis":
        return np.arange(2 * n)
    return np.concatenate([np.arange(n), np.arange(n + 1, 2 * n)])


def _time_block_jacobian(state, Y, layout):
    Jm, Jq, Jp = jacobians(state, Y)
    cols = _state_columns(layout)
    rows = []
    if layout.form == "analysis":
        anchor = np.zeros((1, 2 * layout.n_bus))
        anchor[0, layout.n_bus] = 1.0  # d(v_i0)/dv
        rows.append(anchor)
    rows.append(Jm[list(layout.sm), :])
    rows.append(Jq[list(layout.cm), :])
    rows.append(Jp[list(layout.cm), :])
    return np.vstack(rows)[:, cols]


def coupled_jacobian(
    v: State, v1: State, grid: Grid, form: str = "analysis"
) -> np.ndarray:
    """Jacobian of ``coupled_residual`` w.r.t. the stacked state
    [vr; vi; vr'; vi'] (analysis) or its v_i0-eliminated version (reduced)."""
    from .gridmodel import build_admittance

    Y = build_admittance(grid)
    layout = row_layout(grid, form)
    cols = _state_columns(layout)
    o = list(layout.o)

    blk_t0 = _time_block_jacobian(v, Y, layout)
    blk_t1 = _time_block_jacobian(v1, Y, layout)
    _, Jq0, Jp0 = jacobians(v, Y)
    _, Jq1, Jp1 = jacobians(v1, Y)

    ncs = layout.cols_per_state
    J = np.zeros((layout.n_rows, 2 * ncs))
    r = 0
    J[r : r + blk_t0.shape[0], :ncs] = blk_t0
    r += blk_t0.shape[0]
    J[r : r + len(o), :ncs] = Jp0[o][:, cols]
    J[r : r + len(o), ncs:] = -Jp1[o][:, cols]
    r += len(o)
    J[r : r + len(o), :ncs] = Jq0[o][:, cols]
    J[r : r + len(o), ncs:] = -Jq1[o][:, cols]
    r += len(o)
    J[r:, ncs:] = blk_t1
    return J


def partition_coupled_jacobian(J: np.ndarray, grid: Grid, form: str = "analysis"):
    """Split J(v, v') into (J_A, J_B, J_C, J_D): the row cut falls between the
    p-coupling and q-coupling blocks, the column cut between the states."""
    layout = row_layout(grid, form)
    rcut = layout.row_cut()
    ccut = layout.cols_per_state
    return (J[:rcut, :ccut], J[:rcut, ccut:], J[rcut:, :ccut], J[rcut:, ccut:])


def spec_from_states(grid: Grid, v: State, v1: State) -> CoupledSpec:
    """Forward-generate a coupled specification from a ground-truth state
    pair. The pair must have equal injections on the O buses for the coupling
    equations to hold; this is not checked here."""
    from .gridmodel import build_admittance

    Y = build_admittance(grid)
    sm = sorted(set(grid.buses_of_class("S")) | set(grid.metered))
    cm = sorted(set(grid.conventional) | set(grid.metered))
    sets = []
    for st in (v, v1):
        p, q = injections(st, Y)
        m = vmag2_all(st)
        sets.append(
            SpecificationSet(
                vmag2={n: float(m[n]) for n in sm},
                p={n: float(p[n]) for n in cm},
                q={n: float(q[n]) for n in cm},
            )
        )
    return CoupledSpec(grid=grid, t0=sets[0], t1=sets[1])
