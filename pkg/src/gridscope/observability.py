"""Structural observability analysis for radial feeders.

The placement rule: the coupled two-instant system is generically invertible
exactly when the non-metered buses can be paired to metered buses through
vertex-disjoint paths that avoid the substation. The check reduces to a
max-flow problem on a node-split copy of the substation-removed tree and runs
in O(paths * edges) with BFS augmentation (unit capacities).

Generic (structural) rank of a sparsity pattern is certified two ways: a
randomized fill + SVD rank, cross-checked against maximum bipartite matching
for square patterns. The flat-profile reduction of the single-state Jacobian
is also built explicitly so its rank can be compared against the path count.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import maximum_bipartite_matching

from .gridmodel import Grid, NotRadialError, incidence_matrix, line_conductances, line_susceptances
from .pfmodel import State, coupled_jacobian, row_layout

# singular values below RANK_RTOL * sigma_max do not count towards numeric rank
RANK_RTOL = 1e-8


class GenericRankError(RuntimeError):
    """Randomized numeric rank kept disagreeing with bipartite matching."""


@dataclass(frozen=True)
class PatternMatrix:
    """A sparsity pattern, optionally with values living on it."""

    dims: tuple[int, int]
    nonzeros: frozenset
    values: np.ndarray = field(default=None, compare=False)

    def __post_init__(self):
        rows, cols = self.dims
        for r, c in self.nonzeros:
            if not (0 <= r < rows and 0 <= c < cols):
                raise ValueError(f"nonzero ({r}, {c}) outside {self.dims}")
        if self.values is not None:
            vals = np.asarray(self.values, dtype=float)
            if vals.shape != self.dims:
                raise ValueError("values shape does not match dims")
            mask = np.zeros(self.dims, dtype=bool)
            for r, c in self.nonzeros:
                mask[r, c] = True
            if np.any(vals[~mask] != 0.0):
                raise ValueError("values must vanish off the pattern")

    @classmethod
    def from_matrix(cls, M, keep_values: bool = True) -> "PatternMatrix":
        M = np.asarray(M, dtype=float)
        nz = frozenset(zip(*np.nonzero(M)))
        return cls(dims=M.shape, nonzeros=nz, values=M if keep_values else None)

    def indicator(self) -> np.ndarray:
        out = np.zeros(self.dims)
        for r, c in self.nonzeros:
            out[r, c] = 1.0
        return out


@dataclass
class ObservabilityReport:
    counting_single_ok: bool
    counting_coupled_ok: bool
    max_disjoint_paths: int
    criterion_satisfied: bool
    witness_paths: list[list[int]]

    def to_dict(self) -> dict:
        return {
            "counting_single_ok": self.counting_single_ok,
            "counting_coupled_ok": self.counting_coupled_ok,
            "max_disjoint_paths": self.max_disjoint_paths,
            "criterion_satisfied": self.criterion_satisfied,
            "witness_paths": [list(p) for p in self.witness_paths],
        }


def counting_conditions(grid: Grid):
    """(single, coupled) equation-counting feasibility flags: the single
    instant needs M >= 2O, the coupled pair only M >= O."""
    m, o = len(grid.metered), len(grid.nonmetered)
    return m >= 2 * o, m >= o


# --------------------------------------------------------------------------
# vertex-disjoint paths via node-split max-flow (Edmonds-Karp)
# --------------------------------------------------------------------------


class _FlowNet:
    """Adjacency-list residual network; edges are [head, cap, back, orig]."""

    def __init__(self, n_nodes):
        self.adj = [[] for _ in range(n_nodes)]

    def add_edge(self, u, v, cap=1):
        self.adj[u].append([v, cap, len(self.adj[v]), cap])
        self.adj[v].append([u, 0, len(self.adj[u]) - 1, 0])

    def bfs_augment(self, s, t):
        prev = {s: None}
        queue = deque([s])
        while queue:
            u = queue.popleft()
            if u == t:
                break
            for ei, (v, cap, _back, _orig) in enumerate(self.adj[u]):
                if cap > 0 and v not in prev:
                    prev[v] = (u, ei)
                    queue.append(v)
        if t not in prev:
            return 0
        v = t
        while prev[v] is not None:
            u, ei = prev[v]
            edge = self.adj[u][ei]
            edge[1] -= 1
            self.adj[edge[0]][edge[2]][1] += 1
            v = u
        return 1

    def flow_on(self, u, ei):
        """Units currently flowing through the arc ei out of u."""
        edge = self.adj[u][ei]
        return edge[3] - edge[1]


def _check_substation_removal(grid: Grid):
    if len(grid.neighbors(0)) != 1:
        raise NotRadialError(
            "criterion assumes the substation-removed graph stays a tree; "
            f"bus 0 has degree {len(grid.neighbors(0))}"
        )


def max_vertex_disjoint_paths(grid: Grid):
    """Maximum number of vertex-disjoint paths pairing non-metered buses to
    metered buses in the substation-removed tree, plus one witness path per
    routed non-metered bus (reconstructed from the flow decomposition)."""
    _check_substation_removal(grid)
    o_set, m_set = grid.nonmetered, grid.metered
    if not o_set:
        return 0, []

    n = grid.n_bus
    # node ids: in(b) = 2b, out(b) = 2b+1, source = 2n, sink = 2n+1
    net = _FlowNet(2 * n + 2)
    src, snk = 2 * n, 2 * n + 1
    split_edge_index = {}
    for b in range(1, n):
        split_edge_index[b] = len(net.adj[2 * b])
        net.add_edge(2 * b, 2 * b + 1, 1)
    for ln in grid.lines:
        u, w = ln.from_bus, ln.to_bus
        if 0 in (u, w):
            continue
        net.add_edge(2 * u + 1, 2 * w, 1)
        net.add_edge(2 * w + 1, 2 * u, 1)
    source_edge_index = {}
    for o in o_set:
        source_edge_index[o] = len(net.adj[src])
        net.add_edge(src, 2 * o, 1)
    for m in m_set:
        net.add_edge(2 * m + 1, snk, 1)

    total = 0
    while net.bfs_augment(src, snk):
        total += 1

    # decompose: each bus carries at most one unit, so the walk is unique
    paths = []
    for o in o_set:
        if net.flow_on(src, source_edge_index[o]) == 0:
            continue
        path, node = [], 2 * o
        while node != snk:
            if node % 2 == 0:
                path.append(node // 2)
            nxt = None
            for ei, edge in enumerate(net.adj[node]):
                if net.flow_on(node, ei) > 0:
                    edge[1] += 1  # consume the unit so it is not rewalked
                    nxt = edge[0]
                    break
            if nxt is None:
                raise AssertionError("flow decomposition lost track of a unit")
            node = nxt
        paths.append(path)
    return total, paths


def check_criterion(grid: Grid) -> ObservabilityReport:
    """Full placement report; the criterion holds when every non-metered bus
    is routed, i.e. the path count equals |O|."""
    single, coupled = counting_conditions(grid)
    count, paths = max_vertex_disjoint_paths(grid)
    return ObservabilityReport(
        counting_single_ok=single,
        counting_coupled_ok=coupled,
        max_disjoint_paths=count,
        criterion_satisfied=(count == len(grid.nonmetered)),
        witness_paths=paths,
    )


# --------------------------------------------------------------------------
# generic rank
# --------------------------------------------------------------------------


def numeric_rank(M: np.ndarray, rtol: float = RANK_RTOL) -> int:
    """Rank by singular values above rtol * sigma_max."""
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return 0
    s = np.linalg.svd(M, compute_uv=False)
    if s[0] == 0.0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def _matching_rank(pattern: PatternMatrix) -> int:
    rows, cols = pattern.dims
    if not pattern.nonzeros:
        return 0
    r, c = zip(*pattern.nonzeros)
    graph = sp.csr_matrix(
        (np.ones(len(r)), (np.array(r), np.array(c))), shape=(rows, cols)
    )
    match = maximum_bipartite_matching(graph, perm_type="column")
    return int(np.sum(match >= 0))


def generic_rank(pattern: PatternMatrix, trials: int = 3, seed: int = 0) -> int:
    """Generic (structural) rank of a sparsity pattern.

    Fills the pattern with magnitudes uniform on [1, 2] and random signs,
    takes the maximum numeric rank over ``trials`` fills. Square patterns are
    cross-checked against a maximum bipartite matching (a perfect matching is
    equivalent to generic invertibility); a disagreement that survives all
    trials raises GenericRankError.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rows, cols = pattern.dims
    positions = sorted(pattern.nonzeros)
    if not positions:
        return 0
    ridx, cidx = zip(*positions)
    rng = np.random.default_rng(seed)
    best = 0
    for _ in range(trials):
        vals = rng.uniform(1.0, 2.0, len(positions))
        vals *= rng.choice([-1.0, 1.0], len(positions))
        M = np.zeros(pattern.dims)
        M[ridx, cidx] = vals
        best = max(best, numeric_rank(M))
    if rows == cols:
        match_full = _matching_rank(pattern) == rows
        if match_full != (best == rows):
            raise GenericRankError(
                f"matching says invertible={match_full} but numeric rank is "
                f"{best}/{rows} after {trials} fills"
            )
    return best


def coupled_jacobian_pattern(grid: Grid, seed: int = 0) -> PatternMatrix:
    """Sparsity pattern of the analysis-form coupled Jacobian at a generic
    state pair (every rectangular component nonzero, so no accidental
    cancellations hide pattern entries)."""
    rng = np.random.default_rng(seed)
    n = grid.n_bus

    def dense_state():
        mag = rng.uniform(1.0, 2.0, 2 * n) * rng.choice([-1.0, 1.0], 2 * n)
        return State(mag[:n], mag[n:])

    J = coupled_jacobian(dense_state(), dense_state(), grid, form="analysis")
    return PatternMatrix.from_matrix(J, keep_values=False)


# --------------------------------------------------------------------------
# flat-profile reduction of the single-state Jacobian
# --------------------------------------------------------------------------


def flat_reduced_jacobian(grid: Grid):
    """Schur-complement reduction of the single-state Jacobian at the flat
    profile: rows C+M and columns C+O of the incidence matrix around the
    modified susceptance b + g^2/b per line.

    Returns (Jt, (Jcc, Jco, Jmc, Jmo)) where the blocks follow the C/M row
    and C/O column split.
    """
    b = line_susceptances(grid)
    g = line_conductances(grid)
    if np.any(b == 0.0):
        raise ZeroDivisionError("a line with zero susceptance breaks b + g^2/b")
    btil = b + g**2 / b
    A = incidence_matrix(grid)  # lines x buses 1..N
    col_of = {bus: k for k, bus in enumerate(range(1, grid.n_bus))}
    cm = sorted(set(grid.conventional) | set(grid.metered))
    co = sorted(set(grid.conventional) | set(grid.nonmetered))
    Acm = A[:, [col_of[n] for n in cm]]
    Aco = A[:, [col_of[n] for n in co]]
    Jt = Acm.T @ np.diag(btil) @ Aco
    nc = len(grid.conventional)
    blocks = (Jt[:nc, :nc], Jt[:nc, nc:], Jt[nc:, :nc], Jt[nc:, nc:])
    return Jt, blocks


# --------------------------------------------------------------------------
# condition-number study
# --------------------------------------------------------------------------


def condition_number_study(grid: Grid, sampler, trials: int, seed: int):
    """2-norm condition numbers of the analysis-form coupled Jacobian at
    sampled state pairs. Failed samples (power-flow divergence) are skipped
    and counted.

    Returns (conds, n_skipped); conds is ordered by trial index with one
    entry per successful trial.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    conds, skipped = [], 0
    for k in range(trials):
        rng = np.random.default_rng(np.random.SeedSequence((seed, k)))
        try:
            v, v1 = sampler.sample_pair(grid, rng)
        except RuntimeError:
            skipped += 1
            continue
        J = coupled_jacobian(v, v1, grid, form="analysis")
        conds.append(float(np.linalg.cond(J)))
    return conds, skipped


def lemma_blocks_full_rank(grid: Grid, v: State, v1: State):
    """Numeric ranks of J_A and of the Schur complement J_D - J_C J_A^-1 J_B
    in the analysis partition. Returns (JA_full, schur_full)."""
    from .pfmodel import partition_coupled_jacobian

    J = coupled_jacobian(v, v1, grid, form="analysis")
    JA, JB, JC, JD = partition_coupled_jacobian(J, grid, form="analysis")
    ja_full = numeric_rank(JA) == JA.shape[0] == JA.shape[1]
    if not ja_full:
        return False, False
    schur = JD - JC @ np.linalg.solve(JA, JB)
    return True, numeric_rank(schur) == min(schur.shape)
