"""Radial feeder data model, feeder-json ingestion, and admittance construction.

The feeder-json format is a single JSON document::

    {
      "name": "...", "base_mva": 2.5, "base_kv": 24.9,
      "buses": [{"index": 0, "class": "S", "p_load": 0.0, "q_load": 0.0,
                 "pv_capacity": 0.0}, ...],
      "lines": [{"from": 0, "to": 1, "r": 0.004, "x": 0.012}, ...]
    }

All impedances and powers are per-unit on the declared base. Bus classes:
``S`` substation (exactly one, index 0), ``M`` metered, ``C`` conventional
(PQ-specified), ``O`` non-metered. Loads are stored as consumptions; solvers
turn them into negative injections.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BUS_CLASSES = ("S", "M", "C", "O")


class FeederError(ValueError):
    """Base class for feeder-file and grid validation failures."""


class FeederParseError(FeederError):
    """The file is not valid JSON or misses required fields."""


class SubstationError(FeederError):
    """No substation, substation not at index 0, or multiple substations."""


class NotRadialError(FeederError):
    """The line graph is not a spanning tree, or removing the substation
    disconnects it."""


class DuplicateLineError(FeederError):
    """The same bus pair appears in more than one line."""


class BusIndexError(FeederError):
    """Bus indices are not contiguous from 0, or a line references an
    unknown bus."""


class LineValueError(FeederError):
    """A line violates r >= 0, x > 0 or connects a bus to itself."""


@dataclass(frozen=True)
class Bus:
    index: int
    bus_class: str  # one of BUS_CLASSES
    p_load: float = 0.0
    q_load: float = 0.0
    pv_capacity: float = 0.0

    def __post_init__(self):
        if self.bus_class not in BUS_CLASSES:
            raise FeederParseError(f"unknown bus class {self.bus_class!r}")
        if self.pv_capacity < 0:
            raise FeederParseError(f"bus {self.index}: pv_capacity must be >= 0")


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    r: float
    x: float

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise LineValueError(f"line {self.from_bus}-{self.to_bus} is a self-loop")
        if self.r < 0 or self.x <= 0:
            # x > 0 keeps every line susceptance nonzero, which the
            # flat-profile reduction divides by
            raise LineValueError(
                f"line {self.from_bus}-{self.to_bus}: need r >= 0 and x > 0"
            )

    @property
    def admittance(self) -> complex:
        return 1.0 / complex(self.r, self.x)


@dataclass(frozen=True)
class AdmittanceMatrix:
    """Real and imaginary parts of the bus admittance matrix Y = G + jB."""

    G: np.ndarray
    B: np.ndarray

    @property
    def Y(self) -> np.ndarray:
        return self.G + 1j * self.B

    @property
    def n_bus(self) -> int:
        return self.G.shape[0]


@dataclass(frozen=True)
class Grid:
    """Validated radial feeder.

    ``buses`` are sorted by index 0..N; the line graph is a spanning tree and
    removing bus 0 leaves a tree (substation has degree one).
    """

    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    name: str = "unnamed"
    base_mva: float = 1.0
    base_kv: float = 1.0
    _adjacency: dict = field(init=False, repr=False, compare=False, default=None)

    def __post_init__(self):
        self._validate()
        adj = {b.index: [] for b in self.buses}
        for ln in self.lines:
            adj[ln.from_bus].append(ln.to_bus)
            adj[ln.to_bus].append(ln.from_bus)
        object.__setattr__(self, "_adjacency", {k: tuple(v) for k, v in adj.items()})

    # -- validation ------------------------------------------------------
    def _validate(self):
        idx = sorted(b.index for b in self.buses)
        n_bus = len(self.buses)
        if idx != list(range(n_bus)):
            raise BusIndexError("bus indices must be contiguous from 0")
        object.__setattr__(
            self, "buses", tuple(sorted(self.buses, key=lambda b: b.index))
        )

        subs = [b.index for b in self.buses if b.bus_class == "S"]
        if subs != [0]:
            raise SubstationError(
                f"need exactly one substation bus at index 0, found {subs}"
            )

        seen = set()
        for ln in self.lines:
            if not (0 <= ln.from_bus < n_bus and 0 <= ln.to_bus < n_bus):
                raise BusIndexError(
                    f"line {ln.from_bus}-{ln.to_bus} references unknown bus"
                )
            key = frozenset((ln.from_bus, ln.to_bus))
            if key in seen:
                raise DuplicateLineError(f"duplicate line {ln.from_bus}-{ln.to_bus}")
            seen.add(key)

        if len(self.lines) != n_bus - 1:
            raise NotRadialError(
                f"{n_bus} buses need {n_bus - 1} lines for a tree, "
                f"got {len(self.lines)}"
            )
        # connectivity check; tree follows from edge count + connectivity
        adj = {i: [] for i in range(n_bus)}
        for ln in self.lines:
            adj[ln.from_bus].append(ln.to_bus)
            adj[ln.to_bus].append(ln.from_bus)
        stack, visited = [0], {0}
        while stack:
            for m in adj[stack.pop()]:
                if m not in visited:
                    visited.add(m)
                    stack.append(m)
        if len(visited) != n_bus:
            raise NotRadialError("line graph is disconnected (cycle elsewhere)")
        if len(adj[0]) != 1:
            raise NotRadialError(
                "removing the substation must leave a tree; bus 0 has degree "
                f"{len(adj[0])}"
            )

    # -- basic views ------------------------------------------------------
    @property
    def N(self) -> int:
        """Number of non-substation buses."""
        return len(self.buses) - 1

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    def buses_of_class(self, cls: str) -> tuple[int, ...]:
        return tuple(b.index for b in self.buses if b.bus_class == cls)

    @property
    def metered(self) -> tuple[int, ...]:
        return self.buses_of_class("M")

    @property
    def nonmetered(self) -> tuple[int, ...]:
        return self.buses_of_class("O")

    @property
    def conventional(self) -> tuple[int, ...]:
        return self.buses_of_class("C")

    def neighbors(self, n: int) -> tuple[int, ...]:
        return self._adjacency[n]

    def with_classification(self, metered, nonmetered) -> "Grid":
        """Return a copy with buses reclassified: listed buses become M/O and
        every other non-substation bus becomes C."""
        metered, nonmetered = set(metered), set(nonmetered)
        if metered & nonmetered:
            raise FeederError("metered and non-metered sets overlap")
        if 0 in metered | nonmetered:
            raise FeederError("the substation cannot be metered or non-metered")
        unknown = (metered | nonmetered) - {b.index for b in self.buses}
        if unknown:
            raise BusIndexError(f"unknown buses in classification: {sorted(unknown)}")
        new_buses = []
        for b in self.buses:
            if b.index == 0:
                cls = "S"
            elif b.index in metered:
                cls = "M"
            elif b.index in nonmetered:
                cls = "O"
            else:
                cls = "C"
            new_buses.append(
                Bus(b.index, cls, b.p_load, b.q_load, b.pv_capacity)
            )
        return Grid(
            tuple(new_buses), self.lines, self.name, self.base_mva, self.base_kv
        )

    def parent_of(self) -> dict[int, int]:
        """Parent bus (towards the substation) for every non-substation bus."""
        parent = {0: None}
        stack = [0]
        while stack:
            u = stack.pop()
            for m in self._adjacency[u]:
                if m not in parent:
                    parent[m] = u
                    stack.append(m)
        return {k: v for k, v in parent.items() if v is not None}


def load_grid(path, fmt: str = "feeder-json") -> Grid:
    """Load and validate a feeder file. Only the feeder-json format exists."""
    if fmt != "feeder-json":
        raise FeederParseError(f"unknown feeder format {fmt!r}")
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FeederParseError(f"cannot parse {path}: {exc}") from exc
    return grid_from_dict(doc)


def grid_from_dict(doc: dict) -> Grid:
    try:
        buses = tuple(
            Bus(
                index=int(b["index"]),
                bus_class=str(b["class"]),
                p_load=float(b.get("p_load", 0.0)),
                q_load=float(b.get("q_load", 0.0)),
                pv_capacity=float(b.get("pv_capacity", 0.0)),
            )
            for b in doc["buses"]
        )
        lines = tuple(
            Line(
                from_bus=int(ln["from"]),
                to_bus=int(ln["to"]),
                r=float(ln["r"]),
                x=float(ln["x"]),
            )
            for ln in doc["lines"]
        )
    except (KeyError, TypeError) as exc:
        raise FeederParseError(f"malformed feeder document: {exc!r}") from exc
    return Grid(
        buses=buses,
        lines=lines,
        name=str(doc.get("name", "unnamed")),
        base_mva=float(doc.get("base_mva", 1.0)),
        base_kv=float(doc.get("base_kv", 1.0)),
    )


def build_admittance(grid: Grid) -> AdmittanceMatrix:
    """Bus admittance matrix with shunt elements ignored, so G1 = B1 = 0."""
    n = grid.n_bus
    G = np.zeros((n, n))
    B = np.zeros((n, n))
    for ln in grid.lines:
        y = ln.admittance
        f, t = ln.from_bus, ln.to_bus
        G[f, f] += y.real
        G[t, t] += y.real
        G[f, t] -= y.real
        G[t, f] -= y.real
        B[f, f] += y.imag
        B[t, t] += y.imag
        B[f, t] -= y.imag
        B[t, f] -= y.imag
    return AdmittanceMatrix(G=G, B=B)


def incidence_matrix(grid: Grid, reduced: bool = True) -> np.ndarray:
    """Bus-branch incidence matrix, rows indexed by ``grid.lines``.

    Each line is oriented away from the substation: +1 on the endpoint closer
    to bus 0, -1 on the farther one. With ``reduced=True`` the substation
    column is dropped, giving the square N x N matrix (invertible for a tree,
    |det| = 1).
    """
    parent = grid.parent_of()
    depth = {0: 0}
    order = [0]
    while order:
        u = order.pop()
        for m in grid.neighbors(u):
            if m not in depth:
                depth[m] = depth[u] + 1
                order.append(m)
    A = np.zeros((len(grid.lines), grid.n_bus))
    for row, ln in enumerate(grid.lines):
        up, down = ln.from_bus, ln.to_bus
        if depth[up] > depth[down]:
            up, down = down, up
        A[row, up] = 1.0
        A[row, down] = -1.0
    return A[:, 1:] if reduced else A


def line_susceptances(grid: Grid) -> np.ndarray:
    """Vector of per-line susceptances b (imag part of series admittance)."""
    return np.array([ln.admittance.imag for ln in grid.lines])


def line_conductances(grid: Grid) -> np.ndarray:
    return np.array([ln.admittance.real for ln in grid.lines])


def grid_summary(grid: Grid) -> str:
    counts = {c: len(grid.buses_of_class(c)) for c in BUS_CLASSES}
    return (
        f"{grid.name}: {grid.n_bus} buses ({counts['M']} metered, "
        f"{counts['O']} non-metered, {counts['C']} conventional), "
        f"{len(grid.lines)} lines, base {grid.base_mva} MVA / {grid.base_kv} kV"
    )
