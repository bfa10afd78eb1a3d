"""gridscope: observability analysis and coupled power-flow / state-estimation
solvers for radial distribution grids with partial smart-meter coverage."""

from importlib import resources

from .gridmodel import (
    AdmittanceMatrix,
    Bus,
    FeederError,
    Grid,
    Line,
    build_admittance,
    grid_from_dict,
    incidence_matrix,
    load_grid,
)
from .pfmodel import (
    CoupledSpec,
    SpecificationSet,
    State,
    coupled_jacobian,
    coupled_residual,
    injections,
    jacobians,
    partition_coupled_jacobian,
    spec_from_states,
    vmag2,
)
from .observability import (
    ObservabilityReport,
    PatternMatrix,
    check_criterion,
    condition_number_study,
    counting_conditions,
    flat_reduced_jacobian,
    generic_rank,
    max_vertex_disjoint_paths,
    numeric_rank,
)
from .sdpkernel import SdpProblem, SdpSolution, extract_rank_one, solve_sdp
from .solvers import (
    CpsseConfig,
    Measurement,
    SpecMatrices,
    solve_cpf_newton,
    solve_cpf_sdp,
    solve_cpsse,
)
from .harness import (
    Scenario,
    StateSampler,
    TimeSeriesSet,
    forward_simulate,
    generate_synthetic_timeseries,
    run_condition_study,
    run_cpsse_study,
    run_success_probability,
)

__version__ = "0.1.0"


def bundled_feeder_path() -> str:
    """Path to the bundled single-phase 34-bus feeder file."""
    return str(resources.files("gridscope").joinpath("data/ieee34.json"))


def bundled_scenario_path(which: str) -> str:
    """Path to the bundled scenario file, ``which`` in {"a", "b"}."""
    if which.lower() not in ("a", "b"):
        raise ValueError("scenario must be 'a' or 'b'")
    return str(
        resources.files("gridscope").joinpath(f"data/scenario_{which.lower()}.json")
    )
