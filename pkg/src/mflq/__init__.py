"""Discounted mean-field LQ control of regime-switching diffusions."""

__version__ = "0.1.0"

from .model import (  # noqa: E402
    AssumptionReport,
    MfLqModel,
    ModelError,
    RegimeFamily,
    check_assumptions,
    dump_model,
    load_model,
    paper_example,
)
from .lyapunov import (  # noqa: E402
    LyapunovError,
    LyapunovProblem,
    feynman_kac_estimate,
    lyapunov_residual,
    solve_coupled_lyapunov,
)
from .riccati import (  # noqa: E402
    AreSolution,
    GainSet,
    IterationTrace,
    RiccatiError,
    are1_residual,
    are3_residual,
    compute_gains,
    solve_are1,
    solve_are3,
    solve_model,
    value_function,
)
from .simulate import (  # noqa: E402
    MarkovPath,
    SimConfig,
    SimulationError,
    TrajectorySet,
    occupation_fractions,
    sample_markov_path,
    simulate_closed_loop,
    simulate_feedback,
)
from .evaluate import (  # noqa: E402
    CostEstimate,
    StationarityReport,
    compare_value,
    decay_check,
    estimate_cost,
    stationarity_residual,
    suboptimality_probe,
)
