"""Self-reflective model predictive control.

Certainty-equivalent MPC with an extended Kalman filter, second-order
prediction of the expected loss of optimality, and the self-reflective
controller that penalizes its own predicted loss.
"""

from .benchmarks import LinearQuadraticModel, MotivatingExample, PredatorPrey, instantiate_benchmark
from .errors import (ConfigError, DivergenceError, InputError, NumericDomainError, RegularityError,
                     SrmpcError)
from .estimator import NoiseSpec, ekf_cov_update, ekf_mean_update, predict_variance_sequence
from .loss import (LossConfig, LossReport, alpha_sweep, gamma_scaling_study, hessian_gap_check,
                   loss_decomposition, monte_carlo_loss, second_order_estimate, stage_loss, utopian_cost)
from .model import DerivativeBundle, FunctionModel, Model, Trajectory
from .ocp import (OcpSolution, SolverOptions, SrConfig, rollout, solve_nominal, solve_self_reflective,
                  sr_gradient, sr_objective)
from .riccati import RiccatiState, backward_sweep, riccati_step, stage_expected_loss, terminal_riccati
from .sim import ClosedLoopTrace, SimConfig, run_cascade_nominal, run_closed_loop, run_self_reflective

__version__ = "0.1.0"
