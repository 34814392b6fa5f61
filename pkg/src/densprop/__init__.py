"""densprop: neural density propagation for nonlinear ODE systems.

A feed-forward tanh network learns the log of the state density as a function
of (x, t), trained on characteristics data generated by augmented trajectory
integration and regularized by the transport-equation residual at collocation
points. Includes adaptive sample-size selection, horizon transfer learning,
NRMSE validation, and the Kraichnan-Orszag / LQR rigid-body benchmarks.
"""

from .density_net import (DensityNetwork, NetworkArchitecture, initialize_network,
                          load_checkpoint, save_checkpoint)
from .dynamics import (CharacteristicDataset, InitialDensity, IntegrationError,
                       SystemModel, Trajectory, generate_dataset,
                       integrate_trajectory, load_dataset, sample_initial,
                       save_dataset)
from .systems import (LqrDesign, RigidBodyParams, design_rigid_body_lqr,
                      kraichnan_orszag, linear_system, linear_test, linearize,
                      rigid_body_lqr, solve_care)
from .training import (AdamOptions, AdaptiveConfig, CollocationSet,
                       HorizonSchedule, LbfgsOptions, LossConfig, NormTestResult,
                       TrainReport, adam_minimize, build_network, lbfgs_minimize,
                       loss_data, loss_pde, norm_test, residual,
                       sample_collocation, train_adam, train_adaptive,
                       train_fixed)
from .validation import (DensityGrid, ValidationReport, conditional_slice,
                         load_grid, marginal_grid, nrmse, save_grid)

__version__ = "0.1.0"
