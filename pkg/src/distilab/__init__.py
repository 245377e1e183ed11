"""Desk-scale ensemble distillation laboratory.

Weight-averaged factored students, diversity-gap input perturbations, the
usual distillation baselines, and a calibration / diversity / loss-landscape
analysis suite, all on synthetic classification tasks small enough that every
mechanism-level claim is directly testable.
"""

from .autodiff import Tensor
from .data import Dataset, corrupt, load_csv, make_mixture, make_ood
from .distill import (AEKDConfig, DistillConfig, aekd_weights, distill_aekd,
                      distill_be, distill_kd, distill_latentbe,
                      distill_proxy_end2, kd_loss, proxy_dirichlet_target,
                      proxy_end2_loss)
from .metrics import (MetricsReport, accuracy, calibrated_metrics, diversity,
                      ece, entropy_histogram, evaluate_model, fit_temperature,
                      nll)
from .nets import (BEMLP, MLP, ModelSpec, average_rank_one, build_be,
                   build_plain, checkpoint_load, checkpoint_save)
from .optim import OptimConfig, lr_at, train_teachers
from .perturb import (Perturbation, conf_ods_perturb, div_estimate,
                      diversity_shift, gaussian_perturb, ods_perturb,
                      tdiv_sdiv_perturb)
from .subspace import EndpointTrace, LineScan, interpolate, line_scan

__version__ = "0.1.0"
