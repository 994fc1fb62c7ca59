"""Longitudinal treatment-effect estimation with doubly-debiased nuisances.

A masked sequence model is trained on sequentially doubly robust (ICE or
SDR) pseudo-outcomes with a Polyak-averaged target copy and auxiliary
covariate-simulator supervision; final CAPO estimates come from plug-in,
raw-SDR, or LTMLE re-debiased readouts. Synthetic benchmark generators and
Monte-Carlo ground-truth oracles are included for end-to-end verification.
"""

__version__ = "0.1.0"

from .dgp import (DgpConfig, Dataset, PolicyRule, Trajectory, TreatmentPlan,
                  ground_truth_capo, read_dataset, simulate, standard_plans,
                  write_dataset)
from .estimators import (EstimateReport, NuisanceEval, PseudoOutcomeTable,
                         TrainConfig, WeightTable, compute_weights, estimate,
                         estimate_from_evals, ice_targets, influence_function,
                         ltmle_fluctuate, policy_actions, sdr_targets, train,
                         training_losses)
from .harness import (ExperimentConfig, MetricsTable, OracleCache, ablate,
                      emit, run_experiment, tune)
from .model import (ModelConfig, NuisanceModel, TargetModel, forward,
                    load_checkpoint, polyak_update, save_checkpoint)
from .optim import Optimizer, OptimizerState

__all__ = [
    "DgpConfig", "Dataset", "PolicyRule", "Trajectory", "TreatmentPlan",
    "ground_truth_capo", "read_dataset", "simulate", "standard_plans",
    "write_dataset", "EstimateReport", "NuisanceEval", "PseudoOutcomeTable",
    "TrainConfig", "WeightTable", "compute_weights", "estimate",
    "estimate_from_evals", "ice_targets", "influence_function",
    "ltmle_fluctuate", "policy_actions", "sdr_targets", "train",
    "training_losses", "ExperimentConfig", "MetricsTable", "OracleCache",
    "ablate", "emit", "run_experiment", "tune", "ModelConfig", "NuisanceModel",
    "TargetModel", "forward", "load_checkpoint", "polyak_update",
    "save_checkpoint", "Optimizer", "OptimizerState",
]
