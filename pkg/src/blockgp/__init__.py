"""Exact Gaussian process regression at large n.

Training and prediction touch the kernel matrix only through row-partitioned
matrix-vector products, so per-worker memory stays linear in the data size.
Solves run through batched preconditioned conjugate gradients; the
log-determinant comes from stochastic Lanczos quadrature over the same
solves; preconditioning uses a partial pivoted Cholesky factor.
"""

from .cg import SolveReport, SolveRequest, Tridiagonal, mbcg_solve, slq_logdet
from .data import Dataset, RawTable, gen_synthetic, load_csv, split_and_whiten
from .errors import ConvergenceError, NumericError, TrainingError
from .kernels import (KernelModel, default_model, kernel_block,
                      kernel_block_grad, kernel_eval, load_model,
                      model_from_text, model_to_raw, model_to_text,
                      raw_to_model, save_model)
from .likelihood import CgConfig, MLLResult, mll_value_and_grad
from .metrics import ExperimentResult, evaluate, nll_gaussian, rmse
from .partition import (PartitionPlan, WorkerPool, partitioned_mvm,
                        plan_from_budget, plan_partitions, track_allocations)
from .precond import (PivotedFactor, PreconditionerCache, build_preconditioner,
                      partial_pivoted_cholesky, precond_apply, precond_sample)
from .predictor import (CgPredictor, PredictionCache, PredOutput, build_cache,
                        load_cache, predict, predict_mean, predict_variance,
                        save_cache, verify_cache)
from .trainer import (AdamConfig, LbfgsConfig, TrainConfig, TrainTrace,
                      adam_run, full_adam, lbfgs_run, pretrain_finetune, train)
from .baselines import (CholeskyModel, SgprConfig, SgprModel,
                        cholesky_fit_predict, cholesky_mll, sgpr_bound,
                        sgpr_fit)
from .experiment import ExperimentConfig, bench_mvm, read_config, run_experiment

__version__ = "0.1.0"
