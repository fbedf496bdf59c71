"""Neural processes with a position-only variance path, plus GP oracles and task generators."""
from .kernels import GaussianPrediction, KernelSpec, gaussian_loglik, gp_posterior, gp_sample, gram, kernel_eval
from .offgrid import Architecture, GridSpec, OffGridModel, Prediction, convcnp_predict, predict
from .ongrid import MaskedImage, OnGridModel, ongrid_loss, ongrid_mean, ongrid_variance, sample_mask
from .taskgen import (Task, TaskConfig, compacted_context_task, load_smart_meter, ood_x_config,
                      ood_y_scale, sample_smartmeter_task, sample_synthetic_task)
from .train import (EvalReport, GPOracle, TrainConfig, evaluate, load_checkpoint, ood_variance_audit,
                    save_checkpoint, train)

__version__ = "0.1.0"
