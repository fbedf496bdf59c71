"""
Regression tasks drawn from Gaussian processes
==============================================

Each task is one function sampled from a GP, split into a context set
(what the model sees) and a target set (what it must predict).
"""
import numpy as np

from npprov.kernels import KernelSpec, gaussian_loglik, gp_posterior
from npprov.taskgen import TaskConfig, ood_x_config, ood_y_scale, sample_synthetic_task

cfg = TaskConfig(base_seed=0)

for spec in KernelSpec:
    task = sample_synthetic_task(spec, cfg, 0)
    print(f"{spec.value:16s} N={task.x_context.size:2d} M={task.x_target.size:2d}"
          f"  y range [{task.y_context.min():+.2f}, {task.y_context.max():+.2f}]")

# The same index always gives the same task, whatever order you ask in.
a = sample_synthetic_task(KernelSpec.EQ, cfg, 7)
b = sample_synthetic_task(KernelSpec.EQ, cfg, 7)
print("\nsame task twice:", np.array_equal(a.y_target, b.y_target))

# The exact GP posterior is the best any model can do on these tasks.
post = gp_posterior(KernelSpec.EQ, a.x_context, a.y_context, a.x_target)
print("oracle log-likelihood on task 7:", round(gaussian_loglik(a.y_target, post), 3))

# Out-of-distribution variants: wider inputs, or values scaled by 10.
wide = sample_synthetic_task(KernelSpec.EQ, ood_x_config(cfg), 7)
print("wide-range x spans", wide.x_context.min().round(2), "to", wide.x_context.max().round(2))
loud = ood_y_scale(a, 10.0)
print("scaled y std:", a.y_context.std().round(3), "->", loud.y_context.std().round(3))
