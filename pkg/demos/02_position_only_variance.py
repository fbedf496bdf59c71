"""
Where the uncertainty comes from
================================

NP-PROV predicts its standard deviation from the context *positions* only.
Scaling or shifting the observed values moves the mean but cannot touch
the std. A ConvCNP reads both heads from the same value-bearing encoding,
so its std moves with the data.
"""
import numpy as np

from npprov.offgrid import OffGridModel
from npprov.taskgen import Task
from npprov.train import TaskSource

np_prov = OffGridModel.create("np-prov", seed=1)
conv = OffGridModel.create("convcnp", seed=1)
task = TaskSource("eq", 3)(0)
moved = Task(task.x_context, 10 * task.y_context - 2, task.x_target, 10 * task.y_target - 2)

for name, model in [("np-prov", np_prov), ("convcnp", conv)]:
    before, after = model.predict(task), model.predict(moved)
    print(f"{name:8s} mean shift {np.abs(after.mean - before.mean).max():9.4f}"
          f"   std shift {np.abs(after.std - before.std).max():.3e}")

# predict_std does not even accept values.
std = np_prov.predict_std(task.x_context, np.linspace(-2, 2, 5))
print("\nstd on a line of query points:", np.round(std, 4))
