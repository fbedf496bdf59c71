"""
A short training run
====================

Ten small epochs on EQ tasks, then a checkpoint round trip. The desk
configuration (30 epochs of 64 tasks) is `TrainConfig()`; this demo runs a
fraction of it. Stop much earlier than this and the std head is still
overshooting: after 8 steps it is badly overconfident on some tasks.
"""
import tempfile
from pathlib import Path

from npprov.kernels import KernelSpec
from npprov.train import (GPOracle, TrainConfig, build_model, evaluate, model_from_checkpoint,
                          save_checkpoint, train)

cfg = TrainConfig(epochs=10, tasks_per_epoch=32)
model = build_model(cfg)

before = evaluate(model, "in-range", 32, seed=cfg.seed)
result = train(model, cfg, on_epoch=lambda e, v: print(f"epoch {e + 1}: loss {v:.3f}"))
after = evaluate(model, "in-range", 32, seed=cfg.seed)
oracle = evaluate(GPOracle(KernelSpec.EQ), "in-range", 32, seed=cfg.seed)

print(f"\nlog-likelihood  untrained {before.mean_ll:.3f}  trained {after.mean_ll:.3f}"
      f"  GP oracle {oracle.mean_ll:.3f}")
print("reconstruction loss of the context autoencoder:", f"{after.recon_loss:.2e}")

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "demo.ckpt"
    save_checkpoint(model.params, cfg, path)
    again, _ = model_from_checkpoint(path)
    print("checkpoint size:", path.stat().st_size, "bytes;",
          "reloaded model agrees:", after == evaluate(again, "in-range", 32, seed=cfg.seed))
