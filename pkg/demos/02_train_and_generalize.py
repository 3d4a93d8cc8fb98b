"""Train a small model on triangle/square cutouts and test it on hexagons and octagons.

Run:  python demos/02_train_and_generalize.py [epochs]

This is a scaled-down version of the end-to-end acceptance run: 40 training
geometries instead of 200 and a narrower encoder, so it finishes in a couple
of minutes.  The untrained model already converges everywhere because its
flux starts near plain diffusion; training then shapes the partitions.
"""
import sys
import tempfile
import time

import numpy as np

from geonew.data import DataConfig, generate_dataset, load_dataset
from geonew.nn import EncoderConfig
from geonew.train import TrainConfig, Trainer, to_problem

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 40
root = tempfile.mkdtemp(prefix="geonew_demo_")
manifest = generate_dataset(DataConfig(n_train=40, n_test_id=10, n_test_ood=10), root)
splits = {sp: load_dataset(manifest, sp) for sp in ("train", "test_id", "test_ood")}
probs = {sp: [to_problem(s) for s in ss] for sp, ss in splits.items()}
print(f"dataset in {root}: " + ", ".join(f"{sp} {len(v)}" for sp, v in probs.items()))

cfg = TrainConfig(epochs=epochs, batch_size=8, encoder=EncoderConfig(d_model=16, n_heads=2, n_anchors=8))
trainer = Trainer.create(cfg, probs["train"])
before = {sp: trainer.evaluate(probs[sp], splits[sp], sp).row for sp in ("test_id", "test_ood")}
t0 = time.perf_counter()
for epoch in range(epochs):
    row = trainer.train_epoch(probs["train"], np.random.default_rng([cfg.seed, trainer.epoch]))
    if (epoch + 1) % 10 == 0:
        print(f"epoch {row['epoch']:3d}  train eps {row['eps_l2']:.4f}  converged {row['conv_frac']:.2f}  "
              f"newton iters {row['mean_newton_iters']:.1f}  {time.perf_counter() - t0:.0f}s")

for sp in ("test_id", "test_ood"):
    after = trainer.evaluate(probs[sp], splits[sp], sp).row
    print(f"{sp:8s}  eps {before[sp]['eps_l2']:.4f} -> {after['eps_l2']:.4f}  "
          f"converged {after['conv_frac']:.2f}  boundary error {after['boundary_err']:.1e}")
