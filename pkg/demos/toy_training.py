"""A few minutes of TransDeformer training on small phantoms.

Runs all three stages briefly, then compares two-stage inference from the
centred template with inference from randomly displaced templates.

    python3 demos/toy_training.py
"""

import logging
import time

from spinemesh.models import ModelConfig, build_model
from spinemesh.synth import PhantomSpec, canonical_template, generate_dataset, split
from spinemesh.training import (StageConfig, evaluate, predict_dataset, robustness_sweep,
                                train)

logging.basicConfig(level=logging.INFO, format="%(message)s")

SIDE = 64
data = generate_dataset(40, seed=1, image_side=SIDE)
tr, va, te = split(data, (0.7, 0.15, 0.15))
tmpl = canonical_template(PhantomSpec(image_side=SIDE))

model = build_model(ModelConfig(image_side=SIDE, embed=16, heads=2, patch=2, c_high=4, c_low=8))
stages = [StageConfig(1, 150, 4, 3e-3, 1e-3, val_every=50),
          StageConfig(2, 300, 4, 3e-3, 3e-4, val_every=100),
          StageConfig(3, 150, 4, 1e-3, 1e-4, val_every=75)]
t0 = time.perf_counter()
train(model, tr, va, stages, tmpl, val_dice=False)
print(f"trained in {time.perf_counter() - t0:.0f} s")

ev = evaluate(predict_dataset(model, te, tmpl), te)
print(f"test APPD {ev['appd_mean']:.2f} px, Dice {ev['dice_mean']:.3f}")
for row in robustness_sweep(model, te, tmpl, radii_px=(0, 4, 8)):
    print(f"init radius {row['radius_px']:4.1f} px -> APPD {row['mean']:.2f} px")
