"""
Predicting intentions and trajectories
======================================

The intention network reads both cars' states step by step. At every step
it outputs the target's direction (GS, TL or TR) and which car goes first.
The trajectory network predicts the target's next 3 s in one of three modes:

* plain: from the kinematics only;
* intention: with the intention appended;
* reference: also with the lane-centre path for that intention, so the
  network only learns residuals from it.

This demo trains small networks for a few epochs; the full ablation takes
about 15 minutes (see the acceptance suite).
"""

# %%
import numpy as np

from urbanflow import scenegen
from urbanflow.predict import evaluate, train
from urbanflow.predict.reference import IntersectionGeometry, reference_trajectory

splits = scenegen.gen_pairs_dataset(scenegen.gen_world(seed=5, n_pairs=120))
print({k: len(v) for k, v in splits.items()})

# %%
# Lane-centre references from the south arm.
geom = IntersectionGeometry()
for direction in ("GS", "TL", "TR"):
    ref = reference_trajectory(geom, "S", direction)
    print(direction, "ends at", np.round(ref.points[-1], 2), "turn radius %.2f m" % ref.radius)

# %%
cfg = train.AblationConfig(
    hidden=24,
    intention=train.TrainConfig(epochs=30, batch_size=16, lr_decay=0.95),
    trajectory=train.TrainConfig(epochs=15, batch_size=32, stride=4))
trained = train.train_ablation(splits["train"], cfg=cfg)

# %%
# Accuracy and trajectory error by the target's distance to the stop line.
bins = evaluate.evaluate(splits["test"], trained.intention, trained.trajectory["reference"], stride=3)
for b in bins:
    if b.n_steps:
        print("[%5.0f, %4.0f) m  direction %.2f  yield %.2f  MSE %s" % (
            b.lo, b.hi, b.direction_accuracy, b.yield_accuracy, "-" if b.mse is None else "%.2f" % b.mse))

# %%
# Closed-loop error per mode: the conditioned nets see the intention net's
# own argmax. With 84 training pairs and a few epochs the conditioned modes
# have too little data to beat the plain one; the full-size comparison is
# in the acceptance suite.
for mode, net in trained.trajectory.items():
    print(mode, "MSE %.3f m^2" % evaluate.mean_mse(net, splits["test"], trained.intention, stride=3))
