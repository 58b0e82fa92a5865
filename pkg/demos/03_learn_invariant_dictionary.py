"""Gradient training recovers an invariant dictionary from data alone.

A polynomial parametric family is trained to minimize the
subspace-deviation loss on widely excited snapshots of the polynomial
system (the sine term is switched off so a degree-2 family suffices).
The held-out invariance proximity falls from order one to near machine
zero, and the extracted separable model then predicts held-out
trajectories to the same accuracy.

Run with ``python3 demos/03_learn_invariant_dictionary.py``.
"""

import dataclasses

import numpy as np

import kooplift as kl
from kooplift.learning import TrainConfig, train
from kooplift.models import extract_normal, rollout, states_from_lifted

# single-step experiments over a wide box: wide excitation makes the
# quadratic term's defect visible to the loss
system = dataclasses.replace(
    kl.example_poly(g=0.0),
    state_box=np.array([[-5.0, -5.0], [5.0, 5.0]]),
    input_box=np.array([[-2.0], [2.0]]),
)
plan = kl.ExperimentPlan(num_experiments=1500, steps_per_experiment=1,
                         rng_seed=21)
aug = kl.to_augmented(kl.run_experiments(system, plan))

config = TrainConfig(
    family={"kind": "polynomial", "total_degree": 2, "seed": 1},
    s=7, l=4, epochs=200, batch_size=150,
    lr_start=5e-2, lr_end=1e-3, seed=3,
)
nd, report = train(config, aug)
print("held-out invariance proximity during training:")
for epoch in (0, 9, 49, 99, 199):
    print(f"  epoch {epoch + 1:3d}: {report.val_curve[epoch]:.3e}")
print(f"final proximity (train half): {report.final_proximity_train:.3e}")
print(f"final proximity (test half):  {report.final_proximity_test:.3e}")

P = nd.eval_aug(aug.Z)
Q = nd.eval_aug(aug.Zplus)
fit = kl.fit_edmd(P, Q)
model = extract_normal(fit, nd, source_index=kl.consistency_index(P, Q))

rng = np.random.default_rng(5)
x0 = rng.uniform(*system.state_box)
U = rng.uniform(*system.input_box, size=(20, 1)).T
truth = kl.simulate(system, x0, U).states
pred = states_from_lifted(model, rollout(model, x0, U))
print("\n20-step rollout with the learned dictionary:")
print(f"max state deviation from the true trajectory: "
      f"{np.max(np.abs(pred - truth)):.3e}")
