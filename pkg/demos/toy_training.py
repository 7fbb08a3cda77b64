"""A short training run on synthetic half-smooth, half-noisy covers.

The policy should learn to carry the payload and to put its changes in the
noisy half. A few hundred steps take several minutes on one CPU core.

Run: python3 demos/toy_training.py [steps]
"""
import sys

from jstegrl.policy_net import change_probabilities
from jstegrl.trainer import ImageSource, TrainConfig, TrainState, synthetic_covers

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 200
covers, _ = synthetic_covers(64, 64, seed=1)
held_out, noisy = synthetic_covers(16, 64, seed=99)

state = TrainState(TrainConfig(iterations=steps), ImageSource(covers, 0))
for i in range(steps):
    row = state.train_step()
    if (i + 1) % 25 == 0:
        print(
            f"step {row['iteration']:4d}  entropy/capacity {row['payload_entropy'] / row['capacity']:.3f}"
            f"  env acc {row['env_accuracy']:.2f}  l_E {row['l_E']:.4f}"
        )

q = change_probabilities(state.policy, held_out)
print(f"mean change probability: noisy {q[noisy].mean():.4f}, smooth {q[~noisy].mean():.4f}")
