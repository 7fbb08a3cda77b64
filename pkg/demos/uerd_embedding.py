"""Embed a payload with UERD costs and see where the changes land.

Run: python3 demos/uerd_embedding.py
"""
import numpy as np

from jstegrl.distortion import PayloadSpec, additive_distortion, embed, payload_entropy, probabilities_from_costs
from jstegrl.jpeg_model import count_nzac
from jstegrl.trainer import synthetic_covers
from jstegrl.uerd import uerd_cost

images, noisy = synthetic_covers(1, 128, qf=75, seed=3)
cover, noisy = images[0], noisy[0]
costs = uerd_cost(cover)

payload = PayloadSpec.parse("0.4bpnzAC")
stego, changes, lam = embed(cover, costs, payload, seed=7)

print(f"non-zero AC coefficients: {count_nzac(cover)}")
print(f"payload: {payload.resolve(count_nzac(cover)):.1f} bits, lambda = {lam:.4f}")
print(f"policy entropy: {payload_entropy(probabilities_from_costs(costs, lam)):.1f} bits")
print(f"changed coefficients: {np.count_nonzero(changes)}, distortion {additive_distortion(cover, stego, costs):.2f}")
# Costs follow block energy, so the noisy half should take most of the changes.
print(f"changes in noisy half: {np.count_nonzero(changes[noisy])}, smooth half: {np.count_nonzero(changes[~noisy])}")
