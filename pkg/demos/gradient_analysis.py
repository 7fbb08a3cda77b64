"""How strongly each residual filter bank's gradients reach each DCT mode.

Prints the top-n statistics for the three fixed banks and checks that every
8x8 DCT filter reacts most to its own frequency.

Run: python3 demos/gradient_analysis.py
"""
import numpy as np

from jstegrl.analysis import accum_grad_average, mode_orders, top_n_stats
from jstegrl.trainer import synthetic_covers

images, _ = synthetic_covers(20, 64, seed=21)
stats = {}
for bank in ("dct8", "dct4", "srm30"):
    e = accum_grad_average(images, bank)
    stats[bank] = top_n_stats(e)[1]
    if bank == "dct8":
        own = (mode_orders(e).reshape(64, 64)[np.arange(64), np.arange(64)] == 1).mean()
        print(f"dct8 filters ranking their own mode first: {own:.0%}")

print("n    " + "  ".join(f"{b:>6}" for b in stats))
for n in (1, 2, 4, 8, 16, 32, 64):
    print(f"{n:<4} " + "  ".join(f"{stats[b][n]:>6}" for b in stats))
