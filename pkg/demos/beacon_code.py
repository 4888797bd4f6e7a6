"""
The beacon code and how much damage it tolerates
================================================

The patch starts from a parity-checked binary grid. Here we encode a
payload, read it back, then add growing amounts of noise to see when the
grid stops decoding.
"""

import numpy as np

from tthlab.attack import anchor_patch, beacon_capacity, decode_beacon

print(f"an 8x8 grid carries {beacon_capacity(8)} payload bits")

delta_o, code = anchor_patch(side=20)
bits, acc, ok = decode_beacon(delta_o, 8, code)
print("clean read:", "".join(map(str, bits[:16])), "...", f"accuracy {acc:.2f} scannable {ok}")

# at side 20 the cells are 2 or 3 pixels wide
rng = np.random.default_rng(0)
for sigma in (10, 40, 80, 120, 160):
    trials = [decode_beacon(np.clip(delta_o + rng.normal(0, sigma, delta_o.shape), 0, 255), 8, code)
              for _ in range(50)]
    mean_acc = np.mean([t[1] for t in trials])
    rate = np.mean([t[2] for t in trials])
    print(f"noise sigma {sigma:3d}: mean cell accuracy {mean_acc:.3f}, scannable in {rate:.0%}")

# a tiny patch still holds the grid after nearest-neighbour resampling
small, code9 = anchor_patch(side=9)
print("side 9 scannable:", decode_beacon(small, 8, code9)[2])
