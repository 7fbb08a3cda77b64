"""Independent loop-level references used by several test files."""
import numpy as np

from jstegrl.distortion import WET_COST


def uerd_oracle(image):
    """Direct loop transcription of the UERD definition."""
    x, q = image.coefficients, image.table.steps.astype(float)
    rows, cols = x.shape[0] // 8, x.shape[1] // 8
    energy = np.zeros((rows, cols))
    for a in range(rows):
        for b in range(cols):
            for k in range(8):
                for l in range(8):
                    energy[a, b] += abs(x[8 * a + k, 8 * b + l]) * q[k, l]
    out = np.zeros(x.shape)
    for a in range(rows):
        for b in range(cols):
            neigh = 0.0
            for da in (-1, 0, 1):
                for db in (-1, 0, 1):
                    if (da or db) and 0 <= a + da < rows and 0 <= b + db < cols:
                        neigh += energy[a + da, b + db]
            denom = energy[a, b] + 0.25 * neigh
            block = 1.0 / denom if denom > 0 else WET_COST
            for k in range(8):
                for l in range(8):
                    mode = 0.5 * (q[1, 0] + q[0, 1]) if k == 0 and l == 0 else q[k, l]
                    out[8 * a + k, 8 * b + l] = block * mode
    return out
