"""Pure-numpy implementations of the correlation search kernels."""
import numpy as np


def correlate_valid(reference: np.ndarray, patch: np.ndarray) -> np.ndarray:
    d, h, w = patch.shape
    win = np.lib.stride_tricks.sliding_window_view(reference, (h, w), axis=(1, 2))
    # win: (d, H-h+1, W-w+1, h, w); accumulate in double to match the
    # compiled backend bit-for-bit up to summation order
    return np.einsum(
        "dijhw,dhw->ij",
        win.astype(np.float64, copy=False),
        patch.astype(np.float64, copy=False),
        optimize=True,
    )


def best_match(refs: np.ndarray, patch: np.ndarray):
    best = (-np.inf, -1, -1, -1)
    for k in range(refs.shape[0]):
        sim = correlate_valid(refs[k], patch)
        flat = int(np.argmax(sim))
        top, left = divmod(flat, sim.shape[1])
        val = float(sim[top, left])
        # strict > keeps the lowest-k / raster-first winner on ties
        if val > best[0]:
            best = (val, k, top, left)
    return best[1], best[2], best[3], best[0]
