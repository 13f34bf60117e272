import numpy as np


def central_difference_grad(fn, param: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function w.r.t. one array,
    perturbing entries in place."""
    grad = np.empty_like(param)
    it = np.nditer(param, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = param[idx]
        param[idx] = orig + step
        up = fn()
        param[idx] = orig - step
        down = fn()
        param[idx] = orig
        grad[idx] = (up - down) / (2.0 * step)
        it.iternext()
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    """Elementwise |a - n| / max(|a|, |n|, floor); the floor keeps near-zero
    gradients measured quasi-absolutely instead of blowing up the ratio."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
