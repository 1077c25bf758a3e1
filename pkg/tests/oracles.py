"""Independent reference implementations used as test oracles.

Everything here is written from first principles (dense matrices, explicit
loops, brute-force scans) so it shares no code path with the library.
"""

import numpy as np


def dense_difference_matrix(height: int, width: int) -> np.ndarray:
    """Dense first-order difference matrix, x rows then y rows, row-major."""
    n = height * width
    rows = []
    for i in range(height):
        for j in range(width - 1):
            r = np.zeros(n)
            r[i * width + j] = -1.0
            r[i * width + j + 1] = 1.0
            rows.append(r)
    for i in range(height - 1):
        for j in range(width):
            r = np.zeros(n)
            r[i * width + j] = -1.0
            r[(i + 1) * width + j] = 1.0
            rows.append(r)
    return np.array(rows)


def dense_anchor_solution(
    gx, gy, wx, wy, anchor_pixel=0, anchor_value=0.0, anchor_weight=1.0,
    weight_floor=1e-8,
):
    """Solve the gauged normal equations densely with numpy only."""
    height = gx.shape[0]
    width = gy.shape[1]
    p = dense_difference_matrix(height, width)
    gamma = np.concatenate([np.asarray(gx).ravel(), np.asarray(gy).ravel()])
    sigma = np.concatenate([np.asarray(wx).ravel(), np.asarray(wy).ravel()])
    w = np.maximum(sigma, weight_floor) ** 2
    a = p.T @ np.diag(w) @ p
    b = p.T @ (w * gamma)
    a[anchor_pixel, anchor_pixel] += anchor_weight**2
    b[anchor_pixel] += anchor_weight**2 * anchor_value
    return np.linalg.solve(a, b).reshape(height, width)


def dense_mean_solution(gx, gy, wx, wy, mean_value=0.0, weight_floor=1e-8):
    """Minimum-norm weighted least squares (via lstsq) shifted to the mean."""
    height = gx.shape[0]
    width = gy.shape[1]
    p = dense_difference_matrix(height, width)
    gamma = np.concatenate([np.asarray(gx).ravel(), np.asarray(gy).ravel()])
    sigma = np.concatenate([np.asarray(wx).ravel(), np.asarray(wy).ravel()])
    s = np.maximum(sigma, weight_floor)
    z, *_ = np.linalg.lstsq(s[:, None] * p, s * gamma, rcond=None)
    return (z + (mean_value - z.mean())).reshape(height, width)


def dense_tikhonov_solution(gx, gy, wx, wy, mu, weight_floor=1e-8):
    height = gx.shape[0]
    width = gy.shape[1]
    p = dense_difference_matrix(height, width)
    gamma = np.concatenate([np.asarray(gx).ravel(), np.asarray(gy).ravel()])
    sigma = np.concatenate([np.asarray(wx).ravel(), np.asarray(wy).ravel()])
    w = np.maximum(sigma, weight_floor) ** 2
    a = p.T @ np.diag(w) @ p + mu * np.eye(height * width)
    b = p.T @ (w * gamma)
    return np.linalg.solve(a, b).reshape(height, width)


def central_difference(f, arr: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Coordinate-wise central differences of a scalar function of an array.

    Mutates entries in place and restores them, so ``f`` may close over
    ``arr`` directly.
    """
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.ravel()
    gflat = grad.ravel()
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        up = f()
        flat[k] = orig - h
        down = f()
        flat[k] = orig
        gflat[k] = (up - down) / (2.0 * h)
    return grad


def count_planar_regions(depth: np.ndarray, tol: float = 1e-8):
    """Count connected constant-gradient regions of a piecewise-planar map.

    Plane parameters are harvested from affine-consistent 2x2 blocks, each
    pixel is assigned to the plane it fits exactly, and connected components
    are counted per plane. Returns (n_regions, n_unassigned_pixels).
    """
    from scipy.ndimage import label

    height, width = depth.shape
    candidates = []
    for i in range(height - 1):
        for j in range(width - 1):
            a1 = depth[i, j + 1] - depth[i, j]
            a2 = depth[i + 1, j + 1] - depth[i + 1, j]
            b1 = depth[i + 1, j] - depth[i, j]
            b2 = depth[i + 1, j + 1] - depth[i, j + 1]
            if abs(a1 - a2) < tol and abs(b1 - b2) < tol:
                c = depth[i, j] - a1 * j - b1 * i
                candidates.append((a1, b1, c))
    uniq = []
    for cand in candidates:
        if not any(
            abs(cand[0] - u[0]) < 10 * tol
            and abs(cand[1] - u[1]) < 10 * tol
            and abs(cand[2] - u[2]) < 10 * tol
            for u in uniq
        ):
            uniq.append(cand)
    ii, jj = np.mgrid[0:height, 0:width]
    covered = np.zeros((height, width), dtype=bool)
    n_regions = 0
    eight = np.ones((3, 3), dtype=int)
    for a, b, c in uniq:
        fit = np.abs(depth - (a * jj + b * ii + c)) < 10 * tol
        if fit.any():
            _, n_comp = label(fit, structure=eight)
            n_regions += n_comp
            covered |= fit
    return n_regions, int((~covered).sum())


def brute_force_scale_shift(pred, gt, mask, s_range, t_range, steps=400):
    """Grid search for the best (s, t) alignment, refined twice."""
    p = pred[mask]
    g = gt[mask]
    best = (None, None, np.inf)
    s_lo, s_hi = s_range
    t_lo, t_hi = t_range
    for _ in range(3):
        s_grid = np.linspace(s_lo, s_hi, steps)
        t_grid = np.linspace(t_lo, t_hi, steps)
        errs = (
            (s_grid[:, None, None] * p[None, None, :]
             + t_grid[None, :, None] - g[None, None, :]) ** 2
        ).sum(axis=-1)
        k = np.unravel_index(np.argmin(errs), errs.shape)
        best = (s_grid[k[0]], t_grid[k[1]], errs[k])
        ds = (s_hi - s_lo) / steps
        dt = (t_hi - t_lo) / steps
        s_lo, s_hi = best[0] - 2 * ds, best[0] + 2 * ds
        t_lo, t_hi = best[1] - 2 * dt, best[1] + 2 * dt
    return best
