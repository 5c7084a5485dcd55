"""Independent scalar oracles for the derived test values.

Everything here is written from the definitions with plain python loops, on
purpose: these must not share code paths with the library implementations
they check.
"""

import numpy as np


def bilinear_scalar(src, x, y):
    """Four-neighbor interpolation with zero outside the grid."""
    H, W = src.shape
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    fx, fy = x - x0, y - y0
    total = 0.0
    for dy in (0, 1):
        for dx in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            if 0 <= xi < W and 0 <= yi < H:
                w = (fx if dx else 1 - fx) * (fy if dy else 1 - fy)
                total += w * float(src[yi, xi])
    return total


def pool_loop(src, k):
    H, W = src.shape[-2:]
    out = np.zeros(src.shape[:-2] + (H // k, W // k))
    for idx in np.ndindex(src.shape[:-2]):
        for i in range(H // k):
            for j in range(W // k):
                block = src[idx + (slice(i * k, (i + 1) * k), slice(j * k, (j + 1) * k))]
                out[idx + (i, j)] = float(np.asarray(block, dtype=np.float64).sum()) / (k * k)
    return out


def conv_loop(src, kernel, bias=None):
    """Direct six-loop same-padding cross-correlation."""
    Cin, H, W = src.shape
    Cout, _, kh, kw = kernel.shape
    p = kh // 2
    out = np.zeros((Cout, H, W))
    for co in range(Cout):
        for y in range(H):
            for x in range(W):
                acc = 0.0
                for ci in range(Cin):
                    for dy in range(kh):
                        for dx in range(kw):
                            yy, xx = y + dy - p, x + dx - p
                            if 0 <= yy < H and 0 <= xx < W:
                                acc += float(src[ci, yy, xx]) * float(kernel[co, ci, dy, dx])
                out[co, y, x] = acc + (float(bias[co]) if bias is not None else 0.0)
    return out


def corr_loop(f_i, f_j):
    """Brute-force scaled inner products over every pixel pair."""
    C, H, W = f_i.shape
    out = np.zeros((H, W, H, W))
    scale = 1.0 / np.sqrt(C)
    for u in range(H):
        for v in range(W):
            for x in range(H):
                for y in range(W):
                    acc = 0.0
                    for c in range(C):
                        acc += float(f_i[c, u, v]) * float(f_j[c, x, y])
                    out[u, v, x, y] = acc * scale
    return out


def quat_rotate(q, p):
    """Rotate point p by unit quaternion q = (w, x, y, z) via q p q*."""
    w, x, y, z = q
    px, py, pz = p
    # quaternion product q * (0, p) * conj(q), expanded
    cx = 2 * (y * pz - z * py)
    cy = 2 * (z * px - x * pz)
    cz = 2 * (x * py - y * px)
    rx = px + w * cx + (y * cz - z * cy)
    ry = py + w * cy + (z * cx - x * cz)
    rz = pz + w * cz + (x * cy - y * cx)
    return rx, ry, rz


def project_pixel(q, t, cam, x, y, inv_depth):
    """Unproject one pixel, rotate/translate, reproject. Scalar arithmetic."""
    xn = (x - cam.cx) / cam.fx
    yn = (y - cam.cy) / cam.fy
    z = 1.0 / inv_depth
    px, py, pz = xn * z, yn * z, z
    rx, ry, rz = quat_rotate(q, (px, py, pz))
    rx, ry, rz = rx + t[0], ry + t[1], rz + t[2]
    return cam.fx * rx / rz + cam.cx, cam.fy * ry / rz + cam.cy


def per_pixel_mlp(concat_features, w_enc, b_enc, w_head, b_head):
    """One pixel through linear -> exact GeLU -> linear, scalar loops."""
    from math import erf, sqrt

    hidden = []
    for o in range(w_enc.shape[1]):
        acc = b_enc[o]
        for i, v in enumerate(concat_features):
            acc += v * w_enc[i, o]
        hidden.append(0.5 * acc * (1.0 + erf(acc / sqrt(2.0))))
    out = []
    for o in range(w_head.shape[1]):
        acc = b_head[o]
        for i, v in enumerate(hidden):
            acc += v * w_head[i, o]
        out.append(acc)
    return out


def density_scalar(mu, cov, p):
    dx, dy = p[0] - mu[0], p[1] - mu[1]
    expo = -0.5 * (dx * dx / cov[0] + dy * dy / cov[1])
    return float(np.exp(expo) / (2 * np.pi * np.sqrt(cov[0] * cov[1])))


def riemann_mass(mu, cov, spacing=0.05, extent_sigmas=8.0):
    """Numeric integral of the 2D density on a regular grid."""
    sx, sy = np.sqrt(cov[0]), np.sqrt(cov[1])
    xs = np.arange(mu[0] - extent_sigmas * sx, mu[0] + extent_sigmas * sx + spacing, spacing)
    ys = np.arange(mu[1] - extent_sigmas * sy, mu[1] + extent_sigmas * sy + spacing, spacing)
    gx, gy = np.meshgrid(xs, ys)
    dx, dy = gx - mu[0], gy - mu[1]
    dens = np.exp(-0.5 * (dx ** 2 / cov[0] + dy ** 2 / cov[1])) / (2 * np.pi * np.sqrt(cov[0] * cov[1]))
    return float(dens.sum() * spacing * spacing)


def de_boor_basis(n_intervals, order, u):
    """Cox-de Boor basis values on a uniform extended knot grid over [-1, 1]."""
    h = 2.0 / n_intervals
    knots = np.array([-1.0 + (i - order) * h for i in range(n_intervals + 2 * order + 1)])
    n_basis = n_intervals + order
    # order-0 (piecewise constant) seeds, half-open intervals
    vals = [[1.0 if knots[i] <= u < knots[i + 1] else 0.0 for i in range(len(knots) - 1)]]
    if u >= knots[n_intervals + order]:  # close the last domain interval at u == +1
        vals[0] = [0.0] * (len(knots) - 1)
        vals[0][n_intervals + order - 1] = 1.0
    for p in range(1, order + 1):
        row = []
        prev = vals[p - 1]
        for i in range(len(knots) - p - 1):
            left = 0.0
            if knots[i + p] != knots[i]:
                left = (u - knots[i]) / (knots[i + p] - knots[i]) * prev[i]
            right = 0.0
            if knots[i + p + 1] != knots[i + 1]:
                right = (knots[i + p + 1] - u) / (knots[i + p + 1] - knots[i + 1]) * prev[i + 1]
            row.append(left + right)
        vals.append(row)
    return np.array(vals[order][:n_basis])


def kan_scalar(u, base_w, coefs, n_intervals=8, order=3):
    """One channel of the univariate bank via the de Boor oracle."""
    uc = min(max(u, -1.0), 1.0)
    basis = de_boor_basis(n_intervals, order, uc)
    return base_w * u + float(np.dot(basis, coefs))


def variance_two_pass(vals):
    vals = [float(v) for v in vals]
    n = len(vals)
    mean = sum(vals) / n
    return sum((v - mean) ** 2 for v in vals) / n


def golden_section(f, lo, hi, tol=1e-10, max_iter=200):
    """Scalar minimizer over [lo, hi] (unimodal f)."""
    invphi = (np.sqrt(5.0) - 1) / 2
    a, b = lo, hi
    c, d = b - invphi * (b - a), a + invphi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if abs(b - a) < tol:
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def flow_loss_loop(flows, gt, valid, gamma):
    """Scalar re-summation of the weighted per-iteration L1 flow loss."""
    n = len(flows)
    total = 0.0
    idx = [i for i in range(gt.shape[0]) if valid[i]]
    for t, f in enumerate(flows, start=1):
        acc = 0.0
        for i in idx:
            acc += abs(float(f[i, 0]) - float(gt[i, 0])) + abs(float(f[i, 1]) - float(gt[i, 1]))
        total += gamma ** (n - t) * acc / len(idx)
    return total
