"""Pure numpy versions of the hot kernels.

Shapes follow the compiled module exactly; see ``cri.kernels`` for the
contract. ``geom`` rows are ``(cx, cy, sigma, red, green, blue, amp)`` with
positions in unit image coordinates.
"""
import numpy as np


def _grids(h, w):
    ys = (np.arange(h, dtype=np.float64) + 0.5) / h
    xs = (np.arange(w, dtype=np.float64) + 0.5) / w
    return ys, xs


def _blobs(geom, h, w):
    ys, xs = _grids(h, w)
    inv = 1.0 / (2.0 * geom[:, 2] ** 2)
    dy = ys[None, :] - geom[:, 1:2]
    dx = xs[None, :] - geom[:, 0:1]
    gy = np.exp(-dy * dy * inv[:, None])
    gx = np.exp(-dx * dx * inv[:, None])
    return gy[:, :, None] * gx[:, None, :], dy, dx


def splat_forward(geom, bias, h, w):
    g, _, _ = _blobs(geom, h, w)
    weights = geom[:, 6:7] * geom[:, 3:6]
    return np.einsum("lyx,lc->yxc", g, weights) + bias


def splat_backward(geom, dpre):
    h, w, _ = dpre.shape
    g, dy, dx = _blobs(geom, h, w)
    amp = geom[:, 6]
    col = geom[:, 3:6]
    sig = geom[:, 2]
    s = np.einsum("yxc,lyx->lc", dpre, g)
    q = np.einsum("yxc,lc->lyx", dpre, amp[:, None] * col) * g
    dgeom = np.empty_like(geom)
    inv2 = 1.0 / sig**2
    dgeom[:, 0] = np.einsum("lyx,lx->l", q, dx) * inv2
    dgeom[:, 1] = np.einsum("lyx,ly->l", q, dy) * inv2
    r2 = dy[:, :, None] ** 2 + dx[:, None, :] ** 2
    dgeom[:, 2] = np.einsum("lyx,lyx->l", q, r2) * inv2 / sig
    dgeom[:, 3:6] = amp[:, None] * s
    dgeom[:, 6] = np.sum(s * col, axis=1)
    dbias = dpre.sum(axis=(0, 1))
    return dgeom, dbias


def conv3x3_forward(x, weight, bias):
    h, w, _ = x.shape
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    out = np.broadcast_to(bias, (h, w, weight.shape[3])).copy()
    for i in range(3):
        for j in range(3):
            out += xp[i:i + h, j:j + w] @ weight[i, j]
    return out


def conv3x3_backward_input(dy, weight):
    h, w, _ = dy.shape
    dxp = np.zeros((h + 2, w + 2, weight.shape[2]))
    for i in range(3):
        for j in range(3):
            dxp[i:i + h, j:j + w] += dy @ weight[i, j].T
    return dxp[1:-1, 1:-1]
