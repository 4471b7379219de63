"""Procedural conditional generator with a known multi-modal latent layout.

The mapping network sends ``(z, c)`` to a style vector

    w = A2 tanh(A1 z + b1) + b2 + E[c] + mu[c, k(z)]

where the mode index ``k(z)`` is the argmax of ``z . u[c, k]`` over K mode
directions. The mode directions live in a fixed 2-D subspace of z-space and
``A1`` reads only the orthogonal complement, so the mode index is independent
of the tanh features. That makes the per-mode mean of ``w`` exactly
``mu[c, k] + b2 + E[c] + A2 E[tanh(A1 z + b1)]``, computed here by
Gauss-Hermite quadrature.

The synthesis network renders one Gaussian blob per layer. Row ``l`` of the
latent is read out affinely into ``(cx, cy, sigma, r, g, b, amp)``, squashed
into valid ranges, splatted, and passed through a logistic output.
"""
from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import CorruptSnapshotError, InvalidClassError, InvalidLatentError
from .rng import stream

SIGMA_MIN = 0.05
SIGMA_MAX = 0.30
_LOG_SPAN = np.log(SIGMA_MAX) - np.log(SIGMA_MIN)
PARAM_NAMES = ("readout", "readout_bias", "out_bias")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True)
class GeneratorLayout:
    seed: int = 0
    resolution: int = 32
    layers: int = 6
    d_z: int = 16
    d_w: int = 32
    classes: int = 4
    modes: int = 3
    hidden: int = 32
    mode_separation: float = 15.0  # min inter-mode distance / intra-mode total std
    intra_std: float = 0.1  # per-coordinate scale of the tanh branch
    amplitude: float = 3.0  # blob amplitude bias; small values keep the output logistic near-linear
    readout_gain: float = 3.0  # logit spread produced by the mode offsets
    color_gain: float = 1.0  # extra readout gain on the colour rows


class GeneratorParams:
    """Named synthesis parameter blocks, compared and copied by value."""

    def __init__(self, blocks):
        self.blocks = OrderedDict((k, np.array(v, dtype=np.float64)) for k, v in blocks.items())

    def copy(self):
        return GeneratorParams(self.blocks)

    def __getitem__(self, name):
        return self.blocks[name]

    def __setitem__(self, name, value):
        self.blocks[name] = value

    def keys(self):
        return self.blocks.keys()

    def items(self):
        return self.blocks.items()

    @property
    def size(self):
        return sum(v.size for v in self.blocks.values())

    def flat(self):
        return np.concatenate([v.ravel() for v in self.blocks.values()])

    def distance(self, other):
        return float(np.linalg.norm(self.flat() - other.flat()))

    def digest(self):
        h = hashlib.sha256()
        for k, v in self.blocks.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()

    def same_layout(self, other):
        return list(self.blocks) == list(other.blocks) and all(
            self.blocks[k].shape == other.blocks[k].shape for k in self.blocks
        )

    def __eq__(self, other):
        if not isinstance(other, GeneratorParams) or not self.same_layout(other):
            return False
        return all(np.array_equal(self.blocks[k], other.blocks[k]) for k in self.blocks)

    def __repr__(self):
        shapes = ", ".join(f"{k}={v.shape}" for k, v in self.blocks.items())
        return f"GeneratorParams({shapes})"


class SynthesisCache:
    __slots__ = ("w", "raw", "geom", "img", "params")

    def __init__(self, w, raw, geom, img, params):
        self.w = w
        self.raw = raw
        self.geom = geom
        self.img = img
        self.params = params


def _tanh_moments(mean, cov, order=40):
    """E[tanh(a)] and Cov[tanh(a)] for a ~ N(mean, cov), by Gauss-Hermite."""
    nodes, weights = np.polynomial.hermite_e.hermegauss(order)
    weights = weights / weights.sum()
    sd = np.sqrt(np.diag(cov))
    vals = np.tanh(mean[:, None] + sd[:, None] * nodes[None, :])
    m1 = vals @ weights
    # pairwise second moments: a_i = m_i + s_i t1, a_j = m_j + rho s_j t1 + sqrt(1-rho^2) s_j t2
    rho = cov / np.outer(sd, sd)
    np.fill_diagonal(rho, 1.0)
    rho = np.clip(rho, -1.0, 1.0)
    t1 = nodes[:, None]
    t2 = nodes[None, :]
    w2 = np.outer(weights, weights)
    n = len(mean)
    second = np.empty((n, n))
    for i in range(n):
        hi = np.tanh(mean[i] + sd[i] * t1)
        aj = mean[:, None, None] + sd[:, None, None] * (
            rho[i][:, None, None] * t1[None] + np.sqrt(1.0 - rho[i] ** 2)[:, None, None] * t2[None]
        )
        second[i] = np.einsum("jab,ab->j", hi[None] * np.tanh(aj), w2)
    second = 0.5 * (second + second.T)
    return m1, second - np.outer(m1, m1)


class ToyGenerator:
    """Deterministic conditional generator built from a single integer seed."""

    def __init__(self, layout: GeneratorLayout | None = None, **overrides):
        layout = layout or GeneratorLayout()
        if overrides:
            layout = GeneratorLayout(**{**layout.__dict__, **overrides})
        self.layout = layout
        lay = layout
        seed = lay.seed

        q, _ = np.linalg.qr(stream(seed, "rotation").standard_normal((lay.d_z, lay.d_z)))
        plane, comp = q[:, :2], q[:, 2:]
        self.A1 = 1.5 * stream(seed, "A1").standard_normal((lay.hidden, lay.d_z - 2)) / np.sqrt(lay.d_z - 2) @ comp.T
        self.b1 = 0.5 * stream(seed, "b1").standard_normal(lay.hidden)
        self.A2 = lay.intra_std * stream(seed, "A2").standard_normal((lay.d_w, lay.hidden))
        self.b2 = 0.1 * stream(seed, "b2").standard_normal(lay.d_w)
        self.class_embed = 0.5 * stream(seed, "class_embed").standard_normal((lay.classes, lay.d_w))

        self._h_mean, h_cov = _tanh_moments(self.b1, self.A1 @ self.A1.T)
        self.intra_cov = self.A2 @ h_cov @ self.A2.T
        self.intra_total_std = float(np.sqrt(np.trace(self.intra_cov)))
        self.shared_offset = self.A2 @ self._h_mean + self.b2

        phase = stream(seed, "mode_phase").uniform(0.0, 2.0 * np.pi, lay.classes)
        angles = phase[:, None] + 2.0 * np.pi * np.arange(lay.modes)[None, :] / lay.modes
        self.mode_dirs = np.einsum("dp,ckp->ckd", plane, np.stack([np.cos(angles), np.sin(angles)], -1))

        mu = stream(seed, "mode_offsets").standard_normal((lay.classes, lay.modes, lay.d_w))
        if lay.modes > 1:
            mu -= mu.mean(axis=1, keepdims=True)
            for c in range(lay.classes):
                d = np.linalg.norm(mu[c][:, None] - mu[c][None, :], axis=-1)
                dmin = d[~np.eye(lay.modes, dtype=bool)].min()
                mu[c] *= lay.mode_separation * self.intra_total_std / dmin
        else:
            mu[:] = 0.0
        self.mode_offsets = mu

        # readout scaled so the mode offsets span a few logits
        spread = max(lay.mode_separation * self.intra_total_std, 1e-12)
        readout = lay.readout_gain / spread * stream(seed, "readout").standard_normal((lay.layers, 7, lay.d_w))
        readout[:, 3:6, :] *= lay.color_gain
        rb = stream(seed, "readout_bias")
        rbias = np.empty((lay.layers, 7))
        rbias[:, 0:2] = rb.uniform(-1.2, 1.2, (lay.layers, 2))
        rbias[:, 2] = rb.uniform(-1.0, 0.5, lay.layers)
        rbias[:, 3:6] = rb.standard_normal((lay.layers, 3))
        rbias[:, 6] = lay.amplitude * np.where(np.arange(lay.layers) % 3 == 2, -1.0, 1.0)
        out_bias = np.full(3, -1.0)
        self.params = GeneratorParams(
            OrderedDict(readout=readout, readout_bias=rbias, out_bias=out_bias)
        )

    # ------------------------------------------------------------------ mapping
    def _check_class(self, c):
        if not (isinstance(c, (int, np.integer)) and 0 <= int(c) < self.layout.classes):
            raise InvalidClassError(f"class index {c!r} outside [0, {self.layout.classes})")
        return int(c)

    def mode_index(self, z, c):
        c = self._check_class(c)
        scores = np.asarray(z, dtype=np.float64) @ self.mode_dirs[c].T
        return np.argmax(scores, axis=-1)  # first maximum wins ties

    def map_base(self, z, c):
        """Pre-replication style vector(s), shape ``(..., d_w)``."""
        c = self._check_class(c)
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.layout.d_z or not np.all(np.isfinite(z)):
            raise InvalidLatentError(f"z must be finite with trailing size {self.layout.d_z}")
        k = self.mode_index(z, c)
        h = np.tanh(z @ self.A1.T + self.b1)
        return h @ self.A2.T + self.b2 + self.class_embed[c] + self.mode_offsets[c][k]

    def mapping(self, z, c):
        """Map to W space: rows replicated over the L synthesis layers."""
        return self.replicate(self.map_base(z, c))

    def replicate(self, w_base):
        w_base = np.asarray(w_base, dtype=np.float64)
        shape = w_base.shape[:-1] + (self.layout.layers, self.layout.d_w)
        return np.broadcast_to(w_base[..., None, :], shape).copy()

    def true_mode_means(self, c):
        c = self._check_class(c)
        return self.mode_offsets[c] + self.class_embed[c] + self.shared_offset

    def sample_z(self, m, seed):
        return stream(seed, "z").standard_normal((m, self.layout.d_z))

    # ---------------------------------------------------------------- synthesis
    def _as_rows(self, w):
        w = np.asarray(w, dtype=np.float64)
        lay = self.layout
        if w.shape == (lay.d_w,):
            w = np.broadcast_to(w, (lay.layers, lay.d_w))
        if w.shape != (lay.layers, lay.d_w):
            raise InvalidLatentError(f"latent shape {w.shape} does not match ({lay.layers}, {lay.d_w})")
        if not np.all(np.isfinite(w)):
            raise InvalidLatentError("latent contains non-finite entries")
        return w

    @staticmethod
    def _squash(raw):
        s = sigmoid(raw)
        geom = np.empty_like(raw)
        geom[:, 0:2] = s[:, 0:2]
        geom[:, 2] = SIGMA_MIN * np.exp(_LOG_SPAN * s[:, 2])
        geom[:, 3:6] = s[:, 3:6]
        geom[:, 6] = raw[:, 6]
        return geom, s

    def synthesize(self, w, params=None, return_cache=False):
        params = self.params if params is None else params
        w = self._as_rows(w)
        raw = np.einsum("lkd,ld->lk", params["readout"], w) + params["readout_bias"]
        geom, _ = self._squash(raw)
        res = self.layout.resolution
        pre = kernels.splat_forward(geom, params["out_bias"], res, res)
        img = sigmoid(pre)
        if return_cache:
            return img, SynthesisCache(w, raw, geom, img, params)
        return img

    synthesis = synthesize

    def synthesis_backward(self, cache, dimg, need_w=True, need_params=False):
        """Vector-Jacobian product of ``synthesize`` at ``cache``.

        Returns ``(dw, dparams)``; either is ``None`` when not requested.
        ``dw`` has shape (L, d_w) even when a single row was broadcast.
        """
        img = cache.img
        dpre = dimg * img * (1.0 - img)
        dgeom, dbias = kernels.splat_backward(cache.geom, dpre)
        s = sigmoid(cache.raw)
        ds = s * (1.0 - s)
        draw = np.empty_like(cache.raw)
        draw[:, 0:2] = dgeom[:, 0:2] * ds[:, 0:2]
        draw[:, 2] = dgeom[:, 2] * cache.geom[:, 2] * _LOG_SPAN * ds[:, 2]
        draw[:, 3:6] = dgeom[:, 3:6] * ds[:, 3:6]
        draw[:, 6] = dgeom[:, 6]
        dw = np.einsum("lkd,lk->ld", cache.params["readout"], draw) if need_w else None
        dparams = None
        if need_params:
            dparams = OrderedDict(
                readout=draw[:, :, None] * cache.w[:, None, :],
                readout_bias=draw,
                out_bias=dbias,
            )
        return dw, dparams

    # ----------------------------------------------------------- param plumbing
    def snapshot(self, params=None):
        return (self.params if params is None else params).copy()

    def restore(self, snap):
        if not isinstance(snap, GeneratorParams) or not snap.same_layout(self.params):
            raise CorruptSnapshotError("snapshot layout does not match generator parameters")
        self.params = snap.copy()
