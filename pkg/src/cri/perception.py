"""Perceptual features, distances and evaluation metrics.

The feature extractor is a small fixed pyramid of 3x3 convolutions with tanh
activations and 2x average pooling between scales. Weights come from a seeded
stream (or a weight file), and are never trained. Distances follow the LPIPS
recipe: features are unit-normalised across channels at every location, and
the squared difference is averaged over space and summed over scales.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import kernels
from .rng import stream

# LPIPS input scaling layer constants
INPUT_SHIFT = np.array([-0.030, -0.088, -0.188])
INPUT_SCALE = np.array([0.458, 0.448, 0.450])
NORM_EPS = 1e-10


class ResizeOp:
    """Separable bilinear resize (half-pixel centres, edge clamped) as a linear map."""

    def __init__(self, in_hw, out_hw):
        self.in_hw = tuple(in_hw)
        self.out_hw = tuple(out_hw)
        self.mh = self._axis(in_hw[0], out_hw[0])
        self.mw = self._axis(in_hw[1], out_hw[1])

    @staticmethod
    def _axis(n_in, n_out):
        m = np.zeros((n_out, n_in))
        src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        frac = src - i0
        rows = np.arange(n_out)
        np.add.at(m, (rows, i0), 1.0 - frac)
        np.add.at(m, (rows, i1), frac)
        return m

    def __call__(self, img):
        return np.einsum("ij,jkc,lk->ilc", self.mh, img, self.mw)

    def adjoint(self, grad):
        return np.einsum("ij,ilc,lk->jkc", self.mh, grad, self.mw)


def resize_bilinear(img, out_hw):
    return ResizeOp(img.shape[:2], out_hw)(img)


class _Cache:
    __slots__ = ("resize", "acts", "norms", "radii")


class FeatureExtractor:
    """Frozen random-feature pyramid.

    ``weights`` may be given as a list of ``(kernel, bias)`` pairs with kernels
    shaped ``(3, 3, c_in, c_out)``; otherwise they are drawn from ``seed``.
    Inputs whose spatial size differs from ``resolution`` are bilinearly
    resized first.
    """

    def __init__(self, seed=0, channels=16, scales=3, resolution=32, gain=1.6, weights=None):
        self.seed = int(seed)
        self.resolution = int(resolution)
        if weights is None:
            weights = []
            c_in = 3
            for s in range(scales):
                rng = stream(seed, "extractor", s)
                k = gain * rng.standard_normal((3, 3, c_in, channels)) / np.sqrt(9 * c_in)
                b = 0.1 * rng.standard_normal(channels)
                weights.append((k, b))
                c_in = channels
        self._weights = tuple(
            (np.array(k, dtype=np.float64), np.array(b, dtype=np.float64)) for k, b in weights
        )
        for k, b in self._weights:
            k.setflags(write=False)
            b.setflags(write=False)
        if resolution % (1 << (len(self._weights) - 1)):
            raise ValueError("resolution must be divisible by 2**(scales-1)")
        self._resizers = {}

    @property
    def weights(self):
        return self._weights

    @property
    def scales(self):
        return len(self._weights)

    def describe(self):
        return {
            "seed": self.seed,
            "scales": self.scales,
            "channels": [int(k.shape[3]) for k, _ in self._weights],
            "resolution": self.resolution,
            "layers_used": "all scales, post-tanh, channel-normalised",
        }

    # ------------------------------------------------------------------ forward
    def _resizer(self, hw):
        key = tuple(hw)
        if key not in self._resizers:
            self._resizers[key] = ResizeOp(key, (self.resolution, self.resolution))
        return self._resizers[key]

    def features(self, img, return_cache=False):
        """Unit-normalised feature maps, one ``(h, w, c)`` array per scale."""
        img = np.asarray(img, dtype=np.float64)
        cache = _Cache()
        cache.resize = None
        if img.shape[:2] != (self.resolution, self.resolution):
            cache.resize = self._resizer(img.shape[:2])
            img = cache.resize(img)
        x = (2.0 * img - 1.0 - INPUT_SHIFT) / INPUT_SCALE
        acts, norms, radii = [], [], []
        for s, (k, b) in enumerate(self._weights):
            if s > 0:
                h, w, c = x.shape
                x = x.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3))
            x = np.tanh(kernels.conv3x3_forward(x, k, b))
            r = np.sqrt(np.sum(x * x, axis=2, keepdims=True) + NORM_EPS)
            acts.append(x)
            radii.append(r)
            norms.append(x / r)
        cache.acts, cache.norms, cache.radii = acts, norms, radii
        return (norms, cache) if return_cache else norms

    def backward(self, cache, dnorms):
        """Gradient w.r.t. the input image given gradients w.r.t. the normalised maps."""
        dx = None
        for s in range(self.scales - 1, -1, -1):
            n, r, a = cache.norms[s], cache.radii[s], cache.acts[s]
            dn = dnorms[s]
            dh = (dn - n * np.sum(n * dn, axis=2, keepdims=True)) / r
            if dx is not None:
                dh = dh + np.repeat(np.repeat(dx, 2, axis=0), 2, axis=1) / 4.0
            da = dh * (1.0 - a * a)
            dx = kernels.conv3x3_backward_input(da, self._weights[s][0])
        dimg = dx * (2.0 / INPUT_SCALE)
        if cache.resize is not None:
            dimg = cache.resize.adjoint(dimg)
        return dimg

    def embed(self, img):
        """Pooled embedding: per-channel spatial means of every scale, concatenated."""
        return np.concatenate([n.mean(axis=(0, 1)) for n in self.features(img)])

    # -------------------------------------------------------------- weight file
    def save_weights(self, path):
        """Write ``<path>.bin`` (little-endian float32) and ``<path>.json`` manifest."""
        path = Path(path)
        blocks, chunks = [], []
        for s, (k, b) in enumerate(self._weights):
            blocks.append({"name": f"stage{s}.kernel", "shape": list(k.shape)})
            blocks.append({"name": f"stage{s}.bias", "shape": list(b.shape)})
            chunks += [k.ravel(), b.ravel()]
        data = np.concatenate(chunks).astype("<f4")
        bin_path = path.with_suffix(".bin")
        bin_path.write_bytes(data.tobytes())
        manifest = {"format": "cri-extractor-v1", "dtype": "<f4", "data": bin_path.name,
                    "resolution": self.resolution, "blocks": blocks}
        path.with_suffix(".json").write_text(json.dumps(manifest, indent=2))
        return path.with_suffix(".json")

    @classmethod
    def from_weight_file(cls, manifest_path, seed=0):
        manifest_path = Path(manifest_path)
        manifest = json.loads(manifest_path.read_text())
        data = np.frombuffer((manifest_path.parent / manifest["data"]).read_bytes(), dtype="<f4")
        arrays, pos = [], 0
        for blk in manifest["blocks"]:
            n = int(np.prod(blk["shape"]))
            if pos + n > data.size:
                raise ValueError(f"weight file too short for block {blk['name']}")
            arrays.append(data[pos:pos + n].astype(np.float64).reshape(blk["shape"]))
            pos += n
        if pos != data.size:
            raise ValueError("weight file has trailing data")
        pairs = list(zip(arrays[0::2], arrays[1::2]))
        return cls(seed=seed, resolution=manifest.get("resolution", 32), weights=pairs)


# ---------------------------------------------------------------- distances
def _check_same(x, y):
    if np.shape(x) != np.shape(y):
        raise ValueError(f"shape mismatch: {np.shape(x)} vs {np.shape(y)}")


def feature_distance(fx, fy):
    return float(sum(np.mean(np.sum((a - b) ** 2, axis=2)) for a, b in zip(fx, fy)))


def perceptual_distance(fx_extractor: FeatureExtractor, x, y):
    _check_same(x, y)
    return feature_distance(fx_extractor.features(x), fx_extractor.features(y))


class PerceptualTarget:
    """Perceptual distance to a fixed image, with its features cached."""

    def __init__(self, extractor: FeatureExtractor, target):
        self.extractor = extractor
        self.shape = np.shape(target)
        self.feats = extractor.features(target)

    def value_and_grad(self, x):
        _check_same(x, np.empty(self.shape))
        feats, cache = self.extractor.features(x, return_cache=True)
        value = 0.0
        dnorms = []
        for a, b in zip(feats, self.feats):
            diff = a - b
            hw = diff.shape[0] * diff.shape[1]
            value += np.sum(diff * diff) / hw
            dnorms.append(2.0 * diff / hw)
        return float(value), self.extractor.backward(cache, dnorms)


def perceptual_distance_and_grads(extractor, x, y):
    """Distance plus gradients with respect to both arguments."""
    _check_same(x, y)
    fx, cx = extractor.features(x, return_cache=True)
    fy, cy = extractor.features(y, return_cache=True)
    value = 0.0
    dx_n, dy_n = [], []
    for a, b in zip(fx, fy):
        diff = a - b
        hw = diff.shape[0] * diff.shape[1]
        value += np.sum(diff * diff) / hw
        dx_n.append(2.0 * diff / hw)
        dy_n.append(-2.0 * diff / hw)
    return float(value), extractor.backward(cx, dx_n), extractor.backward(cy, dy_n)


def pixel_l2(x, y):
    _check_same(x, y)
    d = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    return float(np.mean(d * d))


def pixel_l2_grad(x, y):
    """Gradient of ``pixel_l2`` with respect to ``x``."""
    d = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    return 2.0 * d / d.size


PSNR_CAP = 99.0


def psnr(x, y):
    mse = pixel_l2(x, y)
    if mse < 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def _sqrtm_psd(a):
    vals, vecs = np.linalg.eigh(0.5 * (a + a.T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(mu1, cov1, mu2, cov2, psd_tol=1e-8):
    """Frechet distance between two Gaussians.

    The cross term ``Tr((cov1 cov2)^{1/2})`` is evaluated as the trace of the
    square root of the symmetric product ``S1 cov2 S1`` with ``S1 = cov1^{1/2}``,
    which has the same eigenvalues as ``cov1 cov2``.
    """
    mu1 = np.atleast_1d(np.asarray(mu1, dtype=np.float64))
    mu2 = np.atleast_1d(np.asarray(mu2, dtype=np.float64))
    cov1 = np.atleast_2d(np.asarray(cov1, dtype=np.float64))
    cov2 = np.atleast_2d(np.asarray(cov2, dtype=np.float64))
    if mu1.shape != mu2.shape or cov1.shape != cov2.shape or cov1.shape != (mu1.size, mu1.size):
        raise ValueError("mean/covariance shapes are inconsistent")
    for name, c in (("cov1", cov1), ("cov2", cov2)):
        if not np.allclose(c, c.T, atol=1e-10, rtol=1e-8):
            raise ValueError(f"{name} is not symmetric")
        if np.linalg.eigvalsh(0.5 * (c + c.T)).min() < -psd_tol:
            raise ValueError(f"{name} is not positive semidefinite")
    s1 = _sqrtm_psd(cov1)
    cross = np.linalg.eigvalsh(s1 @ cov2 @ s1)
    tr_cross = float(np.sum(np.sqrt(np.clip(cross, 0.0, None))))
    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * tr_cross)
    return max(value, 0.0)


def embed_set(extractor: FeatureExtractor, images):
    """Sample mean and unbiased covariance of the pooled embeddings."""
    emb = np.stack([extractor.embed(im) for im in images])
    mu = emb.mean(axis=0)
    if len(emb) < 2:
        return mu, np.zeros((emb.shape[1], emb.shape[1]))
    return mu, np.cov(emb, rowvar=False, ddof=1)
