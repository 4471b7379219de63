"""Latent sampling, k-means clustering and nearest-centroid selection."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import degrade
from .perception import feature_distance
from .rng import stream


@dataclass
class ClusterConfig:
    M: int = 10000
    N: int = 10
    kmeans_iters: int = 100
    tol: float = 1e-6
    seed: int = 0

    def validate(self):
        if not 1 <= self.N <= self.M:
            raise ValueError(f"cluster config needs 1 <= N <= M (N={self.N}, M={self.M})")
        if self.kmeans_iters < 0 or self.tol < 0:
            raise ValueError("kmeans_iters and tol must be non-negative")


@dataclass
class CentroidSet:
    centers: np.ndarray  # (N, D) in the clustering space
    inertia: float
    cluster_sizes: np.ndarray
    center_images: list = field(default_factory=list)
    labels: np.ndarray | None = None
    inertia_history: list = field(default_factory=list)
    seeding_inertia: float = float("nan")
    iterations: int = 0
    key: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.centers)

    def permuted(self, order):
        order = np.asarray(order)
        imgs = [self.center_images[i] for i in order] if self.center_images else []
        return CentroidSet(self.centers[order], self.inertia, self.cluster_sizes[order], imgs,
                           None, list(self.inertia_history), self.seeding_inertia, self.iterations,
                           dict(self.key))

    # ---------------------------------------------------------------- storage
    def save(self, directory):
        """Write ``<stem>.json`` and ``<stem>.bin`` (little-endian float64 centres)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        stem = cache_stem(self.key)
        bin_path = directory / f"{stem}.bin"
        bin_path.write_bytes(np.ascontiguousarray(self.centers, dtype="<f8").tobytes())
        manifest = {
            "format": "cri-centroids-v1",
            "key": self.key,
            "shape": list(self.centers.shape),
            "data": bin_path.name,
            "inertia": self.inertia,
            "seeding_inertia": self.seeding_inertia,
            "cluster_sizes": [int(s) for s in self.cluster_sizes],
            "inertia_history": list(self.inertia_history),
            "iterations": self.iterations,
        }
        path = directory / f"{stem}.json"
        path.write_text(json.dumps(manifest, indent=2))
        return path

    @classmethod
    def load(cls, manifest_path, generator=None):
        manifest_path = Path(manifest_path)
        m = json.loads(manifest_path.read_text())
        raw = (manifest_path.parent / m["data"]).read_bytes()
        centers = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(m["shape"])
        cs = cls(centers, m["inertia"], np.array(m["cluster_sizes"]), [], None,
                 m["inertia_history"], m["seeding_inertia"], m["iterations"], m["key"])
        if generator is not None:
            cs.center_images = render_centers(generator, centers)
        return cs


def cache_stem(key):
    return "centroids_g{generator_seed}_c{class}_M{M}_N{N}_s{seed}".format(**key)


def sample_latents(generator, c, m, seed):
    """``m`` mapped style vectors for class ``c``, shape ``(m, d_w)``.

    Rows are the pre-replication W vectors; ``generator.replicate`` gives the
    per-layer layout.
    """
    if m == 0:
        return np.empty((0, generator.layout.d_w))
    return generator.map_base(generator.sample_z(m, seed), c)


def _sq_dists(x, centers):
    d2 = (np.sum(x * x, axis=1)[:, None] - 2.0 * x @ centers.T + np.sum(centers * centers, axis=1)[None, :])
    return np.maximum(d2, 0.0)


def _assign(x, centers):
    labels = np.argmin(_sq_dists(x, centers), axis=1)
    # exact squared distances to the chosen centres (the expanded form above
    # leaves rounding residue where a point sits on its centre)
    diff = x - centers[labels]
    return labels, np.einsum("ij,ij->i", diff, diff)


def kmeans_plusplus(x, n, rng):
    m = len(x)
    idx = [int(rng.integers(m))]
    closest = _sq_dists(x, x[idx[0]][None])[:, 0]
    for _ in range(1, n):
        total = closest.sum()
        if total > 0:
            nxt = int(rng.choice(m, p=closest / total))
        else:
            free = np.setdiff1d(np.arange(m), idx)
            nxt = int(rng.choice(free))
        idx.append(nxt)
        closest = np.minimum(closest, _sq_dists(x, x[nxt][None])[:, 0])
    return x[idx].copy()


def kmeans(points, cfg: ClusterConfig):
    """Lloyd's algorithm with k-means++ seeding.

    Stops when the relative centre shift drops to ``cfg.tol`` or after
    ``cfg.kmeans_iters`` updates. A cluster that empties is re-seeded to the
    point farthest from its current centre.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 3:
        x = x.reshape(len(x), -1)
    n = cfg.N
    if len(x) < n:
        raise ValueError(f"need at least N={n} points, got {len(x)}")
    if n < 1:
        raise ValueError("N must be >= 1")
    rng = stream(cfg.seed, "kmeans")
    centers = kmeans_plusplus(x, n, rng)
    labels, d2 = _assign(x, centers)
    history = [float(d2.sum())]
    iterations = 0
    for _ in range(cfg.kmeans_iters):
        new = np.empty_like(centers)
        taken = np.zeros(len(x), dtype=bool)
        for j in range(n):
            members = labels == j
            if members.any():
                new[j] = x[members].mean(axis=0)
            else:
                far = int(np.argmax(np.where(taken, -1.0, d2)))
                taken[far] = True
                new[j] = x[far]
        shift = np.linalg.norm(new - centers) / max(np.linalg.norm(centers), 1e-12)
        centers = new
        labels, d2 = _assign(x, centers)
        history.append(float(d2.sum()))
        iterations += 1
        if shift <= cfg.tol:
            break
    sizes = np.bincount(labels, minlength=n)
    return CentroidSet(centers=centers, inertia=history[-1], cluster_sizes=sizes, labels=labels,
                       inertia_history=history, seeding_inertia=history[0], iterations=iterations)


def render_centers(generator, centers):
    lay = generator.layout
    out = []
    for c in centers:
        w = c.reshape(lay.layers, lay.d_w) if c.size == lay.layers * lay.d_w else c
        out.append(generator.synthesize(w))
    return out


def build_centroids(generator, c, cfg: ClusterConfig, samples=None):
    """Sample (unless ``samples`` is given), cluster and render the centre images."""
    cfg.validate()
    if samples is None:
        samples = sample_latents(generator, c, cfg.M, cfg.seed)
    cs = kmeans(samples, cfg)
    cs.center_images = render_centers(generator, cs.centers)
    cs.key = {"generator_seed": int(generator.layout.seed), "class": int(c), "M": int(len(samples)),
              "N": int(cfg.N), "seed": int(cfg.seed)}
    return cs


def center_latent(generator, center):
    lay = generator.layout
    if center.size == lay.layers * lay.d_w:
        return center.reshape(lay.layers, lay.d_w).copy()
    return generator.replicate(center)


def centroid_distances(image_d, cs: CentroidSet, extractor, spec=None, degrade_centers=False):
    target = extractor.features(image_d)
    dists = []
    for img in cs.center_images:
        if degrade_centers and spec is not None:
            img = degrade.apply(spec, img)
        dists.append(feature_distance(target, extractor.features(img)))
    return np.array(dists)


def select_centroid(image_d, cs: CentroidSet, extractor, spec=None, generator=None, degrade_centers=False):
    """Index of the centre image nearest ``image_d`` in feature space.

    Returns ``(k, center, distances)``; ``center`` is the replicated latent when
    a generator is supplied, else the raw centre row. Ties go to the lowest index.
    """
    if len(cs) == 0:
        raise ValueError("centroid set is empty")
    dists = centroid_distances(image_d, cs, extractor, spec, degrade_centers)
    k = int(np.argmin(dists))
    center = center_latent(generator, cs.centers[k]) if generator is not None else cs.centers[k].copy()
    return k, center, dists


def config_dict(cfg: ClusterConfig):
    return asdict(cfg)
