"""Two-stage inversion: regularized latent offset, then pivotal finetuning.

Stage 1 freezes the generator and the selected centroid and optimizes only an
offset ``w_off``:

    L_op = d_feat(I_d, D(G(w_cen + w_off))) + lambda1 * mse(I_d, D(G(...)))
           + lambda2 * ||w_off||

Stage 2 freezes the pivot ``w_cen + w_off`` and finetunes the synthesis
parameters against the same reconstruction terms plus a locality penalty that
compares the original and tuned generators at latents interpolated between
the pivot and fresh random samples.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import cluster as clustering
from . import degrade
from .errors import DivergenceError
from .optim import Adam
from .perception import (
    PerceptualTarget,
    perceptual_distance,
    perceptual_distance_and_grads,
    pixel_l2,
    pixel_l2_grad,
)
from .rng import stream

REG_EPS = 1e-12
DIVERGENCE_BOUND = 1e6
MODES = ("cri", "avg-init", "no-reg", "direct-w", "joint")


@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda_l2: float = 1.0
    lambda_r: float = 0.1
    lambda_l2_r: float = 1.0
    reg_norm: str = "l2"  # "l1" only for the regularizer ablation

    def validate(self):
        for k, v in asdict(self).items():
            if k != "reg_norm" and not (np.isfinite(v) and v >= 0):
                raise ValueError(f"weights.{k} must be a finite value >= 0, got {v!r}")
        if self.reg_norm not in ("l1", "l2"):
            raise ValueError(f"weights.reg_norm must be 'l1' or 'l2', got {self.reg_norm!r}")


@dataclass
class StageSchedule:
    stage1_iters: int = 300
    stage2_iters: int = 100
    stage1_lr: float = 0.01
    stage2_lr: float = 0.001
    optimizer: str = "adam"

    def validate(self):
        for k in ("stage1_iters", "stage2_iters"):
            if getattr(self, k) < 0:
                raise ValueError(f"schedule.{k} must be >= 0, got {getattr(self, k)}")
        for k in ("stage1_lr", "stage2_lr"):
            if not getattr(self, k) > 0:
                raise ValueError(f"schedule.{k} must be > 0, got {getattr(self, k)}")
        if self.optimizer != "adam":
            raise ValueError("schedule.optimizer: only the adaptive-moment optimizer ('adam') is supported")


@dataclass
class StageResult:
    value: np.ndarray | object
    trajectory: dict
    best_iter: int
    best_loss: float


@dataclass
class InversionResult:
    mode: str
    w_cen: np.ndarray
    w_off: np.ndarray
    pivot: np.ndarray
    theta_star: object
    restored: np.ndarray
    stage1: dict
    stage2: dict
    centroid_index: int | None
    centroid_distances: list
    locality_radius: float
    wall_clock: dict = field(default_factory=dict)


class Problem:
    """A degraded observation bound to a generator and a feature extractor."""

    def __init__(self, generator, extractor, image_d, spec):
        self.generator = generator
        self.extractor = extractor
        self.image_d = np.asarray(image_d, dtype=np.float64)
        self.spec = spec
        self.full_shape = (generator.layout.resolution, generator.layout.resolution, 3)
        spec.validate_for(self.full_shape)
        expected = spec.output_shape(self.full_shape)
        if self.image_d.shape != expected:
            raise ValueError(f"degraded image has shape {self.image_d.shape}, expected {expected}")
        self.target = PerceptualTarget(extractor, self.image_d)

    def reconstruction(self, img, l2_weight):
        """Feature + weighted pixel loss of ``D(img)`` against the observation, with d/d img."""
        deg = degrade.apply(self.spec, img)
        lp, dlp = self.target.value_and_grad(deg)
        l2 = pixel_l2(deg, self.image_d)
        ddeg = dlp + l2_weight * pixel_l2_grad(deg, self.image_d)
        return lp, l2, degrade.adjoint(self.spec, ddeg, self.full_shape)


# ------------------------------------------------------------------ stage 1
def offset_norm(w_off, kind="l2"):
    """Smoothed norm that is exactly zero at zero; returns ``(value, grad)``."""
    x = np.asarray(w_off, dtype=np.float64)
    if kind == "l2":
        r = np.sqrt(np.sum(x * x) + REG_EPS)
        return float(r - np.sqrt(REG_EPS)), x / r
    a = np.sqrt(x * x + REG_EPS)
    return float(np.sum(a - np.sqrt(REG_EPS))), x / a


def stage1_loss(problem: Problem, w_cen, w_off, weights: LossWeights, return_terms=False):
    """Value of the offset objective and its gradient with respect to ``w_off``.

    ``w_off`` may be a full ``(L, d_w)`` array (W+) or a single ``(d_w,)`` row
    shared by every layer (W).
    """
    gen = problem.generator
    w = np.asarray(w_cen) + np.asarray(w_off)
    img, cache = gen.synthesize(w, return_cache=True)
    lp, l2, dimg = problem.reconstruction(img, weights.lambda1)
    dw, _ = gen.synthesis_backward(cache, dimg)
    reg, dreg = offset_norm(w_off, weights.reg_norm)
    if np.ndim(w_off) == 1:
        dw = dw.sum(axis=0)
    value = lp + weights.lambda1 * l2 + weights.lambda2 * reg
    grad = dw + weights.lambda2 * dreg
    if return_terms:
        return value, grad, {"lpips": lp, "l2": l2, "reg": reg}
    return value, grad


def _record(traj, **terms):
    for k, v in terms.items():
        traj.setdefault(k, []).append(float(v))


def _check_divergence(stage, t, value, traj):
    if not np.isfinite(value) or value > DIVERGENCE_BOUND:
        raise DivergenceError(stage, t, float(value), traj)


def optimize_offset(problem: Problem, w_cen, weights: LossWeights, sched: StageSchedule,
                    latent_space="w+", on_step=None):
    """Adam on the offset alone, starting from zero. Returns the best iterate."""
    lay = problem.generator.layout
    w_cen = np.array(w_cen, dtype=np.float64)
    shape = (lay.layers, lay.d_w) if latent_space == "w+" else (lay.d_w,)
    state = {"w_off": np.zeros(shape)}
    opt = Adam(lr=sched.stage1_lr)
    traj = {}
    best = (np.inf, -1, state["w_off"].copy())
    for t in range(sched.stage1_iters + 1):
        value, grad, terms = stage1_loss(problem, w_cen, state["w_off"], weights, return_terms=True)
        _record(traj, loss=value, lpips=terms["lpips"], l2=terms["l2"],
                offset_norm=float(np.linalg.norm(state["w_off"])))
        _check_divergence("stage1", t, value, traj)
        if value < best[0]:
            best = (value, t, state["w_off"].copy())
        if on_step is not None:
            on_step(t)
        if t < sched.stage1_iters:
            opt.step(state, {"w_off": grad})
    return StageResult(best[2], traj, best[1], float(best[0]))


def optimize_latent_direct(problem: Problem, w_init, weights: LossWeights, sched: StageSchedule,
                           latent_space="w+"):
    """Unregularized Adam on ``w`` itself, started at ``w_init``.

    Mathematically the same path as ``optimize_offset`` with ``lambda2 = 0``;
    kept as an executable check of that change of variables.
    """
    lay = problem.generator.layout
    w_init = np.array(w_init, dtype=np.float64)
    if latent_space == "w+":
        w_init = np.broadcast_to(w_init, (lay.layers, lay.d_w)).copy()
    elif w_init.ndim == 2:
        w_init = w_init[0].copy()
    unreg = LossWeights(**{**asdict(weights), "lambda2": 0.0})
    state = {"w": w_init.copy()}
    zero = np.zeros_like(w_init)
    opt = Adam(lr=sched.stage1_lr)
    traj = {}
    best = (np.inf, -1, state["w"].copy())
    for t in range(sched.stage1_iters + 1):
        value, grad, terms = stage1_loss(problem, zero, state["w"], unreg, return_terms=True)
        _record(traj, loss=value, lpips=terms["lpips"], l2=terms["l2"],
                offset_norm=float(np.linalg.norm(state["w"] - w_init)))
        _check_divergence("stage1", t, value, traj)
        if value < best[0]:
            best = (value, t, state["w"].copy())
        if t < sched.stage1_iters:
            opt.step(state, {"w": grad})
    return StageResult(best[2] - w_init, traj, best[1], float(best[0]))


# ------------------------------------------------------------------ stage 2
def locality_radius(samples, layers, max_points=500):
    """Half the median pairwise distance of class samples, in the replicated layout."""
    x = np.asarray(samples, dtype=np.float64)[:max_points]
    if len(x) < 2:
        return 0.0
    d2 = np.sum(x * x, 1)[:, None] - 2 * x @ x.T + np.sum(x * x, 1)[None, :]
    iu = np.triu_indices(len(x), 1)
    med = float(np.median(np.sqrt(np.maximum(d2[iu], 0.0))))
    return 0.5 * med * np.sqrt(layers)


def interpolate_toward(pivot, w_rand, alpha):
    """Point at distance ``alpha`` from the pivot along the direction to ``w_rand``."""
    pivot = np.asarray(pivot, dtype=np.float64)
    if alpha == 0:
        return pivot.copy()
    d = np.asarray(w_rand) - pivot
    n = np.linalg.norm(d)
    if n < 1e-12:
        return pivot.copy()
    return pivot + alpha * d / n


def draw_locality_latent(generator, rng, c, pivot, alpha):
    z = rng.standard_normal(generator.layout.d_z)
    w_rand = generator.mapping(z, c)
    return interpolate_toward(pivot, w_rand, alpha)


def _locality_value_and_grad(generator, extractor, theta, theta_star, w_r, lambda_l2_r, need_grad):
    x_r = generator.synthesize(w_r, theta)
    x_rs, cache = generator.synthesize(w_r, theta_star, return_cache=True)
    if not need_grad:
        return perceptual_distance(extractor, x_r, x_rs) + lambda_l2_r * pixel_l2(x_rs, x_r), None
    lp, _, dx = perceptual_distance_and_grads(extractor, x_r, x_rs)
    dx = dx + lambda_l2_r * pixel_l2_grad(x_rs, x_r)
    _, dparams = generator.synthesis_backward(cache, dx, need_w=False, need_params=True)
    return lp + lambda_l2_r * pixel_l2(x_rs, x_r), dparams


def locality_term(generator, extractor, theta, theta_star, pivot, c, alpha, seed, lambda_l2_r=1.0):
    """Locality penalty for one latent drawn from the ``seed`` stream."""
    rng = stream(seed, "locality")
    w_r = draw_locality_latent(generator, rng, c, pivot, alpha)
    value, _ = _locality_value_and_grad(generator, extractor, theta, theta_star, w_r, lambda_l2_r, False)
    return value


def finetune_loss(problem: Problem, theta, theta_star, pivot, w_r, weights: LossWeights, need_grad=True):
    """Stage-2 objective at ``theta_star`` for a fixed locality latent ``w_r``.

    Returns ``(value, grads, terms)`` with ``grads`` keyed like the parameter blocks.
    """
    gen = problem.generator
    img, cache = gen.synthesize(pivot, theta_star, return_cache=True)
    lp, l2, dimg = problem.reconstruction(img, weights.lambda_l2)
    grads = None
    if need_grad:
        _, grads = gen.synthesis_backward(cache, dimg, need_w=False, need_params=True)
    lr_grad = need_grad and weights.lambda_r > 0
    lr, dlr = _locality_value_and_grad(gen, problem.extractor, theta, theta_star, w_r,
                                       weights.lambda_l2_r, lr_grad)
    if lr_grad:
        for k in grads:
            grads[k] = grads[k] + weights.lambda_r * dlr[k]
    value = lp + weights.lambda_l2 * l2 + weights.lambda_r * lr
    return value, grads, {"lpips": lp, "l2": l2, "locality": lr}


def finetune_generator(problem: Problem, pivot, c, weights: LossWeights, sched: StageSchedule,
                       seed, alpha, theta=None):
    """Pivotal tuning of the synthesis parameters with the pivot frozen.

    A fresh locality latent is drawn every iteration. Returns the best iterate
    of the finetuning objective as ``StageResult.value`` (a ``GeneratorParams``).
    """
    gen = problem.generator
    theta = gen.snapshot() if theta is None else theta
    theta_star = theta.copy()
    pivot = np.array(pivot, dtype=np.float64)
    rng = stream(seed, "locality")
    opt = Adam(lr=sched.stage2_lr)
    traj = {}
    best = (np.inf, -1, theta_star.copy())
    for t in range(sched.stage2_iters + 1):
        w_r = draw_locality_latent(gen, rng, c, pivot, alpha)
        need = t < sched.stage2_iters
        value, grads, terms = finetune_loss(problem, theta, theta_star, pivot, w_r, weights, need_grad=need)
        _record(traj, loss=value, lpips=terms["lpips"], l2=terms["l2"], locality=terms["locality"],
                reconstruction=terms["lpips"] + weights.lambda_l2 * terms["l2"])
        _check_divergence("stage2", t, value, traj)
        if value < best[0]:
            best = (value, t, theta_star.copy())
        if need:
            opt.step(theta_star.blocks, grads)
    return StageResult(best[2], traj, best[1], float(best[0]))


def optimize_joint(problem: Problem, w_init, weights: LossWeights, sched: StageSchedule, latent_space="w+"):
    """Latent and generator optimized together in one stage (no offset, no locality)."""
    gen = problem.generator
    lay = gen.layout
    w_init = np.array(w_init, dtype=np.float64)
    if latent_space == "w+":
        w_init = np.broadcast_to(w_init, (lay.layers, lay.d_w)).copy()
    elif w_init.ndim == 2:
        w_init = w_init[0].copy()
    theta = gen.snapshot()
    w_state = {"w": w_init.copy()}
    opt_w = Adam(lr=sched.stage1_lr)
    opt_g = Adam(lr=sched.stage2_lr)
    iters = sched.stage1_iters + sched.stage2_iters
    traj = {}
    best = (np.inf, -1, w_state["w"].copy(), theta.copy())
    for t in range(iters + 1):
        img, cache = gen.synthesize(w_state["w"], theta, return_cache=True)
        lp, l2, dimg = problem.reconstruction(img, weights.lambda1)
        value = lp + weights.lambda1 * l2
        _record(traj, loss=value, lpips=lp, l2=l2, offset_norm=float(np.linalg.norm(w_state["w"] - w_init)))
        _check_divergence("joint", t, value, traj)
        if value < best[0]:
            best = (value, t, w_state["w"].copy(), theta.copy())
        if t < iters:
            dw, dparams = gen.synthesis_backward(cache, dimg, need_w=True, need_params=True)
            if w_state["w"].ndim == 1:
                dw = dw.sum(axis=0)
            opt_w.step(w_state, {"w": dw})
            opt_g.step(theta.blocks, dparams)
    return best, traj


# --------------------------------------------------------------- pipeline
def _as_layers(generator, w):
    w = np.asarray(w, dtype=np.float64)
    return generator.replicate(w) if w.ndim == 1 else w


def invert(generator, extractor, image_d, c, spec, cluster_cfg, weights: LossWeights,
           sched: StageSchedule, mode="cri", seed=0, latent_space="w+", degrade_centers=False,
           alpha=None, samples=None, centroids=None):
    """Full pipeline: sample, cluster, select, optimize the offset, finetune.

    ``samples`` / ``centroids`` may be passed in to reuse work across runs
    (the cluster-count sweep clusters one shared sample).
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if latent_space not in ("w", "w+"):
        raise ValueError("latent_space must be 'w' or 'w+'")
    weights.validate()
    sched.validate()
    cluster_cfg.validate()
    clock = {}
    t0 = time.perf_counter()
    problem = Problem(generator, extractor, image_d, spec)
    if samples is None:
        samples = clustering.sample_latents(generator, c, cluster_cfg.M, cluster_cfg.seed)
    if alpha is None:
        alpha = locality_radius(samples, generator.layout.layers)

    k, dists = None, []
    if mode == "avg-init":
        w_cen = generator.replicate(samples.mean(axis=0))
    else:
        cs = centroids if centroids is not None else clustering.build_centroids(generator, c, cluster_cfg, samples)
        k, w_cen, d = clustering.select_centroid(problem.image_d, cs, extractor, spec, generator, degrade_centers)
        dists = [float(v) for v in d]
    clock["init"] = time.perf_counter() - t0

    t1 = time.perf_counter()
    theta_digest = generator.params.digest()
    if mode == "joint":
        (best_loss, best_t, w_best, theta_star), traj = optimize_joint(problem, w_cen, weights, sched, latent_space)
        w_off = (w_best - (w_cen if w_best.ndim == 2 else w_cen[0]))
        pivot = _as_layers(generator, w_best)
        clock["stage1"] = time.perf_counter() - t1
        stage1 = {"trajectory": traj, "best_iter": best_t, "best_loss": float(best_loss)}
        stage2 = {"trajectory": {}, "best_iter": -1, "best_loss": float("nan")}
        restored = generator.synthesize(pivot, theta_star)
        clock["stage2"] = 0.0
    else:
        if mode == "direct-w":
            res1 = optimize_latent_direct(problem, w_cen, weights, sched, latent_space)
        else:
            w1 = LossWeights(**{**asdict(weights), "lambda2": 0.0}) if mode == "no-reg" else weights
            res1 = optimize_offset(problem, w_cen, w1, sched, latent_space)
        w_off = res1.value
        pivot = _as_layers(generator, w_cen + w_off)
        if generator.params.digest() != theta_digest:
            raise RuntimeError("generator parameters changed during the latent stage")
        clock["stage1"] = time.perf_counter() - t1
        stage1 = {"trajectory": res1.trajectory, "best_iter": res1.best_iter, "best_loss": res1.best_loss}

        t2 = time.perf_counter()
        pivot_before = pivot.copy()
        res2 = finetune_generator(problem, pivot, c, weights, sched, seed, alpha)
        if not np.array_equal(pivot, pivot_before):
            raise RuntimeError("pivot changed during finetuning")
        theta_star = res2.value
        clock["stage2"] = time.perf_counter() - t2
        stage2 = {"trajectory": res2.trajectory, "best_iter": res2.best_iter, "best_loss": res2.best_loss}
        restored = generator.synthesize(pivot, theta_star)
    clock["total"] = time.perf_counter() - t0
    return InversionResult(mode, w_cen, np.asarray(w_off), pivot, theta_star, restored, stage1, stage2,
                           k, dists, float(alpha), clock)
