"""Experiment orchestration: targets, single runs, plans and ablation sweeps."""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import cluster as clustering
from . import degrade
from ._version import __version__
from .config import Config, from_dict
from .errors import ConfigError
from .generator import ToyGenerator
from .invert import LossWeights, invert
from .kernels import BACKEND
from .perception import FeatureExtractor, embed_set, frechet_distance, perceptual_distance, pixel_l2, psnr
from .records import RunRecord, load_mask, load_png, save_png, trajectory_lists, write_atomic
from .rng import stream

REFERENCE_SIZE = 200
REFERENCE_SEED = 7_000_001
DEFAULT_TARGETS = 20
DEFAULT_SWEEP = (1, 5, 10, 15)
# Values published for the original method at full scale (complex-scene
# generator, 1000 validation images); shown as context only.
REG_REFERENCE = {"no-reg": 0.1996, "l1": 0.1694, "l2": 0.1560}
SCALE_NOTE = "desk-scale substitution: {n} synthetic targets from the toy generator instead of a real validation set"


# ------------------------------------------------------------------ session
class Session:
    """Generator, extractor and per-class caches shared by the runs of one plan."""

    def __init__(self, cfg: Config, cache_dir=None):
        self.cfg = cfg
        self.generator = ToyGenerator(cfg.generator)
        self.extractor = FeatureExtractor(seed=cfg.task.extractor_seed, resolution=cfg.generator.resolution)
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self._samples = {}
        self._centroids = {}
        self._refs = {}

    def compatible(self, cfg: Config):
        return cfg.generator == self.cfg.generator and cfg.task.extractor_seed == self.cfg.task.extractor_seed

    def samples(self, c, ccfg):
        key = (c, ccfg.M, ccfg.seed)
        if key not in self._samples:
            self._samples[key] = clustering.sample_latents(self.generator, c, ccfg.M, ccfg.seed)
        return self._samples[key]

    def centroids(self, c, ccfg):
        key = (c, ccfg.M, ccfg.N, ccfg.seed, ccfg.kmeans_iters, ccfg.tol)
        if key in self._centroids:
            return self._centroids[key]
        cs = None
        if self.cache_dir is not None:
            stem = clustering.cache_stem({"generator_seed": self.cfg.generator.seed, "class": c,
                                          "M": ccfg.M, "N": ccfg.N, "seed": ccfg.seed})
            manifest = self.cache_dir / f"{stem}.json"
            if manifest.exists():
                cs = clustering.CentroidSet.load(manifest, self.generator)
        if cs is None:
            cs = clustering.build_centroids(self.generator, c, ccfg, self.samples(c, ccfg))
            if self.cache_dir is not None:
                cs.save(self.cache_dir)
        self._centroids[key] = cs
        return cs

    def reference(self, c):
        """Embedding statistics of a fixed set of class samples (Frechet reference)."""
        if c not in self._refs:
            w = clustering.sample_latents(self.generator, c, REFERENCE_SIZE, REFERENCE_SEED)
            imgs = [self.generator.synthesize(row) for row in w]
            self._refs[c] = embed_set(self.extractor, imgs)
        return self._refs[c]

    def spec(self, cfg: Config, mask=None):
        t = cfg.task
        return degrade.spec_for_task(t.task, cfg.generator.resolution, t.scale, mask, t.mask_fraction)


# ------------------------------------------------------------------ targets
def synth_target(generator, c, seed):
    """Ground-truth latent and clean image for target ``seed`` of class ``c``."""
    z = stream(seed, "target", int(c)).standard_normal((1, generator.layout.d_z))
    w_star = generator.mapping(z, c)[0]
    return w_star, generator.synthesize(w_star)


def write_target(out_dir, generator, c, seed, spec):
    """Write clean/degraded PNGs and a manifest holding ``w*``; returns the manifest path."""
    out_dir = Path(out_dir)
    w_star, clean = synth_target(generator, c, seed)
    degraded = degrade.apply(spec, clean)
    stem = f"target_c{c}_s{seed}"
    save_png(out_dir / f"{stem}_clean.png", clean)
    save_png(out_dir / f"{stem}_degraded.png", degraded)
    manifest = {
        "format": "cri-target-v1",
        "class": int(c),
        "seed": int(seed),
        "generator": asdict(generator.layout),
        "spec": spec.to_dict(),
        "w_star": w_star.tolist(),
        "mode_index": int(generator.mode_index(stream(seed, "target", int(c)).standard_normal(generator.layout.d_z), c)),
        "clean": f"{stem}_clean.png",
        "degraded": f"{stem}_degraded.png",
        "degraded_shape": list(degraded.shape),
    }
    return write_atomic(out_dir / f"{stem}.json", json.dumps(manifest, indent=1))


# ------------------------------------------------------------------ metrics
def compute_metrics(session: Session, c, restored, clean, image_d, spec):
    """Final metrics; quantities that need the clean image are ``None`` without it."""
    emb = session.extractor.embed(restored)
    mu_ref, cov_ref = session.reference(c)
    out = {
        "frechet": frechet_distance(emb, np.zeros((emb.size, emb.size)), mu_ref, cov_ref),
        "observed_loss": pixel_l2(degrade.apply(spec, restored), image_d),
        "perceptual": None,
        "mse": None,
        "psnr": None,
    }
    if clean is not None:
        out["perceptual"] = perceptual_distance(session.extractor, restored, clean)
        out["mse"] = pixel_l2(restored, clean)
        out["psnr"] = psnr(restored, clean)
    return out


# ------------------------------------------------------------------ one run
def _now():
    return datetime.now(timezone.utc).isoformat()


def run_one(session: Session, cfg: Config, c, image_d, spec, run_id, out_dir=None, clean=None,
            target=None, plan_hash=None, write_images=True):
    """Invert one degraded image and build (and optionally write) its RunRecord."""
    started = _now()
    t = cfg.task
    ccfg = cfg.cluster
    samples = session.samples(c, ccfg)
    centroids = None if t.mode == "avg-init" else session.centroids(c, ccfg)
    res = invert(session.generator, session.extractor, image_d, c, spec, ccfg, cfg.weights, cfg.schedule,
                 mode=t.mode, seed=t.seed, latent_space=t.latent_space, degrade_centers=t.degrade_centers,
                 alpha=t.alpha, samples=samples, centroids=centroids)
    metrics = compute_metrics(session, c, res.restored, clean, image_d, spec)
    artifacts = {}
    if out_dir is not None and write_images:
        out_dir = Path(out_dir)
        names = {"degraded": image_d, "restored": res.restored,
                 "centroid": session.generator.synthesize(res.w_cen)}
        if clean is not None:
            names["input"] = clean
        for name, img in names.items():
            rel = f"{run_id}_{name}.png"
            save_png(out_dir / rel, img)
            artifacts[name] = rel
    rec = RunRecord(
        run_id=run_id,
        config=cfg.to_dict(),
        class_index=int(c),
        spec=spec.to_dict(),
        target=target or {},
        centroid={"index": res.centroid_index, "distances": res.centroid_distances},
        trajectories={"stage1": trajectory_lists(res.stage1["trajectory"]),
                      "stage2": trajectory_lists(res.stage2["trajectory"])},
        best={"stage1_iter": res.stage1["best_iter"], "stage1_loss": res.stage1["best_loss"],
              "stage2_iter": res.stage2["best_iter"], "stage2_loss": res.stage2["best_loss"]},
        metrics=metrics,
        artifacts=artifacts,
        locality_radius=res.locality_radius,
        offset_norm={"l2": float(np.linalg.norm(res.w_off)), "l1": float(np.abs(res.w_off).sum())},
        extractor=session.extractor.describe(),
        plan_hash=plan_hash,
        timestamps={"started": started, "finished": _now()},
        wall_clock={k: float(v) for k, v in res.wall_clock.items()},
        tool_version=__version__,
        backend=BACKEND,
    )
    if out_dir is not None:
        rec.save(Path(out_dir) / f"{run_id}.json")
    return rec, res


# ------------------------------------------------------------------ plans
@dataclass
class PlanEntry:
    class_index: int
    target_seed: int | None = None  # synthetic target
    image: str | None = None  # or a clean/degraded image file
    image_is_degraded: bool = False
    mask: str | None = None
    task: str | None = None
    mode: str | None = None
    overrides: dict = field(default_factory=dict)
    run_id: str | None = None


@dataclass
class ExperimentPlan:
    entries: list
    output_dir: str
    base: dict = field(default_factory=dict)  # config dict; missing keys take defaults

    def to_dict(self):
        return {"entries": [asdict(e) for e in self.entries], "output_dir": str(self.output_dir),
                "base": self.base}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"entries", "output_dir", "base"}
        if unknown:
            raise ConfigError(f"unknown plan field(s): {sorted(unknown)}")
        return cls([PlanEntry(**e) for e in d.get("entries", [])], d.get("output_dir", "."), d.get("base", {}))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path):
        return write_atomic(path, json.dumps(self.to_dict(), indent=1, sort_keys=True))

    def plan_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def entry_config(self, e: PlanEntry):
        d = from_dict(self.base).to_dict()
        for name, vals in e.overrides.items():
            if name not in d:
                raise ConfigError(f"unknown config section {name!r} in plan overrides")
            d[name].update(vals)
        if e.task is not None:
            d["task"]["task"] = e.task
        if e.mode is not None:
            d["task"]["mode"] = e.mode
        return from_dict(d)

    def run_ids(self):
        ids = []
        for i, e in enumerate(self.entries):
            cfg = self.entry_config(e)
            src = f"t{e.target_seed}" if e.target_seed is not None else Path(e.image or "img").stem
            ids.append(e.run_id or f"r{i:03d}_{cfg.task.task}_{cfg.task.mode}_c{e.class_index}_{src}")
        if len(set(ids)) != len(ids):
            dup = sorted({r for r in ids if ids.count(r) > 1})
            raise ConfigError(f"duplicate run ids in plan: {dup}")
        return ids

    def validate(self):
        ids = self.run_ids()
        for e in self.entries:
            if (e.target_seed is None) == (e.image is None):
                raise ConfigError("each plan entry needs exactly one of target_seed or image")
            for p in (e.image, e.mask):
                if p is not None and not Path(p).is_file():
                    raise FileNotFoundError(p)
        return ids


def _entry_inputs(session, cfg, e: PlanEntry):
    mask = load_mask(e.mask) if e.mask else None
    spec = session.spec(cfg, mask)
    if e.target_seed is not None:
        w_star, clean = synth_target(session.generator, e.class_index, e.target_seed)
        target = {"source": "synthetic", "seed": int(e.target_seed), "w_star": w_star.tolist()}
        return spec, clean, degrade.apply(spec, clean), target
    img = load_png(e.image)
    target = {"source": "image", "path": str(e.image), "degraded_input": bool(e.image_is_degraded)}
    if e.image_is_degraded:
        return spec, None, img, target
    return spec, img, degrade.apply(spec, img), target


def run_plan(plan: ExperimentPlan, cache_dir=None, write_images=True, session=None):
    """Execute every entry serially; returns the list of RunRecords."""
    ids = plan.validate()
    phash = plan.plan_hash()
    out = Path(plan.output_dir)
    records = []
    for e, rid in zip(plan.entries, ids):
        cfg = plan.entry_config(e)
        if session is None or not session.compatible(cfg):
            session = Session(cfg, cache_dir)
        spec, clean, image_d, target = _entry_inputs(session, cfg, e)
        rec, _ = run_one(session, cfg, e.class_index, image_d, spec, rid, out, clean, target, phash, write_images)
        records.append(rec)
    return records


def synthetic_plan(cfg: Config, n_targets, output_dir, target_seed0=0, variants=None):
    """Plan over ``n_targets`` synthetic targets (class = index mod C) x ``variants``.

    ``variants`` is a list of ``(label, overrides)``; each target is run once per
    variant with the same run seed, so variants form paired trials.
    """
    variants = variants or [("base", {})]
    entries = []
    for i in range(n_targets):
        c = i % cfg.generator.classes
        for label, ov in variants:
            ov = {k: dict(v) for k, v in ov.items()}
            ov.setdefault("task", {}).setdefault("seed", cfg.task.seed + i)
            entries.append(PlanEntry(class_index=c, target_seed=target_seed0 + i, overrides=ov,
                                     run_id=f"t{i:03d}_{label}"))
    return ExperimentPlan(entries, str(output_dir), cfg.to_dict())


# ------------------------------------------------------------------ tables
def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(r)
    return write_atomic(path, buf.getvalue())


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


CLUSTER_HEADER = ("target", "class", "N", "perceptual", "mse", "psnr", "frechet", "run_id")


def cluster_rows(records):
    rows = []
    for r in records:
        m = r.metrics
        rows.append((r.target["seed"], r.class_index, r.config["cluster"]["N"], repr(m["perceptual"]),
                     repr(m["mse"]), repr(m["psnr"]), repr(m["frechet"]), r.run_id))
    return rows


def sweep_means(records, key="N"):
    groups = {}
    for r in records:
        groups.setdefault(r.config["cluster"][key], []).append(r.metrics["perceptual"])
    return {n: float(np.mean(v)) for n, v in sorted(groups.items())}


def plot_sweep(path, means, title):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ns = list(means)
    fig, ax = plt.subplots(figsize=(4.5, 3.2), dpi=120)
    ax.plot(ns, [means[n] for n in ns], "o-")
    ax.set_xticks(ns)
    ax.set_xlabel("number of clusters N")
    ax.set_ylabel("mean perceptual distance")
    ax.set_title(title, fontsize=8)
    fig.tight_layout()
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp.png")
    fig.savefig(tmp)
    plt.close(fig)
    tmp.replace(path)
    return path


def ablate_clusters(cfg: Config, out_dir, n_targets=DEFAULT_TARGETS, sweep=DEFAULT_SWEEP, target_seed0=0,
                    cache_dir=None, write_images=False):
    """Cluster-count sweep. Writes records, ``clusters.csv``, ``clusters.png`` and a summary."""
    out_dir = Path(out_dir)
    variants = [(f"N{n}", {"cluster": {"N": int(n)}}) for n in sweep]
    plan = synthetic_plan(cfg, n_targets, out_dir / "runs", target_seed0, variants)
    plan.save(out_dir / "plan.json")
    records = run_plan(plan, cache_dir, write_images)
    write_csv(out_dir / "clusters.csv", CLUSTER_HEADER, cluster_rows(records))
    means = sweep_means(records)
    note = SCALE_NOTE.format(n=n_targets)
    plot_sweep(out_dir / "clusters.png", means, f"{cfg.task.task}, {n_targets} targets")
    summary = {"means": {str(k): v for k, v in means.items()}, "note": note, "plan_hash": plan.plan_hash()}
    write_atomic(out_dir / "summary.json", json.dumps(summary, indent=1))
    return records, means


REG_VARIANTS = (
    ("no-reg", {"task": {"mode": "no-reg"}}),
    ("l1", {"weights": {"reg_norm": "l1"}}),
    ("l2", {"weights": {"reg_norm": "l2"}}),
)
REG_HEADER = ("target", "class", "variant", "perceptual", "observed_loss", "offset_l2", "offset_l1", "run_id")


def reg_rows(records):
    rows = []
    for r in records:
        variant = r.run_id.split("_", 1)[1]
        rows.append((r.target["seed"], r.class_index, variant, repr(r.metrics["perceptual"]),
                     repr(r.metrics["observed_loss"]), repr(r.offset_norm["l2"]), repr(r.offset_norm["l1"]),
                     r.run_id))
    return rows


def reg_summary(rows):
    out = {}
    for label, _ in REG_VARIANTS:
        sel = [r for r in rows if r[2] == label]
        if sel:
            out[label] = {k: float(np.mean([float(r[i]) for r in sel]))
                          for i, k in ((3, "perceptual"), (4, "observed_loss"), (5, "offset_l2"), (6, "offset_l1"))}
    return out


def reg_table_markdown(summary, n_targets):
    lines = ["| variant | perceptual | observed loss | offset l2 | offset l1 |", "|---|---|---|---|---|"]
    for label, m in summary.items():
        lines.append(f"| {label} | {m['perceptual']:.5f} | {m['observed_loss']:.6f} | "
                     f"{m['offset_l2']:.4f} | {m['offset_l1']:.4f} |")
    ref = ", ".join(f"{k} {v:.4f}" for k, v in REG_REFERENCE.items())
    lines += ["", f"Reference values reported for the original method at full scale (LPIPS): {ref}.",
              SCALE_NOTE.format(n=n_targets) + "."]
    return "\n".join(lines) + "\n"


def ablate_reg(cfg: Config, out_dir, n_targets=DEFAULT_TARGETS, target_seed0=0, cache_dir=None,
               write_images=False):
    """No-reg / L1 / L2 offset regularizer comparison on paired seeded targets."""
    out_dir = Path(out_dir)
    plan = synthetic_plan(cfg, n_targets, out_dir / "runs", target_seed0, list(REG_VARIANTS))
    plan.save(out_dir / "plan.json")
    records = run_plan(plan, cache_dir, write_images)
    rows = reg_rows(records)
    write_csv(out_dir / "regularizer.csv", REG_HEADER, rows)
    summary = reg_summary(rows)
    write_atomic(out_dir / "regularizer.md", reg_table_markdown(summary, n_targets))
    return records, summary


def load_records(run_dir):
    return {p.stem: RunRecord.load(p) for p in sorted(Path(run_dir).glob("*.json"))}


def verify_table(csv_path, run_dir):
    """Recompute a cluster or regularizer table from its RunRecords; returns mismatch messages."""
    rows = read_csv(csv_path)
    recs = load_records(run_dir)
    if not rows:
        return ["table is empty"]
    cluster_table = "N" in rows[0]
    problems = []
    used = set()
    for row in rows:
        rid = row["run_id"]
        rec = recs.get(rid)
        if rec is None:
            problems.append(f"{rid}: no run record")
            continue
        used.add(rid)
        expect = cluster_rows([rec])[0] if cluster_table else reg_rows([rec])[0]
        header = CLUSTER_HEADER if cluster_table else REG_HEADER
        for k, v in zip(header, expect):
            if row[k] != str(v):
                problems.append(f"{rid}: column {k} is {row[k]!r}, record gives {v!r}")
    extra = set(recs) - used
    if extra:
        problems.append(f"records not in table: {sorted(extra)}")
    return problems


def orphan_images(run_dir):
    """PNG files under ``run_dir`` not referenced by exactly one record."""
    refs = {}
    for rec in load_records(run_dir).values():
        for rel in rec.artifacts.values():
            refs[rel] = refs.get(rel, 0) + 1
    return sorted(p.name for p in Path(run_dir).glob("*.png") if refs.get(p.name, 0) != 1)


def with_task(cfg: Config, **task):
    return replace(cfg, task=replace(cfg.task, **task))


def with_weights(cfg: Config, **w):
    return replace(cfg, weights=LossWeights(**{**asdict(cfg.weights), **w}))


__all__ = [
    "Session", "synth_target", "write_target", "compute_metrics", "run_one", "PlanEntry", "ExperimentPlan",
    "run_plan", "synthetic_plan", "ablate_clusters", "ablate_reg", "verify_table", "orphan_images",
]
