"""Command line interface.

Exit codes: 0 success, 1 optimization diverged (or a table failed
verification), 2 usage, configuration or I/O error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import harness
from ._version import __version__
from .cluster import build_centroids
from .config import apply_env, from_dict, load_config, output_dir
from .errors import CRIError, DivergenceError
from .records import load_mask, load_png, write_atomic

EXIT_OK, EXIT_DIVERGED, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _add_common(p):
    g = p.add_argument_group("configuration")
    g.add_argument("--config", help="JSON config file (sections generator/cluster/weights/schedule/task)")
    g.add_argument("--out", help="output directory (default: $CRI_OUTPUT_DIR or ./cri_out)")
    g.add_argument("--seed", type=int, help="run seed (default: $CRI_SEED or config task.seed)")
    g.add_argument("--task", choices=("inpaint", "colorize", "sr", "identity"))
    g.add_argument("--scale", type=int, help="super-resolution factor")
    g.add_argument("--mask", help="mask image for inpainting; nonzero pixels are observed")
    g.add_argument("--mask-fraction", type=float, help="area of the default centred hole")
    g.add_argument("--mode", choices=("cri", "avg-init", "no-reg", "direct-w", "joint"))
    g.add_argument("--clusters", type=int, help="number of clusters N")
    g.add_argument("--samples", type=int, help="number of latent samples M")
    g.add_argument("--latent-space", choices=("w", "w+"))
    g.add_argument("--degrade-centers", action="store_true", default=None,
                   help="degrade centre images before comparing them with the input")
    g.add_argument("--alpha", type=float, help="locality interpolation radius")
    for name in ("lambda1", "lambda2", "lambda-l2", "lambda-r", "lambda-l2-r"):
        g.add_argument(f"--{name}", type=float)
    g.add_argument("--stage1-iters", type=int)
    g.add_argument("--stage2-iters", type=int)
    g.add_argument("--stage1-lr", type=float)
    g.add_argument("--stage2-lr", type=float)
    g.add_argument("--cache-dir", help="directory of cached centroid sets")


def build_config(args):
    """File config, then ``CRI_SEED``, then explicit flags."""
    cfg = apply_env(load_config(args.config))
    d = cfg.to_dict()
    flag_map = {
        "task": {"task": "task", "scale": "scale", "mask_fraction": "mask_fraction", "mode": "mode",
                 "latent_space": "latent_space", "degrade_centers": "degrade_centers", "alpha": "alpha",
                 "seed": "seed"},
        "cluster": {"clusters": "N", "samples": "M"},
        "weights": {"lambda1": "lambda1", "lambda2": "lambda2", "lambda_l2": "lambda_l2",
                    "lambda_r": "lambda_r", "lambda_l2_r": "lambda_l2_r"},
        "schedule": {"stage1_iters": "stage1_iters", "stage2_iters": "stage2_iters",
                     "stage1_lr": "stage1_lr", "stage2_lr": "stage2_lr"},
    }
    for section, mapping in flag_map.items():
        for attr, key in mapping.items():
            v = getattr(args, attr, None)
            if v is not None:
                d[section][key] = v
    return from_dict(d)


def _require_file(path, what):
    if path is not None and not Path(path).is_file():
        raise FileNotFoundError(f"{what} not found: {path}")


def _mask(args):
    return load_mask(args.mask) if getattr(args, "mask", None) else None


def _print(obj):
    print(json.dumps(obj, indent=1, sort_keys=True))


# ------------------------------------------------------------------ commands
def cmd_invert(args):
    if (args.input is None) == (args.target is None):
        raise UsageError("give exactly one of --input or --target")
    _require_file(args.input, "input image")
    _require_file(args.target, "target manifest")
    _require_file(args.mask, "mask image")
    cfg = build_config(args)
    out = output_dir(args.out)
    session = harness.Session(cfg, args.cache_dir)
    res = cfg.generator.resolution
    spec = session.spec(cfg, _mask(args))
    c = args.class_index
    if args.target is not None:
        man = json.loads(Path(args.target).read_text())
        if c is not None and c != man["class"]:
            raise UsageError(f"--class {c} contradicts the target manifest (class {man['class']})")
        c = man["class"]
        base = Path(args.target).parent
        clean = load_png(base / man["clean"])
        target = {"source": "synthetic", "seed": man["seed"], "w_star": man["w_star"], "manifest": str(args.target)}
        image_d = harness.degrade.apply(spec, clean)
    else:
        if c is None:
            raise UsageError("--class is required for image inputs")
        img = load_png(args.input)
        target = {"source": "image", "path": str(args.input), "degraded_input": bool(args.input_is_degraded)}
        if args.input_is_degraded:
            clean, image_d = None, img
            if img.shape != spec.output_shape((res, res, 3)):
                raise UsageError(f"degraded input has shape {img.shape}, expected {spec.output_shape((res, res, 3))}")
        else:
            if img.shape != (res, res, 3):
                raise UsageError(f"input image must be {res}x{res} RGB, got {img.shape}")
            clean, image_d = img, harness.degrade.apply(spec, img)
    run_id = args.run_id or f"{cfg.task.task}_{cfg.task.mode}_c{c}_s{cfg.task.seed}"
    rec, _ = harness.run_one(session, cfg, c, image_d, spec, run_id, out, clean, target)
    _print({"record": str(out / f"{run_id}.json"), "metrics": rec.metrics, "centroid": rec.centroid["index"]})
    return EXIT_OK


def _sweep(text):
    try:
        vals = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise UsageError(f"bad sweep list {text!r}") from None
    if not vals or min(vals) < 1:
        raise UsageError("sweep values must be positive integers")
    return vals


def cmd_ablate_clusters(args):
    _require_file(args.mask, "mask image")
    cfg = build_config(args)
    out = output_dir(args.out)
    records, means = harness.ablate_clusters(cfg, out, args.targets, _sweep(args.sweep), args.target_seed0,
                                             args.cache_dir, args.images)
    _print({"table": str(out / "clusters.csv"), "plot": str(out / "clusters.png"),
            "means": {str(k): v for k, v in means.items()}, "runs": len(records)})
    return EXIT_OK


def cmd_ablate_reg(args):
    cfg = build_config(args)
    out = output_dir(args.out)
    records, summary = harness.ablate_reg(cfg, out, args.targets, args.target_seed0, args.cache_dir, args.images)
    _print({"table": str(out / "regularizer.csv"), "summary": summary, "runs": len(records)})
    print((out / "regularizer.md").read_text(), file=sys.stderr)
    return EXIT_OK


def cmd_synth_target(args):
    _require_file(args.mask, "mask image")
    cfg = build_config(args)
    out = output_dir(args.out)
    session = harness.Session(cfg)
    spec = session.spec(cfg, _mask(args))
    c = 0 if args.class_index is None else args.class_index
    session.generator._check_class(c)
    path = harness.write_target(out, session.generator, c, cfg.task.seed, spec)
    _print({"manifest": str(path)})
    return EXIT_OK


def cmd_eval(args):
    if args.verify:
        d = Path(args.verify)
        tables = [p for p in (d / "clusters.csv", d / "regularizer.csv") if p.is_file()]
        if not tables:
            raise FileNotFoundError(f"no clusters.csv or regularizer.csv in {d}")
        problems = []
        for t in tables:
            problems += harness.verify_table(t, d / "runs")
        problems += [f"orphan image {p}" for p in harness.orphan_images(d / "runs")]
        _print({"tables": [str(t) for t in tables], "problems": problems})
        return EXIT_OK if not problems else EXIT_DIVERGED
    if args.restored is None:
        raise UsageError("give --restored (with --clean and/or --degraded) or --verify DIR")
    for p, what in ((args.restored, "restored image"), (args.clean, "clean image"),
                    (args.degraded, "degraded image"), (args.mask, "mask image")):
        _require_file(p, what)
    cfg = build_config(args)
    session = harness.Session(cfg)
    spec = session.spec(cfg, _mask(args))
    restored = load_png(args.restored)
    clean = load_png(args.clean) if args.clean else None
    image_d = load_png(args.degraded) if args.degraded else (
        harness.degrade.apply(spec, clean) if clean is not None else harness.degrade.apply(spec, restored))
    c = 0 if args.class_index is None else args.class_index
    _print(harness.compute_metrics(session, c, restored, clean, image_d, spec))
    return EXIT_OK


def cmd_cluster(args):
    cfg = build_config(args)
    out = Path(args.cache_dir) if args.cache_dir else output_dir(args.out) / "centroids"
    session = harness.Session(cfg)
    classes = range(cfg.generator.classes) if args.class_index is None else [args.class_index]
    paths = []
    for c in classes:
        session.generator._check_class(c)
        cs = build_centroids(session.generator, c, cfg.cluster)
        paths.append(str(cs.save(out)))
        print(f"class {c}: N={len(cs)} inertia={cs.inertia:.6g} sizes={cs.cluster_sizes.tolist()}",
              file=sys.stderr)
    _print({"manifests": paths})
    return EXIT_OK


def cmd_config(args):
    cfg = build_config(args)
    text = json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"
    if args.write:
        write_atomic(args.write, text)
    sys.stdout.write(text)
    return EXIT_OK


# ------------------------------------------------------------------ parser
def build_parser():
    p = argparse.ArgumentParser(prog="cri", description="Centroid-initialized regularized GAN inversion.")
    p.add_argument("--version", action="version", version=f"cri {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("invert", help="restore one image")
    _add_common(s)
    s.add_argument("--input", help="image file (clean unless --input-is-degraded)")
    s.add_argument("--input-is-degraded", action="store_true")
    s.add_argument("--target", help="target manifest written by synth-target")
    s.add_argument("--class", dest="class_index", type=int)
    s.add_argument("--run-id")
    s.set_defaults(func=cmd_invert)

    for name, func, helptext in (("ablate-clusters", cmd_ablate_clusters, "cluster-count sweep"),
                                 ("ablate-reg", cmd_ablate_reg, "offset regularizer comparison")):
        s = sub.add_parser(name, help=helptext)
        _add_common(s)
        s.add_argument("--targets", type=int, default=harness.DEFAULT_TARGETS)
        s.add_argument("--target-seed0", type=int, default=0)
        s.add_argument("--images", action="store_true", help="also write per-run PNGs")
        if name == "ablate-clusters":
            s.add_argument("--sweep", default=",".join(map(str, harness.DEFAULT_SWEEP)))
        s.set_defaults(func=func)

    s = sub.add_parser("synth-target", help="write a ground-truth target and its degraded version")
    _add_common(s)
    s.add_argument("--class", dest="class_index", type=int)
    s.set_defaults(func=cmd_synth_target)

    s = sub.add_parser("eval", help="metrics for an image pair, or verify an ablation directory")
    _add_common(s)
    s.add_argument("--restored")
    s.add_argument("--clean")
    s.add_argument("--degraded")
    s.add_argument("--class", dest="class_index", type=int)
    s.add_argument("--verify", help="ablation output directory to re-derive tables from records")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("cluster", help="precompute and cache centroid sets")
    _add_common(s)
    s.add_argument("--class", dest="class_index", type=int, help="default: every class")
    s.set_defaults(func=cmd_cluster)

    s = sub.add_parser("config", help="print the effective configuration")
    _add_common(s)
    s.add_argument("--write", help="also save it to this path")
    s.set_defaults(func=cmd_config)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"cri: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, CRIError, ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"cri: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
