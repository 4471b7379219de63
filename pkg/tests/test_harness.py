import json

import numpy as np
import pytest

from cri import cli, harness
from cri.config import from_dict
from cri.records import RunRecord, load_mask, load_png, save_png, write_atomic

SMALL = {"cluster": {"M": 400, "N": 3}, "schedule": {"stage1_iters": 15, "stage2_iters": 3}}


@pytest.fixture
def small_cfg():
    return from_dict(SMALL)


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "small.json"
    p.write_text(json.dumps(SMALL))
    return str(p)


def run_cli(*argv):
    return cli.main([str(a) for a in argv])


# ------------------------------------------------------------------ records
def test_record_roundtrip_and_unknown_fields(tmp_path, small_cfg):
    session = harness.Session(small_cfg)
    spec = session.spec(small_cfg)
    _, clean = harness.synth_target(session.generator, 1, 3)
    rec, _ = harness.run_one(session, small_cfg, 1, harness.degrade.apply(spec, clean), spec, "r0", tmp_path, clean)
    back = RunRecord.load(tmp_path / "r0.json")
    assert back == rec
    assert set(back.metric_fields()) == {"perceptual", "mse", "psnr", "frechet", "observed_loss"}
    d = json.loads(rec.to_json())
    d["surprise"] = 1
    with pytest.raises(ValueError):
        RunRecord.from_json(json.dumps(d))
    assert sorted(rec.artifacts) == ["centroid", "degraded", "input", "restored"]
    assert not list(tmp_path.glob(".*tmp*"))


def test_atomic_write_leaves_old_file_on_failure(tmp_path):
    p = write_atomic(tmp_path / "a.txt", "old")

    class Boom:
        pass

    with pytest.raises(TypeError):
        write_atomic(p, Boom())
    assert p.read_text() == "old"
    assert [q.name for q in tmp_path.iterdir()] == ["a.txt"]


def test_png_and_mask_io(tmp_path, rng):
    img = rng.random((8, 8, 3))
    save_png(tmp_path / "x.png", img)
    back = load_png(tmp_path / "x.png")
    assert back.shape == (8, 8, 3) and np.abs(back - img).max() <= 0.5 / 255 + 1e-12
    m = np.zeros((8, 8, 3))
    m[2:5, 2:5] = 1.0
    save_png(tmp_path / "m.png", m)
    mask = load_mask(tmp_path / "m.png")
    assert mask.sum() == 9 and set(np.unique(mask)) == {0.0, 1.0}


# ------------------------------------------------------------------ plans
def test_plan_hash_and_unique_ids(small_cfg, tmp_path):
    plan = harness.synthetic_plan(small_cfg, 3, tmp_path, variants=[("a", {}), ("b", {"cluster": {"N": 2}})])
    ids = plan.run_ids()
    assert len(ids) == 6 == len(set(ids))
    assert plan.plan_hash() == harness.ExperimentPlan.from_dict(json.loads(json.dumps(plan.to_dict()))).plan_hash()
    plan.entries[1].run_id = plan.entries[0].run_id
    with pytest.raises(harness.ConfigError):
        plan.run_ids()


def test_plan_entry_configs(small_cfg, tmp_path):
    plan = harness.synthetic_plan(small_cfg, 2, tmp_path, variants=[("n2", {"cluster": {"N": 2}})])
    cfgs = [plan.entry_config(e) for e in plan.entries]
    assert [c.cluster.N for c in cfgs] == [2, 2]
    assert [c.task.seed for c in cfgs] == [0, 1]
    assert [e.class_index for e in plan.entries] == [0, 1]


def test_plan_validation(tmp_path):
    plan = harness.ExperimentPlan([harness.PlanEntry(0, image=str(tmp_path / "missing.png"))], str(tmp_path))
    with pytest.raises(FileNotFoundError):
        plan.validate()
    plan = harness.ExperimentPlan([harness.PlanEntry(0)], str(tmp_path))
    with pytest.raises(harness.ConfigError):
        plan.validate()


def test_sr_spec_from_flags():
    args = cli.build_parser().parse_args(["invert", "--task", "sr", "--scale", "4"])
    cfg = cli.build_config(args)
    spec = harness.Session(cfg).spec(cfg)
    assert spec.kind == "downsample" and spec.scale == 4
    assert spec.output_shape((32, 32, 3)) == (8, 8, 3)


def test_flag_beats_env_beats_file(tmp_path, monkeypatch):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"task": {"seed": 1}}))
    monkeypatch.setenv("CRI_SEED", "2")
    parse = cli.build_parser().parse_args
    assert cli.build_config(parse(["config", "--config", str(p)])).task.seed == 2
    assert cli.build_config(parse(["config", "--config", str(p), "--seed", "3"])).task.seed == 3


# ------------------------------------------------------------------ CLI
def test_missing_input_is_usage_error_without_outputs(tmp_path, capsys):
    out = tmp_path / "out"
    assert run_cli("invert", "--input", tmp_path / "nope.png", "--class", 0, "--out", out) == 2
    assert not out.exists()
    assert "not found" in capsys.readouterr().err
    assert run_cli("invert", "--out", out) == 2
    assert run_cli("invert", "--config", tmp_path / "nope.json", "--target", "x") == 2
    with pytest.raises(SystemExit) as info:
        run_cli("invert", "--task", "deblur")
    assert info.value.code == 2


def test_bad_config_value_exit_code(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"weights": {"lambda2": -1}}))
    assert run_cli("config", "--config", p) == 2


def test_synth_target_reproducible(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli("synth-target", "--class", 2, "--seed", 5, "--out", a) == 0
    assert run_cli("synth-target", "--class", 2, "--seed", 5, "--out", b) == 0
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir()) and len(names) == 3
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes()
    man = json.loads((a / "target_c2_s5.json").read_text())
    w_star, _ = harness.synth_target(harness.Session(from_dict({})).generator, 2, 5)
    assert np.array_equal(np.array(man["w_star"]), w_star)


def test_synth_target_sr_dimensions(tmp_path):
    assert run_cli("synth-target", "--task", "sr", "--scale", 4, "--out", tmp_path) == 0
    assert load_png(tmp_path / "target_c0_s0_degraded.png").shape == (8, 8, 3)
    assert load_png(tmp_path / "target_c0_s0_clean.png").shape == (32, 32, 3)


def test_invert_from_target_and_env_output(tmp_path, cfg_file, monkeypatch, capsys):
    assert run_cli("synth-target", "--class", 1, "--seed", 4, "--out", tmp_path / "t") == 0
    monkeypatch.setenv("CRI_OUTPUT_DIR", str(tmp_path / "env_out"))
    rc = run_cli("invert", "--config", cfg_file, "--target", tmp_path / "t" / "target_c1_s4.json", "--run-id", "r")
    assert rc == 0
    rec = RunRecord.load(tmp_path / "env_out" / "r.json")
    assert rec.class_index == 1 and rec.target["seed"] == 4
    assert rec.metrics["perceptual"] is not None


def test_invert_degraded_input_only(tmp_path, cfg_file):
    assert run_cli("synth-target", "--out", tmp_path / "t") == 0
    rc = run_cli("invert", "--config", cfg_file, "--input", tmp_path / "t" / "target_c0_s0_degraded.png",
                 "--input-is-degraded", "--class", 0, "--out", tmp_path / "o", "--run-id", "d")
    assert rc == 0
    rec = RunRecord.load(tmp_path / "o" / "d.json")
    assert rec.metrics["perceptual"] is None and rec.metrics["frechet"] is not None


def test_divergence_exit_code(tmp_path, cfg_file):
    assert run_cli("synth-target", "--out", tmp_path / "t") == 0
    rc = run_cli("invert", "--config", cfg_file, "--target", tmp_path / "t" / "target_c0_s0.json",
                 "--lambda1", 1e9, "--out", tmp_path / "o")
    assert rc == 1


def test_eval_pair(tmp_path, capsys):
    _, clean = harness.synth_target(harness.Session(from_dict({})).generator, 0, 0)
    save_png(tmp_path / "c.png", clean)
    assert run_cli("eval", "--restored", tmp_path / "c.png", "--clean", tmp_path / "c.png") == 0
    m = json.loads(capsys.readouterr().out)
    assert m["perceptual"] == 0.0 and m["psnr"] == 99.0


def test_cluster_command_writes_cache(tmp_path):
    cache = tmp_path / "cache"
    assert run_cli("cluster", "--class", 1, "--samples", 300, "--clusters", 4, "--cache-dir", cache) == 0
    assert [p.name for p in cache.glob("*.json")] == ["centroids_g0_c1_M300_N4_s0.json"]


# ------------------------------------------------------------------ ablations
@pytest.fixture(scope="module")
def cluster_ablation(tmp_path_factory):
    out = tmp_path_factory.mktemp("abl")
    p = out / "small.json"
    p.write_text(json.dumps(SMALL))
    rc = run_cli("ablate-clusters", "--config", p, "--targets", 2, "--sweep", "1,3", "--images", "--out", out)
    assert rc == 0
    return out


def test_ablate_clusters_outputs(cluster_ablation):
    rows = harness.read_csv(cluster_ablation / "clusters.csv")
    assert len(rows) == 4
    assert sorted({r["N"] for r in rows}) == ["1", "3"]
    assert (cluster_ablation / "clusters.png").stat().st_size > 0
    summary = json.loads((cluster_ablation / "summary.json").read_text())
    assert set(summary["means"]) == {"1", "3"}


def test_verify_and_orphans(cluster_ablation, capsys):
    assert harness.verify_table(cluster_ablation / "clusters.csv", cluster_ablation / "runs") == []
    assert harness.orphan_images(cluster_ablation / "runs") == []
    assert run_cli("eval", "--verify", cluster_ablation) == 0


def test_verify_detects_tampering(cluster_ablation, tmp_path):
    import shutil

    d = tmp_path / "copy"
    shutil.copytree(cluster_ablation, d)
    text = (d / "clusters.csv").read_text().splitlines()
    cells = text[1].split(",")
    cells[3] = "0.0"
    text[1] = ",".join(cells)
    (d / "clusters.csv").write_text("\n".join(text) + "\n")
    save_png(d / "runs" / "stray.png", np.zeros((4, 4, 3)))
    problems = harness.verify_table(d / "clusters.csv", d / "runs")
    assert any("perceptual" in p for p in problems)
    assert harness.orphan_images(d / "runs") == ["stray.png"]
    assert run_cli("eval", "--verify", d) == 1


def test_single_n_sweep_gives_one_row(tmp_path, cfg_file):
    assert run_cli("ablate-clusters", "--config", cfg_file, "--targets", 1, "--sweep", "2", "--out", tmp_path) == 0
    assert len(harness.read_csv(tmp_path / "clusters.csv")) == 1
    assert run_cli("ablate-clusters", "--sweep", "0", "--out", tmp_path / "x") == 2


def test_single_cluster_cli_matches_avg_init(tmp_path, cfg_file):
    assert run_cli("synth-target", "--class", 3, "--seed", 8, "--out", tmp_path / "t") == 0
    target = tmp_path / "t" / "target_c3_s8.json"
    common = ("--config", cfg_file, "--target", target, "--out", tmp_path / "o")
    assert run_cli("invert", *common, "--clusters", 1, "--mode", "cri", "--run-id", "a") == 0
    assert run_cli("invert", *common, "--mode", "avg-init", "--run-id", "b") == 0
    ra, rb = RunRecord.load(tmp_path / "o" / "a.json"), RunRecord.load(tmp_path / "o" / "b.json")
    assert ra.metrics["perceptual"] == pytest.approx(rb.metrics["perceptual"], abs=1e-9)


def test_reg_ablation_table(tmp_path, cfg_file):
    assert run_cli("ablate-reg", "--config", cfg_file, "--task", "colorize", "--targets", 2, "--out", tmp_path) == 0
    rows = harness.read_csv(tmp_path / "regularizer.csv")
    assert len(rows) == 6
    by = {(r["target"], r["variant"]): r for r in rows}
    for t in ("0", "1"):
        # l1 penalizes the offset's l1 norm; no-reg leaves it free
        assert float(by[t, "l1"]["offset_l1"]) < float(by[t, "no-reg"]["offset_l1"])
    md = (tmp_path / "regularizer.md").read_text()
    assert "0.1996" in md and "desk-scale" in md
    assert harness.verify_table(tmp_path / "regularizer.csv", tmp_path / "runs") == []


def test_lambda2_zero_equals_no_reg(small_cfg):
    session = harness.Session(small_cfg)
    spec = session.spec(small_cfg)
    _, clean = harness.synth_target(session.generator, 0, 11)
    image_d = harness.degrade.apply(spec, clean)
    a, _ = harness.run_one(session, harness.with_weights(small_cfg, lambda2=0.0), 0, image_d, spec, "a")
    b, _ = harness.run_one(session, harness.with_task(small_cfg, mode="no-reg"), 0, image_d, spec, "b")
    assert a.metrics == b.metrics

