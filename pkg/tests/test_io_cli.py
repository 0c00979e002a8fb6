import hashlib
import json

import numpy as np
import pytest
import yaml

from rawmob import cli, io
from rawmob import config as C
from rawmob.errors import ConfigError, FormatError
from rawmob.model import init_params, load_checkpoint
from rawmob.trajectory import RawTrajectory, Region
from rawmob.world import SyntheticWorldConfig, UserLabel, generate_synthetic_world

FAST = ["--set", "world.n_users=30", "--set", "train.total_steps=3", "--set", "finetune.steps=30"]


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_trajectory_label_region_round_trip(tmp_path):
    w = generate_synthetic_world(SyntheticWorldConfig(n_users=4, region_grid=(2, 2)))
    io.write_trajectories(tmp_path / "t.jsonl", w.trajectories)
    back = io.read_trajectories(tmp_path / "t.jsonl")
    assert all(np.array_equal(a.points, b.points) for a, b in zip(w.trajectories, back))
    first = json.loads((tmp_path / "t.jsonl").read_text().splitlines()[0])
    assert set(first) == {"user_id", "points"} and len(first["points"][0]) == 3
    io.write_labels(tmp_path / "l.jsonl", w.labels)
    assert io.read_labels(tmp_path / "l.jsonl") == w.labels
    regions = w.regions + [Region("c", center=(116.3, 39.9), radius_m=250.0)]
    io.write_regions(tmp_path / "r.geojson", regions)
    rb = io.read_regions(tmp_path / "r.geojson")
    assert [r.region_id for r in rb] == [r.region_id for r in regions]
    assert np.array_equal(rb[0].ring, regions[0].ring) and rb[0].properties == regions[0].properties
    assert len(rb[0].properties["poi_counts"]) == 14 and "car_service_count" in rb[0].properties
    assert rb[-1].radius_m == 250.0


def test_io_format_errors(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"user_id": "a", "points": [[1, 2, 3]]}\n{oops\n')
    with pytest.raises(FormatError, match="bad.jsonl:2"):
        io.read_trajectories(p)
    p.write_text('{"user_id": "a", "is_commuter": true, "subway_trip_count": -1}\n')
    with pytest.raises(FormatError):
        io.read_labels(p)
    p.write_text("[]")
    with pytest.raises(FormatError):
        io.read_regions(p)


def test_config_precedence_and_seeds(tmp_path):
    f = tmp_path / "c.yaml"
    f.write_text(yaml.safe_dump({"seed": 3, "world": {"n_users": 50}, "train": {"total_steps": 7}}))
    cfg = C.resolve(f, ["train.total_steps=9", "model.d_model=64"])
    assert cfg["world"]["n_users"] == 50 and cfg["train"]["total_steps"] == 9 and cfg["model"]["d_model"] == 64
    assert cfg["world"]["rng_seed"] == C.stream_seed(3, "world")
    assert len({cfg[s][k] for s, k in C.SEED_KEYS.items()}) == len(C.SEED_KEYS)
    assert C.resolve(None, ["world.rng_seed=5"])["world"]["rng_seed"] == 5
    # a resolved config is a fixed point
    path = C.write_config(tmp_path, cfg)
    assert C.resolve(path) == cfg


def test_config_errors():
    with pytest.raises(ConfigError):
        C.resolve(None, ["world.nope=1"])
    with pytest.raises(ConfigError):
        C.resolve(None, ["model.n_heads=3"])
    with pytest.raises(ConfigError):
        C.resolve(None, ["no_equals_sign"])


def test_cli_error_is_one_parseable_line(tmp_path, capsys):
    code = cli.main(["pretrain", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")])
    err = capsys.readouterr().err.strip().splitlines()
    assert code != 0 and len(err) == 1 and err[0].startswith("error: FileNotFoundError: ")
    code = cli.main(["generate-data", "--out", str(tmp_path), "--set", "world.commuter_fraction=2"])
    assert code != 0 and capsys.readouterr().err.startswith("error: ConfigError: ")


def test_generate_data_is_reproducible(tmp_path):
    for d in ("a", "b"):
        assert cli.main(["generate-data", "--out", str(tmp_path / d), *FAST]) == 0
    for name in ("trajectories.jsonl", "labels.jsonl", "regions.geojson", "run_config.yaml"):
        assert sha(tmp_path / "a" / name) == sha(tmp_path / "b" / name)


def test_pretrain_zero_steps_gives_init_params(tmp_path):
    assert cli.main(["generate-data", "--out", str(tmp_path / "d"), *FAST]) == 0
    assert cli.main(["pretrain", "--data", str(tmp_path / "d"), "--out", str(tmp_path / "p"), *FAST,
                     "--set", "train.total_steps=0"]) == 0
    cfg = yaml.safe_load((tmp_path / "p" / "run_config.yaml").read_text())
    ck = load_checkpoint(tmp_path / "p" / "model.ckpt")
    ref = init_params(C.build_model(cfg), cfg["model"]["init_seed"])
    assert ck.step == 0 and all(np.array_equal(ck.params[k].data, t.data) for k, t in ref)


def test_pipeline_end_to_end(tmp_path, capsys):
    d, p, e = tmp_path / "data", tmp_path / "pre", tmp_path / "emb"
    assert cli.main(["generate-data", "--out", str(d), *FAST]) == 0
    assert cli.main(["pretrain", "--data", str(d), "--out", str(p), *FAST]) == 0
    assert cli.main(["embed", "--checkpoint", str(p / "model.ckpt"), "--data", str(d), "--out", str(e), *FAST]) == 0
    assert cli.main(["finetune", "--checkpoint", str(p / "model.ckpt"), "--embeddings", str(e / "user_embeddings.jsonl"),
                     "--labels", str(d / "labels.jsonl"), "--task", "commuter", "--out", str(tmp_path / "fc"), *FAST]) == 0
    assert cli.main(["finetune", "--checkpoint", str(p / "model.ckpt"), "--embeddings", str(e / "region_embeddings.jsonl"),
                     "--labels", str(d / "regions.geojson"), "--task", "car_service", "--out", str(tmp_path / "fr"),
                     *FAST]) == 0
    assert cli.main(["rollout", "--checkpoint", str(p / "model.ckpt"), "--data", str(d), "--out", str(tmp_path / "ro"),
                     "--horizons", "2", *FAST]) == 0
    assert cli.main(["evaluate", "--data", str(d), "--embeddings", str(e), "--finetune", str(tmp_path / "fc"),
                     str(tmp_path / "fr"), "--out", str(tmp_path / "ev"), *FAST]) == 0
    report = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert [r["task_id"] for r in report] == ["commuter", "car_service"]
    assert set(report[1]["metrics"]) == {"RAW", "Unique", "Statics"}
    assert report[1]["metrics"]["Unique"]["pcc"] is None
    for sub in ("data", "pre", "emb", "fc", "fr", "ro", "ev"):
        assert (tmp_path / sub / "run_config.yaml").exists()
    assert len((p / "train_log.jsonl").read_text().splitlines()) == 3
    assert (tmp_path / "ro" / "rollout_paths.geojson").exists()
