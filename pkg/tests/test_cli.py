import json
import shutil
import time
from pathlib import Path

import pytest

from segment_retrieval import pipeline
from segment_retrieval.cli import main
from segment_retrieval.config import config_from_dict, load_config
from segment_retrieval.errors import InvalidInputError
from segment_retrieval.mock_vlm import MockVlmServer
from segment_retrieval.synthetic import write_fixture

TRAINING = {"batch_size": 16, "epochs": 3, "learning_rate": 1e-3, "warmup_steps": 5,
            "weight_decay": 1e-4, "segment_hidden": 32, "text_hidden": 32}


def make_project(root, **overrides):
    root = Path(root)
    write_fixture(root / "data", n_subsets=(2, 1, 1), series_per_subset=4, series_length=1500)
    doc = {"data_dir": "data", "out_dir": "out", "seed": 0,
           "sampling": {"N_target": 8},
           "training": TRAINING,
           "eval": {"N_q": 8, "pool_sizes": [1, 4], "ks": [1, 5, 10], "figures": False}}
    doc.update(overrides)
    path = root / "config.json"
    path.write_text(json.dumps(doc))
    return path


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def project(tmp_path_factory):
    """A small project taken through every stage once."""
    root = tmp_path_factory.mktemp("proj")
    cfg_path = make_project(root)
    for cmd in ("windows", "segment", "caption", "train", "index", "query", "eval"):
        assert run(cmd, "--config", cfg_path) == 0, cmd
    return cfg_path


def test_fixture_command(tmp_path):
    assert run("fixture", tmp_path / "fx", "--seed", 3) == 0
    cfg = load_config(tmp_path / "fx" / "config.json")
    assert cfg.seed == 3 and cfg.data_path == tmp_path / "fx" / "data"
    assert (tmp_path / "fx" / "data" / "splits" / "test.txt").exists()


def test_windows_one_file_per_subset(project):
    out = project.parent / "out" / "windows"
    files = sorted(p.relative_to(out).as_posix() for p in out.rglob("*.ndjson"))
    assert files == ["test/test_subset_00.ndjson", "train/train_subset_00.ndjson",
                     "train/train_subset_01.ndjson", "val/val_subset_00.ndjson"]
    manifest = json.loads((project.parent / "out" / "manifest" / "windows.json").read_text())
    assert manifest["seed"] == 0


def test_overlapping_splits_rejected(tmp_path, caplog):
    cfg = make_project(tmp_path)
    (tmp_path / "data" / "splits" / "val.txt").write_text("val_subset_00\ntrain_subset_00\n")
    assert run("windows", "--config", cfg) == 1
    assert "train_subset_00" in caplog.text


def test_155_5_10_split_layout_accepted(tmp_path):
    names = [f"sub{i:03d}" for i in range(170)]
    cfg = config_from_dict({"data_dir": str(tmp_path), "out_dir": str(tmp_path / "o"),
                            "splits": {"train": names[:155], "val": names[155:160],
                                       "test": names[160:]}})
    lists = pipeline.read_split_lists(cfg)
    assert [len(lists[s]) for s in ("train", "val", "test")] == [155, 5, 10]


def test_segment_svg_count_and_speed(tmp_path):
    cfg = make_project(tmp_path, sampling={"N_target": 5})
    # keep only two train subsets so the run covers exactly 10 windows
    (tmp_path / "data" / "splits" / "val.txt").write_text("")
    (tmp_path / "data" / "splits" / "test.txt").write_text("")
    assert run("windows", "--config", cfg) == 0
    start = time.perf_counter()
    assert run("segment", "--config", cfg, "--svg") == 0
    elapsed = time.perf_counter() - start
    svgs = list((tmp_path / "out" / "plots").rglob("*.svg"))
    assert len(svgs) == 10
    assert elapsed < 10.0


def test_segment_without_windows(tmp_path, caplog):
    cfg = make_project(tmp_path)
    assert run("segment", "--config", cfg) == 1
    assert "no windows" in caplog.text


def test_caption_count_matches_captionable(project):
    out = project.parent / "out"
    for split in ("train", "val", "test"):
        segs = [json.loads(x) for x in (out / "segments" / f"{split}.ndjson").read_text().split()]
        pairs = (out / "pairs" / f"{split}.ndjson").read_text().split("\n")
        assert sum(s["captionable"] for s in segs) == len([p for p in pairs if p])


def test_caption_via_mock_vlm(tmp_path):
    with MockVlmServer() as srv:
        cfg = make_project(tmp_path, captioner="vlm",
                           vlm={"endpoint": srv.url, "max_retries": 0, "timeout": 5})
        assert run("windows", "--config", cfg) == 0
        assert run("segment", "--config", cfg) == 0
        assert run("caption", "--config", cfg) == 0
        n_requests = len(srv.requests)
    recs = [json.loads(x) for x in (tmp_path / "out" / "pairs" / "train.ndjson").open()]
    assert recs and all(r["caption_source"] == "vlm" for r in recs)
    assert all(r["caption"].startswith("segment ") for r in recs)
    assert n_requests > 0


def test_caption_vlm_down_is_runtime_failure(tmp_path):
    cfg = make_project(tmp_path, captioner="vlm",
                       vlm={"endpoint": "http://127.0.0.1:9/x", "max_retries": 0, "timeout": 2})
    assert run("windows", "--config", cfg) == 0
    assert run("segment", "--config", cfg) == 0
    assert run("caption", "--config", cfg) == 2


def test_train_resume_reproduces_log(project, capsys):
    capsys.readouterr()
    ckpt = project.parent / "out" / "model" / "checkpoint.json"
    before = ckpt.read_bytes()
    assert run("train", "--config", project, "--resume") == 0
    resumed = capsys.readouterr().out
    assert ckpt.read_bytes() == before
    assert [json.loads(x) for x in resumed.split("\n") if x] == json.loads(before)["log"]


def test_train_batch_larger_than_data(tmp_path):
    cfg = make_project(tmp_path, training={**TRAINING, "batch_size": 100000})
    for cmd in ("windows", "segment", "caption"):
        assert run(cmd, "--config", cfg) == 0
    assert run("train", "--config", cfg) == 1


def test_missing_index_names_path(tmp_path, project, caplog):
    other = tmp_path / "copy"
    shutil.copytree(project.parent, other)
    (other / "out" / "index" / "test.idx").unlink()
    assert run("query", "--config", other / "config.json") == 1
    assert "test.idx" in caplog.text


def test_own_caption_at_single_window_pool(project):
    out = project.parent / "out"
    segs = [json.loads(x) for x in (out / "segments" / "test.ndjson").open()]
    per_window = {}
    for s in segs:
        per_window[s["window_id"]] = per_window.get(s["window_id"], 0) + s["captionable"]
    queries = [json.loads(x) for x in (out / "queries.ndjson").open()]
    results = {}
    for line in (out / "results" / "lastr_pool1.ndjson").open():
        r = json.loads(line)
        results[r["query_id"]] = r["gt_rank"]
    assert len(results) == len(queries)
    for q in queries:
        if per_window[q["window_id"]] == 1:
            assert results[q["query_id"]] == 1


def test_eval_one_metrics_file_per_pool_and_method(tmp_path, project):
    out = project.parent / "out"
    assert run("query", "--config", project, "--pool-size", 1, "--pool-size", 2,
               "--pool-size", 4) == 0
    assert run("eval", "--config", project, "--pool-size", 1, "--pool-size", 2,
               "--pool-size", 4) == 0
    names = sorted(p.name for p in (out / "metrics").glob("*.json"))
    assert names == sorted(f"{m}_pool{n}.json" for m in ("lastr", "random") for n in (1, 2, 4))
    m = json.loads((out / "metrics" / "lastr_pool4.json").read_text())
    assert {"recall@1", "recall@5", "recall@10", "map", "sbert@10", "vlm_score@10",
            "vlm_precision@10"} <= set(m)


def test_method_and_k_flags(project):
    out = project.parent / "out"
    assert run("query", "--config", project, "--pool-size", 4, "--method", "random",
               "--k", 3) == 0
    rows = [json.loads(x) for x in (out / "results" / "random_pool4.ndjson").open()]
    assert max(r["rank"] for r in rows) <= 3


def test_usage_errors_exit_one(tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["query"])
    assert info.value.code == 1
    assert run("windows", "--config", tmp_path / "nope.json") == 1


def test_unknown_config_key(tmp_path):
    with pytest.raises(InvalidInputError):
        config_from_dict({"data_dir": ".", "out_dir": ".", "bogus": 1})


def test_toml_config(tmp_path):
    (tmp_path / "c.toml").write_text('data_dir = "d"\nout_dir = "o"\nseed = 5\n'
                                     '[eval]\npool_sizes = [10]\n')
    cfg = load_config(tmp_path / "c.toml")
    assert cfg.seed == 5 and cfg.eval.pool_sizes == (10,)
    assert cfg.data_path == tmp_path / "d"
