import json

import pytest

from convseq import cli
from convseq.optim import GradientError


def write_walk_dataset(path, users=10, items=30, events=8, stride=7, jitter=None):
    """Stride walks over the catalog; jitter varies per-user event counts."""
    with open(path, "w") as fh:
        for u in range(users):
            count = events + (jitter[u % len(jitter)] if jitter else 0)
            for step in range(count):
                item = (u * stride + step) % items
                rec = {"user": f"u{u}", "item": f"i{item}",
                       "ts": 86400 * (10 + u + 3 * step),
                       "attrs": [float(item % 4), float(item % 3)]}
                fh.write(json.dumps(rec) + "\n")
    return path


FAST = ["--set", "sequence_length=6", "--set", "embedding=8",
        "--set", "schedule=[[2,2],[3,3]]", "--set", "batch_size=8",
        "--set", "learning_rate=0.01", "--set", "dropout_rate=0.0",
        "--set", "weight_decay=0.0", "--set", "max_epochs=3",
        "--set", "n_train=6", "--set", "n_eval=6", "--set", "protocol=10"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = write_walk_dataset(root / "data.jsonl")
    run = root / "run"
    code = cli.main(["train", "--dataset", str(data), "--out", str(run),
                     "--seed", "11", *FAST])
    assert code == 0
    return {"root": root, "data": data, "run": run}


class TestTrain:
    def test_artifacts(self, workspace):
        run = workspace["run"]
        for name in ("best.ckpt", "train_log.csv", "resolved.cfg",
                     "manifest.json"):
            assert (run / name).exists()
        manifest = json.loads((run / "manifest.json").read_text())
        assert manifest == {"command": "train",
                            "files": ["best.ckpt", "resolved.cfg",
                                      "train_log.csv"]}

    def test_training_log_shape(self, workspace):
        lines = (workspace["run"] / "train_log.csv").read_text().splitlines()
        assert lines[0] == "epoch,mean_loss,val_hr10,val_ndcg10,seconds,peak_bytes"
        assert len(lines) == 4

    def test_identical_seeds_identical_checkpoints(self, workspace, tmp_path):
        code = cli.main(["train", "--dataset", str(workspace["data"]),
                         "--out", str(tmp_path), "--seed", "11", *FAST])
        assert code == 0
        assert (tmp_path / "best.ckpt").read_bytes() == \
            (workspace["run"] / "best.ckpt").read_bytes()

    def test_resolved_config_replays_the_run(self, workspace, tmp_path):
        resolved = workspace["run"] / "resolved.cfg"
        code = cli.main(["train", "--config", str(resolved),
                         "--out", str(tmp_path)])
        assert code == 0
        assert (tmp_path / "best.ckpt").read_bytes() == \
            (workspace["run"] / "best.ckpt").read_bytes()

    def test_cli_flag_overrides_config_file(self, workspace, tmp_path):
        cfg = tmp_path / "base.cfg"
        cfg.write_text("learning_rate=0.9\nmax_epochs=1\n")
        out = tmp_path / "out"
        code = cli.main(["train", "--config", str(cfg),
                         "--dataset", str(workspace["data"]),
                         "--out", str(out), "--seed", "3", *FAST])
        assert code == 0
        text = (out / "resolved.cfg").read_text()
        assert "learning_rate=0.01" in text
        assert "seed=3" in text


class TestEvaluate:
    def test_artifacts_and_report(self, workspace, tmp_path, capsys):
        code = cli.main(["evaluate", "--dataset", str(workspace["data"]),
                         "--checkpoint", str(workspace["run"] / "best.ckpt"),
                         "--out", str(tmp_path), "--seed", "11",
                         "--set", "protocol=10"])
        assert code == 0
        lines = (tmp_path / "metrics.csv").read_text().splitlines()
        assert lines[0] == "group,protocol,k,hr_at_k,ndcg_at_k,users,excluded"
        assert lines[1].startswith("overall,sampled(10),10,")
        ranks = [json.loads(l) for l in
                 (tmp_path / "ranks.jsonl").read_text().splitlines()]
        assert len(ranks) == 10
        assert "overall" in capsys.readouterr().out

    def test_grouped_report(self, workspace, tmp_path):
        data = write_walk_dataset(tmp_path / "jittered.jsonl",
                                  jitter=[0, 2, 4, 1, 3])
        run = tmp_path / "run"
        assert cli.main(["train", "--dataset", str(data), "--out", str(run),
                         "--seed", "5", *FAST]) == 0
        out = tmp_path / "eval"
        code = cli.main(["evaluate", "--dataset", str(data),
                         "--checkpoint", str(run / "best.ckpt"),
                         "--out", str(out), "--groups", "top_bottom:0.3",
                         "--set", "protocol=10"])
        assert code == 0
        text = (out / "metrics.csv").read_text()
        assert "top," in text and "bottom," in text
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["files"] == ["metrics.csv"]

    def test_determinism_across_runs(self, workspace, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert cli.main(["evaluate", "--dataset", str(workspace["data"]),
                             "--checkpoint",
                             str(workspace["run"] / "best.ckpt"),
                             "--out", str(out), "--seed", "11",
                             "--set", "protocol=10"]) == 0
            outs.append(out)
        assert (outs[0] / "metrics.csv").read_bytes() == \
            (outs[1] / "metrics.csv").read_bytes()
        assert (outs[0] / "ranks.jsonl").read_bytes() == \
            (outs[1] / "ranks.jsonl").read_bytes()


class TestExitCodes:
    def test_no_dataset_is_usage_error(self, tmp_path):
        assert cli.main(["train", "--out", str(tmp_path)]) == 2

    def test_unknown_config_key(self, workspace, tmp_path):
        assert cli.main(["train", "--dataset", str(workspace["data"]),
                         "--out", str(tmp_path),
                         "--set", "momentum=0.9"]) == 2

    def test_malformed_set_pair(self, workspace, tmp_path):
        assert cli.main(["train", "--dataset", str(workspace["data"]),
                         "--out", str(tmp_path), "--set", "oops"]) == 2

    def test_missing_dataset_file(self, tmp_path):
        assert cli.main(["train", "--dataset", str(tmp_path / "gone.jsonl"),
                         "--out", str(tmp_path)]) == 3

    def test_corrupt_checkpoint(self, workspace, tmp_path):
        bogus = tmp_path / "bogus.ckpt"
        bogus.write_text("not a checkpoint")
        assert cli.main(["evaluate", "--dataset", str(workspace["data"]),
                         "--checkpoint", str(bogus),
                         "--out", str(tmp_path)]) == 3

    def test_incompatible_checkpoint(self, workspace, tmp_path):
        narrow = tmp_path / "narrow.jsonl"
        with open(narrow, "w") as fh:
            for u in range(6):
                for step in range(5):
                    item = (u * 5 + step) % 12
                    fh.write(json.dumps({
                        "user": f"u{u}", "item": f"i{item}",
                        "ts": 86400 * (u + 2 * step),
                        "attrs": [float(item % 2)]}) + "\n")
        assert cli.main(["evaluate", "--dataset", str(narrow),
                         "--checkpoint", str(workspace["run"] / "best.ckpt"),
                         "--out", str(tmp_path), "--set", "protocol=5"]) == 3

    def test_numeric_failure(self, workspace, tmp_path, monkeypatch):
        def explode(dataset, config):
            raise GradientError("non-finite loss")
        monkeypatch.setattr(cli, "fit", explode)
        assert cli.main(["train", "--dataset", str(workspace["data"]),
                         "--out", str(tmp_path), *FAST]) == 4

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit) as info:
            cli.main(["frobnicate"])
        assert info.value.code == 2

    def test_descending_bench_lengths(self, tmp_path):
        assert cli.main(["bench", "--lengths", "64,32",
                         "--out", str(tmp_path)]) == 4


class TestBench:
    def test_artifacts_and_slopes(self, tmp_path, capsys):
        code = cli.main(["bench", "--lengths", "8,16,32,64", "--batch", "2",
                         "--width", "4", "--out", str(tmp_path)])
        assert code == 0
        csv = (tmp_path / "scaling.csv").read_text().splitlines()
        assert csv[0] == "encoder,L,batch,median_seconds,peak_bytes,mac_count"
        assert len(csv) == 9
        assert (tmp_path / "scaling.dat").exists()
        out = capsys.readouterr().out
        for metric in ("wall_seconds", "peak_bytes", "mac_count"):
            assert metric in out
        assert "cds" in out and "attention" in out


class TestAblate:
    def test_subset_keeps_order_with_base_last(self, workspace, tmp_path):
        code = cli.main(["ablate", "--dataset", str(workspace["data"]),
                         "--flags", "avgpool_only,single_conv",
                         "--out", str(tmp_path), "--seed", "11", *FAST])
        assert code == 0
        lines = (tmp_path / "ablate.csv").read_text().splitlines()
        assert lines[0] == "variant,hr_at_k,ndcg_at_k"
        names = [l.split(",")[0] for l in lines[1:]]
        assert names == ["single_conv", "avgpool_only", "base"]

    def test_unknown_flag(self, workspace, tmp_path):
        assert cli.main(["ablate", "--dataset", str(workspace["data"]),
                         "--flags", "no_context", "--out", str(tmp_path)]) == 2


class TestSweep:
    def test_embedding_axis(self, workspace, tmp_path):
        code = cli.main(["sweep", "--dataset", str(workspace["data"]),
                         "--axis", "embedding", "--values", "4,8",
                         "--out", str(tmp_path), "--seed", "11", *FAST])
        assert code == 0
        lines = (tmp_path / "sweep.csv").read_text().splitlines()
        assert lines[0] == "embedding,hr_at_k,ndcg_at_k"
        assert [l.split(",")[0] for l in lines[1:]] == ["4", "8"]

    def test_kernel_schedule_axis_quotes_json(self, workspace, tmp_path):
        code = cli.main(["sweep", "--dataset", str(workspace["data"]),
                         "--axis", "kernel_schedule",
                         "--values", "[[2,2],[3,3]];[[3,3],[2,2]]",
                         "--out", str(tmp_path), "--seed", "11", *FAST])
        assert code == 0
        lines = (tmp_path / "sweep.csv").read_text().splitlines()
        assert lines[1].startswith('"[[2,2],[3,3]]",')
        assert lines[2].startswith('"[[3,3],[2,2]]",')

    def test_seq_length_axis(self, workspace, tmp_path):
        code = cli.main(["sweep", "--dataset", str(workspace["data"]),
                         "--axis", "seq_length", "--values", "4,6",
                         "--out", str(tmp_path), "--seed", "11", *FAST])
        assert code == 0
        lines = (tmp_path / "sweep.csv").read_text().splitlines()
        assert [l.split(",")[0] for l in lines[1:]] == ["4", "6"]

    def test_empty_values(self, workspace, tmp_path):
        assert cli.main(["sweep", "--dataset", str(workspace["data"]),
                         "--axis", "embedding", "--values", ",,",
                         "--out", str(tmp_path)]) == 2


class TestInspect:
    def test_summary_contents(self, workspace, capsys):
        code = cli.main(["inspect", "--checkpoint",
                         str(workspace["run"] / "best.ckpt")])
        assert code == 0
        out = capsys.readouterr().out
        assert "total parameters:" in out
        assert "schedule: (2,2) (3,3)" in out
        assert "blocks.0.alpha1" in out
        assert "encoder.id_table" in out

    def test_parameter_count_matches_model(self, workspace, capsys):
        from convseq.model import Model
        model = Model.load(workspace["run"] / "best.ckpt")
        cli.main(["inspect", "--checkpoint",
                  str(workspace["run"] / "best.ckpt")])
        out = capsys.readouterr().out
        assert f"total parameters: {model.parameter_count()}" in out

    def test_non_model_file(self, workspace):
        assert cli.main(["inspect", "--checkpoint",
                         str(workspace["run"] / "train_log.csv")]) == 3
