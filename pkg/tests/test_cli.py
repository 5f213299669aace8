import json

import pytest

from ropnet.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from ropnet.model import build_custom_rop_net, count_parameters, load_model


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("ROPNET_THREADS", raising=False)
    return tmp_path


@pytest.fixture
def dataset(workdir):
    assert main(["synth", "--patients", "4", "--images-per-eye", "2", "--quality-mix", "0", "--seed", "7"]) == 0
    assert main(["split", "--test-fraction", "0.25", "--seed", "7"]) == 0
    return workdir


def run_json(capsys, argv):
    capsys.readouterr()
    assert main(argv) == EXIT_OK
    return json.loads(capsys.readouterr().out)


class TestUsage:
    def test_unknown_flag_prints_help(self, workdir, capsys):
        assert main(["train", "--bogus"]) == EXIT_USAGE
        err = capsys.readouterr().err
        assert "usage:" in err and "--bogus" in err

    def test_missing_command(self, workdir, capsys):
        assert main([]) == EXIT_USAGE

    @pytest.mark.parametrize("argv", [
        ["split", "--test-fraction", "1.5"],
        ["train", "--epochs", "0"],
        ["synth", "--positive-rate", "2"],
        ["augment", "--ops", "rot90,shear"],
        ["bench", "--mode", "turbo"],
    ])
    def test_flag_validation(self, workdir, argv):
        assert main(argv) == EXIT_USAGE
        assert not (workdir / "data").exists()

    def test_thread_env_documented(self, capsys):
        with pytest.raises(SystemExit):
            main(["--help"])
        assert "ROPNET_THREADS" in capsys.readouterr().out

    def test_bad_thread_env(self, workdir, monkeypatch):
        monkeypatch.setenv("ROPNET_THREADS", "lots")
        assert main(["inspect"]) == EXIT_USAGE


class TestPipeline:
    def test_synth_split_train(self, dataset, capsys):
        assert main(["train", "--epochs", "2", "--width", "0.25", "--batch", "4"]) == EXIT_OK
        assert (dataset / "data/model.ropm").exists()
        lines = (dataset / "data/history.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,train_acc,val_loss,val_acc" and len(lines) == 3

        metrics = run_json(capsys, ["eval"])
        assert metrics["n"] == 4 and 0 <= metrics["accuracy"] <= 1
        eye = run_json(capsys, ["vote-eval", "--groups-out", "groups.csv"])
        assert eye["n"] == 2
        assert (dataset / "groups.csv").read_text().startswith("patient_id,eye,n_images,n_positive_votes")
        pred = run_json(capsys, ["predict", "--image", "data/images/P0001_L_0.ppm",
                                 "--image", "data/images/P0001_L_1.ppm"])
        assert len(pred["images"]) == 2 and pred["decision"] in (0, 1)

    def test_train_without_split(self, workdir, capsys):
        assert main(["synth", "--patients", "2", "--images-per-eye", "1"]) == EXIT_OK
        assert main(["train", "--epochs", "1"]) == EXIT_DATA
        assert "train rows" in capsys.readouterr().err

    def test_fine_tune_history(self, dataset):
        assert main(["train", "--epochs", "1", "--width", "0.25", "--fine-tune", "--history-out", "ft.csv"]) == 0
        assert (dataset / "ft.csv").read_text().splitlines()[1].endswith(",,")

    def test_seed_reproducible_artifacts(self, dataset):
        for out in ("a", "b"):
            assert main(["train", "--epochs", "1", "--width", "0.25", "--deterministic", "--seed", "3",
                         "--model-out", f"{out}.ropm", "--history-out", f"{out}.csv"]) == 0
        assert (dataset / "a.ropm").read_bytes() == (dataset / "b.ropm").read_bytes()
        assert (dataset / "a.csv").read_bytes() == (dataset / "b.csv").read_bytes()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_failure_exit_code(self, dataset, capsys):
        assert main(["train", "--epochs", "2", "--width", "0.25", "--lr", "1e300"]) == EXIT_NUMERIC
        assert "epoch 1" in capsys.readouterr().err

    def test_augment_and_clean(self, dataset):
        assert main(["augment", "--ops", "flip_h,contrast", "--out-dir", "aug"]) == EXIT_OK
        lines = (dataset / "aug/manifest.csv").read_text().splitlines()
        assert len(lines) == 1 + 16 * 3
        assert main(["clean", "--manifest", "aug/manifest.csv", "--out", "clean.csv", "--report", "rej.csv"]) == 0
        assert len((dataset / "clean.csv").read_text().splitlines()) == len(lines)


class TestDryRun:
    def test_nothing_written(self, dataset):
        before = sorted(p for p in dataset.rglob("*"))
        manifest_bytes = (dataset / "data/manifest.csv").read_bytes()
        for argv in (["synth", "--out-dir", "other"], ["split", "--test-fraction", "0.5"], ["train"],
                     ["augment", "--ops", "rot90"], ["clean"], ["build", "--out", "m.ropm"],
                     ["bench", "--n-images", "1"]):
            assert main(argv + ["--dry-run"]) == EXIT_OK, argv
            assert main(argv + ["--dry-run"]) == EXIT_OK, argv
        assert sorted(p for p in dataset.rglob("*")) == before
        assert (dataset / "data/manifest.csv").read_bytes() == manifest_bytes

    def test_dry_run_still_validates(self, workdir):
        assert main(["train", "--dry-run"]) == EXIT_DATA


class TestModelCommands:
    def test_inspect_counts(self, workdir, capsys):
        out = run_json(capsys, ["inspect", "--width", "0.5"])
        spec, params = build_custom_rop_net(64, 0.5)
        assert out["parameters"] == count_parameters(spec, params)
        assert out["spec"]["name"] == "custom_rop"

    def test_build_then_inspect(self, workdir, capsys):
        run_json(capsys, ["build", "--arch", "mobilenet", "--out", "mn.ropm"])
        out = run_json(capsys, ["inspect", "--model", "mn.ropm"])
        spec, params = load_model(workdir / "mn.ropm")
        assert out["parameters"] == count_parameters(spec, params)

    def test_corrupt_model(self, workdir):
        (workdir / "bad.ropm").write_bytes(b"ROPM\x01\x00\x00\x00garbage")
        assert main(["inspect", "--model", "bad.ropm"]) == EXIT_DATA

    def test_missing_model(self, workdir):
        assert main(["eval", "--model", "nope.ropm"]) == EXIT_DATA

    def test_bench_csv(self, workdir):
        assert main(["build", "--width", "0.25", "--out", "m.ropm"]) == 0
        assert main(["bench", "--model", "m.ropm", "--n-images", "2", "--runtimes", "1", "--out", "b.csv",
                     "--threads", "1"]) == EXIT_OK
        lines = (workdir / "b.csv").read_text().splitlines()
        assert lines[0] == "model,mode,n_images,runtimes,mean_fps,std_fps,normalized_fps" and len(lines) == 4
