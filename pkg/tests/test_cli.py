import json

import numpy as np
import pytest

from kwsdat.cli import run
from kwsdat.evaluator import det_curve, detection_scores, read_det_csv, read_scores_csv
from kwsdat.frontend import load_features
from kwsdat.synth import make_synthetic_gsc


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    root = make_synthetic_gsc(base / "gsc", words=("yes", "no", "bed"), clips_per_word=10, noises=("white",),
                              noise_seconds=3)
    cfg = {
        "seed": 1,
        "data": {"dataset_dir": str(root), "keywords": ["yes", "no"], "unknown_words": ["bed"],
                 "include_background": False},
        "augment": {"datasources": ["clean"]},
        "train": {"strategy": "DA_DAT", "epochs": 3, "batch_size": 32},
        "attack": {"steps": 1},
    }
    path = base / "run.json"
    path.write_text(json.dumps(cfg))
    return base, path


@pytest.fixture(scope="module")
def trained(workspace):
    base, cfg = workspace
    out = base / "run"
    code = run(["train", "-c", str(cfg), "--out", str(out)])
    return code, out


def test_train_exits_zero_with_one_checkpoint_per_epoch(trained):
    code, out = trained
    assert code == 0
    names = sorted(p.name for p in (out / "checkpoints").iterdir())
    assert names == ["epoch_01.kwsc", "epoch_02.kwsc", "epoch_03.kwsc", "final.kwsc"]
    lines = (out / "train_report.jsonl").read_text().splitlines()
    assert {"epoch", "step", "lr", "loss", "strategy"} <= set(json.loads(lines[0]))
    assert json.loads((out / "config.json").read_text())["train"]["epochs"] == 3


def test_eval_then_det_bit_exact(workspace, trained):
    base, cfg = workspace
    _, out = trained
    ev = base / "eval"
    assert run(["eval", "-c", str(cfg), "--checkpoint", str(out / "checkpoints" / "final.kwsc"),
                "--out", str(ev), "--split", "valid"]) == 0
    metrics = json.loads((ev / "metrics_valid.json").read_text())
    assert 0.0 <= metrics["clean"]["top1_accuracy"] <= 1.0
    scores = ev / "scores_valid_clean.csv"
    assert run(["det", str(scores), "--out", str(ev / "det.csv")]) == 0
    pos, neg = detection_scores(read_scores_csv(scores))
    want, got = det_curve(pos, neg), read_det_csv(ev / "det.csv")
    for a, b in ((want.thresholds, got.thresholds), (want.far, got.far), (want.frr, got.frr)):
        assert a.tobytes() == b.tobytes()


def test_attack_dump_and_audit(workspace, trained):
    base, cfg = workspace
    _, out = trained
    adv = base / "adv"
    assert run(["attack", "-c", str(cfg), "--checkpoint", str(out / "checkpoints" / "final.kwsc"),
                "--out", str(adv), "--limit", "3", "--split", "train"]) == 0
    audit = json.loads((adv / "audit.json").read_text())
    assert all(lv["ball_holds"] and lv["max_abs_deviation"] <= lv["epsilon"] for lv in audit["levels"])
    dumps = sorted((adv / "adversarial").rglob("*.kwsf"))
    assert len(dumps) == 3
    assert load_features(dumps[0].read_bytes()).shape == (100, 40)


def test_missing_checkpoint_is_file_error(workspace, tmp_path):
    _, cfg = workspace
    assert run(["eval", "-c", str(cfg), "--checkpoint", str(tmp_path / "nope.kwsc")]) == 2


def test_bad_config_key_exits_one(workspace, capsys):
    _, cfg = workspace
    assert run(["train", "-c", str(cfg), "--set", "train.epoch=3"]) == 1
    assert "train.epoch" in capsys.readouterr().err


def test_print_config(workspace, capsys):
    _, cfg = workspace
    assert run(["train", "-c", str(cfg), "--set", "train.epochs=7", "--print-config"]) == 0
    assert json.loads(capsys.readouterr().out)["train"]["epochs"] == 7


def test_det_without_negatives_is_data_error(tmp_path):
    (tmp_path / "s.csv").write_text("utterance_id,true_label,score_0,score_1\na,0,0.9,0.1\n")
    assert run(["det", str(tmp_path / "s.csv")]) == 2


def test_ingest_writes_manifest(workspace, tmp_path):
    base, _ = workspace
    out = tmp_path / "m.json"
    assert run(["ingest", str(base / "gsc"), "--out", str(out), "--keywords", "yes", "no"]) == 0
    data = json.loads(out.read_text())
    assert data["labels"] == ["yes", "no", "unknown"]


def test_missing_dataset_is_data_error(tmp_path):
    assert run(["ingest", str(tmp_path / "none")]) == 2


def test_workers_env_var(monkeypatch):
    from kwsdat.config import RunConfig
    from kwsdat.pipeline import resolve_workers

    monkeypatch.setenv("KWS_NUM_WORKERS", "3")
    assert resolve_workers(None, RunConfig()) == 3
    assert resolve_workers(2, RunConfig()) == 2
    monkeypatch.delenv("KWS_NUM_WORKERS")
    assert resolve_workers(None, RunConfig()) == 1


def test_selftest_passes():
    assert run(["selftest"]) == 0


def test_eval_uses_only_branch_zero(trained):
    from kwsdat.model import load_checkpoint

    _, out = trained
    model = load_checkpoint(out / "checkpoints" / "final.kwsc")
    model.reset_touches()
    x = np.random.default_rng(0).normal(size=(2, 100, 40)).astype(np.float32)
    a = model(x, 0, "eval").data
    b = model(x, 1, "eval").data
    assert a.tobytes() == b.tobytes() and model.branch_touches() == {}
