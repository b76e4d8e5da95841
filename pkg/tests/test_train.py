import json

import pytest
import torch

import img_vmr.data as data_mod
import img_vmr.train as train_mod
from img_vmr.config import SyntheticSpec
from img_vmr.data import generate_synthetic_dataset, load_dataset, save_dataset
from img_vmr.errors import InvalidInputError, TrainingDivergenceError
from img_vmr.train import (CHECKPOINT_NAME, evaluate_checkpoint, evaluate_model, load_checkpoint, load_model,
                           noise_sweep, train)

SPEC = SyntheticSpec(n_samples=24, n_test=8, T=12, d_v=6, d_a=5, d_q=4, codebook_size=3)


@pytest.fixture(scope="module")
def dataset():
    return generate_synthetic_dataset(SPEC)


@pytest.fixture
def splits(dataset):
    bundles = dataset.bundles()
    return [b for b in bundles if b.split == "train"], [b for b in bundles if b.split == "test"]


def _steps(records):
    return [r for r in records if r["event"] == "step"]


def _read_log(path):
    return [json.loads(line) for line in open(path)]


def test_one_epoch_smoke(tiny_cfg, splits, tmp_path):
    train_set, _ = splits
    tiny_cfg.epochs = 1
    state = train(tiny_cfg, train_set, out_dir=tmp_path)
    assert state.epoch == 1 and state.step == 4
    ckpt = load_checkpoint(tmp_path / CHECKPOINT_NAME)
    assert {"model", "optimizer", "scheduler", "epoch", "step", "rng", "config"} <= set(ckpt)
    log = _read_log(tmp_path / "train_log.jsonl")
    step = _steps(log)[0]
    assert set(step["L_ret"]) == {"fusion", "visual", "audio"}
    assert set(step["L_kl"]) == {"visual", "audio"}
    assert {"L_p", "L_sal", "total", "lr", "mean_p"} <= set(step)
    epoch = [r for r in log if r["event"] == "epoch"][0]
    assert epoch["importance"]["count"] == len(train_set)
    assert sum(epoch["importance"]["histogram"].values()) == len(train_set)


def test_resume_reproduces_next_step_exactly(tiny_cfg, splits, tmp_path):
    train_set, _ = splits
    full = []
    train(tiny_cfg, train_set, on_step=full.append)
    train(tiny_cfg, train_set, out_dir=tmp_path, stop_after_epoch=1)
    resumed = []
    train(tiny_cfg, train_set, resume=load_checkpoint(tmp_path / CHECKPOINT_NAME), on_step=resumed.append)
    assert len(full) == 8 and len(resumed) == 4
    assert resumed == full[4:]


def test_runs_are_deterministic(tiny_cfg, splits, tmp_path):
    train_set, _ = splits
    train(tiny_cfg, train_set, out_dir=tmp_path / "a")
    train(tiny_cfg, train_set, out_dir=tmp_path / "b")
    assert _read_log(tmp_path / "a" / "train_log.jsonl") == _read_log(tmp_path / "b" / "train_log.jsonl")


def test_learning_rate_decays_linearly_to_zero(tiny_cfg, splits):
    train_set, _ = splits
    tiny_cfg.epochs = 3
    records = []
    train(tiny_cfg, train_set, on_step=records.append)
    lrs = [r["lr"] for r in records]
    total = len(lrs)
    assert lrs[0] == pytest.approx(tiny_cfg.lr)
    for k, lr in enumerate(lrs):
        assert lr == pytest.approx(tiny_cfg.lr * (1 - k / total))
    assert lrs[-1] < tiny_cfg.lr / tiny_cfg.epochs


def test_empty_dataset_rejected(tiny_cfg):
    with pytest.raises(InvalidInputError):
        train(tiny_cfg, [])


def test_divergence_dumps_diagnostics(tiny_cfg, splits, tmp_path, monkeypatch):
    train_set, _ = splits
    real = train_mod.compute_losses

    def poisoned(outputs, batch, cfg, generator=None, fixed=None):
        outputs.branches["audio"].start_logits = outputs.branches["audio"].start_logits * float("nan")
        return real(outputs, batch, cfg, generator, fixed)

    monkeypatch.setattr(train_mod, "compute_losses", poisoned)
    with pytest.raises(TrainingDivergenceError):
        train(tiny_cfg, train_set, out_dir=tmp_path)
    diag = json.loads((tmp_path / "divergence.json").read_text())
    assert diag["step"] == 0 and len(diag["video_ids"]) == tiny_cfg.batch_size


def test_checkpoint_round_trip_preserves_evaluation(tiny_cfg, splits, tmp_path):
    train_set, test_set = splits
    tiny_cfg.epochs = 1
    state = train(tiny_cfg, train_set, out_dir=tmp_path)
    before = evaluate_model(state.model, test_set, "fusion")
    after = evaluate_checkpoint(tmp_path / CHECKPOINT_NAME, test_set, "fusion")
    assert before.to_json() == after.to_json()
    again = evaluate_checkpoint(tmp_path / CHECKPOINT_NAME, test_set, "fusion")
    assert after.to_json() == again.to_json()


def test_visual_branch_on_dataset_without_audio(tiny_cfg, dataset, tmp_path, monkeypatch):
    save_dataset(dataset, tmp_path / "data")
    tiny_cfg.epochs = 1
    train_set = [b for b in load_dataset(tmp_path / "data") if b.split == "train"]
    train(tiny_cfg, train_set, out_dir=tmp_path / "ck")
    for f in (tmp_path / "data" / "audio").iterdir():
        f.unlink()
    opened = []
    real = data_mod.load_features
    monkeypatch.setattr(data_mod, "load_features", lambda p, *a, **k: (opened.append(str(p)), real(p, *a, **k))[1])
    test_set = load_dataset(tmp_path / "data", split="test")
    assert all(b.audio is None for b in test_set)
    report = evaluate_checkpoint(tmp_path / "ck" / CHECKPOINT_NAME, test_set, "visual")
    assert len(report.per_query) == SPEC.n_test
    assert not any("/audio/" in p for p in opened)
    with pytest.raises(InvalidInputError):
        evaluate_checkpoint(tmp_path / "ck" / CHECKPOINT_NAME, test_set, "audio")
    with pytest.raises(InvalidInputError):
        evaluate_checkpoint(tmp_path / "ck" / CHECKPOINT_NAME, test_set, "fusion")


def test_fusion_and_visual_reports_on_same_model(tiny_cfg, splits, tmp_path):
    train_set, test_set = splits
    tiny_cfg.epochs = 1
    train(tiny_cfg, train_set, out_dir=tmp_path)
    model = load_model(tmp_path / CHECKPOINT_NAME)
    for branch in ("fusion", "visual", "audio"):
        rep = evaluate_checkpoint(model, test_set, branch)
        assert 0.0 <= rep.miou <= 100.0


def test_noise_sweep_deterministic_and_zero_fraction_is_clean(tiny_cfg, splits):
    train_set, test_set = splits
    tiny_cfg.epochs = 1
    model = train(tiny_cfg, train_set).model
    a = noise_sweep(model, test_set, [0, 0.5, 1.0], seed=3)
    b = noise_sweep(model, test_set, [0, 0.5, 1.0], seed=3)
    assert a == b
    assert a[0]["miou_with_aip"] == pytest.approx(evaluate_model(model, test_set).miou)
    assert [r["fraction"] for r in a] == [0.0, 0.5, 1.0]
    with pytest.raises(InvalidInputError):
        noise_sweep(model, test_set, [1.5])
