"""Training loop, checkpoints, prediction and checkpoint evaluation."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .config import BRANCHES, ModelConfig, from_dict, to_dict
from .data import FeatureBundle, collate
from .errors import InvalidInputError, TrainingDivergenceError
from .importance import importance_stats
from .metrics import EvalReport, decode_span, evaluate, span_to_seconds
from .model import IMGModel, compute_losses

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.pt"


def build_optimizer(model: IMGModel, cfg: ModelConfig, total_steps: int):
    decay, no_decay = [], []
    for name, param in model.named_parameters():
        (no_decay if name.endswith("bias") or "norm" in name else decay).append(param)
    opt = torch.optim.AdamW([
        {"params": decay, "weight_decay": cfg.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ], lr=cfg.lr, fused=True)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda step: max(0.0, 1.0 - step / total_steps))
    return opt, sched


@dataclass
class TrainState:
    model: IMGModel
    optimizer: torch.optim.Optimizer
    scheduler: torch.optim.lr_scheduler.LambdaLR
    shuffle_gen: torch.Generator
    pair_gen: torch.Generator
    epoch: int = 0
    step: int = 0

    def checkpoint(self) -> dict:
        return {
            "config": to_dict(self.model.cfg),
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "scheduler": self.scheduler.state_dict(),
            "epoch": self.epoch,
            "step": self.step,
            "rng": {"shuffle": self.shuffle_gen.get_state(), "pairs": self.pair_gen.get_state(),
                    "torch": torch.get_rng_state()},
        }


def init_state(cfg: ModelConfig, n_train: int) -> TrainState:
    torch.manual_seed(cfg.seed)
    model = IMGModel(cfg)
    steps_per_epoch = math.ceil(n_train / cfg.batch_size)
    opt, sched = build_optimizer(model, cfg, cfg.epochs * steps_per_epoch)
    shuffle_gen = torch.Generator().manual_seed(cfg.seed + 1)
    pair_gen = torch.Generator().manual_seed(cfg.seed + 2)
    return TrainState(model, opt, sched, shuffle_gen, pair_gen)


def restore_state(ckpt: dict, n_train: int) -> TrainState:
    cfg = config_from_checkpoint(ckpt)
    state = init_state(cfg, n_train)
    state.model.load_state_dict(ckpt["model"])
    state.optimizer.load_state_dict(ckpt["optimizer"])
    state.scheduler.load_state_dict(ckpt["scheduler"])
    state.shuffle_gen.set_state(ckpt["rng"]["shuffle"])
    state.pair_gen.set_state(ckpt["rng"]["pairs"])
    torch.set_rng_state(ckpt["rng"]["torch"])
    state.epoch, state.step = ckpt["epoch"], ckpt["step"]
    return state


def config_from_checkpoint(ckpt: dict) -> ModelConfig:
    return from_dict(ModelConfig, ckpt["config"])


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(state.checkpoint(), path)
    return path


def load_checkpoint(path) -> dict:
    return torch.load(path, map_location="cpu", weights_only=True)


def load_model(path) -> IMGModel:
    ckpt = load_checkpoint(path)
    model = IMGModel(config_from_checkpoint(ckpt))
    model.load_state_dict(ckpt["model"])
    model.eval()
    return model


def _scalar(x) -> float:
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


def _step_record(state, loss, parts, p) -> dict:
    d = parts.details
    return {
        "event": "step", "step": state.step, "epoch": state.epoch,
        "lr": state.scheduler.get_last_lr()[0],
        "L_ret": {k: _scalar(v) for k, v in d["ret"].items()},
        "L_p": _scalar(parts.importance),
        "L_kl": {k: _scalar(v) for k, v in d["kd"].items()},
        "L_sal": _scalar(parts.saliency),
        "total": _scalar(loss),
        "mean_p": _scalar(p.mean()),
    }


def _dump_divergence(out_dir, state, batch, exc):
    diag = {"step": state.step, "epoch": state.epoch,
            "video_ids": [b.video_id for b in batch.bundles], **exc.diagnostics}
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "divergence.json").write_text(json.dumps(diag, indent=2))
    exc.diagnostics = diag


def train(cfg: ModelConfig, dataset: Sequence[FeatureBundle], out_dir=None,
          resume: dict | None = None, stop_after_epoch: int | None = None,
          on_step: Callable[[dict], None] | None = None) -> TrainState:
    """Optimize the full objective over ``cfg.epochs`` epochs.

    Writes ``train_log.jsonl`` and a checkpoint after every epoch when
    ``out_dir`` is given. ``stop_after_epoch`` ends the run early (the LR
    schedule still spans ``cfg.epochs``), which is how resumption is tested.
    """
    if not dataset:
        raise InvalidInputError("training set is empty")
    for b in dataset:
        b.validate(cfg.max_frames, cfg.max_tokens)
    state = restore_state(resume, len(dataset)) if resume is not None else init_state(cfg, len(dataset))
    cfg = state.model.cfg
    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(to_dict(cfg), indent=2))
        log_fh = open(out / "train_log.jsonl", "a" if resume is not None else "w")
    last_epoch = cfg.epochs if stop_after_epoch is None else min(cfg.epochs, stop_after_epoch)
    model = state.model
    try:
        while state.epoch < last_epoch:
            model.train()
            order = torch.randperm(len(dataset), generator=state.shuffle_gen).tolist()
            p_seen = []
            for start in range(0, len(order), cfg.batch_size):
                batch = collate([dataset[i] for i in order[start:start + cfg.batch_size]])
                outputs = model(batch, epoch=state.epoch)
                try:
                    loss, parts = compute_losses(outputs, batch, cfg, generator=state.pair_gen)
                    if not torch.isfinite(loss):
                        raise TrainingDivergenceError("non-finite total loss", {"total": _scalar(loss)})
                except TrainingDivergenceError as exc:
                    _dump_divergence(out, state, batch, exc)
                    raise
                state.optimizer.zero_grad(set_to_none=True)
                loss.backward()
                state.optimizer.step()
                record = _step_record(state, loss, parts, outputs.p)
                state.scheduler.step()
                state.step += 1
                p_seen.extend(outputs.p.detach().tolist())
                if log_fh is not None:
                    log_fh.write(json.dumps(record) + "\n")
                if on_step is not None:
                    on_step(record)
            epoch_record = {"event": "epoch", "epoch": state.epoch, "importance": importance_stats(p_seen)}
            log.info("epoch %d done, mean p %.3f", state.epoch, epoch_record["importance"]["mean_p"])
            state.epoch += 1
            if log_fh is not None:
                log_fh.write(json.dumps(epoch_record) + "\n")
                log_fh.flush()
                save_checkpoint(state, out / CHECKPOINT_NAME)
    finally:
        if log_fh is not None:
            log_fh.close()
    model.eval()
    return state


@dataclass
class Predictions:
    spans: list[tuple[int, int]]
    seconds: list[tuple[float, float]]
    p: list[float]


@torch.no_grad()
def predict(model: IMGModel, bundles: Sequence[FeatureBundle], branch: str = "fusion",
            batch_size: int = 64, p_override=None) -> Predictions:
    if branch not in BRANCHES:
        raise InvalidInputError(f"unknown branch {branch!r}")
    need_audio = branch != "visual"
    if need_audio and any(b.audio is None for b in bundles):
        raise InvalidInputError(f"branch {branch!r} needs audio features, some are missing")
    model.eval()
    spans, seconds, ps = [], [], []
    dtype = next(model.parameters()).dtype
    for start in range(0, len(bundles), batch_size):
        chunk = bundles[start:start + batch_size]
        batch = collate(chunk, require_audio=need_audio).to(dtype)
        out = model(batch, p_override=p_override, branches=(branch,))
        br = out.branches[branch]
        for k, b in enumerate(chunk):
            T = b.num_frames
            span = decode_span(br.start_logits[k, :T].double().numpy(),
                               br.end_logits[k, :T].double().numpy(), b.frame_mask)
            spans.append(span)
            seconds.append(span_to_seconds(span, T, b.annotation.duration_sec))
        if out.p is not None:
            ps.extend(out.p.tolist())
    return Predictions(spans, seconds, ps)


def evaluate_model(model, bundles, branch="fusion", p_override=None) -> EvalReport:
    preds = predict(model, bundles, branch, p_override=p_override)
    return evaluate(preds.seconds, [b.annotation for b in bundles], ids=[b.video_id for b in bundles])


def evaluate_checkpoint(checkpoint, bundles, branch: str = "fusion") -> EvalReport:
    """Decode with one branch of a saved model. The visual branch ignores audio entirely."""
    model = load_model(checkpoint) if not isinstance(checkpoint, IMGModel) else checkpoint
    return evaluate_model(model, bundles, branch)


def noise_sweep(model: IMGModel, bundles: Sequence[FeatureBundle], fractions, seed: int = 0) -> list[dict]:
    """Replace a growing share of audio tracks with unit Gaussian noise and re-evaluate.

    The noisy subsets are nested (one fixed permutation), so each fraction
    corrupts a superset of the previous one.
    """
    fractions = [float(f) for f in fractions]
    if any(not 0 <= f <= 1 for f in fractions):
        raise InvalidInputError(f"fractions must lie in [0, 1]: {fractions}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(bundles))
    noise = [rng.standard_normal(b.audio.shape).astype(np.float32) for b in bundles]
    rows = []
    for frac in fractions:
        k = int(round(frac * len(bundles)))
        noisy_idx = set(order[:k].tolist())
        corrupted = []
        for i, b in enumerate(bundles):
            if i in noisy_idx:
                b = FeatureBundle(b.visual, noise[i], b.query, b.frame_mask, b.token_mask,
                                  b.annotation, b.video_id, b.carrier, b.split)
            corrupted.append(b)
        preds = predict(model, corrupted, "fusion")
        gts = [b.annotation for b in corrupted]
        with_aip = evaluate(preds.seconds, gts)
        fixed = evaluate(predict(model, corrupted, "fusion", p_override=0.5).seconds, gts)
        rows.append({"fraction": frac, "mean_p": float(np.mean(preds.p)),
                     "miou_with_aip": with_aip.miou, "miou_fixed_half": fixed.miou})
    return rows
