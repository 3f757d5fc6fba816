"""Episodic training and evaluation loops.

Every random choice is keyed by (seed, stream, index), so a run is a pure
function of its config: the training episode at step t, the support sample
drawn at step t and the evaluation episodes never depend on wall-clock,
process or iteration order.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, TextIO

import numpy as np

from . import numtensor as nt
from .config import RunConfig
from .episodes import Episode, IoUAccumulator, generate_synthetic_episode, make_splits
from .episodes.splits import SplitSpec
from .model import CyCTRModel, dice_loss

log = logging.getLogger(__name__)

TRAIN_EPISODES, TRAIN_SAMPLES, TEST_EPISODES, TEST_SAMPLES = 0, 1, 2, 3

# maps an episode whose query mask is hidden (and its index) to a binary prediction
Predictor = Callable[[Episode, int], np.ndarray]


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


def derived_seed(root: int, stream: int, index: int) -> int:
    return int(np.random.SeedSequence([int(root), int(stream), int(index)]).generate_state(1, dtype=np.uint64)[0])


def split_of(cfg: RunConfig) -> SplitSpec:
    return make_splits(range(cfg.data.n_classes), cfg.data.split)


def train_episode(cfg: RunConfig, step: int, split: Optional[SplitSpec] = None) -> Episode:
    split = split or split_of(cfg)
    size = cfg.data.image_size
    if cfg.data.overfit_episode is not None:
        seed = cfg.data.overfit_episode
    else:
        seed = derived_seed(cfg.seed, TRAIN_EPISODES, step % cfg.data.train_episodes)
    return generate_synthetic_episode(split, "train", cfg.data.K, size, size, seed)


def evaluation_episode(cfg: RunConfig, index: int, split: Optional[SplitSpec] = None) -> Episode:
    split = split or split_of(cfg)
    size = cfg.data.image_size
    seed = derived_seed(cfg.data.test_seed, TEST_EPISODES, index)
    return generate_synthetic_episode(split, "test", cfg.data.K, size, size, seed)


def build(cfg: RunConfig) -> CyCTRModel:
    return CyCTRModel(cfg.model, cfg.variant, cfg.seed)


def learning_rate(cfg: RunConfig, step: int) -> float:
    o = cfg.optim
    if o.poly_power == 0 or o.steps == 0:
        return o.lr
    return o.lr * (1.0 - step / o.steps) ** o.poly_power


def _nonfinite_dump(model: CyCTRModel, step: int, loss: float) -> dict:
    bad = None
    for name, p in model.parameters().items():
        if not np.isfinite(p.data).all():
            bad = (name, "value")
            break
        if p.grad is not None and not np.isfinite(p.grad).all():
            bad = (name, "gradient")
            break
    return {
        "step": step,
        "loss": repr(loss),
        "layer": bad[0] if bad else None,
        "nonfinite": bad[1] if bad else "loss",
    }


@dataclass
class TrainResult:
    model: CyCTRModel
    history: List[dict] = field(default_factory=list)
    checkpoint: Optional[Path] = None


def train(cfg: RunConfig, out_dir: Optional[Path] = None, log_file: Optional[TextIO] = None) -> TrainResult:
    """Train ``cfg.optim.steps`` episodes; writes the log and final checkpoint when ``out_dir`` is set.

    The log is JSON lines with step, loss, learning rate and the pre-clip
    gradient norm, every ``log_every`` steps and at the last step.
    """
    model = build(cfg)
    params = model.parameters()
    opt = nt.SGD(params, cfg.optim.lr, cfg.optim.momentum, cfg.optim.weight_decay, cfg.optim.clip_norm)
    split = split_of(cfg)
    result = TrainResult(model)
    handle = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(cfg.to_json() + "\n")
        handle = open(out_dir / "train_log.jsonl", "w")
    try:
        steps = cfg.optim.steps
        for step in range(steps):
            ep = train_episode(cfg, step, split)
            opt.lr = learning_rate(cfg, step)
            out = model(ep.support_images, ep.support_masks, ep.query_image, derived_seed(cfg.seed, TRAIN_SAMPLES, step))
            loss = dice_loss(out.logits, ep.query_mask)
            value = loss.item()
            opt.zero_grads()
            if math.isfinite(value):
                loss.backward()
            if not math.isfinite(value) or not math.isfinite(nt.grad_norm(params)):
                dump = _nonfinite_dump(model, step, value)
                if out_dir is not None:
                    (out_dir / "nan_dump.json").write_text(json.dumps(dump, indent=2, sort_keys=True) + "\n")
                raise TrainingDiverged(f"non-finite training state at step {step}: {dump}", dump)
            opt.step()
            if (step + 1) % cfg.optim.log_every == 0 or step + 1 == steps:
                record = {"step": step + 1, "loss": value, "lr": opt.lr, "grad_norm": opt.last_grad_norm}
                result.history.append(record)
                line = json.dumps(record, sort_keys=True)
                for sink in (handle, log_file):
                    if sink is not None:
                        sink.write(line + "\n")
                log.info("step %d loss %.4f", step + 1, value)
    finally:
        if handle is not None:
            handle.close()
    if out_dir is not None:
        result.checkpoint = nt.checkpoint.save(params, out_dir / "checkpoint")
    return result


def model_predictor(model: CyCTRModel, cfg: RunConfig) -> Predictor:
    def predict(ep: Episode, index: int) -> np.ndarray:
        sample_seed = derived_seed(cfg.data.test_seed, TEST_SAMPLES, index)
        with nt.no_grad():
            out = model(ep.support_images, ep.support_masks, ep.query_image, sample_seed)
        predict.diagnostics.append(out.diagnostics)
        return out.prediction()

    predict.diagnostics = []
    return predict


def _summarise_diagnostics(diags: List[dict]) -> dict:
    if not diags:
        return {}
    consistent = [c for d in diags for c in d.get("consistent_count", [])]
    sizes = [d["n_support"] for d in diags if "n_support" in d]
    return {
        "fallback_rows": int(sum(d.get("fallback_rows", 0) for d in diags)),
        "fallback_calls": int(sum(d.get("fallback_calls", 0) for d in diags)),
        "support_short_episodes": int(sum(bool(d.get("support_short")) for d in diags)),
        "mean_consistent_tokens": math.fsum(consistent) / len(consistent) if consistent else None,
        "mean_support_tokens": math.fsum(sizes) / len(sizes) if sizes else None,
    }


def evaluate(cfg: RunConfig, predictor: Predictor, n_episodes: Optional[int] = None, per_episode: bool = False) -> dict:
    """Score ``predictor`` on the test episodes; query masks are hidden from it."""
    split = split_of(cfg)
    acc = IoUAccumulator()
    n = cfg.data.test_episodes if n_episodes is None else n_episodes
    for i in range(n):
        ep = evaluation_episode(cfg, i, split)
        pred = np.asarray(predictor(ep.without_query_mask(), i))
        acc.add(pred, ep.query_mask, ep.class_id)
    metrics = acc.summary(per_episode)
    diags = getattr(predictor, "diagnostics", None)
    if diags is not None:
        metrics["diagnostics"] = _summarise_diagnostics(diags)
    return metrics


def evaluate_model(model: CyCTRModel, cfg: RunConfig, n_episodes: Optional[int] = None) -> dict:
    metrics = evaluate(cfg, model_predictor(model, cfg), n_episodes)
    metrics["variant"] = cfg.variant
    return metrics


def dumps_metrics(metrics: dict) -> str:
    return json.dumps(metrics, indent=2, sort_keys=True)
