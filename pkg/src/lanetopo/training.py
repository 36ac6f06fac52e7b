"""Seeded AdamW training loop with cosine schedule, JSONL logging and checkpoints."""
from __future__ import annotations

import json
import logging
import math
import time

import numpy as np

from . import autodiff as ad
from .config import RunConfig
from .errors import ConfigError, MatchingError, TrainingError
from .model import TopoPipeline, compute_loss, make_batch

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


def _batches(scenes, cfg, rng):
    """Deterministic minibatch order: one shuffled pass over the scenes per epoch."""
    if len(scenes) <= cfg.batch_size:
        full = make_batch(scenes, cfg)
        while True:
            yield full
    while True:
        order = rng.permutation(len(scenes))
        for i in range(0, len(order) - cfg.batch_size + 1, cfg.batch_size):
            yield make_batch([scenes[j] for j in order[i:i + cfg.batch_size]], cfg)


def train(cfg: RunConfig, scenes, log_path=None, ckpt_path=None, model=None, on_step=None):
    """Train ``model`` (a fresh one by default) on ``scenes``; returns (model, history)."""
    if not scenes:
        raise ConfigError("training needs at least one scene")
    model = model or TopoPipeline(cfg)
    store = model.store
    rng = np.random.default_rng(cfg.seed + 1)
    batches = _batches(scenes, cfg, rng)
    history = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for step in range(cfg.steps):
            t0 = time.perf_counter()
            batch = next(batches)
            lr = ad.cosine_lr(step, cfg.steps, cfg.lr, cfg.lr_min)
            out = model(batch)
            try:
                losses, _ = compute_loss(out, batch, cfg)
            except MatchingError as exc:  # non-finite predictions make the matching costs non-finite
                raise TrainingError(f"non-finite predictions at step {step}: {exc}") from exc
            total = float(losses.total.data)
            if not math.isfinite(total):
                raise TrainingError(f"non-finite loss at step {step}")
            store.zero_grad()
            losses.total.backward()
            gnorm = ad.clip_grad_norm(store, cfg.grad_clip)
            try:
                ad.adamw_step(store, lr, (cfg.beta1, cfg.beta2), cfg.weight_decay)
            except TrainingError as exc:
                raise TrainingError(f"step {step}: {exc}") from exc
            record = {"step": step, "lr": lr, "grad_norm": gnorm, **losses.as_dict(),
                      "seconds": time.perf_counter() - t0}
            history.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
            if on_step:
                on_step(model, record)
            if cfg.log_every and step % cfg.log_every == 0:
                log.info("step %d total %.4f lr %.2e", step, total, lr)
    finally:
        if log_fh:
            log_fh.close()
    if ckpt_path:
        save_model(ckpt_path, model)
    return model, history


def save_model(path, model: TopoPipeline):
    ad.save_checkpoint(path, model.store, model.cfg.seed,
                       {"config": model.cfg.to_dict(), "checkpoint_format": CHECKPOINT_FORMAT})


def load_model(path, cfg: RunConfig | None = None):
    """Rebuild the pipeline stored in a checkpoint (optionally checking against ``cfg``)."""
    params, meta = ad.load_checkpoint(path)
    if "config" not in meta:
        raise ConfigError(f"{path}: checkpoint has no config")
    stored = RunConfig.from_dict(meta["config"])
    if cfg is not None and _model_fields(cfg) != _model_fields(stored):
        raise ConfigError(f"{path}: checkpoint was trained with a different model configuration")
    model = TopoPipeline(stored)
    if set(params) != set(model.store.params):
        raise ConfigError(f"{path}: parameter names do not match the configuration")
    model.store.load_state(params)
    model.store.step = int(meta.get("step", 0))
    return model


_TRAINING_ONLY = {"steps", "lr", "lr_min", "weight_decay", "beta1", "beta2", "grad_clip", "batch_size",
                  "log_every", "w_cls", "w_reg", "w_te_cls", "w_te_reg", "w_te_giou", "w_topo_ll",
                  "w_topo_lt", "w_dir", "focal_alpha", "focal_gamma", "use_dir_loss", "seed"}


def _model_fields(cfg):
    d = cfg.to_dict()
    return {k: v for k, v in d.items() if k not in _TRAINING_ONLY}
