"""Two-stage training harness: CPA pretraining, supervised fine-tuning,
evaluation, and checkpoint persistence.

Runs are bit-reproducible for a fixed seed on one machine: batch
shuffles are derived from ``(seed, stage, epoch)``, the optimizer visits
parameters in sorted name order, and every array op is deterministic.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field

import numpy as np

from .checkpoint import (META_KEY, load_arrays, pack_meta, save_arrays,
                         unpack_meta)
from .data import Manifest, read_wav
from .dsp import StftConfig, extract_quartet, pad_and_mask
from .errors import EmptyDataset
from .latent import latents_for
from .metrics import EvalMetrics, evaluate_predictions
from .model import ModelConfig, SerModel
from .optim import AdamW


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 32
    stage1_epochs: int = 30
    stage1_lr: float = 1e-3
    stage1_weight_decay: float = 1e-4
    stage2_epochs: int = 50
    stage2_lr: float = 5e-4
    stage2_weight_decay: float = 1e-4
    patience: int = 10
    split_ratios: tuple = (0.7, 0.1, 0.2)
    dtype: str = "float32"

    def __post_init__(self):
        if abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ValueError("split ratios must sum to 1")
        if self.batch_size < 2:
            raise ValueError("stage 1 needs batch size >= 2 for negatives")


def config_hash(train_cfg: TrainConfig, model_cfg: ModelConfig) -> str:
    blob = json.dumps({"train": asdict(train_cfg),
                       "model": asdict(model_cfg)},
                      sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# --- feature cache ---------------------------------------------------------


@dataclass
class Utterance:
    uid: str
    label: int
    quartet: object          # QuartetField
    latents: np.ndarray      # (T, D_e)
    latent_mask: np.ndarray  # (T,)


def featurize(manifest: Manifest, stft_cfg: StftConfig, latent_seed=0,
              dtype=np.float32) -> list[Utterance]:
    """Load every utterance once: quartet planes plus latent frames."""
    if len(manifest) == 0:
        raise EmptyDataset("manifest has no entries")
    out = []
    for e in manifest.entries:
        w = read_wav(e.path)
        q = extract_quartet(w, stft_cfg)
        q.M = q.M.astype(dtype)
        q.rho = q.rho.astype(dtype)
        q.f_inst = q.f_inst.astype(dtype)
        q.tau_g = q.tau_g.astype(dtype)
        lat, lmask = latents_for(w, stft_cfg, latent_seed, e.latent_path)
        out.append(Utterance(e.uid, manifest.label_index(e.label), q,
                             lat.astype(dtype), lmask))
    return out


def pad_latents(items: list[Utterance], dtype=np.float32):
    T = max(u.latents.shape[0] for u in items)
    D = items[0].latents.shape[1]
    lat = np.zeros((len(items), T, D), dtype=dtype)
    mask = np.zeros((len(items), T), dtype=dtype)
    for i, u in enumerate(items):
        t = u.latents.shape[0]
        lat[i, :t] = u.latents * u.latent_mask[:, None]
        mask[i, :t] = u.latent_mask
    return lat, mask


def collate(items: list[Utterance], dtype=np.float32):
    planes, mask = pad_and_mask([u.quartet for u in items])
    lat, lmask = pad_latents(items, dtype)
    labels = np.array([u.label for u in items], dtype=np.int64)
    return planes.astype(dtype), mask.astype(dtype), lat, lmask, labels


def make_batches(items: list[Utterance], batch_size, rng=None,
                 drop_singletons=False):
    """Length-bucketed batches (pad waste stays low); the batch order is
    shuffled when an rng is given, item order within buckets is fixed."""
    order = sorted(range(len(items)),
                   key=lambda i: (items[i].quartet.valid_frames, items[i].uid))
    batches = [order[i:i + batch_size]
               for i in range(0, len(order), batch_size)]
    if drop_singletons:
        batches = [b for b in batches if len(b) >= 2]
    if rng is not None:
        rng.shuffle(batches)
    return [[items[i] for i in b] for b in batches]


# --- checkpoints -----------------------------------------------------------


def save_checkpoint(path, model: SerModel, meta: dict) -> None:
    arrays = dict(model.state_arrays())
    arrays[META_KEY] = pack_meta(meta)
    save_arrays(path, arrays)


def load_checkpoint(path, model: SerModel) -> dict:
    arrays = load_arrays(path)
    meta = unpack_meta(arrays.pop(META_KEY)) if META_KEY in arrays else {}
    model.load_state_arrays(arrays)
    return meta


# --- training loops --------------------------------------------------------


def _log(log, stage, epoch, step, loss, lr):
    if log is not None:
        log.write(f"{stage}\t{epoch}\t{step}\t{loss:.6f}\t{lr:.6g}\n")


def _snapshot(model):
    return {k: v.copy() for k, v in model.state_arrays().items()}


def validate_cpa(model, val_items, cfg: TrainConfig):
    """Mean L_CPA over fixed validation batches (eval mode)."""
    batches = make_batches(val_items, cfg.batch_size, drop_singletons=True)
    if not batches:
        raise EmptyDataset("validation split too small for stage-1 batches")
    total, n = 0.0, 0
    for b in batches:
        planes, mask, lat, lmask, _ = collate(b, model.dtype)
        loss = model.stage1_loss(planes, mask, lat, lmask, training=False)[2]
        total += loss * len(b)
        n += len(b)
    return total / n


def stage1_cpa(model: SerModel, train_items, val_items, cfg: TrainConfig,
               log=None):
    """CPA pretraining; returns (best_state, history of val losses)."""
    opt = AdamW(model.stage1_params(), lr=cfg.stage1_lr,
                weight_decay=cfg.stage1_weight_decay)
    best = (np.inf, _snapshot(model))
    history = []
    for epoch in range(cfg.stage1_epochs):
        rng = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, 1, epoch]))
        for step, b in enumerate(make_batches(train_items, cfg.batch_size,
                                              rng, drop_singletons=True)):
            planes, mask, lat, lmask, _ = collate(b, model.dtype)
            model.zero_grad()
            loss = model.stage1_loss(planes, mask, lat, lmask,
                                     training=True)[2]
            model.stage1_backward()
            opt.step()
            _log(log, 1, epoch, step, loss, cfg.stage1_lr)
        val = validate_cpa(model, val_items, cfg)
        history.append(val)
        if val < best[0]:
            best = (val, _snapshot(model))
    model.load_state_arrays(best[1])
    return best[1], history


def evaluate(model: SerModel, items, cfg: TrainConfig) -> EvalMetrics:
    y_true, y_pred = [], []
    for b in make_batches(items, cfg.batch_size):
        planes, mask, lat, lmask, labels = collate(b, model.dtype)
        pred = model.predict(planes, mask, lat, lmask)
        y_true.extend(labels.tolist())
        y_pred.extend(pred.tolist())
    return evaluate_predictions(y_true, y_pred, model.cfg.num_classes)


def stage2_supervised(model: SerModel, train_items, val_items,
                      cfg: TrainConfig, log=None, freeze_vocal=False):
    """Supervised fine-tuning with early stopping on validation WA."""
    opt = AdamW(model.stage2_params(freeze_vocal), lr=cfg.stage2_lr,
                weight_decay=cfg.stage2_weight_decay)
    best_wa = -1.0
    best_state = _snapshot(model)
    stale = 0
    history = []
    for epoch in range(cfg.stage2_epochs):
        rng = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, 2, epoch]))
        for step, b in enumerate(make_batches(train_items, cfg.batch_size,
                                              rng)):
            planes, mask, lat, lmask, labels = collate(b, model.dtype)
            model.zero_grad()
            loss, _ = model.stage2_loss(planes, mask, lat, lmask, labels,
                                        training=True)
            model.stage2_backward(freeze_vocal)
            opt.step()
            _log(log, 2, epoch, step, loss, cfg.stage2_lr)
        wa = evaluate(model, val_items, cfg).weighted_accuracy
        history.append(wa)
        if wa > best_wa:
            best_wa = wa
            best_state = _snapshot(model)
            stale = 0
        else:
            stale += 1
            if stale > cfg.patience:
                break
    model.load_state_arrays(best_state)
    return best_state, history


# --- end-to-end ------------------------------------------------------------


def run_two_stage(model: SerModel, train_items, val_items, cfg: TrainConfig,
                  log=None, use_cpa=True, freeze_vocal=False,
                  stand_items=None):
    """Fit standardization, optionally pretrain with CPA, then fine-tune."""
    stand = stand_items if stand_items is not None else train_items
    model.fit_standardization(
        collate([u], model.dtype)[:2] for u in stand)
    if use_cpa:
        stage1_cpa(model, train_items, val_items, cfg, log)
    return stage2_supervised(model, train_items, val_items, cfg, log,
                             freeze_vocal)
