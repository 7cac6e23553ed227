from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .. import data as D
from ..model import ADAPTER, ModelConfig, ModelParams, forward_batch, init_params, trainable_parameters
from ..objective import binarize, combined_loss, dsc
from ..tensor import NonFiniteError
from .optim import OptimizerState, adamw_step, lr_at

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, detail: str = ""):
        super().__init__(f"non-finite loss in epoch {epoch}" + (f": {detail}" if detail else ""))
        self.epoch = epoch


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    val_dsc: float


def predict_masks(samples: Sequence[D.Sample], params: ModelParams, config: ModelConfig,
                  batch_size: int = 25, images: Optional[np.ndarray] = None) -> np.ndarray:
    """Binary masks (N, H, W); ``images`` overrides the samples' own images."""
    leaves = params.leaves()
    out = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        imgs, toks, _ = D.stack(chunk, config.np_dtype)
        if images is not None:
            imgs = images[start:start + len(chunk)].astype(config.np_dtype)
        logits = forward_batch(imgs, toks, leaves, config)
        out.append(binarize(logits)[:, 0])
    return np.concatenate(out) if out else np.zeros((0, config.image_size, config.image_size), np.uint8)


def mean_dsc(samples, params, config, batch_size: int = 25) -> float:
    if not samples:
        return float("nan")
    preds = predict_masks(samples, params, config, batch_size)
    return math.fsum(dsc(p, s.mask) for p, s in zip(preds, samples)) / len(samples)


def train(train_samples: Sequence[D.Sample], model_config: ModelConfig, train_config,
          val_samples: Sequence[D.Sample] = (), init: Optional[ModelParams] = None):
    """Fit the model; returns ``(params, epoch_logs)``.

    ``pretrain`` updates every parameter; ``adapter-finetune`` updates only the
    adapter partition of ``init`` and leaves the backbone bit-identical.
    """
    if not train_samples:
        raise ValueError("training set is empty")
    params = init if init is not None else init_params(model_config)
    if train_config.mode == "adapter-finetune":
        if init is None:
            raise ValueError("adapter-finetune needs an initial checkpoint")
        names = trainable_parameters(params)
    else:
        names = params.names()
    weights = train_config.loss_weights
    rng = np.random.default_rng(train_config.seed)
    state = OptimizerState()
    dtype = model_config.np_dtype
    logs = []
    n = len(train_samples)
    for epoch in range(1, train_config.epochs_total + 1):
        lr = lr_at(epoch, train_config)
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, train_config.batch_size):
            batch = [train_samples[i] for i in order[start:start + train_config.batch_size]]
            imgs, toks, masks = D.stack(batch, dtype)
            leaves = params.leaves(names)
            try:
                loss = combined_loss(forward_batch(imgs, toks, leaves, model_config), masks, weights, batch_axis=0)
                loss.backward()
            except NonFiniteError as exc:
                raise TrainingDiverged(epoch, str(exc)) from None
            grads = {name: leaves[name].grad for name in names}
            params = params.replace(adamw_step(params.arrays, grads, state, lr, train_config))
            losses.append((float(loss.data), len(batch)))
        mean_loss = math.fsum(l * k for l, k in losses) / n
        if not math.isfinite(mean_loss):
            raise TrainingDiverged(epoch)
        val = mean_dsc(list(val_samples), params, model_config) if val_samples else float("nan")
        logs.append(EpochLog(epoch, lr, mean_loss, val))
        log.info("epoch %d lr %.3g loss %.4f val_dsc %.4f", epoch, lr, mean_loss, val)
    return params, logs
