"""Adam training for baselines and constraint-memory fine-tuning."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .corpus import DatasetTuple
from .model import BOS, PAD, ConstrainedTransformer, ModelConfig, build_model
from .tensor import AdamState, adam_step

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    model: ConstrainedTransformer
    epoch_losses: list[float] = field(default_factory=list)


def pad_batch(rows: Sequence[Sequence[int]], lead: Optional[int] = None) -> torch.Tensor:
    rows = [([lead] if lead is not None else []) + list(r) for r in rows]
    width = max(len(r) for r in rows)
    return torch.tensor([r + [PAD] * (width - len(r)) for r in rows], dtype=torch.long)


def batch_loss(model: ConstrainedTransformer, batch: Sequence[DatasetTuple]) -> tuple[torch.Tensor, int]:
    """Summed token NLL of a batch and its token count."""
    src = pad_batch([t.src for t in batch])
    tgt_in = pad_batch([t.ref[:-1] for t in batch], lead=BOS)
    target = pad_batch([t.ref for t in batch])
    cons = [t.constraints for t in batch] if model.cfg.constrained else None
    logp = model(src, tgt_in, cons)
    nll = -logp.gather(-1, target[..., None])[..., 0]
    keep = target != PAD
    return (nll * keep).sum(), int(keep.sum())


def transfer_weights(source: ConstrainedTransformer, target: ConstrainedTransformer) -> list[str]:
    """Copy every parameter ``target`` shares with ``source``; returns the names left fresh."""
    src_state = source.state_dict()
    dst_state = target.state_dict()
    missing = [n for n in src_state if n not in dst_state]
    if missing:
        raise ValueError(f"baseline parameters absent from the fine-tuned model: {missing[:3]}")
    for name, value in src_state.items():
        if dst_state[name].shape != value.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(value.shape)} vs {tuple(dst_state[name].shape)}")
    with torch.no_grad():
        for name, value in src_state.items():
            dst_state[name].copy_(value)
    return [n for n in dst_state if n not in src_state]


def train(
    corpus: Sequence[DatasetTuple],
    config: ModelConfig,
    epochs: int,
    seed: int = 0,
    *,
    init: Optional[ConstrainedTransformer] = None,
    lr: float = 1e-3,
    batch_size: int = 32,
    warmup: int = 100,
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> TrainResult:
    """Train ``config`` on ``corpus``.

    With ``init`` (a trained baseline) every shared parameter starts from the
    baseline and only the constraint parameters start fresh; all parameters
    are then updated.
    """
    if not corpus:
        raise ValueError("empty training corpus")
    model = build_model(config, seed)
    if init is not None:
        fresh = transfer_weights(init, model)
        log.info("fine-tuning from baseline; %d fresh parameter tensors", len(fresh))
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    params = dict(model.named_parameters())
    state = AdamState(lr=lr)
    result = TrainResult(model)
    for epoch in range(epochs):
        model.train()
        order = rng.permutation(len(corpus))
        total, tokens = 0.0, 0
        for start in range(0, len(order), batch_size):
            batch = [corpus[i] for i in order[start : start + batch_size]]
            model.zero_grad(set_to_none=True)
            loss, n = batch_loss(model, batch)
            (loss / n).backward()
            for p in params.values():
                if p.grad is None:
                    p.grad = torch.zeros_like(p)
            state.lr = lr * min(1.0, (state.step + 1) / max(1, warmup))
            adam_step(params, state)
            total += float(loss.detach())
            tokens += n
        mean = total / tokens
        result.epoch_losses.append(mean)
        log.info("epoch %d loss %.4f", epoch + 1, mean)
        if on_epoch is not None:
            on_epoch(epoch + 1, mean)
    model.eval()
    return result
