"""Constraint sets, constraint memories and the three memory integrators.

A :class:`ConstraintMemory` is a batch of memory matrices ``E(c)``: one row per
constraint subword plus a learned sentinel row that is always visible, so no
attention ever runs over an empty memory.  The shallow encoder reads rows
straight out of the target feeding embedding and masks a constraint once the
prefix contains its full subword sequence; the deep encoder runs the
constraint subwords through an encoder stack that shares the same embedding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .tensor import DTYPE, linear, scaled_dot_attention

SENTINEL = -1
PADDING = -2


@dataclass(frozen=True)
class ConstraintSet:
    """Ordered word constraints, each realised as a target subword-id sequence."""

    words: tuple[str, ...] = ()
    tokens: tuple[tuple[int, ...], ...] = ()

    def __post_init__(self):
        if len(self.words) != len(self.tokens):
            raise ValueError("words and token sequences differ in length")
        if any(len(t) == 0 for t in self.tokens):
            raise ValueError("a constraint needs at least one subword")

    @classmethod
    def from_tokens(cls, tokens: Sequence[Sequence[int]], words: Optional[Sequence[str]] = None):
        tokens = tuple(tuple(int(i) for i in t) for t in tokens)
        if words is None:
            words = tuple(" ".join(map(str, t)) for t in tokens)
        return cls(tuple(words), tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def n_tokens(self) -> int:
        return sum(len(t) for t in self.tokens)

    def flat_tokens(self) -> list[int]:
        return [i for t in self.tokens for i in t]

    def satisfied(self, prefix: Sequence[int]) -> tuple[bool, ...]:
        """Which constraints occur contiguously somewhere in ``prefix``."""
        prefix = list(prefix)
        return tuple(contains(prefix, seq) for seq in self.tokens)

    def advance(self, flags: tuple[bool, ...], prefix: Sequence[int]) -> tuple[bool, ...]:
        """Update ``flags`` after the last token of ``prefix`` was appended."""
        if all(flags):
            return flags
        out = list(flags)
        for i, seq in enumerate(self.tokens):
            n = len(seq)
            if not out[i] and len(prefix) >= n and tuple(prefix[-n:]) == seq:
                out[i] = True
        return tuple(out)


def contains(seq: Sequence[int], sub: Sequence[int]) -> bool:
    n = len(sub)
    sub = list(sub)
    return any(list(seq[i : i + n]) == sub for i in range(len(seq) - n + 1))


def first_completion(seq: Sequence[int], sub: Sequence[int]) -> Optional[int]:
    """Smallest ``e`` such that ``seq[:e]`` contains ``sub``; None if never."""
    n = len(sub)
    sub = list(sub)
    for i in range(len(seq) - n + 1):
        if list(seq[i : i + n]) == sub:
            return i + n
    return None


@dataclass
class ConstraintMemory:
    """A batch of constraint memories.

    ``values`` is ``(batch, slots, dim)``.  ``slot_constraint`` maps a slot to
    its constraint index, or :data:`SENTINEL` / :data:`PADDING`.  ``active`` is
    the visibility mask, either ``(batch, slots)`` or per decoder step
    ``(batch, steps, slots)``.
    """

    values: Tensor
    slot_token: np.ndarray
    slot_constraint: np.ndarray
    active: Tensor
    kind: str
    constraints: list[ConstraintSet] = field(default_factory=list)

    @property
    def slots(self) -> int:
        return self.values.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return self.slot_constraint != PADDING

    @property
    def sentinel(self) -> np.ndarray:
        return self.slot_constraint == SENTINEL

    def rows(self, b: int = 0) -> Tensor:
        """Memory matrix of one batch element, padding stripped."""
        return self.values[b][torch.from_numpy(self.valid[b])]

    def active_from_flags(self, flags: np.ndarray) -> Tensor:
        """Visibility for a batch sharing one constraint set.

        ``flags`` is ``(hyps, |c|)`` of satisfied constraints.  Only the
        shallow encoder hides satisfied constraints.
        """
        sc = self.slot_constraint[0]
        valid = sc != PADDING
        if self.kind != "shallow" or flags.shape[1] == 0:
            return torch.from_numpy(np.broadcast_to(valid, (flags.shape[0], sc.shape[0])).copy())
        idx = np.where(sc >= 0, sc, 0)
        hidden = flags[:, idx] & (sc >= 0)
        return torch.from_numpy(valid & ~hidden)

    def step_active(self, prefixes: Sequence[Sequence[int]], steps: int) -> Tensor:
        """Per-step visibility for teacher forcing.

        At step ``t`` the prefix is ``prefixes[b][:t]``; a shallow slot hides
        from the first step whose prefix contains its constraint.
        """
        b_size, m = self.slot_constraint.shape
        valid = torch.from_numpy(self.valid)
        active = valid[:, None, :].expand(b_size, steps, m).clone()
        if self.kind != "shallow":
            return active
        for b, cs in enumerate(self.constraints):
            for i, seq in enumerate(cs.tokens):
                e = first_completion(prefixes[b], seq)
                if e is None or e >= steps:
                    continue
                cols = torch.from_numpy(self.slot_constraint[b] == i)
                active[b, e:, cols] = False
        return active


def _layout(constraints: Sequence[ConstraintSet]) -> tuple[np.ndarray, np.ndarray, int]:
    width = max(c.n_tokens for c in constraints) + 1
    slot_token = np.full((len(constraints), width), PADDING, dtype=np.int64)
    slot_constraint = np.full((len(constraints), width), PADDING, dtype=np.int64)
    for b, cs in enumerate(constraints):
        j = 0
        for i, seq in enumerate(cs.tokens):
            for tok in seq:
                slot_token[b, j] = tok
                slot_constraint[b, j] = i
                j += 1
        slot_token[b, j] = SENTINEL
        slot_constraint[b, j] = SENTINEL
    return slot_token, slot_constraint, width


def _place_sentinel(rows: Tensor, slot_constraint: np.ndarray, sentinel: Tensor) -> Tensor:
    is_sentinel = torch.from_numpy(slot_constraint == SENTINEL)[..., None]
    return torch.where(is_sentinel, sentinel.expand_as(rows), rows)


def encode_shallow(
    constraints: Sequence[ConstraintSet],
    feed_embed,
    sentinel: Tensor,
    prefixes: Optional[Sequence[Sequence[int]]] = None,
) -> ConstraintMemory:
    """Memory rows are the target feeding embeddings of the constraint subwords.

    With ``prefixes`` given, constraints already present in the prefix are
    masked out; the sentinel always stays visible.
    """
    constraints = list(constraints)
    slot_token, slot_constraint, _ = _layout(constraints)
    ids = torch.from_numpy(np.where(slot_token >= 0, slot_token, 0))
    rows = _place_sentinel(feed_embed(ids), slot_constraint, sentinel)
    valid = torch.from_numpy(slot_constraint != PADDING)
    memory = ConstraintMemory(rows, slot_token, slot_constraint, valid, "shallow", constraints)
    if prefixes is not None:
        flags = [cs.satisfied(p) for cs, p in zip(constraints, prefixes)]
        act = valid.clone()
        for b, cs in enumerate(constraints):
            for i, done in enumerate(flags[b]):
                if done:
                    act[b, torch.from_numpy(slot_constraint[b] == i)] = False
        memory.active = act
    return memory


def encode_deep(
    constraints: Sequence[ConstraintSet],
    feed_embed,
    positions: Tensor,
    layers: nn.ModuleList,
    sentinel: Tensor,
    dropout_fn=None,
) -> ConstraintMemory:
    """Concatenated constraint subwords through an encoder stack; no redundancy masking."""
    constraints = list(constraints)
    slot_token, slot_constraint, width = _layout(constraints)
    ids = torch.from_numpy(np.where(slot_token >= 0, slot_token, 0))
    x = feed_embed(ids) + positions[:width]
    if dropout_fn is not None:
        x = dropout_fn(x)
    real = torch.from_numpy(slot_constraint >= 0)
    key_mask = real.clone()
    # sequences with no constraint attend to a dummy slot; their rows are discarded
    key_mask[~key_mask.any(dim=1), 0] = True
    mask = key_mask[:, None, None, :]
    for layer in layers:
        x = layer(x, mask)
    rows = _place_sentinel(x, slot_constraint, sentinel)
    valid = torch.from_numpy(slot_constraint != PADDING)
    return ConstraintMemory(rows, slot_token, slot_constraint, valid, "deep", constraints)


# ---------------------------------------------------------------------------
# Integrators


class MemoryAttention(nn.Module):
    """Single-head scaled dot-product attention from decoder states into memory."""

    def __init__(self, dim: int, out_dim: int, value_bias: float = 0.0):
        super().__init__()
        self.w_q = linear(dim, dim)
        self.w_k = linear(dim, dim)
        self.w_v = linear(dim, out_dim)
        nn.init.constant_(self.w_v.bias, value_bias)

    def project(self, memory: Tensor) -> tuple[Tensor, Tensor]:
        return self.w_k(memory), self.w_v(memory)

    def forward(self, h: Tensor, k: Tensor, v: Tensor, active: Tensor) -> Tensor:
        # h (B, T, d); k/v (B, M, *); active (B, T, M)
        out, _ = scaled_dot_attention(self.w_q(h), k, v, active)
        return out


class GateIntegrator(nn.Module):
    """Elementwise gate between the decoder state and a memory readout.

    ``out = g * h + (1 - g) * f1(h, E)`` with ``g = sigmoid(f2(h, E))``.
    """

    def __init__(self, dim: int, gate_bias: float = 2.0):
        super().__init__()
        self.readout = MemoryAttention(dim, dim)
        self.gate = MemoryAttention(dim, dim, value_bias=gate_bias)

    def project(self, memory: Tensor):
        return self.readout.project(memory) + self.gate.project(memory)

    def forward(self, h: Tensor, proj, active: Tensor) -> Tensor:
        k1, v1, k2, v2 = proj
        g = torch.sigmoid(self.gate(h, k2, v2, active))
        return combine_gate(h, self.readout(h, k1, v1, active), g)


def combine_gate(h: Tensor, readout: Tensor, g: Tensor) -> Tensor:
    return g * h + (1.0 - g) * readout


class CopyIntegrator(nn.Module):
    """Scalar-gated mixture of the generator with a softmax over constraint tokens."""

    def __init__(self, dim: int, gate_bias: float = 2.0):
        super().__init__()
        self.gate = MemoryAttention(dim, 1, value_bias=gate_bias)
        self.w_q = linear(dim, dim)
        self.w_k = linear(dim, dim)

    def project(self, memory: Tensor):
        return self.gate.project(memory) + (self.w_k(memory),)

    def constrained(self, h: Tensor, kc: Tensor, slot_token: np.ndarray, copyable: Tensor, vocab: int):
        """``P_c`` extended to the full vocabulary, and whether any slot was copyable.

        ``copyable`` is ``(B, T, M)``: visible non-sentinel slots.
        """
        scores = self.w_q(h) @ kc.transpose(-1, -2) / math.sqrt(h.shape[-1])
        any_slot = copyable.any(dim=-1, keepdim=True)
        # rows with nothing to copy get a finite dummy softmax, zeroed below
        visible = copyable | ~any_slot
        scores = scores.masked_fill(~visible, float("-inf"))
        weights = torch.softmax(scores, dim=-1) * any_slot
        onehot = torch.zeros(slot_token.shape + (vocab,), dtype=DTYPE)
        tok = torch.from_numpy(np.where(slot_token >= 0, slot_token, 0))
        onehot.scatter_(-1, tok[..., None], torch.from_numpy(slot_token >= 0)[..., None].to(DTYPE))
        return weights @ onehot, any_slot

    def forward(self, h, proj, active, slot_token, sentinel, p_gen):
        k_g, v_g, kc = proj
        copyable = active & ~sentinel
        p_c, any_slot = self.constrained(h, kc, slot_token, copyable, p_gen.shape[-1])
        g = torch.sigmoid(self.gate(h, k_g, v_g, active))
        g = torch.where(any_slot, g, torch.ones_like(g))
        return mix_copy(p_gen, p_c, g)


def mix_copy(p_gen: Tensor, p_c: Tensor, g: Tensor) -> Tensor:
    return g * p_gen + (1.0 - g) * p_c
