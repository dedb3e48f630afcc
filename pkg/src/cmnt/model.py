"""Encoder-decoder Transformer with optional constraint memory.

One class covers all seven variants: the baseline (no constraint encoder, no
integrator) and every combination of {shallow, deep} encoder with {gate,
copy, attn} integrator.  Gate and copy act on the last decoder layer only;
the attention integrator widens the self-attention of every decoder layer
with the memory rows.
"""

from __future__ import annotations

import hashlib
import io
import math
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from . import memory as cm
from .memory import ConstraintMemory, ConstraintSet
from .tensor import DTYPE, LayerNorm, MultiHeadAttention, dropout, linear, log_softmax

PAD, BOS, EOS, UNK = 0, 1, 2, 3

ENCODERS = ("none", "shallow", "deep")
INTEGRATORS = ("none", "gate", "copy", "attn")
GATE_BIAS = 2.0


@dataclass
class ModelConfig:
    src_vocab: int
    tgt_vocab: int
    d_model: int = 64
    heads: int = 4
    ff_dim: int = 128
    enc_layers: int = 2
    dec_layers: int = 2
    dropout: float = 0.1
    max_len: int = 128
    encoder: str = "none"
    integrator: str = "none"
    tie_output: bool = True

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.enc_layers < 1 or self.dec_layers < 1:
            raise ValueError("need at least one encoder and one decoder layer")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.encoder not in ENCODERS or self.integrator not in INTEGRATORS:
            raise ValueError(f"unknown variant {self.encoder}/{self.integrator}")
        if (self.encoder == "none") != (self.integrator == "none"):
            raise ValueError("constraint encoder and integrator must be set together")
        if min(self.src_vocab, self.tgt_vocab) < 5:
            raise ValueError("vocabularies need the four specials plus one token")

    @property
    def constrained(self) -> bool:
        return self.integrator != "none"

    @property
    def name(self) -> str:
        if not self.constrained:
            return "baseline"
        return f"{'SE' if self.encoder == 'shallow' else 'DE'}-{self.integrator.capitalize()}"

    def with_variant(self, encoder: str, integrator: str) -> "ModelConfig":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        kw.update(encoder=encoder, integrator=integrator)
        return ModelConfig(**kw)


VARIANTS = [(e, i) for e in ("shallow", "deep") for i in ("gate", "copy", "attn")]


def sinusoid_table(length: int, dim: int) -> Tensor:
    pos = np.arange(length)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, dim, 2) / dim))
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(pos * rates)
    table[:, 1::2] = np.cos(pos * rates[: dim // 2])
    return torch.from_numpy(table)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.w1 = linear(dim, hidden)
        self.w2 = linear(hidden, dim)

    def forward(self, x):
        return self.w2(torch.relu(self.w1(x)))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.rate = cfg.dropout
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.heads)
        self.ff = FeedForward(cfg.d_model, cfg.ff_dim)
        self.norm1 = LayerNorm(cfg.d_model)
        self.norm2 = LayerNorm(cfg.d_model)

    def forward(self, x: Tensor, mask: Tensor) -> Tensor:
        x = self.norm1(x + dropout(self.self_attn(x, x, x, mask), self.rate, self.training))
        return self.norm2(x + dropout(self.ff(x), self.rate, self.training))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.rate = cfg.dropout
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.heads)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.heads)
        self.ff = FeedForward(cfg.d_model, cfg.ff_dim)
        self.norm1 = LayerNorm(cfg.d_model)
        self.norm2 = LayerNorm(cfg.d_model)
        self.norm3 = LayerNorm(cfg.d_model)

    def forward(self, x, self_k, self_v, self_mask, self_bias, cross_k, cross_v, src_mask):
        drop = lambda y: dropout(y, self.rate, self.training)  # noqa: E731
        h = self.norm1(x + drop(self.self_attn.attend(x, self_k, self_v, self_mask, self_bias)))
        h = self.norm2(h + drop(self.cross_attn.attend(h, cross_k, cross_v, src_mask)))
        return self.norm3(h + drop(self.ff(h)))


@dataclass
class EncodedSource:
    hidden: Tensor  # (B, S, d)
    ids: Tensor  # (B, S)
    pad_mask: Tensor  # (B, S), True on padding

    @property
    def key_mask(self) -> Tensor:
        return (~self.pad_mask)[:, None, None, :]


@dataclass
class DecoderState:
    """Incremental decoding cache for a batch of hypotheses of equal length ``t``.

    Source-side and memory tensors have batch 1 and broadcast over hypotheses.
    For the attention integrator the self-attention caches start with the
    projected memory rows, so ``self_k[l].shape[2] == memory slots + t``.
    """

    self_k: list[Tensor]
    self_v: list[Tensor]
    cross_k: list[Tensor]
    cross_v: list[Tensor]
    src_mask: Tensor
    t: int = 0
    memory: Optional[ConstraintMemory] = None
    mem_proj: tuple = ()
    mem_bias: list[Tensor] = field(default_factory=list)

    def select(self, rows) -> "DecoderState":
        idx = torch.as_tensor(rows, dtype=torch.long)
        pick = lambda xs: [x.index_select(0, idx) if x.shape[0] > 1 else x.expand(len(idx), *x.shape[1:]) for x in xs]  # noqa: E731
        return DecoderState(
            pick(self.self_k), pick(self.self_v), self.cross_k, self.cross_v,
            self.src_mask, self.t, self.memory, self.mem_proj, self.mem_bias,
        )

    @staticmethod
    def concat(states: Sequence["DecoderState"]) -> "DecoderState":
        """Stack hypotheses of states that share a source, memory and length."""
        first = states[0]
        if any(s.t != first.t for s in states):
            raise ValueError("cannot concatenate decoder states of different lengths")
        join = lambda xs: torch.cat(list(xs), dim=0)  # noqa: E731
        return DecoderState(
            [join(s.self_k[i] for s in states) for i in range(len(first.self_k))],
            [join(s.self_v[i] for s in states) for i in range(len(first.self_v))],
            first.cross_k, first.cross_v, first.src_mask, first.t, first.memory, first.mem_proj, first.mem_bias,
        )


class ConstrainedTransformer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.src_embed = nn.Embedding(cfg.src_vocab, d, dtype=DTYPE)
        self.tgt_embed = nn.Embedding(cfg.tgt_vocab, d, dtype=DTYPE)
        nn.init.normal_(self.src_embed.weight, std=d**-0.5)
        nn.init.normal_(self.tgt_embed.weight, std=d**-0.5)
        self.register_buffer("positions", sinusoid_table(cfg.max_len + 1, d), persistent=False)
        self.encoder = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.enc_layers))
        self.decoder = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.dec_layers))
        self.generator = linear(d, cfg.tgt_vocab)
        if cfg.tie_output:
            # pre-softmax projection shares the target embedding table
            self.generator.weight = self.tgt_embed.weight
        self.add_constraint_modules()

    def add_constraint_modules(self, identity: bool = False) -> None:
        """Create (or re-create) the parameters only constrained variants have.

        ``identity`` initialises them so the model reproduces its baseline
        distributions: gates saturate toward the decoder path and memory
        slots get a large negative attention logit.
        """
        cfg = self.cfg
        if not cfg.constrained:
            return
        d = cfg.d_model
        self.sentinel = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        if cfg.encoder == "deep":
            self.constraint_encoder = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.enc_layers))
        bias = 40.0 if identity else GATE_BIAS
        if cfg.integrator == "gate":
            self.gate = cm.GateIntegrator(d, gate_bias=bias)
        elif cfg.integrator == "copy":
            self.copy = cm.CopyIntegrator(d, gate_bias=bias)
        else:
            # per layer: extra attention logit for [constraint slots, sentinel]
            init = torch.full((cfg.dec_layers, 2), -40.0 if identity else 0.0, dtype=DTYPE)
            self.memory_bias = nn.Parameter(init)

    def constraint_parameter_names(self) -> set[str]:
        prefixes = ("sentinel", "constraint_encoder.", "gate.", "copy.", "memory_bias")
        return {n for n, _ in self.named_parameters() if n.startswith(prefixes)}

    # -- embeddings -------------------------------------------------------

    def feed_embed(self, ids: Tensor) -> Tensor:
        return self.tgt_embed(ids) * math.sqrt(self.cfg.d_model)

    def _drop(self, x: Tensor) -> Tensor:
        return dropout(x, self.cfg.dropout, self.training)

    # -- encoders ---------------------------------------------------------

    def encode_source(self, src) -> EncodedSource:
        src = torch.as_tensor(src, dtype=torch.long)
        if src.dim() == 1:
            src = src[None]
        if src.shape[1] == 0:
            raise ValueError("empty source sentence")
        if src.shape[1] > self.cfg.max_len:
            raise ValueError(f"source length {src.shape[1]} exceeds max_len {self.cfg.max_len}")
        if int(src.min()) < 0 or int(src.max()) >= self.cfg.src_vocab:
            raise ValueError("source id outside the vocabulary")
        pad = src == PAD
        x = self._drop(self.src_embed(src) * math.sqrt(self.cfg.d_model) + self.positions[: src.shape[1]])
        mask = (~pad)[:, None, None, :]
        for layer in self.encoder:
            x = layer(x, mask)
        return EncodedSource(x, src, pad)

    def encode_constraints(self, constraints: Sequence[ConstraintSet]) -> ConstraintMemory:
        if self.cfg.encoder == "shallow":
            return cm.encode_shallow(constraints, self.feed_embed, self.sentinel)
        return cm.encode_deep(
            constraints, self.feed_embed, self.positions, self.constraint_encoder, self.sentinel, self._drop
        )

    # -- integrator helpers -------------------------------------------------

    def _project_memory(self, memory: ConstraintMemory) -> tuple:
        if self.cfg.integrator == "gate":
            return self.gate.project(memory.values)
        if self.cfg.integrator == "copy":
            return self.copy.project(memory.values)
        return ()

    def _memory_logits(self, memory: ConstraintMemory, layer: int) -> Tensor:
        """Additive attention logit per memory slot, ``(B, 1, 1, M)``."""
        b = self.memory_bias[layer]
        sentinel = torch.from_numpy(memory.sentinel)
        return torch.where(sentinel, b[1], b[0])[:, None, None, :]

    def head(self, h: Tensor, memory: Optional[ConstraintMemory], proj: tuple, active: Optional[Tensor]) -> Tensor:
        """Next-token log-probabilities from last-layer states ``h`` (B, T, d)."""
        kind = self.cfg.integrator
        if memory is None or kind in ("none", "attn"):
            return log_softmax(self.generator(h))
        if kind == "gate":
            return log_softmax(self.generator(self.gate(h, proj, active)))
        p_gen = torch.softmax(self.generator(h), dim=-1)
        sentinel = torch.from_numpy(memory.sentinel)[:, None, :]
        p = self.copy(h, proj, active, memory.slot_token, sentinel, p_gen)
        return torch.log(p)

    # -- teacher forcing --------------------------------------------------

    def forward(self, src, tgt_in, constraints: Optional[Sequence[ConstraintSet]] = None) -> Tensor:
        """Teacher-forced log-probabilities ``(B, T, V)``.

        ``tgt_in`` starts with BOS; position ``t`` predicts reference token ``t``.
        """
        tgt_in = torch.as_tensor(tgt_in, dtype=torch.long)
        if tgt_in.dim() == 1:
            tgt_in = tgt_in[None]
        b, t = tgt_in.shape
        if t > self.cfg.max_len:
            raise ValueError(f"target length {t} exceeds max_len {self.cfg.max_len}")
        enc = self.encode_source(src)
        memory = proj = active = None
        if self.cfg.constrained:
            if constraints is None:
                constraints = [ConstraintSet()] * b
            memory = self.encode_constraints(constraints)
            prefixes = [row[1:] for row in tgt_in.tolist()]
            active = memory.step_active(prefixes, t)  # (B, T, M)
            proj = self._project_memory(memory)
        x = self._drop(self.feed_embed(tgt_in) + self.positions[:t])
        causal = torch.ones(t, t, dtype=torch.bool).tril()[None, None]
        tgt_pad = (tgt_in == PAD) & (torch.arange(t) > 0)
        causal = causal & ~tgt_pad[:, None, None, :]
        src_mask = enc.key_mask
        for li, layer in enumerate(self.decoder):
            k, v = layer.self_attn.project_kv(x)
            mask, bias = causal, None
            if self.cfg.integrator == "attn":
                mk, mv = layer.self_attn.project_kv(memory.values)
                k, v = torch.cat([k, mk], dim=2), torch.cat([v, mv], dim=2)
                mask = torch.cat([causal.expand(b, 1, t, t), active[:, None]], dim=-1)
                m_logit = self._memory_logits(memory, li).expand(b, 1, t, memory.slots)
                bias = torch.cat([torch.zeros(b, 1, t, t, dtype=DTYPE), m_logit], dim=-1)
            ck, cv = layer.cross_attn.project_kv(enc.hidden)
            x = layer(x, k, v, mask, bias, ck, cv, src_mask)
        return self.head(x, memory, proj, active)

    # -- incremental decoding -------------------------------------------

    def init_state(self, enc: EncodedSource, constraints: Optional[ConstraintSet] = None) -> DecoderState:
        """Decoder cache for one source sentence (batch 1)."""
        cross_k, cross_v, self_k, self_v, mem_bias = [], [], [], [], []
        memory, proj = None, ()
        d = self.cfg.d_model
        if self.cfg.constrained:
            memory = self.encode_constraints([constraints or ConstraintSet()])
            proj = self._project_memory(memory)
        for li, layer in enumerate(self.decoder):
            ck, cv = layer.cross_attn.project_kv(enc.hidden)
            cross_k.append(ck)
            cross_v.append(cv)
            if self.cfg.integrator == "attn":
                mk, mv = layer.self_attn.project_kv(memory.values)
                mem_bias.append(self._memory_logits(memory, li))
            else:
                h = self.cfg.heads
                mk = mv = torch.zeros(1, h, 0, d // h, dtype=DTYPE)
            self_k.append(mk)
            self_v.append(mv)
        return DecoderState(self_k, self_v, cross_k, cross_v, enc.key_mask, 0, memory, proj, mem_bias)

    def decode_step(self, state: DecoderState, prev_tokens, active: Optional[Tensor] = None):
        """Advance every hypothesis by one token.

        ``active`` is the ``(B, M)`` memory visibility (all valid slots when
        omitted).  Returns ``(log_probs (B, V), new_state)``.
        """
        if state.t >= self.cfg.max_len:
            raise ValueError(f"decoder state already at max_len {self.cfg.max_len}")
        prev = torch.as_tensor(prev_tokens, dtype=torch.long).reshape(-1)
        if int(prev.min()) < 0 or int(prev.max()) >= self.cfg.tgt_vocab:
            raise ValueError("previous token outside the target vocabulary")
        b = prev.shape[0]
        memory = state.memory
        if memory is not None and active is None:
            active = torch.from_numpy(memory.valid).expand(b, -1)
        x = self.feed_embed(prev)[:, None, :] + self.positions[state.t]
        new_k, new_v = [], []
        for li, layer in enumerate(self.decoder):
            k, v = layer.self_attn.project_kv(x)
            pk, pv = state.self_k[li], state.self_v[li]
            if pk.shape[0] != b:
                pk, pv = pk.expand(b, *pk.shape[1:]), pv.expand(b, *pv.shape[1:])
            k, v = torch.cat([pk, k], dim=2), torch.cat([pv, v], dim=2)
            new_k.append(k)
            new_v.append(v)
            mask = bias = None
            if self.cfg.integrator == "attn":
                mask = torch.cat([active, torch.ones(b, state.t + 1, dtype=torch.bool)], dim=1)[:, None, None, :]
                bias = nn.functional.pad(state.mem_bias[li], (0, state.t + 1))
            x = layer(x, k, v, mask, bias, state.cross_k[li], state.cross_v[li], state.src_mask)
        head_active = None if active is None else active[:, None, :]
        logp = self.head(x, memory, state.mem_proj, head_active)[:, 0, :]
        nxt = DecoderState(new_k, new_v, state.cross_k, state.cross_v, state.src_mask,
                           state.t + 1, memory, state.mem_proj, state.mem_bias)
        return logp, nxt


def build_model(cfg: ModelConfig, seed: int = 0) -> ConstrainedTransformer:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = ConstrainedTransformer(cfg)
    model.eval()
    return model


def sequence_nll(model: ConstrainedTransformer, x: Sequence[int], r: Sequence[int],
                 c: Optional[ConstraintSet] = None) -> Tensor:
    """``-log P(r | x, c)`` under teacher forcing; ``r`` must end with EOS."""
    r = list(r)
    if not r or r[-1] != EOS:
        raise ValueError("reference must end with EOS")
    if len(r) > model.cfg.max_len:
        raise ValueError(f"reference length {len(r)} exceeds max_len {model.cfg.max_len}")
    tgt_in = [BOS] + r[:-1]
    logp = model([list(x)], [tgt_in], [c or ConstraintSet()] if model.cfg.constrained else None)
    target = torch.tensor(r)[None, :, None]
    return -logp.gather(-1, target).sum()


# ---------------------------------------------------------------------------
# Checkpoints
#
# Layout (little-endian):
#   b"CMNT1"
#   12 x int64: src_vocab, tgt_vocab, d_model, heads, ff_dim, enc_layers,
#               dec_layers, dropout * 1e9 (rounded), max_len, encoder code,
#               integrator code, tied output flag
#   a tied generator weight is stored under both of its names
#   uint32 parameter count, then per parameter:
#   uint32 name length, name (utf-8), uint32 rank, rank x uint64 dims,
#   prod(dims) x float64

MAGIC = b"CMNT1"
DROPOUT_SCALE = 10**9


def _config_ints(cfg: ModelConfig) -> list[int]:
    return [
        cfg.src_vocab, cfg.tgt_vocab, cfg.d_model, cfg.heads, cfg.ff_dim, cfg.enc_layers,
        cfg.dec_layers, round(cfg.dropout * DROPOUT_SCALE), cfg.max_len,
        ENCODERS.index(cfg.encoder), INTEGRATORS.index(cfg.integrator), int(cfg.tie_output),
    ]


def checkpoint_bytes(model: ConstrainedTransformer) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<12q", *_config_ints(model.cfg)))
    params = list(model.state_dict().items())
    buf.write(struct.pack("<I", len(params)))
    for name, tensor in params:
        raw = name.encode("utf-8")
        arr = tensor.detach().numpy().astype("<f8", copy=False)
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def save_checkpoint(model: ConstrainedTransformer, path) -> str:
    """Write the model; returns the SHA-256 of the file."""
    data = checkpoint_bytes(model)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path) -> ConstrainedTransformer:
    data = Path(path).read_bytes() if not isinstance(path, (bytes, bytearray)) else bytes(path)
    if data[:5] != MAGIC:
        raise ValueError("not a CMNT1 checkpoint")
    off = 5
    ints = struct.unpack_from("<12q", data, off)
    off += 96
    cfg = ModelConfig(
        src_vocab=ints[0], tgt_vocab=ints[1], d_model=ints[2], heads=ints[3], ff_dim=ints[4],
        enc_layers=ints[5], dec_layers=ints[6], dropout=ints[7] / DROPOUT_SCALE, max_len=ints[8],
        encoder=ENCODERS[ints[9]], integrator=INTEGRATORS[ints[10]], tie_output=bool(ints[11]),
    )
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    state = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}Q", data, off)
        off += 8 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(dims)
        off += 8 * size
        state[name] = torch.from_numpy(arr.astype(np.float64))
    model = ConstrainedTransformer(cfg)
    model.load_state_dict(state)
    model.eval()
    return model
