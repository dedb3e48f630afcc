import random

import pytest
import torch

from cmnt.memory import ConstraintSet
from cmnt.model import EOS, ModelConfig, VARIANTS, build_model

ALL_VARIANTS = [("none", "none")] + VARIANTS


def tiny_config(encoder="none", integrator="none", vocab=12, d=8, layers=2, dropout=0.0, max_len=16):
    return ModelConfig(
        src_vocab=vocab, tgt_vocab=vocab, d_model=d, heads=2, ff_dim=2 * d, enc_layers=layers,
        dec_layers=layers, dropout=dropout, max_len=max_len, encoder=encoder, integrator=integrator,
    )


def tiny_model(encoder="none", integrator="none", seed=0, **kw):
    return build_model(tiny_config(encoder, integrator, **kw), seed)


def random_tuple(rng: random.Random, vocab=12, max_src=5, max_ref=5, max_cons=2):
    """Random (x, r, c) with r ending in EOS and c drawn from r's tokens."""
    x = [rng.randint(4, vocab - 1) for _ in range(rng.randint(1, max_src))]
    body = [rng.randint(3, vocab - 1) for _ in range(rng.randint(1, max_ref))]
    seqs = []
    for _ in range(rng.randint(0, max_cons)):
        i = rng.randrange(len(body))
        seqs.append(tuple(body[i : i + rng.randint(1, 2)]))
    return x, body + [EOS], ConstraintSet.from_tokens(seqs)


def perturb_all(model, seed=1, scale=0.5):
    """Move every parameter off its initialisation so no path is trivially dead."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)
    return model


@pytest.fixture
def rng():
    return random.Random(1234)


CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        status, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2}: {status}  {detail}")
