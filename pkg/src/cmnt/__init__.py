"""Neural machine translation with constraints held in an external memory.

Constraints are attended to softly by the decoder, so a wrong constraint can
be ignored; grid beam search and dynamic beam allocation are included as the
hard lexically constrained alternatives.
"""

from .decoding import Hypothesis, beam_search, dba_search, exhaustive_oracle, grid_beam_search
from .evaluation import BleuReport, bleu4
from .memory import ConstraintSet
from .model import ConstrainedTransformer, ModelConfig, build_model, load_checkpoint, save_checkpoint

__all__ = [
    "BleuReport",
    "ConstrainedTransformer",
    "ConstraintSet",
    "Hypothesis",
    "ModelConfig",
    "beam_search",
    "bleu4",
    "build_model",
    "dba_search",
    "exhaustive_oracle",
    "grid_beam_search",
    "load_checkpoint",
    "save_checkpoint",
]
