"""A desk-scale generative image-to-text transformer written in numpy.

One image encoder and one text decoder cover captioning, question
answering, video captioning and classification: every task is phrased as
generating a token sequence conditioned on visual features.
"""

from .decoding import DecodeParams, build_trie, constrained_decode, generate, prefix_generate
from .metrics import EvalReport, evaluate
from .model import GIT, ModelConfig
from .training import TrainConfig, make_examples, train
from .vocab import Vocabulary, build_vocab

__version__ = "0.1.0"

__all__ = [
    "DecodeParams", "EvalReport", "GIT", "ModelConfig", "TrainConfig", "Vocabulary",
    "build_trie", "build_vocab", "constrained_decode", "evaluate", "generate",
    "make_examples", "prefix_generate", "train",
]
