"""Dual-network math word problem solver with a variational information bottleneck."""

from .corpus import Problem, Vocabulary, generate_synthetic, load_corpus
from .evalkit import EvalReport, compute_metrics, solve
from .expr import ExprToken, ExprTree, evaluate, from_preorder, parse_infix, to_preorder
from .network import ESIBNet, ModelConfig
from .trainer import TrainConfig, preset, train

__all__ = [
    "ESIBNet",
    "EvalReport",
    "ExprToken",
    "ExprTree",
    "ModelConfig",
    "Problem",
    "TrainConfig",
    "Vocabulary",
    "compute_metrics",
    "evaluate",
    "from_preorder",
    "generate_synthetic",
    "load_corpus",
    "parse_infix",
    "preset",
    "solve",
    "to_preorder",
    "train",
]
