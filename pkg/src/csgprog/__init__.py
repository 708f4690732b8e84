"""Program induction for constructive solid geometry: a postfix CSG language
and rasterizer, Chamfer/IOU metrics, synthetic data, neural and
nearest-neighbour policies, decoding, training and evaluation."""

from .lang import (BoolOp, GrammarConfig, Primitive, Program, Vocabulary, build_vocabulary, format_program,
                   parse_program, validate)
from .metrics import chamfer, edge_map, iou, shaped_reward
from .render import execute, render

__version__ = "0.1.0"

__all__ = ["BoolOp", "GrammarConfig", "Primitive", "Program", "Vocabulary", "build_vocabulary", "chamfer",
           "edge_map", "execute", "format_program", "iou", "parse_program", "render", "shaped_reward",
           "validate"]
