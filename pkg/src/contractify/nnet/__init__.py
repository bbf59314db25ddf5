from .graph import (
    ExprGraph,
    GraphBuilder,
    GraphError,
    Node,
    Ref,
    eval_graph,
    forward,
    gradient,
    vjp,
)
from .mlp import Layer, Mlp, WeightFileError, add_mlp, load_weights, save_weights
from .slopes import difference_quotient, inline

__all__ = [
    "ExprGraph", "GraphBuilder", "GraphError", "Node", "Ref", "eval_graph", "forward",
    "gradient", "vjp", "Layer", "Mlp", "WeightFileError", "add_mlp", "load_weights",
    "save_weights", "difference_quotient", "inline",
]
