"""propgvae: invertible, semantics-aware embeddings of propositional formulae."""

from .encoder import EncoderConfig, default_encoder_config
from .formulas import (
    Formula,
    GeneratorConfig,
    ParseError,
    conj,
    disj,
    enumerate_assignments,
    evaluate,
    generate_formula,
    neg,
    node_count,
    parse,
    print_canonical,
    structural_equal,
    var,
)
from .graphs import AstGraph, to_ast_graph
from .gvae import GvaeModel, LogicGvae, ModelConfig
from .semantics import (
    SemanticPCA,
    SemanticSignature,
    agreement,
    embed,
    gram_matrix,
    jaccard,
    kernel,
    kernel_pca_fit,
    signature,
)
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AstGraph",
    "EncoderConfig",
    "Formula",
    "GeneratorConfig",
    "GvaeModel",
    "LogicGvae",
    "ModelConfig",
    "ParseError",
    "SemanticPCA",
    "SemanticSignature",
    "TrainConfig",
    "agreement",
    "conj",
    "default_encoder_config",
    "disj",
    "embed",
    "enumerate_assignments",
    "evaluate",
    "generate_formula",
    "gram_matrix",
    "jaccard",
    "kernel",
    "kernel_pca_fit",
    "neg",
    "node_count",
    "parse",
    "print_canonical",
    "signature",
    "structural_equal",
    "to_ast_graph",
    "train",
    "var",
    "__version__",
]
