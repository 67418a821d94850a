"""Text-guided multi-view knowledge distillation: Python bindings of the C++ core."""

from ._tmkd import (  # noqa: F401
    DivergenceError,
    MissingKeyError,
    ParseError,
    canny,
    crd_loss,
    default_config,
    embedding_key,
    encode_embeddings,
    evaluate_logits,
    feature_loss,
    gradcheck,
    load_embeddings,
    logit_loss,
    make_views,
    missing_keys,
    parse_embeddings,
    pseudo_embeddings,
    resolve_config,
)

__version__ = "0.1.0"
