"""logitfuse: decoding-time logit fusion for eliciting long reasoning.

A frozen target model's next-token logits are combined with the delta
between a small reasoning-tuned guider and its base model,
``target + alpha * (guider - base)``, behind a warm-up gate. The package
also carries the surrounding apparatus: nucleus sampling, boxed-answer
grading, pass@k evaluation, preference-pair export, a DPO objective lab,
a wire protocol for remote logit providers, and a CLI/HTTP service.
"""

from .engine import BatchItem, DecodeEngine, DecodeRequest, DecodeTrace
from .errors import (
    ConfigError,
    LogitFuseError,
    NumericError,
    SamplingError,
    ShapeMismatchError,
    TransportError,
    UnknownSessionError,
    VocabMismatchError,
)
from .fusion import GuidanceConfig, fuse, fuse_with_warmup
from .providers import (
    RemoteProvider,
    TableLM,
    Vocabulary,
    VocabDescriptor,
    check_compatibility,
    hash_token_table,
)
from .sampling import SamplingConfig, make_rng, sample, to_probabilities, top_p_filter

__version__ = "0.1.0"

__all__ = [
    "BatchItem",
    "ConfigError",
    "DecodeEngine",
    "DecodeRequest",
    "DecodeTrace",
    "GuidanceConfig",
    "LogitFuseError",
    "NumericError",
    "RemoteProvider",
    "SamplingConfig",
    "SamplingError",
    "ShapeMismatchError",
    "TableLM",
    "TransportError",
    "UnknownSessionError",
    "VocabDescriptor",
    "VocabMismatchError",
    "Vocabulary",
    "check_compatibility",
    "fuse",
    "fuse_with_warmup",
    "hash_token_table",
    "make_rng",
    "sample",
    "to_probabilities",
    "top_p_filter",
]
