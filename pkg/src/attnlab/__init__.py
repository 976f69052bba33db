"""Attention mechanisms, latent attention and inference-cost accounting in numpy."""

from .accounting import (
    PRESETS,
    ModelPreset,
    account,
    attention_flops,
    cache_ratio,
    conversation_cost,
    kv_cache_bytes,
    latent_cache_bytes,
    mha_memory_floats,
    mla_memory_floats,
)
from .attention import (
    NO_MASK,
    HeadWeights,
    Kernel,
    MaskPolicy,
    attend,
    attention_scores,
    register_kernel,
    softmax_attend,
)
from .blocks import GptModel, TransformerModel, gpt_decode, gpt_forward, layer_norm, rms_norm, transformer_forward
from .cache import KvCache, LatentCache, cache_append, decode_sequence, streaming_decode_step
from .errors import (
    AttnLabError,
    ConvergenceError,
    DegenerateRowError,
    FormatError,
    MaskAlignmentError,
    NonFiniteError,
    ShapeError,
    SpecError,
    UnknownSymbolError,
)
from .latent import (
    MergedMlaWeights,
    MlaSpec,
    MlaWeights,
    RopeProjections,
    factorize_mha_to_mla,
    merge_weights,
    mla_forward,
    mla_forward_decoupled_rope,
    mla_forward_unmerged,
)
from .linalg import block_diag, concat_cols, matmul, row_softmax, split_cols, truncated_svd
from .multihead import MhaSpec, MhaWeights, mha_forward, self_attention
from .tokenizer import EmbeddingTable, RopeParams, Vocabulary, apply_rope, detokenize, embed, tokenize_greedy
from .weights_io import load_weights, save_weights

__version__ = "0.1.0"
