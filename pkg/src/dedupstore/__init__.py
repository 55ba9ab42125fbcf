"""Block-level deduplication, page packing and caching for model weights."""

from .bufferpool import (
    AccessRateTable,
    BufferPool,
    CostModelConfig,
    choose_victim,
    eviction_cost,
    reuse_probability,
)
from .errors import (
    DedupStoreError,
    FormatError,
    OracleError,
    PoolFullError,
    ShapeError,
    StoreError,
    UnknownBlockError,
)
from .index import BlockMapping, DedupIndex, LshConfig, auto_bucket_width, lsh_signature
from .packing import (
    PACKERS,
    Ownership,
    PackingScheme,
    compute_equivalent_classes,
    diff_schemes,
    pack_approx,
    pack_baseline,
    pack_classes,
    pack_two_stage,
    validate_scheme,
)
from .store import PageStore, StoredTensor
from .tensor import (
    BlockedTensor,
    BlockKey,
    TensorMeta,
    apply_transform,
    assemble_tensor,
    block_tensor,
    blocked_add,
    blocked_matmul,
    magnitude_score,
)

__version__ = "0.1.0"

__all__ = [
    "AccessRateTable",
    "BlockKey",
    "BlockMapping",
    "BlockedTensor",
    "BufferPool",
    "CostModelConfig",
    "DedupIndex",
    "DedupStoreError",
    "FormatError",
    "LshConfig",
    "OracleError",
    "Ownership",
    "PACKERS",
    "PackingScheme",
    "PageStore",
    "PoolFullError",
    "ShapeError",
    "StoreError",
    "StoredTensor",
    "TensorMeta",
    "UnknownBlockError",
    "apply_transform",
    "assemble_tensor",
    "auto_bucket_width",
    "block_tensor",
    "blocked_add",
    "blocked_matmul",
    "choose_victim",
    "compute_equivalent_classes",
    "diff_schemes",
    "eviction_cost",
    "lsh_signature",
    "magnitude_score",
    "pack_approx",
    "pack_baseline",
    "pack_classes",
    "pack_two_stage",
    "reuse_probability",
    "validate_scheme",
]
