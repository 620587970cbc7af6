"""INT8 data-flow training library: block-quantized tensors, tiled integer
matrix multiplies with access counters, fused quantized non-linear operators,
transformer building blocks, and a small training harness."""

from .qgemm import (
    COUNTER_CSV_HEADER,
    AccessCounters,
    CounterLog,
    ExecMode,
    TileConfig,
    block_mm_forward,
    block_mm_grad_input,
    block_mm_grad_weight,
)
from .qlayers import (
    AttentionCore,
    BlockConfig,
    QuantLinear,
    ReferenceBlock,
    TransformerBlock,
    load_params,
    save_params,
)
from .qnonlinear import (
    DropoutState,
    NormParams,
    RowStats,
    add_forward,
    dropout_backward,
    dropout_forward,
    gelu_backward,
    gelu_forward,
    layernorm_backward,
    layernorm_forward,
)
from .qtensor import (
    INT8_MAX,
    PER_CHANNEL,
    PER_TENSOR,
    PER_TOKEN,
    BlockQuantTensor,
    QuantScheme,
    SchemeKind,
    dequantize,
    quantization_error,
    quantize_per_block,
    quantize_with_scheme,
    snap_to_f16,
    zeros_like,
)
from .trainer import (
    AdamW,
    CharLM,
    CopySequence,
    ToyModel,
    TrainConfig,
    TrainRecord,
    compare_runs,
    derive_seed,
    generate_task_data,
    records_to_csv,
    run_training,
)

__all__ = [
    "COUNTER_CSV_HEADER",
    "INT8_MAX",
    "PER_CHANNEL",
    "PER_TENSOR",
    "PER_TOKEN",
    "AccessCounters",
    "AdamW",
    "AttentionCore",
    "BlockConfig",
    "BlockQuantTensor",
    "CharLM",
    "CopySequence",
    "CounterLog",
    "DropoutState",
    "ExecMode",
    "NormParams",
    "QuantLinear",
    "QuantScheme",
    "ReferenceBlock",
    "RowStats",
    "SchemeKind",
    "TileConfig",
    "ToyModel",
    "TrainConfig",
    "TrainRecord",
    "TransformerBlock",
    "add_forward",
    "block_mm_forward",
    "block_mm_grad_input",
    "block_mm_grad_weight",
    "compare_runs",
    "dequantize",
    "derive_seed",
    "dropout_backward",
    "dropout_forward",
    "generate_task_data",
    "gelu_backward",
    "gelu_forward",
    "layernorm_backward",
    "layernorm_forward",
    "load_params",
    "quantization_error",
    "quantize_per_block",
    "quantize_with_scheme",
    "records_to_csv",
    "run_training",
    "save_params",
    "snap_to_f16",
    "zeros_like",
]

__version__ = "0.1.0"
