"""Tree-verified speculative decoding with hetero-core parallel execution."""

from .config import NANO, PRESETS, TINY, ModelConfig
from .container import ByteTokenizer, gen_toy_model, load_model, save_model
from .decoding import (
    AcceptanceRecord,
    OracleDrafter,
    assemble_block,
    generate_sequential,
    generate_speculative,
    simulate_oracle_acceptance,
    speculative_step,
    verify,
)
from .model import DraftCandidates, Engine, KVCache, ModelWeights
from .runtime import (
    ParallelEngine,
    PartitionPlan,
    TrafficCounters,
    VirtualUnit,
    allreduce_reference_step,
    execute_step,
    measure_step_latency,
    plan_from_ratio,
)
from .sparse_attn import (
    CooMask,
    PartialAttention,
    attend_dense_prefix,
    attend_sparse_block,
    build_mask,
    merge_partials,
    sparse_av,
    sparse_qk,
)
from .tensor_ops import argmax_row, gemm, rmsnorm, rope, softmax_rows
from .tree import VerificationTree, balanced_tree, chain_tree, sequential_tree
from .tuner import (
    HeadAccuracyTable,
    Strategy,
    bucket_plans,
    calibrate_heads,
    expected_acceptance,
    greedy_tree,
    refine_tree,
    select_width,
    sweep_widths,
    tune_ratio,
)

__version__ = "0.1.0"
