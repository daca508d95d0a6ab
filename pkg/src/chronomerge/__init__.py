"""chronomerge: temporal model merging over checkpoint streams.

Merge techniques over named-tensor checkpoints, an init/deploy protocol
grid for merging experts as they arrive over time, and a self-contained
synthetic benchmark to study the resulting accumulation/retention
trade-offs end to end.
"""

from .checkpoint import (
    Checkpoint,
    CheckpointBuffer,
    CheckpointFileReader,
    TaskVector,
    apply_task_vector,
    checkpoint_add,
    checkpoint_scale,
    load_checkpoint,
    save_checkpoint,
    structural_check,
    task_vector,
    zeros_like,
)
from .kernels import backend_name
from .merge import (
    MergeConfig,
    Technique,
    Weighting,
    breadcrumbs_sparsify,
    breadcrumbs_ties_merge,
    dare_sparsify,
    dare_ties_merge,
    lines_rescale,
    lines_ties_merge,
    magmax_merge,
    merge,
    merge_all,
    model_stock,
    recency_weights,
    slerp,
    task_arithmetic,
    ties_merge,
    weight_average,
)
from .metrics import (
    MetricsRow,
    geometric_mean,
    knowledge_accumulation,
    metrics_row,
    zero_shot_retention,
)
from .pipeline import (
    DeployProtocol,
    InitProtocol,
    PipelineConfig,
    PipelineState,
    RunResult,
    deploy,
    init_weights,
    multitask_reference,
    run_stream,
    update_ema,
)
from .toybench import (
    TaskDataset,
    ToyBench,
    evaluate,
    generate_stream,
    init_model,
    train,
)

__version__ = "0.1.0"
