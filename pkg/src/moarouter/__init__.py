"""moarouter: a trainable recurrent gating router for layered
mixture-of-agents pipelines, with sparse top-k execution, exact router
gradients, and a synthetic benchmark harness."""

from .agents import AgentPool, AgentSpec, EmbeddingConfig, build_pool, embed_text, invoke
from .bench import (
    BenchResult,
    SyntheticTask,
    TimingRow,
    bench_pair,
    emit_report,
    gen_tasks,
    judge,
    make_linear_skill_specs,
    timing_table,
    win_rate,
)
from .errors import (
    AgentUnavailableError,
    ConfigError,
    DeserializationError,
    NumericError,
    ParameterError,
    ShapeError,
    TrainingDivergedError,
)
from .losses import LossConfig, TrainSample, entropy, load_balance, router_loss, router_loss_grad
from .numkit import (
    LstmParams,
    LstmState,
    finite_diff_grad,
    lstm_backward,
    lstm_forward,
    matvec,
    softmax,
    zeros_lstm_state,
)
from .pipeline import (
    LayerTrace,
    PipelineConfig,
    RunReport,
    account_calls,
    load_report,
    run,
    run_dense,
    run_linear_ablation,
    run_sparse,
    run_static_moa,
    save_report,
    write_trace_csv,
)
from .router import (
    AgentOutput,
    RouterParams,
    SparsePlan,
    aggregate,
    fuse,
    gate,
    init_router_params,
    load_params,
    recur,
    router_forward,
    save_params,
    sparse_select,
    zeros_router_params,
)
from .train import TrainConfig, TrainResult, make_fixed_loss_dataset, make_region_dataset, train_router

__version__ = "0.1.0"
