"""fedsim: a deterministic federated-learning simulator with adaptive
participant-count control, baseline schedules, loss-based client sampling, and
sparsifying update compression."""

from .compress import Compressor, SparseDelta, rand_k, top_k
from .datasim import (
    ClientHandle,
    Dataset,
    Partition,
    dirichlet_partition,
    generate_synthetic,
    stratified_split,
)
from .errors import ConfigurationError, NumericError, RoundAbort
from .ispcore import (
    FixedSchedule,
    IspConfig,
    IspSchedule,
    LinearSchedule,
    LossEstimator,
    LossHistory,
    SolveInputs,
    SurrogateLoss,
    blend_counts,
    ema_step,
    expect_estim,
    isp_ri_select,
    isp_select,
    make_surrogate,
    participant_number_strategy,
)
from .numkit import (
    Batch,
    ClientUpdate,
    ModelSpec,
    OptimizerState,
    client_update,
    gradient,
    init_params,
    loss,
    optimizer_step,
    weighted_delta_mean,
)
from .orchestrator import (
    ClientPool,
    CommunicationLedger,
    RoundRecord,
    RunResult,
    TrainingConfig,
    aggregate,
    apply_compression,
    run_training,
)
from .sampling import PowDSampling, SamplingStrategy, UniformSampling, ValuationSampling

__version__ = "0.1.0"
