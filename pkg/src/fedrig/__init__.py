"""fedrig: a controller-centric federated learning rig.

Library plus CLI: tensor byte codec, framed wire protocol, a minimal
dense-MLP training engine, an in-memory model store with per-tensor
parallel weighted averaging, controller/learner/driver services, round
timing metrics, and a benchmark harness that writes CSV and figures.
"""

from .aggregation import (
    AggregationPlan,
    EmptyInput,
    MissingModel,
    ModelStore,
    fedavg,
    fedavg_sequential,
    normalized_weights,
)
from .controller import Controller, FederationConfig, LearnerDescriptor
from .engine import (
    Dataset,
    MODEL_SIZES,
    MlpArchitecture,
    TrainStats,
    build_mlp,
    evaluate,
    generate_dataset,
    parameter_count,
    sgd_train,
)
from .learner import JoinRejected, Learner, LearnerConfig
from .metrics import (
    METRIC_NAMES,
    IncompleteRound,
    MetricSummary,
    RoundMetrics,
    SchemaError,
    aggregate_run,
    compute_round_metrics,
)
from .protocol import (
    Ack,
    EvalReply,
    EvaluateModel,
    Hyperparams,
    JoinAck,
    JoinFederation,
    MarkTaskCompleted,
    Message,
    MsgType,
    Ping,
    Pong,
    RunTask,
    ShutDown,
    decode_message,
    encode_message,
)
from .tensors import (
    ByteOrder,
    Dtype,
    MalformedTensor,
    ModelState,
    SerializedTensor,
    ShapeMismatch,
    Tensor,
    UnsupportedDtype,
    decode_tensor,
    encode_tensor,
)

__version__ = "0.1.0"
