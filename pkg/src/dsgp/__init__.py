"""Distributed variational inference for sparse GP regression and the
Bayesian GPLVM.

The evidence lower bound and its gradients decompose into sums of
per-datapoint terms, so both are computed map-reduce style: workers hold
contiguous data partitions and return partial sums; a coordinator reduces
them, performs the O(m^3) assembly in the number of inducing points m, and
broadcasts updated parameters.  Regression is the zero-variance special case
of the latent-variable model and shares the entire code path.

Layers
------
``kernel``      ARD squared-exponential kernel and its psi statistics.
``bound``       Collapsed bound, partial sums, gradient assembly.
``optim``       L-BFGS and scaled-conjugate-gradient maximizers, FD checks.
``engine``      Partitions, serial/thread/process backends, optimization steps.
``worker``      Subprocess entry point speaking the length-prefixed protocol.
``model``       Training, prediction, classification, checkpoints.
``estimators``  Scikit-learn style wrappers.
``data``        CSV/binary datasets, splits, standardization, synthesis.
``bench``       Strong/weak scaling and load-balance reports.
``cli``         ``dsgp`` command-line entry point.
"""

from .bench import (
    BenchRow,
    ScalingReport,
    bench_load,
    bench_strong,
    bench_weak,
    measure_iterations,
)
from .bound import (
    BoundReport,
    GradGlobal,
    GradTerms,
    PartialSums,
    StepAccum,
    assemble_bound,
    assemble_gradients,
    local_grads,
    local_terms,
    reduce_partials,
)
from .data import (
    ColumnStats,
    Dataset,
    destandardize,
    load_csv,
    read_binary,
    split,
    standardize,
    synth_latent_1d,
    take_head,
    write_binary,
    write_csv,
)
from .engine import (
    EngineState,
    GlobalParams,
    IterationTimings,
    Partition,
    ProcessBackend,
    SerialBackend,
    StepInfo,
    ThreadBackend,
    WorkerError,
    make_backend,
    make_partitions,
    optimize_step,
    run_iteration,
)
from .estimators import BayesianGPLVM, SparseGPRegressor
from .kernel import (
    InducingInputs,
    KernelParams,
    LatentPosterior,
    kernel_matrix,
    psi0,
    psi1,
    psi2,
    psi2_sum,
)
from .linalg import PosDefError
from .model import (
    ModelState,
    Prediction,
    TrainTrace,
    classify_by_density,
    evaluate,
    load_model,
    new_gplvm,
    new_regression,
    predict,
    reconstruct,
    save_model,
    train,
)
from .optim import (
    OptimResult,
    OptimizerConfig,
    fd_gradient,
    grad_check,
    lbfgs,
    scg,
)

__version__ = "0.1.0"

__all__ = [
    "BenchRow",
    "ScalingReport",
    "bench_load",
    "bench_strong",
    "bench_weak",
    "measure_iterations",
    "BoundReport",
    "GradGlobal",
    "GradTerms",
    "PartialSums",
    "StepAccum",
    "assemble_bound",
    "assemble_gradients",
    "local_grads",
    "local_terms",
    "reduce_partials",
    "ColumnStats",
    "Dataset",
    "destandardize",
    "load_csv",
    "read_binary",
    "split",
    "standardize",
    "synth_latent_1d",
    "take_head",
    "write_binary",
    "write_csv",
    "EngineState",
    "GlobalParams",
    "IterationTimings",
    "Partition",
    "ProcessBackend",
    "SerialBackend",
    "StepInfo",
    "ThreadBackend",
    "WorkerError",
    "make_backend",
    "make_partitions",
    "optimize_step",
    "run_iteration",
    "BayesianGPLVM",
    "SparseGPRegressor",
    "InducingInputs",
    "KernelParams",
    "LatentPosterior",
    "kernel_matrix",
    "psi0",
    "psi1",
    "psi2",
    "psi2_sum",
    "PosDefError",
    "ModelState",
    "Prediction",
    "TrainTrace",
    "classify_by_density",
    "evaluate",
    "load_model",
    "new_gplvm",
    "new_regression",
    "predict",
    "reconstruct",
    "save_model",
    "train",
    "OptimResult",
    "OptimizerConfig",
    "fd_gradient",
    "grad_check",
    "lbfgs",
    "scg",
    "__version__",
]
