"""Doubly-oblivious sparse wide-layer training with a trace-audit harness."""

from .engine import (
    Model,
    PublicParams,
    batch_step,
    evaluate_p_at_1,
    init_model,
    load_checkpoint,
    run_traced,
    save_checkpoint,
    train_loop,
)
from .estimators import MPWTAIndex, OblivNetClassifier
from .lsh import LshConfig, LshTable, len_seq, make_hash_fns, mp_wta_probes
from .oht import CapacityError, OhtConfig
from .trace import TraceRecorder, assert_equal, canonicalize, digest

__all__ = [
    "Model", "PublicParams", "batch_step", "evaluate_p_at_1", "init_model",
    "load_checkpoint", "run_traced", "save_checkpoint", "train_loop",
    "MPWTAIndex", "OblivNetClassifier",
    "LshConfig", "LshTable", "len_seq", "make_hash_fns", "mp_wta_probes",
    "CapacityError", "OhtConfig",
    "TraceRecorder", "assert_equal", "canonicalize", "digest",
]

__version__ = "0.1.0"
