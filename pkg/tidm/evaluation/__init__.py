from .metrics import (
    AnchorCase,
    EvalPrompt,
    Evaluator,
    background_consistency,
    blend_rate,
    evaluate,
    identity_accuracy,
    reconstruction_psnr,
)
from .probe import ProbeClassifier, ProbeResult, train_probe_classifier

__all__ = [
    "AnchorCase",
    "EvalPrompt",
    "Evaluator",
    "ProbeClassifier",
    "ProbeResult",
    "background_consistency",
    "blend_rate",
    "evaluate",
    "identity_accuracy",
    "reconstruction_psnr",
    "train_probe_classifier",
]
