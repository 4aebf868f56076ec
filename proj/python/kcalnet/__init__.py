"""Image-only and image+text calorie regressors, trained and compared with a paired t-test."""

from ._core import (
    KcalnetError,
    Model,
    compare,
    compare_summary,
    config,
    conv2d,
    dense_relu_grad,
    depthwise_conv2d,
    evaluate,
    matmul,
    paired_t_test,
    report,
    softmax,
    student_t_upper_tail,
    synth,
    synth_generate,
    train,
    verify,
)

__all__ = [
    "KcalnetError",
    "Model",
    "compare",
    "compare_summary",
    "config",
    "conv2d",
    "dense_relu_grad",
    "depthwise_conv2d",
    "evaluate",
    "matmul",
    "paired_t_test",
    "report",
    "softmax",
    "student_t_upper_tail",
    "synth",
    "synth_generate",
    "train",
    "verify",
]
