"""Relevance attributions for selective state-space (Mamba) sequence classifiers.

The package bundles a small reverse-mode autodiff engine with stop-gradient,
a Mamba-style classifier, relevance attribution through detached gradients and
through explicit propagation rules, gradient-based baselines, and perturbation
and conservation evaluation protocols, all tied together by the ``mambalrp``
command-line tool.
"""

__version__ = "0.1.0"

from .autodiff import (  # noqa: F401
    GradientMap,
    Tape,
    Tensor,
    backward,
    detach,
    grad_check,
    record,
)
from .errors import (  # noqa: F401
    ConfigError,
    FormatError,
    MambaLrpError,
    NumericError,
    ShapeError,
    TrainingError,
    VocabularyError,
)
