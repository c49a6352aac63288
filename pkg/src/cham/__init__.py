"""cham: a desk-scale conformer hybrid acoustic model training sandbox.

Trains frame classifiers on synthetic aligned corpora with a
from-scratch float64 autodiff core, so architecture and recipe
properties (gradients, length laws, schedules, sharing) are directly
testable without GPUs or real speech data.
"""

__version__ = "0.1.0"
