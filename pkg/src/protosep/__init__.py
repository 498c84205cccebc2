"""Attention-guided prototype networks with separation-regularized features.

The package splits into a small autodiff engine (`autodiff`), model
components (`backbone`, `attention`, `prototypes`, `model`), the
training objective and loop (`losses`, `optim`, `training`),
adversarial tooling (`attacks`, `evaluate`), data plumbing (`data`,
`checkpoint`, `config`, `export`), a CLI (`cli`), and a scikit-learn
facade (`estimator`).
"""

from .estimator import PrototypeSeparationClassifier
from .model import GlobalPoolNet, ModelConfig, SeparationNet

__all__ = ["PrototypeSeparationClassifier", "SeparationNet",
           "GlobalPoolNet", "ModelConfig"]

__version__ = "0.1.0"
