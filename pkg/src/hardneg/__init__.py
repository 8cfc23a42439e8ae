"""Hard-negative contrastive objectives, exact finite-population oracles and a toy numpy trainer."""
from .errors import HardNegError
from .objectives import LossConfig, hard_loss, nce_loss, debiased_loss
from .sphere import Embedding, normalize, score_matrix

__all__ = ["HardNegError", "LossConfig", "hard_loss", "nce_loss", "debiased_loss",
           "Embedding", "normalize", "score_matrix"]
__version__ = "0.1.0"
