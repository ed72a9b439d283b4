"""Label-free cross-speaker style transfer toolkit.

Reference encoding (VAE / Q-VAE), speaker-wise batch normalization,
Gram-matrix cycle and contrastive losses, and gradient-reversal speaker
adversary, plus a desk-scale synthetic corpus to train and probe them.
"""

from slf.errors import ConfigurationError, ContractViolation, TrainingAbort

__version__ = "0.1.0"

__all__ = ["ConfigurationError", "ContractViolation", "TrainingAbort", "__version__"]
