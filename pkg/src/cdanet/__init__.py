"""Two-domain CTR experimentation toolkit.

Learns a cross-supervised latent translator between a source and a target
domain, then fine-tunes the target predictor on latents augmented with their
translated view.  Includes a minimal fp64 reverse-mode autodiff engine, a
synthetic two-domain benchmark with known item correspondence, exact AUC,
and ablation/sweep harnesses.
"""

from . import autodiff, config, data, evaluation, experiments, model, train

__version__ = "0.1.0"

__all__ = ["autodiff", "config", "data", "evaluation", "experiments", "model", "train", "__version__"]
