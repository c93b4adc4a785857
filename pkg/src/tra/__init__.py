"""Temporal Representation Alignment (TRA).

Goal- and language-conditioned behavioral cloning with auxiliary symmetric
time-contrastive and task-contrastive alignment losses, plus the synthetic
"stitching" environments, training loop, evaluation protocol, and the
compositional-error bound used to study it.
"""

__version__ = "0.1.0"
