"""Structure-controlled caption generation with self-annotated reinforcement training."""

__version__ = "0.1.0"
