"""Two-stage residual depth diffusion for synthetic-to-real depth simulation."""

__version__ = "0.1.0"
