"""Expert-selecting receding-horizon active target tracking with a
multi-head Bayesian reward model and an expert-conditioned diffusion policy."""

__version__ = "0.1.0"
