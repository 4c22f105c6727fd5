"""Model-predictive driving policies with dropout-uncertainty regularization.

Everything runs on CPU float64 via a small reverse-mode autodiff engine;
see the README for the pipeline (data -> forward model -> calibration ->
policy -> evaluation).
"""

__version__ = "0.1.0"
