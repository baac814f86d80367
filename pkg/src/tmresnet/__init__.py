"""ODE integrators, their residual-network stackings, and a small autodiff CNN engine."""

__version__ = "0.1.0"
