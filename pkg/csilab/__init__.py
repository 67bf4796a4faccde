"""csilab: recurrent spatio-temporal CSI feedback autoencoders on a numpy autodiff engine."""

__version__ = "0.1.0"
