"""1D octave convolution networks for univariate time series classification."""

__version__ = "0.1.0"
