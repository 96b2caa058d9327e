"""Temperature-adaptive battery state-of-charge estimation.

Wavelet band features, canonical variate analysis, LSTM regression,
T^2 / SPE estimation-ability monitoring and transfer to new temperatures.
"""
__version__ = "0.1.0"
