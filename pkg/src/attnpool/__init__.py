"""attnpool: ensemble time-series forecasting with trainable additive-attention pooling."""

__version__ = "0.1.0"
