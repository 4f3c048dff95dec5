"""CSI fingerprint localization with autoencoder pretraining."""

__version__ = "0.1.0"
