"""Twin-VAE cell counting with transfer learning."""

__version__ = "0.1.0"
