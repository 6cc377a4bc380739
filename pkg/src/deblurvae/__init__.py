"""Variational autoencoder with a Wiener-weighted reconstruction likelihood.

Everything runs on numpy: a small reverse-mode autodiff engine, a radix-2
FFT, BCCB log-determinants, the weighted ELBO, a per-sample blur-kernel
generator and the alternating trainer.
"""

__version__ = "0.1.0"
