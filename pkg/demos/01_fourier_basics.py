"""
Fourier transforms and circulant log-determinants
=================================================

The radix-2 FFT checked against a direct DFT, Parseval's identity, and
the log-determinant of a blur operator read off its eigenvalues.
"""

import numpy as np

from deblurvae.circulant import BccbOperator, log_abs_det, materialize_dense
from deblurvae.fft import fft2, naive_dft2, parseval_gap
from deblurvae.kernels import gaussian_kernel

rng = np.random.default_rng(0)
x = rng.standard_normal((16, 16))

# the fast transform and the O(N^4) definition agree to roundoff
print("max |FFT - DFT|      :", np.abs(fft2(x) - naive_dft2(x)).max())
print("Parseval relative gap:", parseval_gap(x))

# a 3x3 Gaussian blur on an 8x8 torus is a 64x64 block-circulant matrix
k = gaussian_kernel(3, 0.8).weights
op = BccbOperator(k, (8, 8), epsilon=0.1)
dense = materialize_dense(op)
print("log|det| via FFT     :", log_abs_det(op))
print("log|det| via LU      :", np.linalg.slogdet(dense)[1])
