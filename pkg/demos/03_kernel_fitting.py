"""
Recovering a blur kernel by least squares
=========================================

Given a sharp image and its blurred copy, the kernel is the solution of a
small linear system with one column per kernel offset.
"""

import numpy as np

from deblurvae.fft import circular_convolve
from deblurvae.kernels import delta_kernel, fit_kernel_least_squares, kernel_second_moment

rng = np.random.default_rng(4)
x = rng.standard_normal((32, 32))
true_k = rng.uniform(0, 1, (5, 5))
true_k /= true_k.sum()

fitted = fit_kernel_least_squares(x, circular_convolve(x, true_k), 5, ridge=0.0).weights
print("max abs error        :", np.abs(fitted - true_k).max())
print("second moment true   :", kernel_second_moment(true_k))
print("second moment fitted :", kernel_second_moment(fitted))

# an image paired with itself is explained by the identity kernel
ident = fit_kernel_least_squares(x, x, 5, ridge=0.0).weights
print("identity pair -> delta:", np.allclose(ident, delta_kernel(5).weights))
