"""
Wiener deconvolution of a blurred shape image
=============================================

Blur an image with a known Gaussian, undo it with the regularized inverse
conj(K) / (|K|^2 + C), and watch the trade-off in C.
"""

import numpy as np

from deblurvae.data import gen_shapes, pgm_write, tile_grid
from deblurvae.fft import circular_convolve, fft2, ifft2
from deblurvae.kernels import gaussian_kernel
from deblurvae.metrics import psnr, to_unit_range
from deblurvae.wiener import build_weight

x = gen_shapes(1, 32, 32, seed=1).images[0, 0]
k = gaussian_kernel(9, 1.5).weights
blurred = circular_convolve(x, k)
print(f"blurred      PSNR {psnr(to_unit_range(x), to_unit_range(blurred)):6.2f} dB")

panels = [x, blurred]
for C in (1e-1, 1e-2, 1e-3, 1e-5):
    w = build_weight(k, C, 32, 32).grid
    restored = ifft2(w * fft2(blurred))
    panels.append(np.clip(restored, -1, 1))
    print(f"C = {C:<7g}  PSNR {psnr(to_unit_range(x), to_unit_range(restored)):6.2f} dB")

# frequencies where the kernel's response falls below sqrt(C) stay lost
pgm_write("wiener_panel.pgm", tile_grid(np.stack(panels)[:, None], ncols=6))
print("wrote wiener_panel.pgm (original, blurred, then C from large to small)")
