# %% [markdown]
# Three ways to get the same S4D filter: the blocked evaluation used by the
# model, an explicit Vandermonde product, and stepping the diagonal recurrence.

# %%
import numpy as np

from lyra.numerics import Rng, relative_error
from lyra.s4d import (
    causal_conv,
    generating_function_eval,
    init_s4d_kernel,
    kernel_recurrence_oracle,
    kernel_svd_spectrum,
    kernel_vandermonde_oracle,
    materialize_kernel,
)

kp = init_s4d_kernel(8, 16, Rng(0))
L = 96
fast = materialize_kernel(kp, L).data
print("vandermonde vs fast:", relative_error(fast, kernel_vandermonde_oracle(kp, L)))
print("recurrence  vs fast:", relative_error(fast, kernel_recurrence_oracle(kp, L)))

# %%
# Channels with small dt decay slowly; the first few taps show it.
np.set_printoptions(precision=3, suppress=True, linewidth=120)
dt = np.exp(kp.log_dt.data)
for h in np.argsort(dt)[[0, -1]]:
    print(f"dt={dt[h]:.4f}", fast[h, :8])

# %%
# How many directions the filter bank really spans.
sigma = kernel_svd_spectrum(fast)
print("singular values:", sigma)
print("energy in top 2:", (sigma[:2] ** 2).sum() / (sigma ** 2).sum())

# %%
# The truncated generating function at the m-th roots of unity is the DFT.
h = fast[0, :64]
Hz = generating_function_eval(h, 64)
print("vs fft:", relative_error(Hz, np.fft.fft(h)), " ifft back:", relative_error(np.fft.ifft(Hz).real, h))

# %%
# Convolving an impulse returns the filter itself.
u = np.zeros((1, 8, L))
u[:, :, 0] = 1.0
print("impulse response == kernel:", np.allclose(causal_conv(u, fast).data[0], fast, atol=1e-12))
