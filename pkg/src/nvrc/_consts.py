"""Constants shared by both kernel backends. Changing any of them changes the bitstream."""

import math

PROB_BITS = 16
PROB_TOTAL = 1 << PROB_BITS

SYM_MIN = -32768
SYM_MAX = 32767

# symbol-domain Gaussian parameters are snapped to multiples of 1/PARAM_GRID
PARAM_GRID = 256.0
SIGMA_MIN = 0.11
SIGMA_MAX = 16384.0
TAIL_SIGMAS = 6.0
MAX_RADIUS = 2047

# escape: Exp-Golomb length prefix width
ESC_LEN_BITS = 5

LOG_SIGMA_MIN = -20.0
LOG_SIGMA_MAX = 8.0
LN_EPS = 1e-5

EXP_CLAMP = 700.0
LN2_HI = 6.93147180369123816490e-01
LN2_LO = 1.90821492927058770002e-10
INV_LN2 = 1.44269504088896338700e00
EXP_COEFFS = tuple(1.0 / math.factorial(n) for n in range(14))

INV_SQRT2 = 0.70710678118654752440
# Chebyshev fit of erfc, fractional error < 1.2e-7 (exponent polynomial in t)
ERFC_COEFFS = (
    -1.26551223,
    1.00002368,
    0.37409196,
    0.09678418,
    -0.18628806,
    0.27886807,
    -1.13520398,
    1.48851587,
    -0.82215223,
    0.17087277,
)
