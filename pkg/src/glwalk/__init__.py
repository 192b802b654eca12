"""Monte Carlo toolkit for Berry-Esseen rates of random matrix products.

Modules: rng (counter-based streams), ensemble (step distributions),
projective (directions, cocycle, stationary sampler), walk (path engine),
depcoef (coupling coefficients), blocking (m-dependent decomposition),
estimators (Lyapunov exponent, variance, Kolmogorov distances, rate fits),
cli (experiment runner).
"""

__version__ = "0.1.0"
