"""Conditional eigenvector overlaps of the complex Ginibre ensemble.

Exact finite-N formulas, their bulk scaling limits, and a Monte Carlo engine
that checks them.
"""

__version__ = "0.1.0"

from .specfun import ScaledComplex, exp_poly, f_fun, frak_F, gamma_ratio  # noqa: E402
from .kernels import D11, D12, K11, kappa_closed, kappa_sum, rho  # noqa: E402
from .bulk import D11_bulk, D12_bulk, K11_bulk, kappa_bulk, rho_bulk  # noqa: E402

__all__ = [
    "__version__",
    "ScaledComplex",
    "exp_poly",
    "f_fun",
    "frak_F",
    "gamma_ratio",
    "D11",
    "D12",
    "K11",
    "kappa_closed",
    "kappa_sum",
    "rho",
    "D11_bulk",
    "D12_bulk",
    "K11_bulk",
    "kappa_bulk",
    "rho_bulk",
]
