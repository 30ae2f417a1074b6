"""Independent numerical oracles shared by several test modules."""
import numpy as np
from scipy.optimize import minimize_scalar


def golden_crr(phi_sq_norm, sigma2, s_rr):
    """Minimize ``(phi^T phi / sigma2 + s) c^2 - 2 log c`` by golden-section search over ``log c``.

    A coarse pass locates the minimum; a second pass around it uses an
    ``expm1`` form of the same objective so that the flat bottom does not
    limit the precision.
    """
    A = phi_sq_norm / sigma2 + s_rr
    u0 = minimize_scalar(lambda u: A * np.exp(2 * u) - 2 * u, bracket=(-1, 1), method="golden", tol=1e-12).x
    B = A * np.exp(2 * u0)
    v = minimize_scalar(lambda v: B * (np.expm1(2 * v) - 2 * v) + 2 * (B - 1) * v,
                        bracket=(-1e-6, 1e-6), method="golden", tol=1e-15).x
    return float(np.exp(u0 + v))
