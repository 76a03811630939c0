"""Scalar test functions with derivatives up to order four.

Estimating functions and the operator calculus need f, f', ..., f''''.
Derivatives may be supplied analytically; missing orders fall back to
central finite differences (the fourth via nested second differences).
All callables are numpy-vectorized: they accept scalars or arrays.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

Scalar = Callable[[np.ndarray], np.ndarray]

# Central-difference steps per derivative order, scaled by max(1, |x|).
# Chosen to balance truncation against roundoff for O(1) fourth derivatives.
_FD_STEPS = {1: 1e-6, 2: 4e-5, 3: 8e-4, 4: 3e-3}


class SmoothFunction:
    """A four-times differentiable real function of a real variable.

    Polynomial growth of the function and its derivatives is a documented
    precondition of the asymptotic theory, not something checked here.
    """

    def __init__(
        self,
        fn: Scalar,
        d1: Optional[Scalar] = None,
        d2: Optional[Scalar] = None,
        d3: Optional[Scalar] = None,
        d4: Optional[Scalar] = None,
        name: str = "f",
    ):
        self.fn = fn
        self.name = name
        self._analytic = {1: d1, 2: d2, 3: d3, 4: d4}

    def __call__(self, x):
        return self.fn(np.asarray(x, dtype=float))

    def deriv(self, order: int, x):
        """Evaluate the derivative of the given order (1..4)."""
        if order not in (1, 2, 3, 4):
            raise ValueError(f"derivative order must be 1..4, got {order}")
        d = self._analytic[order]
        if d is not None:
            return d(np.asarray(x, dtype=float))
        return self._fd(order, np.asarray(x, dtype=float))

    def _fd(self, order: int, x: np.ndarray):
        h = _FD_STEPS[order] * np.maximum(1.0, np.abs(x))
        f = self.fn
        if order == 1:
            return (f(x + h) - f(x - h)) / (2.0 * h)
        if order == 2:
            return (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h)
        if order == 3:
            return (
                0.5 * f(x + 2 * h) - f(x + h) + f(x - h) - 0.5 * f(x - 2 * h)
            ) / h**3
        # nested second differences of the second difference
        d2 = lambda z, s: (f(z + s) - 2.0 * f(z) + f(z - s)) / (s * s)
        return (d2(x + h, h) - 2.0 * d2(x, h) + d2(x - h, h)) / (h * h)

    def shifted(self, constant: float, name: Optional[str] = None) -> "SmoothFunction":
        """Return f - constant, sharing all derivative information."""
        c = float(constant)
        out = SmoothFunction(
            lambda x: self.fn(np.asarray(x, dtype=float)) - c,
            name=name or f"{self.name}-{c:g}",
        )
        out._analytic = dict(self._analytic)
        # derivatives of a shift are unchanged; reuse FD paths of the parent
        for k in (1, 2, 3, 4):
            if out._analytic[k] is None:
                out._analytic[k] = lambda x, k=k: self.deriv(k, x)
        return out


def polynomial(coeffs: Sequence[float], name: Optional[str] = None) -> SmoothFunction:
    """Polynomial sum(coeffs[k] * x**k) with exact derivatives."""
    c = np.asarray(coeffs, dtype=float)
    if c.ndim != 1 or c.size == 0:
        raise ValueError("coeffs must be a nonempty 1-d sequence")
    derivs = [np.polynomial.polynomial.polyder(c, m) if m else c for m in range(5)]

    def make(m):
        cm = derivs[m]
        return lambda x: np.polynomial.polynomial.polyval(np.asarray(x, float), cm) + 0.0

    return SmoothFunction(
        make(0), make(1), make(2), make(3), make(4), name=name or f"poly{list(c)}"
    )


def _exp_neg() -> SmoothFunction:
    e = lambda x: np.exp(-np.asarray(x, dtype=float))
    return SmoothFunction(
        e,
        d1=lambda x: -np.exp(-x),
        d2=lambda x: np.exp(-x),
        d3=lambda x: -np.exp(-x),
        d4=lambda x: np.exp(-x),
        name="exp(-x)",
    )


FUNCTIONS = {
    "x": polynomial([0.0, 1.0], name="x"),
    "x^2": polynomial([0.0, 0.0, 1.0], name="x^2"),
    "x^3": polynomial([0.0, 0.0, 0.0, 1.0], name="x^3"),
    "exp(-x)": _exp_neg(),
}


def get_function(spec) -> SmoothFunction:
    """Resolve a function spec: a registered name, coefficient list, or instance."""
    if isinstance(spec, SmoothFunction):
        return spec
    if isinstance(spec, str):
        if spec not in FUNCTIONS:
            raise KeyError(
                f"unknown function {spec!r}; registered: {sorted(FUNCTIONS)} "
                "(or pass polynomial coefficients)"
            )
        return FUNCTIONS[spec]
    return polynomial(spec)
