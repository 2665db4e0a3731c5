"""Binary relative entropy, its upper inverse, and the two disintegrated bounds.

Both bounds share the same complexity bracket

    complexity + log(K) + log(xi) + log(1/delta)

where ``complexity`` is the log-density ratio of the hypothesis under the
posterior and the prior, ``K`` is the number of candidate horizons
(union-bound penalty) and ``xi`` defaults to ``2 sqrt(m)`` for losses in
[0, 1]. A negative bracket is clamped at zero and every bound is clamped
into [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

# Bisect to double resolution: near v = 1 the slope of kl(u || .) is large enough
# that a fixed 1e-12 bracket would leave ~1e-8 error in the kl value itself.
KL_INV_TOL = 0.0
KL_INV_MAX_ITER = 200


def binary_kl(u: float, v: float) -> float:
    """kl(u || v) between Bernoulli(u) and Bernoulli(v), with 0 log 0 = 0."""
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"u must lie in [0, 1], got {u}")
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"v must lie in [0, 1], got {v}")
    if u == v:
        return 0.0
    if v == 0.0 or v == 1.0:
        raise ValueError(f"kl({u} || {v}) is infinite: v must lie in (0, 1)")
    out = 0.0
    if u > 0.0:
        out += u * math.log(u / v)
    if u < 1.0:
        out += (1.0 - u) * math.log((1.0 - u) / (1.0 - v))
    # rounding can push the value a hair below zero when u ~ v
    return max(out, 0.0)


def kl_inverse(u: float, c: float, tol: float = KL_INV_TOL,
               max_iter: int = KL_INV_MAX_ITER) -> float:
    """sup{v in [0, 1] : kl(u || v) <= c}, by bisection on [u, 1].

    Negative ``c`` is treated as 0. The returned value is the upper end of
    the final bracket, so it never underestimates the supremum.
    """
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"u must lie in [0, 1], got {u}")
    if math.isnan(c):
        raise ValueError("c is NaN")
    c = max(c, 0.0)
    if c == 0.0 or u == 1.0:
        return u
    lo, hi = u, 1.0
    # kl(u || v) -> inf as v -> 1 for u < 1, so the sup is 1 only in the limit;
    # stop early when even the largest representable v below 1 is feasible
    if binary_kl(u, math.nextafter(1.0, 0.0)) <= c:
        return 1.0
    for _ in range(max_iter):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        if not lo < mid < hi:
            break
        if binary_kl(u, mid) <= c:
            lo = mid
        else:
            hi = mid
    return hi


@dataclass(frozen=True)
class BoundInputs:
    """Everything a disintegrated bound needs besides the chosen formula."""

    empirical_loss: float
    complexity: float
    m: int
    delta: float
    K: int = 1
    xi_log: float | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.empirical_loss <= 1.0:
            raise ValueError(f"empirical_loss must lie in [0, 1], got {self.empirical_loss}")
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if self.m < 1:
            raise ValueError(f"m must be >= 1, got {self.m}")
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if math.isnan(self.complexity):
            raise ValueError("complexity is NaN")
        if self.xi_log is None:
            object.__setattr__(self, "xi_log", default_xi_log(self.m))

    @property
    def penalty(self) -> float:
        """log(K xi / delta): the part of the bracket that does not depend on h."""
        return math.log(self.K) + self.xi_log + math.log(1.0 / self.delta)

    @property
    def bracket(self) -> float:
        return max(0.0, self.complexity + self.penalty)


def default_xi_log(m: int) -> float:
    return math.log(2.0 * math.sqrt(m))


def mcallester_unclamped(b: BoundInputs) -> float:
    """L_s + sqrt(bracket / 2m) before clamping; exceeds 1 when vacuous."""
    return b.empirical_loss + math.sqrt(b.bracket / (2.0 * b.m))


def mcallester_bound(b: BoundInputs) -> float:
    """L_s + sqrt(bracket / 2m), clamped to 1."""
    return min(1.0, mcallester_unclamped(b))


def kl_bound(b: BoundInputs) -> float:
    """kl^{-1}(L_s | bracket / m)."""
    return min(1.0, kl_inverse(b.empirical_loss, b.bracket / b.m))


@dataclass(frozen=True)
class BoundCertificate:
    inputs: BoundInputs
    mcallester: float
    kl_inv: float
    mcallester_unclamped: float = math.nan
    components: dict[str, float] = field(default_factory=dict)


def certify_bounds(empirical_loss: float, log_density_ratio: float,
                   laplacian_integral: float, m: int, delta: float, K: int = 1,
                   xi_log: float | None = None) -> BoundCertificate:
    """Evaluate both bounds from itemized complexity components.

    The complexity is ``log_density_ratio + laplacian_integral``; recomputing
    from the same components reproduces the stored values exactly.
    """
    b = BoundInputs(
        empirical_loss=empirical_loss,
        complexity=log_density_ratio + laplacian_integral,
        m=m,
        delta=delta,
        K=K,
        xi_log=xi_log,
    )
    return BoundCertificate(
        inputs=b,
        mcallester=mcallester_bound(b),
        kl_inv=kl_bound(b),
        mcallester_unclamped=mcallester_unclamped(b),
        components={
            "log_density_ratio": log_density_ratio,
            "laplacian_integral": laplacian_integral,
            "penalty": b.penalty,
        },
    )
