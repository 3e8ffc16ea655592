"""Dual privacy accounting for the noised gradient mechanism.

Two accountants cover the same Poisson-subsampled Gaussian mechanism with
per-round noise multiplier sigma, sampling rate p, and T rounds:

  * the Gaussian-DP route: each round is G_{1/sigma}-DP, the CLT
    composition gives mu = p * sqrt(T) * sqrt(exp(1/sigma^2) - 1), and
    (eps, delta) pairs come from the primal-dual conversion;
  * the Renyi route: subsampled Gaussian Renyi divergence composed over
    rounds and converted to (eps, delta) two ways (the standard
    conversion and the tighter log-corrected one), reported side by side.

All bisection solves run to 1e-12 absolute tolerance on the solved
variable. Infinite privacy loss (sigma = 0) is reported as float('inf'),
never NaN.
"""

import dataclasses
import math

import numpy as np
from scipy import special

from .errors import InfeasibleBudgetError

_BISECT_TOL = 1e-12


def _bisect(f, lo: float, hi: float, tol: float = _BISECT_TOL) -> float:
    """Root of a monotone function on a bracketing interval."""
    flo, fhi = f(lo), f(hi)
    if flo == 0.0:
        return lo
    if fhi == 0.0:
        return hi
    if (flo > 0) == (fhi > 0):
        raise ValueError(f"no sign change on [{lo}, {hi}]")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if fm == 0.0:
            return mid
        if (fm > 0) == (flo > 0):
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# Gaussian-DP route


def gdp_tradeoff(sigma: float, alpha) -> float | np.ndarray:
    """Type-II error floor of the one-round Gaussian mechanism.

    T(alpha) = Phi(Phi^{-1}(1 - alpha) - 1/sigma) for type-I level alpha.
    """
    if not sigma > 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(alpha < 0.0) or np.any(alpha > 1.0):
        raise ValueError("alpha must lie in [0, 1]")
    out = special.ndtr(special.ndtri(1.0 - alpha) - 1.0 / sigma)
    return float(out) if out.ndim == 0 else out


def gdp_mu(sigma: float, p: float, rounds: int) -> float:
    """CLT composition parameter mu for T rounds at sampling rate p.

    mu = p * sqrt(T) * sqrt(exp(1/sigma^2) - 1). sigma = 0 yields inf
    (no noise means unbounded privacy loss).
    """
    _check_pt(p, rounds)
    if sigma < 0.0:
        raise ValueError(f"sigma must be nonnegative, got {sigma}")
    if sigma == 0.0:
        return math.inf
    nu = p * math.sqrt(rounds)
    x = 1.0 / (sigma * sigma)
    if x > 700.0:  # exp overflows float64
        return math.inf
    return nu * math.sqrt(math.expm1(x))


def gdp_delta(mu: float, eps: float) -> float:
    """delta(eps) of the mu-GDP guarantee via the primal-dual conversion.

    delta = Phi(-eps/mu + mu/2) - e^eps * Phi(-eps/mu - mu/2), with the
    second term evaluated in log space to survive large eps.
    """
    if mu < 0.0 or eps < 0.0:
        raise ValueError("mu and eps must be nonnegative")
    if mu == 0.0:
        return 0.0
    if math.isinf(mu):
        return 1.0
    if math.isinf(eps):
        return 0.0  # an unbounded eps allowance needs no failure mass
    a = special.ndtr(-eps / mu + mu / 2.0)
    log_b = eps + special.log_ndtr(-eps / mu - mu / 2.0)
    return float(max(a - math.exp(log_b), 0.0))


def gdp_epsilon(mu: float, delta: float) -> float:
    """Smallest eps such that mu-GDP implies (eps, delta)-DP.

    Requires delta < delta(eps=0) = 2*Phi(mu/2) - 1; below that ceiling
    the curve is feasible and strictly monotone, otherwise the request
    is rejected.
    """
    if not mu > 0.0:
        raise ValueError(f"mu must be positive, got {mu}")
    if not (0.0 < delta < 1.0):
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if math.isinf(mu):
        return math.inf
    ceiling = gdp_delta(mu, 0.0)
    if delta >= ceiling:
        raise InfeasibleBudgetError(
            f"delta={delta} is not attainable for mu={mu}: the curve tops "
            f"out at delta(eps=0)={ceiling}"
        )
    hi = 1.0
    while gdp_delta(mu, hi) > delta:
        hi *= 2.0
        if hi > 1e9:
            raise InfeasibleBudgetError(f"no eps below 1e9 reaches delta={delta}")
    return _bisect(lambda e: gdp_delta(mu, e) - delta, 0.0, hi)


def gdp_mu_from_budget(eps: float, delta: float) -> float:
    """The mu whose (eps, delta) curve passes through the given budget."""
    if eps < 0.0:
        raise ValueError(f"eps must be nonnegative, got {eps}")
    if not (0.0 < delta < 1.0):
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    hi = 1.0
    while gdp_delta(hi, eps) < delta:
        hi *= 2.0
        if hi > 1e6:
            raise InfeasibleBudgetError(f"no mu below 1e6 reaches delta={delta}")
    lo = 0.0
    return _bisect(lambda m: gdp_delta(m, eps) - delta, lo, hi)


def calibrate_sigma(eps: float, delta: float, p: float, rounds: int) -> float:
    """Noise multiplier meeting an (eps, delta) budget over T rounds.

    Inverts the CLT composition: solve mu from the budget, then
    sigma = 1 / sqrt(ln(1 + (mu / (p sqrt(T)))^2)).
    """
    _check_pt(p, rounds)
    if not eps > 0.0:
        raise InfeasibleBudgetError(
            f"eps must be positive to admit finite noise, got {eps}"
        )
    if math.isinf(eps):
        return 0.0  # an unbounded budget needs no noise
    mu = gdp_mu_from_budget(eps, delta)
    nu = p * math.sqrt(rounds)
    return 1.0 / math.sqrt(math.log1p((mu / nu) ** 2))


def _check_pt(p: float, rounds: int):
    if not (0.0 < p <= 1.0):
        raise ValueError(f"sampling rate must lie in (0, 1], got {p}")
    if rounds < 1:
        raise ValueError(f"rounds must be >= 1, got {rounds}")


def classic_gaussian_sigma(eps: float, delta: float) -> float:
    """Textbook Gaussian-mechanism noise: sqrt(2 ln(1.25/delta)) / eps.

    Valid for eps < 1; larger eps still evaluates but the bound is loose
    there. See classic_gaussian_sigma_variants for the unrooted variant
    this codebase also reports.
    """
    if not eps > 0.0 or not (0.0 < delta < 1.0):
        raise ValueError("need eps > 0 and delta in (0, 1)")
    return math.sqrt(2.0 * math.log(1.25 / delta)) / eps


def classic_gaussian_sigma_variants(eps: float, delta: float) -> dict[str, float]:
    """Both readings of the classic noise formula, keyed by variant.

    "sqrt_log" is the standard sqrt(2 ln(1.25/delta))/eps; "linear_log"
    drops the square root over the log term (2 ln(1.25/delta))/eps.
    """
    if not eps > 0.0 or not (0.0 < delta < 1.0):
        raise ValueError("need eps > 0 and delta in (0, 1)")
    return {
        "sqrt_log": math.sqrt(2.0 * math.log(1.25 / delta)) / eps,
        "linear_log": 2.0 * math.log(1.25 / delta) / eps,
    }


# ---------------------------------------------------------------------------
# Renyi route

# Order grid: a dense fractional band near 1 (small-sigma optima live
# there), then quarter steps to 64 and coarser integers beyond for very
# large sigma.
DEFAULT_ORDERS: tuple[float, ...] = tuple(
    np.concatenate(
        [
            np.linspace(1.01, 2.0, 100),
            np.arange(2.25, 64.0, 0.25),
            np.arange(64.0, 257.0, 1.0),
            np.arange(258.0, 1025.0, 2.0),
        ]
    )
)


def _log_add(a: float, b: float) -> float:
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    return float(np.logaddexp(a, b))

def _log_sub(a: float, b: float) -> float:
    # log(exp(a) - exp(b)), requires a >= b
    if b == -math.inf:
        return a
    if a == b:
        return -math.inf
    if a < b:
        raise ValueError("log_sub needs a >= b")
    return a + math.log1p(-math.exp(b - a))

def _log_erfc(x: float) -> float:
    return math.log(2.0) + float(special.log_ndtr(-x * math.sqrt(2.0)))


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    # log E_k[exp(k(k-1)/(2 sigma^2))], k ~ Binomial(alpha, q)
    ks = np.arange(alpha + 1, dtype=np.float64)
    log_terms = (
        special.gammaln(alpha + 1)
        - special.gammaln(ks + 1)
        - special.gammaln(alpha - ks + 1)
        + ks * math.log(q)
        + (alpha - ks) * math.log1p(-q)
        + ks * (ks - 1.0) / (2.0 * sigma * sigma)
    )
    return float(special.logsumexp(log_terms))


def _log_a_frac(q: float, sigma: float, alpha: float) -> float:
    # Two-series expansion around the crossover point of the mixture
    # densities; fractional binomial coefficients alternate sign, so the
    # accumulation tracks them with log_add/log_sub.
    log_a0, log_a1 = -math.inf, -math.inf
    z0 = sigma * sigma * math.log(1.0 / q - 1.0) + 0.5
    i = 0
    while True:
        coef = special.binom(alpha, i)
        log_coef = math.log(abs(coef)) if coef != 0.0 else -math.inf
        j = alpha - i
        log_t0 = log_coef + i * math.log(q) + j * math.log1p(-q)
        log_t1 = log_coef + j * math.log(q) + i * math.log1p(-q)
        log_e0 = math.log(0.5) + _log_erfc((i - z0) / (math.sqrt(2.0) * sigma))
        log_e1 = math.log(0.5) + _log_erfc((z0 - j) / (math.sqrt(2.0) * sigma))
        log_s0 = log_t0 + i * (i - 1.0) / (2.0 * sigma * sigma) + log_e0
        log_s1 = log_t1 + j * (j - 1.0) / (2.0 * sigma * sigma) + log_e1
        if coef > 0:
            log_a0 = _log_add(log_a0, log_s0)
            log_a1 = _log_add(log_a1, log_s1)
        else:
            log_a0 = _log_sub(log_a0, log_s0)
            log_a1 = _log_sub(log_a1, log_s1)
        i += 1
        if max(log_s0, log_s1) < -30.0 and i > alpha:
            break
    return _log_add(log_a0, log_a1)


def rdp_gaussian(alpha: float, sigma: float) -> float:
    """Renyi divergence of order alpha for the unsubsampled Gaussian."""
    if not alpha > 1.0:
        raise ValueError(f"order must exceed 1, got {alpha}")
    if sigma < 0.0:
        raise ValueError(f"sigma must be nonnegative, got {sigma}")
    if sigma == 0.0:
        return math.inf
    return alpha / (2.0 * sigma * sigma)


def rdp_subsampled(alpha: float, sigma: float, p: float) -> float:
    """Renyi divergence of the Poisson-subsampled Gaussian at rate p.

    p = 1 reduces exactly to the plain Gaussian value; p = 0 is a no-op
    mechanism with zero divergence.
    """
    if not alpha > 1.0:
        raise ValueError(f"order must exceed 1, got {alpha}")
    if not (0.0 <= p <= 1.0):
        raise ValueError(f"sampling rate must lie in [0, 1], got {p}")
    if sigma == 0.0:
        return math.inf
    if p == 0.0:
        return 0.0
    if p == 1.0:
        return rdp_gaussian(alpha, sigma)
    if float(alpha).is_integer():
        log_a = _log_a_int(p, sigma, int(alpha))
    else:
        log_a = _log_a_frac(p, sigma, alpha)
    return log_a / (alpha - 1.0)


def rdp_compose(rho_per_round: float, rounds: int) -> float:
    """Renyi divergences add over independent rounds."""
    if rounds < 0:
        raise ValueError("rounds must be nonnegative")
    return rho_per_round * rounds


@dataclasses.dataclass(frozen=True)
class RdpConversion:
    """One (eps, delta) conversion of a composed Renyi curve."""

    eps: float
    order: float
    variant: str  # "standard" or "improved"


def rdp_to_dp(
    rho, delta: float, orders=DEFAULT_ORDERS
) -> tuple[RdpConversion, RdpConversion]:
    """Best (eps, order) under both Renyi->DP conversions.

    rho is either a callable order -> composed divergence or a sequence
    aligned with orders. Two conversions are reported:

    standard: eps = rho(a) + ln(1/delta) / (a - 1)
    improved: eps = rho(a) + ln((a-1)/a) - (ln delta + ln a) / (a - 1)

    Each is minimized over the order grid and floored at zero.
    """
    if not (0.0 < delta < 1.0):
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    a = np.asarray(orders, dtype=np.float64)
    if a.size == 0:
        raise ValueError("order grid is empty")
    if np.any(a <= 1.0):
        raise ValueError("all orders must exceed 1")
    if callable(rho):
        rho = np.array([float(rho(x)) for x in a])
    else:
        rho = np.asarray(rho, dtype=np.float64)
        if rho.shape != a.shape:
            raise ValueError(
                f"rho sequence length {rho.size} does not match orders ({a.size})"
            )
    if np.any(rho < 0.0):
        raise ValueError("divergences must be nonnegative")
    eps_std = np.maximum(rho + math.log(1.0 / delta) / (a - 1.0), 0.0)
    eps_imp = np.maximum(
        rho + np.log((a - 1.0) / a) - (math.log(delta) + np.log(a)) / (a - 1.0), 0.0
    )
    i_std = int(np.argmin(eps_std))
    i_imp = int(np.argmin(eps_imp))
    return (
        RdpConversion(float(eps_std[i_std]), float(a[i_std]), "standard"),
        RdpConversion(float(eps_imp[i_imp]), float(a[i_imp]), "improved"),
    )


def rdp_epsilons(
    sigma: float,
    p: float,
    rounds: int,
    delta: float,
    orders=DEFAULT_ORDERS,
) -> tuple[RdpConversion, RdpConversion]:
    """rdp_to_dp for T composed rounds of the subsampled Gaussian."""
    _check_pt(p, rounds)
    if not (0.0 < delta < 1.0):
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if sigma == 0.0:
        return (
            RdpConversion(math.inf, math.nan, "standard"),
            RdpConversion(math.inf, math.nan, "improved"),
        )
    return rdp_to_dp(
        lambda a: rdp_compose(rdp_subsampled(a, sigma, p), rounds), delta, orders
    )


# ---------------------------------------------------------------------------
# report assembly


@dataclasses.dataclass(frozen=True)
class PrivacyParams:
    """One mechanism configuration as the accountant sees it.

    sample_rate (p), rounds (T), and delta always apply; the budget eps,
    the realized noise multiplier sigma, the clip bound, and the client
    counts (selected K out of population M) are carried when known so
    reports can echo the full configuration.
    """

    sample_rate: float
    rounds: int
    delta: float
    eps: float | None = None
    sigma: float | None = None
    clip: float | None = None
    clients: int | None = None
    population: int | None = None

    def __post_init__(self):
        _check_pt(self.sample_rate, self.rounds)
        if not (0.0 < self.delta < 1.0):
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if self.eps is not None and not self.eps > 0.0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.sigma is not None and self.sigma < 0.0:
            raise ValueError(f"sigma must be nonnegative, got {self.sigma}")
        if self.clip is not None and not self.clip > 0.0:
            raise ValueError(f"clip must be positive, got {self.clip}")
        if self.clients is not None and self.clients < 1:
            raise ValueError("clients must be >= 1")
        if self.population is not None:
            if self.population < 1:
                raise ValueError("population must be >= 1")
            if self.clients is not None and self.clients > self.population:
                raise ValueError("clients cannot exceed population")


@dataclasses.dataclass(frozen=True)
class AccountantRow:
    sigma: float
    gdp_eps: float
    rdp_eps_standard: float
    rdp_eps_improved: float
    rdp_order_standard: float
    rdp_order_improved: float

    @property
    def rdp_eps_best(self) -> float:
        return min(self.rdp_eps_standard, self.rdp_eps_improved)


@dataclasses.dataclass(frozen=True)
class TraceRow:
    sigma: float
    round: int
    cumulative_rdp_eps: float


@dataclasses.dataclass(frozen=True)
class AccountantReport:
    params: PrivacyParams
    rows: tuple[AccountantRow, ...]
    trace: tuple[TraceRow, ...]


def gdp_epsilon_total(sigma: float, params: PrivacyParams) -> float:
    """Cumulative GDP eps of the full composed run at one sigma."""
    mu = gdp_mu(sigma, params.sample_rate, params.rounds)
    if math.isinf(mu):
        return math.inf
    return gdp_epsilon(mu, params.delta)


def build_report(sigmas, params: PrivacyParams, orders=DEFAULT_ORDERS) -> AccountantReport:
    """Accountant table plus per-round RDP trace for a list of sigmas.

    Rows are sorted by ascending sigma; eps columns therefore descend.
    The trace holds, per sigma and round t, the cumulative RDP eps (the
    tighter of the two conversions) after t rounds.
    """
    sigmas = sorted(float(s) for s in sigmas)
    if any(s < 0.0 for s in sigmas):
        raise ValueError("sigmas must be nonnegative")
    rows = []
    trace = []
    for s in sigmas:
        std, imp = rdp_epsilons(s, params.sample_rate, params.rounds, params.delta, orders)
        rows.append(
            AccountantRow(
                sigma=s,
                gdp_eps=gdp_epsilon_total(s, params),
                rdp_eps_standard=std.eps,
                rdp_eps_improved=imp.eps,
                rdp_order_standard=std.order,
                rdp_order_improved=imp.order,
            )
        )
        if s == 0.0:
            for t in range(1, params.rounds + 1):
                trace.append(TraceRow(sigma=s, round=t, cumulative_rdp_eps=math.inf))
            continue
        a = np.asarray(orders, dtype=np.float64)
        rho1 = np.array([rdp_subsampled(x, s, params.sample_rate) for x in a])
        for t in range(1, params.rounds + 1):
            rho = t * rho1
            eps_std = np.maximum(rho + math.log(1.0 / params.delta) / (a - 1.0), 0.0)
            eps_imp = np.maximum(
                rho + np.log((a - 1.0) / a) - (math.log(params.delta) + np.log(a)) / (a - 1.0),
                0.0,
            )
            best = float(min(eps_std.min(), eps_imp.min()))
            trace.append(TraceRow(sigma=s, round=t, cumulative_rdp_eps=best))
    return AccountantReport(params=params, rows=tuple(rows), trace=tuple(trace))
