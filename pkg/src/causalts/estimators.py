"""Estimators with standard errors, plus analytic probability-limit oracles.

All estimators are pure functions of the realized dataset, so identical
inputs produce bitwise-identical reports.  Confidence intervals are
normal-approximation 95% intervals throughout.
"""
from __future__ import annotations

import csv
import functools
import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad

from . import dgp
from .core import (
    ApplicabilityError,
    LinearArLaw,
    LinearGeneralLaw,
    NumericalError,
    PathBundle,
    ScenarioError,
    ScenarioSpec,
    ShockNormal,
)
from .estimands import ENUMERATION_MAX_T
from .dgp import NoisePanel

Z95 = 1.959963984540054  # standard normal 97.5% point

PROPENSITY_FLOOR = 1e-6
DENSITY_FLOOR = 1e-8
DENOMINATOR_REL_FLOOR = 1e-8


@dataclass(frozen=True)
class EstimateReport:
    """Point estimate with normal-approximation interval and diagnostics."""

    estimator: str
    p: int
    point: float
    std_error: float
    ci_low: float
    ci_high: float
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.std_error < 0:
            raise NumericalError("negative standard error")
        if not self.ci_low <= self.point <= self.ci_high:
            raise NumericalError("confidence interval does not bracket the point estimate")


def _report(name: str, p: int, point: float, se: float, diagnostics: dict) -> EstimateReport:
    return EstimateReport(
        estimator=name,
        p=p,
        point=float(point),
        std_error=float(se),
        ci_low=float(point - Z95 * se),
        ci_high=float(point + Z95 * se),
        diagnostics=diagnostics,
    )


def write_reports_csv(reports, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["estimator", "p", "point", "se", "ci_low", "ci_high", "diag_json"])
        for r in reports:
            writer.writerow(
                [
                    r.estimator,
                    r.p,
                    f"{r.point:.17g}",
                    f"{r.std_error:.17g}",
                    f"{r.ci_low:.17g}",
                    f"{r.ci_high:.17g}",
                    json.dumps(r.diagnostics, sort_keys=True),
                ]
            )


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------

_KERNEL_CONSTANTS = {
    "gaussian": {"kappa2": 1.0, "b": 1.0 / (2.0 * math.sqrt(math.pi))},
    "epanechnikov": {"kappa2": 0.2, "b": 0.6},
}


def _kernel_fn(kind: str):
    if kind == "gaussian":
        return lambda u: np.exp(-0.5 * np.asarray(u) ** 2) / math.sqrt(2.0 * math.pi)
    return lambda u: np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - np.asarray(u) ** 2), 0.0)


@functools.lru_cache(maxsize=None)
def _verify_kernel(kind: str) -> None:
    k = _kernel_fn(kind)
    lo, hi = (-np.inf, np.inf) if kind == "gaussian" else (-1.0, 1.0)
    kappa0 = quad(lambda u: float(k(u)), lo, hi)[0]
    kappa1 = quad(lambda u: u * float(k(u)), lo, hi)[0]
    kappa2 = quad(lambda u: u * u * float(k(u)), lo, hi)[0]
    b = quad(lambda u: float(k(u)) ** 2, lo, hi)[0]
    ref = _KERNEL_CONSTANTS[kind]
    if abs(kappa0 - 1.0) > 1e-8 or abs(kappa1) > 1e-8:
        raise NumericalError(f"kernel {kind!r} fails the unit-mass/zero-mean check")
    if abs(kappa2 - ref["kappa2"]) > 1e-8 or abs(b - ref["b"]) > 1e-8:
        raise NumericalError(f"kernel {kind!r} constants disagree with quadrature")


@dataclass(frozen=True)
class KernelSpec:
    """Kernel kind, its moment constants and the bandwidth."""

    kind: str = "gaussian"
    h: float = 1.0

    def __post_init__(self):
        if self.kind not in _KERNEL_CONSTANTS:
            raise ScenarioError("kernel.kind", f"unknown kernel {self.kind!r}")
        if not self.h > 0:
            raise ScenarioError("kernel.h", "bandwidth must be > 0")
        _verify_kernel(self.kind)

    @property
    def kappa2(self) -> float:
        return _KERNEL_CONSTANTS[self.kind]["kappa2"]

    @property
    def b(self) -> float:
        return _KERNEL_CONSTANTS[self.kind]["b"]

    def k(self, u):
        return _kernel_fn(self.kind)(u)

    def k_h(self, u):
        return self.k(np.asarray(u) / self.h) / self.h

    def kstar(self, x: float) -> float:
        """Overlap integral of the kernel with an x-shifted copy of itself."""
        k = _kernel_fn(self.kind)
        if self.kind == "epanechnikov" and abs(x) >= 2.0:
            return 0.0
        lo, hi = (-np.inf, np.inf) if self.kind == "gaussian" else (-1.0, 1.0)
        return quad(lambda u: float(k(u)) * float(k(x + u)), lo, hi)[0]


def bandwidth_rule(T: int, p: int, c: float) -> float:
    """h = c * (T - p)^(-1/5), the squared-error-optimal decay rate."""
    if T <= p:
        raise ScenarioError("T", "need T > p")
    if not c > 0:
        raise ScenarioError("c", "need c > 0")
    return c * float(T - p) ** (-0.2)


def silverman_c(w: np.ndarray) -> float:
    """Default bandwidth constant 1.06 * sd of the regressor."""
    sd = float(np.std(np.asarray(w, dtype=float)))
    if sd == 0.0:
        raise NumericalError("degenerate regressor: zero variance, no bandwidth scale")
    return 1.06 * sd


# ---------------------------------------------------------------------------
# Inverse-propensity estimator for discrete treatments
# ---------------------------------------------------------------------------


def _check_lag(bundle: PathBundle, p: int) -> None:
    if not 0 <= p < bundle.horizon:
        raise ScenarioError("p", "need 0 <= p < length of the series")


def ht_lagp(
    bundle: PathBundle,
    p: int,
    w: float,
    wprime: float,
    propensity_floor: float = PROPENSITY_FLOOR,
) -> EstimateReport:
    """Inverse-propensity weighted contrast of outcomes on the lagged treatment.

    Per-period terms are martingale differences around the per-period weighted
    effect, so the standard error comes from their empirical variance.  It is
    conservative when the per-period effects move over time.
    """
    _check_lag(bundle, p)
    support = np.unique(bundle.w)
    if support.size > 8:
        raise ApplicabilityError(
            "inverse-propensity weighting needs a discrete treatment; "
            f"found {support.size} distinct values"
        )
    T = bundle.horizon
    w_lag = bundle.w[: T - p]
    props = bundle.propensity[: T - p]
    below = props < propensity_floor
    if np.any(below):
        raise NumericalError(
            f"{int(below.sum())} recorded propensities below the {propensity_floor:g} floor; "
            "overlap requires strictly positive assignment probabilities"
        )
    indic = (w_lag == w).astype(float) - (w_lag == wprime).astype(float)
    terms = bundle.y[p:] * indic / props
    n = T - p
    point = float(terms.mean())
    se = float(np.std(terms, ddof=1) / math.sqrt(n)) if n >= 2 else 0.0
    return _report(
        "ht",
        p,
        point,
        se,
        {
            "effective_sample_size": int(np.count_nonzero(indic)),
            "propensity_floor_trips": 0,
            "propensity_floor": propensity_floor,
            "n": n,
        },
    )


def ht_terms(bundle: PathBundle, p: int, w: float, wprime: float) -> np.ndarray:
    """Per-period inverse-propensity terms, t = p+1..T."""
    T = bundle.horizon
    w_lag = bundle.w[: T - p]
    indic = (w_lag == w).astype(float) - (w_lag == wprime).astype(float)
    return bundle.y[p:] * indic / bundle.propensity[: T - p]


@dataclass(frozen=True, eq=False)
class HtVarianceOracle:
    """Exact conditional-variance decomposition for the weighting estimator."""

    p: int
    per_t: np.ndarray  # E over prefixes of the per-period conditional variance
    eta_bar: float
    error_variance: float  # of the averaged estimator around the realized target


def ht_variance_oracle(
    spec: ScenarioSpec, panel: NoisePanel, p: int, w: float, wprime: float
) -> HtVarianceOracle:
    """Evaluate the per-period conditional second-moment formula exactly.

    For each period the conditional variance of the weighting term is the sum
    of the two inverse-propensity-weighted conditional second moments minus
    the squared weighted effect, all given the pre-period history and the
    fixed potential outcomes; prefix histories are integrated out by
    enumeration.
    """
    if not spec.discrete_treatment:
        raise ApplicabilityError("variance oracle requires a binary mechanism")
    T = spec.horizon
    if T > ENUMERATION_MAX_T:
        raise ApplicabilityError(f"enumeration cost guard: horizon {T} > {ENUMERATION_MAX_T}")
    if not 0 <= p < T:
        raise ScenarioError("p", "need 0 <= p < horizon")

    def conditional_moments(w_hist: np.ndarray, t: int, value: float):
        """(mean, second moment) of Y_t given W_{t-p} = value and the prefix."""
        mean = 0.0
        second = 0.0
        for cont in itertools.product((0.0, 1.0), repeat=p):
            path = np.concatenate([w_hist, [value], cont])
            y = dgp.replay_outcome(spec, panel, path)
            prob = 1.0
            for s in range(t - p + 1, t + 1):
                y_prev = y[s - 2] if s >= 2 else panel.y0
                w_prev = path[s - 2] if s >= 2 else panel.w0
                prob *= dgp.propensity(spec, s, y_prev, w_prev, path[s - 1])
            mean += prob * y[t - 1]
            second += prob * y[t - 1] ** 2
        return mean, second

    per_t = np.empty(T - p)
    for t in range(p + 1, T + 1):
        k = t - p - 1  # prefix length
        total = 0.0
        for bits in itertools.product((0.0, 1.0), repeat=k):
            w_hist = np.array(bits)
            y_hist = dgp.replay_outcome(spec, panel, w_hist) if k else np.empty(0)
            prefix_prob = 1.0
            for s in range(1, k + 1):
                y_prev = y_hist[s - 2] if s >= 2 else panel.y0
                w_prev = w_hist[s - 2] if s >= 2 else panel.w0
                prefix_prob *= dgp.propensity(spec, s, y_prev, w_prev, w_hist[s - 1])
            y_prev = y_hist[k - 1] if k else panel.y0
            w_prev = w_hist[k - 1] if k else panel.w0
            p_w = dgp.propensity(spec, t - p, y_prev, w_prev, w)
            p_wp = dgp.propensity(spec, t - p, y_prev, w_prev, wprime)
            mean_w, m2_w = conditional_moments(w_hist, t, w)
            mean_wp, m2_wp = conditional_moments(w_hist, t, wprime)
            tau = mean_w - mean_wp
            eta2 = m2_w / p_w + m2_wp / p_wp - tau**2
            total += prefix_prob * eta2
        per_t[t - p - 1] = total
    eta_bar = float(per_t.mean())
    return HtVarianceOracle(p=p, per_t=per_t, eta_bar=eta_bar, error_variance=eta_bar / (T - p))


# ---------------------------------------------------------------------------
# Kernel regression estimators for continuous treatments
# ---------------------------------------------------------------------------


def _require_continuous(bundle: PathBundle) -> None:
    vals = np.unique(bundle.w)
    if vals.size <= 2 and np.all(np.isin(vals, (0.0, 1.0))):
        raise ApplicabilityError("kernel regression requires a continuous treatment")


def _default_kernel(bundle: PathBundle, p: int, kernel: KernelSpec | None) -> KernelSpec:
    if kernel is not None:
        return kernel
    c = silverman_c(bundle.w[: bundle.horizon - p])
    return KernelSpec(kind="gaussian", h=bandwidth_rule(bundle.horizon, p, c))


def kernel_terms(
    bundle: PathBundle,
    p: int,
    point: float,
    kernel: KernelSpec,
    density: np.ndarray | None = None,
):
    """Per-period kernel-weighted terms of the regression at `point`."""
    T = bundle.horizon
    f = bundle.propensity[: T - p] if density is None else np.asarray(density)[: T - p]
    w_lag = bundle.w[: T - p]
    return bundle.y[p:] * kernel.k_h(w_lag - point) / f


def kernel_lagp(
    bundle: PathBundle,
    p: int,
    w: float,
    wprime: float,
    kernel: KernelSpec | None = None,
    density: np.ndarray | None = None,
    density_floor: float = DENSITY_FLOOR,
) -> EstimateReport:
    """Known-density kernel contrast of outcomes on the lagged treatment.

    The assignment density defaults to the bundle's recorded values (exact
    from the data-generating process); terms whose density falls below the
    floor are flagged, counted and dropped.
    """
    _check_lag(bundle, p)
    _require_continuous(bundle)
    kernel = _default_kernel(bundle, p, kernel)
    T = bundle.horizon
    f = bundle.propensity[: T - p] if density is None else np.asarray(density, dtype=float)[: T - p]
    mask = f > density_floor
    trips = int((~mask).sum())
    if trips == T - p:
        raise NumericalError("every term fell below the density floor; no usable sample")
    w_lag = bundle.w[: T - p]
    y_t = bundle.y[p:]
    g_w = y_t[mask] * kernel.k_h(w_lag[mask] - w) / f[mask]
    g_wp = y_t[mask] * kernel.k_h(w_lag[mask] - wprime) / f[mask]
    diffs = g_w - g_wp
    n = int(mask.sum())
    point = float(diffs.mean())
    se = float(np.std(diffs, ddof=1) / math.sqrt(n)) if n >= 2 else 0.0
    return _report(
        "kernel",
        p,
        point,
        se,
        {
            "bandwidth": kernel.h,
            "kernel": kernel.kind,
            "density_source": "oracle" if density is None else "supplied",
            "density_floor_trips": trips,
            "n": n,
        },
    )


def kernel_irf(
    bundle: PathBundle,
    p: int,
    w: float,
    wprime: float,
    kernel: KernelSpec | None = None,
    min_effective_mass: float = 4.0,
) -> EstimateReport:
    """Smoothed-mean contrast of the outcome on the lagged treatment.

    The density is estimated from the same sample (the local weight total),
    not taken from an oracle; the standard error is the plug-in asymptotic
    local-variance formula.
    """
    _check_lag(bundle, p)
    _require_continuous(bundle)
    kernel = _default_kernel(bundle, p, kernel)
    T = bundle.horizon
    w_lag = bundle.w[: T - p]
    y_t = bundle.y[p:]
    n = T - p

    def local(point: float):
        ku = kernel.k((w_lag - point) / kernel.h)
        mass = float(ku.sum() / kernel.k(0.0))
        if mass < min_effective_mass:
            raise NumericalError(
                f"empty effective sample near {point:g}: kernel mass {mass:.3g} "
                f"below {min_effective_mass:g}"
            )
        ghat = float(np.sum(ku * y_t) / ku.sum())
        m2 = float(np.sum(ku * y_t**2) / ku.sum())
        fhat = float(ku.sum() / (n * kernel.h))
        var = kernel.b * max(m2 - ghat**2, 0.0) / (n * kernel.h * fhat)
        return ghat, var, mass

    g_w, v_w, mass_w = local(w)
    g_wp, v_wp, mass_wp = local(wprime)
    point = g_w - g_wp
    se = math.sqrt(v_w + v_wp)
    return _report(
        "kernel-irf",
        p,
        point,
        se,
        {
            "bandwidth": kernel.h,
            "kernel": kernel.kind,
            "density_source": "sample",
            "effective_mass_w": mass_w,
            "effective_mass_wprime": mass_wp,
            "n": n,
        },
    )


# ---------------------------------------------------------------------------
# Local projections
# ---------------------------------------------------------------------------


def _bartlett_hac(scores: np.ndarray, lags: int) -> float:
    """Long-run variance of the score sum with Bartlett weights."""
    total = float(np.dot(scores, scores))
    n = scores.shape[0]
    for k in range(1, min(lags, n - 1) + 1):
        weight = 1.0 - k / (lags + 1.0)
        total += 2.0 * weight * float(np.dot(scores[k:], scores[:-k]))
    return max(total, 0.0)


def lp_ols(
    bundle: PathBundle,
    p: int,
    demean: bool = False,
    nw_lags: int | None = None,
) -> EstimateReport:
    """No-intercept projection of the outcome on the lagged treatment.

    Suited to mean-zero shock treatments; `demean` subtracts sample means
    first for non-shock use.  Standard errors are heteroskedasticity-robust
    with Bartlett truncation at lag p: the skipped intermediate lags drive
    the score's serial dependence horizon.
    """
    _check_lag(bundle, p)
    T = bundle.horizon
    y_t = bundle.y[p:].copy()
    x = bundle.w[: T - p].copy()
    if demean:
        y_t -= y_t.mean()
        x -= x.mean()
    den = float(np.dot(x, x))
    if den == 0.0:
        raise NumericalError("zero regressor moment: no treatment variation at this lag")
    point = float(np.dot(y_t, x) / den)
    scores = x * (y_t - point * x)
    lags = p if nw_lags is None else nw_lags
    se = math.sqrt(_bartlett_hac(scores, lags)) / den
    return _report(
        "lp-ols",
        p,
        point,
        se,
        {"denominator": den, "nw_lags": lags, "demeaned": demean, "n": T - p},
    )


def lp_iv(
    bundle: PathBundle,
    p: int,
    nw_lags: int | None = None,
    denominator_rel_floor: float = DENOMINATOR_REL_FLOOR,
) -> EstimateReport:
    """Instrumented ratio of outcome projections on the lagged instrument.

    At p = 0 the numerator and denominator coincide, so the estimate is
    exactly one.  The denominator is guarded by a relative floor against
    weak-instrument blowups; its magnitude is always reported.
    """
    if bundle.what is None:
        raise ApplicabilityError("no instrument column in this dataset")
    _check_lag(bundle, p)
    T = bundle.horizon
    z = bundle.what[: T - p]
    # same reduction for both sums so the p = 0 identity is bitwise exact
    num = float((bundle.y[p:] * z).sum())
    den_terms = bundle.y[: T - p] * z
    den = float(den_terms.sum())
    scale = float(np.abs(den_terms).sum())
    if scale == 0.0 or abs(den) < denominator_rel_floor * scale:
        raise NumericalError(
            f"weak denominator: |{den:.6g}| below {denominator_rel_floor:g} of "
            f"the term magnitude {scale:.6g}"
        )
    point = num / den
    scores = (bundle.y[p:] - point * bundle.y[: T - p]) * z
    lags = p if nw_lags is None else nw_lags
    se = math.sqrt(_bartlett_hac(scores, lags)) / abs(den)
    return _report(
        "lp-iv",
        p,
        point,
        se,
        {"denominator": den, "denominator_scale": scale, "nw_lags": lags, "n": T - p},
    )


@dataclass(frozen=True, eq=False)
class IvPlimTarget:
    """Probability limit of the instrumented projection ratio."""

    p: int
    value: float
    beta_gamma_p: float
    beta_gamma_0: float
    beta_prime_p: float
    weights: np.ndarray  # per-period treatment/instrument cross moments
    mixed_sign_weights: bool
    monotonicity_warning: bool


def lp_iv_plim_oracle(spec: ScenarioSpec, p: int) -> IvPlimTarget:
    """Closed-form target of the instrumented ratio, valid or contaminated.

    With contamination weight zero this is the ratio of cross-moment-weighted
    lag coefficients; a nonzero weight adds the instrument's loading on
    future outcome-noise innovations to the numerator.  Mixed-sign cross
    moments are flagged: they break the weighted-average interpretation.
    """
    if spec.instrument is None:
        raise ApplicabilityError("scenario has no instrument block")
    if not isinstance(spec.mechanism, ShockNormal):
        raise ApplicabilityError("the closed form requires a shock treatment mechanism")
    if p < 0:
        raise ScenarioError("p", "need p >= 0")
    T = spec.horizon
    ts = np.arange(p + 1, T + 1)
    cross = np.asarray(spec.alpha1_at(ts - p), dtype=float) * np.asarray(
        spec.sigma_eta_at(ts - p), dtype=float
    ) ** 2
    betas_p = np.array([spec.beta_coefficient(int(t), p) for t in ts])
    beta_gamma_p = float(np.mean(betas_p * cross))
    ts0 = np.arange(1, T + 1)
    cross0 = np.asarray(spec.alpha1_at(ts0), dtype=float) * np.asarray(
        spec.sigma_eta_at(ts0), dtype=float
    ) ** 2
    betas_0 = np.array([spec.beta_coefficient(int(t), 0) for t in ts0])
    beta_gamma_0 = float(np.mean(betas_0 * cross0))
    if beta_gamma_0 == 0.0:
        raise NumericalError("zero lag-0 cross moment: the ratio target is undefined")

    beta_prime = 0.0
    lam = spec.instrument.lam
    if lam != 0.0 and p >= 1:
        law = spec.coefficients
        if isinstance(law, LinearArLaw):
            phi_u, sigma = law.phi, law.sigma_eps
        elif isinstance(law, LinearGeneralLaw) and law.u.kind == "ar1":
            phi_u, sigma = law.u.phi_u, law.u.sigma
        elif isinstance(law, LinearGeneralLaw) and law.u.kind == "iid-normal":
            phi_u, sigma = 0.0, law.u.sigma
        else:
            raise ApplicabilityError(
                "contaminated target needs an autoregressive outcome-noise channel"
            )
        beta_prime = lam * phi_u**p * sigma**2
    mixed = bool(np.any(cross > 0) and np.any(cross < 0))
    return IvPlimTarget(
        p=p,
        value=(beta_gamma_p + beta_prime) / beta_gamma_0,
        beta_gamma_p=beta_gamma_p,
        beta_gamma_0=beta_gamma_0,
        beta_prime_p=beta_prime,
        weights=cross,
        mixed_sign_weights=mixed,
        monotonicity_warning=mixed,
    )
