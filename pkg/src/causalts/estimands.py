"""Ground-truth causal quantities: exact enumeration, closed forms, Monte Carlo.

Every Monte Carlo estimand runs both treatment-value arms on common random
numbers, so the variance of the difference collapses and identical arms
return exactly zero.  Reported Monte Carlo error is the standard deviation
of per-draw differences divided by sqrt(draws).
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, replace

import numpy as np

from . import dgp
from .core import (
    ApplicabilityError,
    BernoulliIid,
    DEFAULT_MASTER_SEED,
    LinearArLaw,
    LinearGeneralLaw,
    NumericalError,
    PathBundle,
    PolicyRule,
    ScenarioError,
    ScenarioSpec,
    ShockNormal,
    derive_streams,
)
from .dgp import NoisePanel

LABELS = (
    "tau",
    "tau_star",
    "crf",
    "avg_tau_star",
    "avg_crf",
    "irf",
    "beta_l",
    "beta_u",
    "beta_u_star",
    "beta_iv",
)

METHODS = ("exact-enumeration", "analytic", "monte-carlo")

ENUMERATION_MAX_T = 12


@dataclass(frozen=True)
class EstimandValue:
    """A ground-truth causal quantity and how it was computed."""

    label: str
    value: float
    method: str
    mc_draws: int = 0
    mc_standard_error: float = 0.0
    t: int | None = None
    p: int | None = None
    w: float | None = None
    wprime: float | None = None

    def __post_init__(self):
        if self.label not in LABELS:
            raise ScenarioError("label", f"unknown estimand label {self.label!r}")
        if self.method not in METHODS:
            raise ScenarioError("method", f"unknown method {self.method!r}")
        if self.method != "monte-carlo" and (self.mc_draws or self.mc_standard_error):
            raise ScenarioError("method", "non-MC estimands carry no MC draws or error")
        if self.method == "monte-carlo" and self.mc_draws < 1:
            raise ScenarioError("mc_draws", "monte-carlo estimands need draws >= 1")


def write_estimands_csv(values, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "t", "p", "w", "wprime", "value", "method", "mc_draws", "mc_se"])
        for ev in values:
            writer.writerow(
                [
                    ev.label,
                    "" if ev.t is None else ev.t,
                    "" if ev.p is None else ev.p,
                    "" if ev.w is None else f"{ev.w:.17g}",
                    "" if ev.wprime is None else f"{ev.wprime:.17g}",
                    f"{ev.value:.17g}",
                    ev.method,
                    ev.mc_draws,
                    f"{ev.mc_standard_error:.17g}",
                ]
            )


def _child_rng(rng: np.random.Generator, k: int) -> np.random.Generator:
    """Far-separated substream of a PCG64-backed generator."""
    return np.random.Generator(rng.bit_generator.jumped(k + 1))


def _mc_se(diffs: np.ndarray) -> float:
    if diffs.shape[0] < 2:
        return 0.0
    return float(np.std(diffs, ddof=1) / np.sqrt(diffs.shape[0]))


# ---------------------------------------------------------------------------
# Lag-p effects by direct replay
# ---------------------------------------------------------------------------


def lag_p_effect(
    spec: ScenarioSpec,
    panel: NoisePanel,
    bundle: PathBundle,
    t: int,
    p: int,
    w: float,
    wprime: float,
    continuation=None,
    continuation_prime=None,
) -> EstimandValue:
    """Replay difference for switching the time t-p treatment from w' to w.

    Continuations default to the observed treatments on (t-p, t]; given
    explicitly they must have length p.  Exact given the panel.
    """
    if not 0 <= p < t <= spec.horizon:
        raise ScenarioError("p", "need 0 <= p < t <= horizon")
    observed = bundle.w[t - p : t]
    for name, cont in (("continuation", continuation), ("continuation_prime", continuation_prime)):
        if cont is not None and len(cont) != p:
            raise ScenarioError(name, f"continuation must have length p = {p}")
    cont_a = observed if continuation is None else np.asarray(continuation, dtype=float)
    cont_b = observed if continuation_prime is None else np.asarray(continuation_prime, dtype=float)
    prefix = bundle.w[: t - p - 1]
    path_a = np.concatenate([prefix, [w], cont_a])
    path_b = np.concatenate([prefix, [wprime], cont_b])
    ya = dgp.replay_outcome(spec, panel, path_a)[t - 1]
    yb = dgp.replay_outcome(spec, panel, path_b)[t - 1]
    return EstimandValue(
        label="tau", value=float(ya - yb), method="exact-enumeration", t=t, p=p, w=w, wprime=wprime
    )


# ---------------------------------------------------------------------------
# Weighted causal effects (finite sample, outcome noise fixed)
# ---------------------------------------------------------------------------


def _exact_weighted_effect(
    spec: ScenarioSpec, panel: NoisePanel, w_hist: np.ndarray, t: int, p: int, w: float, wprime: float
) -> float:
    """Exact forward-treatment expectation by continuation enumeration.

    Fixing the potential outcomes means the assignment mechanism runs along
    the counterfactual outcome path, which replay supplies step by step.
    """
    if not spec.discrete_treatment:
        raise ApplicabilityError("exact mode requires a discrete treatment mechanism")
    if p > ENUMERATION_MAX_T:
        raise ApplicabilityError(f"exact continuation enumeration capped at p <= {ENUMERATION_MAX_T}")

    def arm(value: float) -> float:
        total = 0.0
        for cont in itertools.product((0.0, 1.0), repeat=p):
            path = np.concatenate([w_hist, [value], cont])
            y = dgp.replay_outcome(spec, panel, path)
            prob = 1.0
            for s in range(t - p + 1, t + 1):  # continuation steps only
                y_prev = y[s - 2] if s >= 2 else panel.y0
                w_prev = path[s - 2] if s >= 2 else panel.w0
                prob *= dgp.propensity(spec, s, y_prev, w_prev, path[s - 1])
            total += prob * y[t - 1]
        return total

    return arm(w) - arm(wprime)


def weighted_effect(
    spec: ScenarioSpec,
    panel: NoisePanel,
    bundle: PathBundle,
    t: int,
    p: int,
    w: float,
    wprime: float,
    draws: int = 10_000,
    method: str = "auto",
    rng: np.random.Generator | None = None,
) -> EstimandValue:
    """Mean outcome gap under forward treatment draws, potential outcomes fixed.

    Forward treatments after t-p are drawn fresh from the mechanism while the
    panel's outcome-side noise stays fixed.  `method` is "exact" (continuation
    enumeration, discrete mechanisms), "mc", or "auto".
    """
    if not 0 <= p < t <= spec.horizon:
        raise ScenarioError("p", "need 0 <= p < t <= horizon")
    if method not in ("auto", "exact", "mc"):
        raise ScenarioError("method", f"unknown method {method!r}")
    if p == 0:
        # No forward draws: the effect is a pure replay difference.
        ev = lag_p_effect(spec, panel, bundle, t, p, w, wprime)
        return replace(ev, label="tau_star")
    if method == "exact" or (method == "auto" and spec.discrete_treatment):
        value = _exact_weighted_effect(spec, panel, bundle.w[: t - p - 1], t, p, w, wprime)
        return EstimandValue(
            label="tau_star", value=value, method="exact-enumeration", t=t, p=p, w=w, wprime=wprime
        )
    if draws < 1:
        raise ScenarioError("draws", "need draws >= 1")
    if rng is None:
        rng = dgp.counterfactual_rng(panel)
    arms = dgp.paired_forward(
        spec, panel, bundle, t - p, t, (w, wprime), mode="weighted", rng=rng, draws=draws
    )
    diffs = arms[0][1][:, -1] - arms[1][1][:, -1]
    return EstimandValue(
        label="tau_star",
        value=float(diffs.mean()),
        method="monte-carlo",
        mc_draws=draws,
        mc_standard_error=_mc_se(diffs),
        t=t,
        p=p,
        w=w,
        wprime=wprime,
    )


# ---------------------------------------------------------------------------
# Causal response function (superpopulation, outcome noise redrawn)
# ---------------------------------------------------------------------------


def _stationary_history_states(
    spec: ScenarioSpec, burn_in: int, p: int, draws: int, master_seed: int, replication_id: int
):
    """Burn-in forward simulation of `draws` histories; returns state at burn_in."""
    spec_sim = replace(spec, horizon=burn_in + p + 1)
    streams = derive_streams(master_seed, replication_id)
    raw = dgp.draw_noise_arrays(spec_sim, streams, draws)
    if burn_in == 0:
        lag = spec.coefficients.lag_cutoff if isinstance(spec.coefficients, LinearGeneralLaw) else 0
        state = dgp.ForwardState(
            y_prev=np.zeros(draws), w_prev=np.zeros(draws),
            wtail=np.zeros((draws, lag)) if lag else None,
        )
        return spec_sim, streams, state, np.zeros(draws) if raw["u_path"] is None else raw["u0"]
    w_hist, y_hist = dgp.simulate_paths(spec_sim, raw)
    if isinstance(spec.coefficients, LinearGeneralLaw):
        lag = spec.coefficients.lag_cutoff
        tail = np.zeros((draws, lag))
        if lag:
            take = min(lag, burn_in)
            tail[:, lag - take :] = w_hist[:, burn_in - take : burn_in]
    else:
        tail = None
    state = dgp.ForwardState(
        y_prev=y_hist[:, burn_in - 1], w_prev=w_hist[:, burn_in - 1], wtail=tail
    )
    u_prev = raw["u_path"][:, burn_in - 1] if raw["u_path"] is not None else np.zeros(draws)
    return spec_sim, streams, state, u_prev


def crf(
    spec: ScenarioSpec,
    history,
    t: int,
    p: int,
    w: float,
    wprime: float,
    draws: int = 10_000,
    rng: np.random.Generator | None = None,
    master_seed: int = DEFAULT_MASTER_SEED,
    replication_id: int = 0,
) -> EstimandValue:
    """Conditional-mean outcome gap given the time t-p treatment value.

    `history` is either a (panel, bundle) pair fixing the realized past
    through t-p-1, or the directive "stationary", which draws histories from
    the burn-in forward law.  Outcome noise on [t-p, t] is redrawn each draw.
    """
    if draws < 100:
        raise ScenarioError("draws", "need draws >= 100: Monte Carlo error dominates below that")
    if not 0 <= p < t <= spec.horizon:
        raise ScenarioError("p", "need 0 <= p < t <= horizon")
    if history == "stationary":
        _validate_stationary(spec)
        spec_sim, streams, state, u_prev = _stationary_history_states(
            spec, spec.burn_in, p, draws, master_seed, replication_id
        )
        t0 = spec_sim.horizon - p
        if rng is None:
            rng = streams["counterfactual"].generator()
        noise = dgp.make_forward_noise(spec_sim, t0, spec_sim.horizon, draws, "crf", rng, u_prev=u_prev)
        wa, ya = dgp.forward_engine(spec_sim, t0, spec_sim.horizon, state, noise, w)
        wb, yb = dgp.forward_engine(spec_sim, t0, spec_sim.horizon, state, noise, wprime)
        diffs = ya[:, -1] - yb[:, -1]
    else:
        panel, bundle = history
        if rng is None:
            rng = dgp.counterfactual_rng(panel)
        arms = dgp.paired_forward(
            spec, panel, bundle, t - p, t, (w, wprime), mode="crf", rng=rng, draws=draws
        )
        diffs = arms[0][1][:, -1] - arms[1][1][:, -1]
    return EstimandValue(
        label="crf",
        value=float(diffs.mean()),
        method="monte-carlo",
        mc_draws=draws,
        mc_standard_error=_mc_se(diffs),
        t=t,
        p=p,
        w=w,
        wprime=wprime,
    )


def companion_matrix(spec: ScenarioSpec) -> np.ndarray:
    """State-transition matrix of the joint (outcome, treatment) recursion."""
    law = spec.coefficients
    if not isinstance(law, LinearArLaw):
        raise ApplicabilityError("companion form requires the autoregressive outcome law")
    mech = spec.mechanism
    if isinstance(mech, PolicyRule):
        theta, delta = mech.theta, mech.delta
    elif isinstance(mech, ShockNormal):
        theta, delta = 0.0, 0.0
    else:
        raise ApplicabilityError("companion form requires a Gaussian treatment mechanism")
    return np.array(
        [[law.phi + law.beta0 * delta, law.beta0 * theta], [delta, theta]]
    )


def crf_linear_gaussian(spec: ScenarioSpec, p: int, w: float, wprime: float) -> EstimandValue:
    """Closed-form response for the linear-Gaussian system.

    The treatment intervention moves the state by (beta0, 1)·(w - w'), and p
    steps of the joint recursion propagate it into the outcome coordinate.
    """
    if spec.rho != 0.0:
        raise ApplicabilityError("closed form requires uncorrelated innovations (rho = 0)")
    if p < 0:
        raise ScenarioError("p", "need p >= 0")
    a = companion_matrix(spec)
    radius = max(abs(np.linalg.eigvals(a)))
    if radius >= 1.0:
        raise NumericalError(f"explosive system: spectral radius {radius:.6g} >= 1")
    law = spec.coefficients
    impulse = np.linalg.matrix_power(a, p) @ np.array([law.beta0, 1.0])
    return EstimandValue(
        label="crf", value=float((w - wprime) * impulse[0]), method="analytic", p=p, w=w, wprime=wprime
    )


# ---------------------------------------------------------------------------
# Temporal averages
# ---------------------------------------------------------------------------


def _average(values: list[EstimandValue], label: str, p: int, w: float, wprime: float) -> EstimandValue:
    vals = np.array([v.value for v in values])
    ses = np.array([v.mc_standard_error for v in values])
    all_exact = all(v.method == "exact-enumeration" for v in values)
    n = len(values)
    if all_exact:
        return EstimandValue(
            label=label, value=float(vals.mean()), method="exact-enumeration", p=p, w=w, wprime=wprime
        )
    return EstimandValue(
        label=label,
        value=float(vals.mean()),
        method="monte-carlo",
        mc_draws=int(sum(v.mc_draws for v in values)) or 1,
        mc_standard_error=float(np.sqrt(np.sum(ses**2)) / n),
        p=p,
        w=w,
        wprime=wprime,
    )


def avg_weighted_effect(
    spec: ScenarioSpec,
    panel: NoisePanel,
    bundle: PathBundle,
    p: int,
    w: float,
    wprime: float,
    draws: int = 2_000,
    method: str = "auto",
    rng: np.random.Generator | None = None,
) -> EstimandValue:
    """Per-period weighted effects averaged over t = p+1..T.

    Monte Carlo errors combine as independent across t; each period uses its
    own far-separated substream.
    """
    if p >= spec.horizon:
        raise ScenarioError("p", "need p < horizon")
    if rng is None:
        rng = dgp.counterfactual_rng(panel)
    values = [
        weighted_effect(
            spec, panel, bundle, t, p, w, wprime, draws=draws, method=method, rng=_child_rng(rng, t)
        )
        for t in range(p + 1, spec.horizon + 1)
    ]
    return _average(values, "avg_tau_star", p, w, wprime)


def avg_crf(
    spec: ScenarioSpec,
    panel: NoisePanel,
    bundle: PathBundle,
    p: int,
    w: float,
    wprime: float,
    draws: int = 2_000,
    rng: np.random.Generator | None = None,
) -> EstimandValue:
    if p >= spec.horizon:
        raise ScenarioError("p", "need p < horizon")
    if rng is None:
        rng = dgp.counterfactual_rng(panel)
    values = [
        crf(spec, (panel, bundle), t, p, w, wprime, draws=draws, rng=_child_rng(rng, t))
        for t in range(p + 1, spec.horizon + 1)
    ]
    return _average(values, "avg_crf", p, w, wprime)


# ---------------------------------------------------------------------------
# Impulse responses under stationarity
# ---------------------------------------------------------------------------


def _validate_stationary(spec: ScenarioSpec) -> None:
    law = spec.coefficients
    if isinstance(law, LinearArLaw):
        if isinstance(spec.mechanism, (PolicyRule, ShockNormal)):
            radius = max(abs(np.linalg.eigvals(companion_matrix(spec))))
            if radius >= 1.0:
                raise NumericalError(f"explosive system: spectral radius {radius:.6g} >= 1")
        elif abs(law.phi) >= 1.0:
            raise NumericalError(f"explosive outcome recursion: |phi| = {abs(law.phi):.6g} >= 1")
    else:
        if law.u.kind == "random-walk":
            raise ApplicabilityError(
                "random-walk outcome noise is non-stationary; stationary-regime "
                "estimands are undefined for it"
            )
        if law.beta_table is not None:
            raise ApplicabilityError("per-period coefficient tables are not stationary")
        if isinstance(spec.mechanism, PolicyRule):
            raise ApplicabilityError(
                "stationarity validation for policy feedback is only available "
                "with the autoregressive outcome law"
            )
    if isinstance(spec.mechanism, ShockNormal) and spec.mechanism.sigma_eta_late is not None:
        raise ApplicabilityError("time-varying treatment scale is not stationary")


def irf_mc(
    spec: ScenarioSpec,
    p: int,
    w: float,
    wprime: float,
    draws: int = 20_000,
    burn_in: int | None = None,
    master_seed: int = DEFAULT_MASTER_SEED,
    replication_id: int = 0,
) -> EstimandValue:
    """Stationary impulse response by history-averaged conditional response.

    Draws stationary histories by burn-in forward simulation, then runs both
    arms forward on common random numbers (one fresh window per history);
    averaging the per-history differences estimates the expected conditional
    response, which equals the impulse response under stationarity.
    """
    _validate_stationary(spec)
    if p < 0:
        raise ScenarioError("p", "need p >= 0")
    if draws < 100:
        raise ScenarioError("draws", "need draws >= 100")
    burn = spec.burn_in if burn_in is None else burn_in
    spec_sim, streams, state, u_prev = _stationary_history_states(
        spec, burn, p, draws, master_seed, replication_id
    )
    t0 = burn + 1
    t_end = burn + p + 1
    rng = streams["counterfactual"].generator()
    noise = dgp.make_forward_noise(spec_sim, t0, t_end, draws, "crf", rng, u_prev=u_prev)
    _, ya = dgp.forward_engine(spec_sim, t0, t_end, state, noise, w)
    _, yb = dgp.forward_engine(spec_sim, t0, t_end, state, noise, wprime)
    diffs = ya[:, -1] - yb[:, -1]
    return EstimandValue(
        label="irf",
        value=float(diffs.mean()),
        method="monte-carlo",
        mc_draws=draws,
        mc_standard_error=_mc_se(diffs),
        p=p,
        w=w,
        wprime=wprime,
    )


# ---------------------------------------------------------------------------
# Projection coefficients
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BetaProjections:
    """Sample-moment projections of outcomes on the lagged treatment."""

    p: int
    beta_l: np.ndarray  # per-t curve, t = p+1..T
    beta_u: EstimandValue
    beta_u_star: EstimandValue | None


def _require_shock(spec: ScenarioSpec) -> None:
    if not spec.shock_treatment:
        raise ApplicabilityError(
            "projection coefficients are defined against mean-zero (shock) "
            "treatments; this mechanism is not a shock"
        )


def beta_u_star_analytic(spec: ScenarioSpec, p: int) -> EstimandValue:
    """Treatment-variance-weighted average of the lag-p outcome coefficients."""
    _require_shock(spec)
    T = spec.horizon
    ts = np.arange(p + 1, T + 1)
    betas = np.array([spec.beta_coefficient(int(t), p) for t in ts])
    weights = np.asarray(spec.sigma_eta_at(ts - p), dtype=float) ** 2
    value = float(np.sum(betas * weights) / np.sum(weights))
    return EstimandValue(label="beta_u_star", value=value, method="analytic", p=p)


def beta_projections(
    spec: ScenarioSpec,
    p: int,
    sample_size: int = 2_000,
    master_seed: int = DEFAULT_MASTER_SEED,
    replication_id: int = 0,
) -> BetaProjections:
    """Per-period and pooled projection coefficients from replicated moments."""
    _require_shock(spec)
    if not 0 <= p < spec.horizon:
        raise ScenarioError("p", "need 0 <= p < horizon")
    if sample_size < 2:
        raise ScenarioError("sample_size", "need at least 2 replications")
    streams = derive_streams(master_seed, replication_id)
    w, y = dgp.simulate_batch(spec, streams, sample_size)
    y_t = y[:, p:]
    w_lag = w[:, : spec.horizon - p]
    num_t = np.mean(y_t * w_lag, axis=0)
    den_t = np.mean(w_lag**2, axis=0)
    beta_l = num_t / den_t
    # pooled moments, with a per-replication linearization for the error
    r_i = np.sum(y_t * w_lag, axis=1)
    s_i = np.sum(w_lag**2, axis=1)
    beta_u_val = float(np.sum(r_i) / np.sum(s_i))
    resid = r_i - beta_u_val * s_i
    se = float(np.std(resid, ddof=1) / np.sqrt(sample_size) / np.mean(s_i))
    beta_u = EstimandValue(
        label="beta_u",
        value=beta_u_val,
        method="monte-carlo",
        mc_draws=sample_size,
        mc_standard_error=se,
        p=p,
    )
    star = beta_u_star_analytic(spec, p) if isinstance(spec.coefficients, (LinearArLaw, LinearGeneralLaw)) else None
    return BetaProjections(p=p, beta_l=beta_l, beta_u=beta_u, beta_u_star=star)


# ---------------------------------------------------------------------------
# Exhaustive enumeration oracle for small binary systems
# ---------------------------------------------------------------------------


def iter_paths(spec: ScenarioSpec, panel: NoisePanel):
    """All treatment paths with probabilities and replayed outcomes.

    Yields (w_path, y_path, probability, per-period assignment probability at
    the realized value).  Potential outcomes are fixed from the panel; only
    the treatment path varies.  Guarded to binary mechanisms and T <= 12.
    """
    if not spec.discrete_treatment:
        raise ApplicabilityError("exhaustive enumeration requires a binary mechanism")
    T = spec.horizon
    if T > ENUMERATION_MAX_T:
        raise ApplicabilityError(f"enumeration cost guard: horizon {T} > {ENUMERATION_MAX_T}")
    for bits in itertools.product((0.0, 1.0), repeat=T):
        w = np.array(bits)
        y = dgp.replay_outcome(spec, panel, w)
        probs = np.empty(T)
        for s in range(1, T + 1):
            y_prev = y[s - 2] if s >= 2 else panel.y0
            w_prev = w[s - 2] if s >= 2 else panel.w0
            probs[s - 1] = dgp.propensity(spec, s, y_prev, w_prev, w[s - 1])
        if np.any(probs <= 0.0) or np.any(probs >= 1.0):
            raise NumericalError(
                "deterministic assignment probability encountered; overlap requires "
                "probabilities strictly inside (0, 1)"
            )
        yield w, y, float(np.prod(probs)), probs


def exact_avg_weighted_effect(
    spec: ScenarioSpec, panel: NoisePanel, p: int, w: float, wprime: float
) -> EstimandValue:
    """Path-law expectation of the average weighted effect, fully enumerated."""
    if not 0 <= p < spec.horizon:
        raise ScenarioError("p", "need 0 <= p < horizon")
    T = spec.horizon
    cache: dict[tuple, float] = {}

    def tau_star(w_path: np.ndarray, t: int) -> float:
        key = (t, w_path[: t - p - 1].tobytes())
        if key not in cache:
            cache[key] = _exact_weighted_effect(spec, panel, w_path[: t - p - 1], t, p, w, wprime)
        return cache[key]

    total = 0.0
    for w_path, _, prob, _ in iter_paths(spec, panel):
        avg = sum(tau_star(w_path, t) for t in range(p + 1, T + 1)) / (T - p)
        total += prob * avg
    return EstimandValue(
        label="avg_tau_star", value=total, method="exact-enumeration", p=p, w=w, wprime=wprime
    )


def exact_estimator_moments(spec: ScenarioSpec, panel: NoisePanel, estimator_fn):
    """Exact sampling mean and variance of a statistic over the path law.

    `estimator_fn(w, y, propensities) -> float` is evaluated on every path.
    """
    mean = 0.0
    second = 0.0
    for w_path, y_path, prob, probs in iter_paths(spec, panel):
        val = float(estimator_fn(w_path, y_path, probs))
        mean += prob * val
        second += prob * val * val
    return mean, second - mean * mean


def exact_estimator_error_moments(
    spec: ScenarioSpec, panel: NoisePanel, estimator_fn, p: int, w: float, wprime: float
):
    """Exact mean and variance of (statistic - realized average weighted effect)."""
    T = spec.horizon
    cache: dict[tuple, float] = {}

    def tau_star(w_path: np.ndarray, t: int) -> float:
        key = (t, w_path[: t - p - 1].tobytes())
        if key not in cache:
            cache[key] = _exact_weighted_effect(spec, panel, w_path[: t - p - 1], t, p, w, wprime)
        return cache[key]

    mean = 0.0
    second = 0.0
    for w_path, y_path, prob, probs in iter_paths(spec, panel):
        target = sum(tau_star(w_path, t) for t in range(p + 1, T + 1)) / (T - p)
        err = float(estimator_fn(w_path, y_path, probs)) - target
        mean += prob * err
        second += prob * err * err
    return mean, second - mean * mean


# ---------------------------------------------------------------------------
# Analytic targets for well-behaved scenarios
# ---------------------------------------------------------------------------


def analytic_avg_weighted_effect(spec: ScenarioSpec, p: int, w: float, wprime: float) -> EstimandValue:
    """Closed-form average weighted effect where the scenario admits one.

    Shocks and iid assignment leave forward treatment draws unmoved by the
    conditioning value, so the effect reduces to the lag coefficient; the
    linear-Gaussian feedback system reduces to the companion-matrix impulse.
    """
    T = spec.horizon
    if p >= T:
        raise ScenarioError("p", "need p < horizon")
    mech = spec.mechanism
    if isinstance(mech, (ShockNormal, BernoulliIid)):
        betas = [spec.beta_coefficient(t, p) for t in range(p + 1, T + 1)]
        value = float(np.mean(betas) * (w - wprime))
    elif isinstance(mech, PolicyRule) and isinstance(spec.coefficients, LinearArLaw):
        value = crf_linear_gaussian(spec, p, w, wprime).value
    else:
        raise ApplicabilityError("no analytic form for this scenario")
    return EstimandValue(
        label="avg_tau_star", value=value, method="analytic", p=p, w=w, wprime=wprime
    )
