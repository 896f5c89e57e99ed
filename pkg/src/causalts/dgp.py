"""Noise drawing, factual simulation and counterfactual replay.

The replay discipline: a NoisePanel fixes every primitive innovation of one
world-draw, after which outcomes for any treatment path are a deterministic
function of that path.  Conditioning on a past treatment value is implemented
as an intervention followed by fresh forward draws of the assignment
mechanism.  That equivalence is the load-bearing semantic choice of the whole
package: with uncorrelated treatment/outcome innovations the treatment
innovation at t0 pins the treatment given the past and enters nothing else,
so "condition on W_{t0} = w" and "set W_{t0} = w, then let the mechanism run"
induce the same forward law.  Counterfactual forward draws come from their
own stream, independent of the factual ones.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np
from scipy.signal import lfilter
from scipy.special import expit

from .core import (
    ApplicabilityError,
    BernoulliIid,
    BernoulliLogistic,
    LinearArLaw,
    LinearGeneralLaw,
    NumericalError,
    PathBundle,
    PolicyRule,
    ScenarioError,
    ScenarioSpec,
    SeedStream,
    ShockNormal,
    UProcess,
)

_SQRT_2PI = math.sqrt(2.0 * math.pi)


def _norm_pdf(x, mean, sd):
    z = (x - mean) / sd
    return np.exp(-0.5 * z * z) / (sd * _SQRT_2PI)


# ---------------------------------------------------------------------------
# Noise panel
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class NoisePanel:
    """All primitive innovations for one world-draw.

    `epsilon` and `u_z` carry one tail element beyond the horizon (index T,
    0-based) so the instrument's future-innovation contamination at t = T has
    a draw to use; replay only ever touches the first T entries.
    """

    epsilon: np.ndarray  # (T+1,) outcome innovations, scaled
    eta: np.ndarray  # (T,) treatment innovations, scaled, correlation rho with epsilon
    uniforms: np.ndarray  # (T,) discrete-assignment uniforms
    zeta: np.ndarray | None = None  # (T,) instrument innovations, scaled
    u0: float = 0.0  # realized initial state of the additive noise process
    u_z: np.ndarray | None = None  # (T+1,) standard normals driving that process
    u_path: np.ndarray | None = None  # (T,) realized additive noise values
    y0: float = 0.0
    w0: float = 0.0
    streams: dict[str, SeedStream] | None = None

    def __post_init__(self):
        for name in ("epsilon", "eta", "uniforms", "zeta", "u_z", "u_path"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr, dtype=float)
                arr.flags.writeable = False
                object.__setattr__(self, name, arr)

    @property
    def horizon(self) -> int:
        return self.eta.shape[0]


def _u_initial(u: UProcess, z0: float | np.ndarray):
    """Realized initial state; stationary start where the process has one."""
    if u.kind == "ar1":
        return u.sigma / math.sqrt(1.0 - u.phi_u**2) * z0
    if u.kind == "arch1":
        return math.sqrt(u.omega / (1.0 - u.alpha)) * z0
    return np.zeros_like(z0) if isinstance(z0, np.ndarray) else 0.0


def _u_forward(u: UProcess, u_prev, z: np.ndarray) -> np.ndarray:
    """Run the additive noise recursion from state `u_prev` over draws `z`.

    `z` has shape (..., L) of standard normals; returns realized values of the
    same shape.  `u_prev` broadcasts against the leading axes.
    """
    if u.kind == "zero":
        return np.zeros_like(z)
    if u.kind == "iid-normal":
        return u.sigma * z
    if u.kind == "random-walk":
        prev = np.asarray(u_prev, dtype=float)
        return prev[..., None] + np.cumsum(u.sigma * z, axis=-1)
    if u.kind == "ar1":
        x = u.sigma * z
        zi = (u.phi_u * np.asarray(u_prev, dtype=float))[..., None]
        if x.ndim == 1:
            out, _ = lfilter([1.0], [1.0, -u.phi_u], x, zi=np.atleast_1d(zi.squeeze(-1)))
        else:
            out, _ = lfilter([1.0], [1.0, -u.phi_u], x, axis=-1, zi=zi)
        return out
    # arch1: conditional sd depends on the lagged level, so loop over time.
    prev = np.broadcast_to(np.asarray(u_prev, dtype=float), z.shape[:-1]).copy()
    out = np.empty_like(z)
    for s in range(z.shape[-1]):
        sd = np.sqrt(u.omega + u.alpha * prev**2)
        out[..., s] = sd * z[..., s]
        prev = out[..., s]
    return out


def _law_u_process(spec: ScenarioSpec) -> UProcess | None:
    if isinstance(spec.coefficients, LinearGeneralLaw):
        return spec.coefficients.u
    return None


def _sigma_eps(spec: ScenarioSpec) -> float:
    if isinstance(spec.coefficients, LinearArLaw):
        return spec.coefficients.sigma_eps
    return 1.0


def _draw_noise_arrays(spec: ScenarioSpec, streams: dict[str, SeedStream], n: int) -> dict:
    """Raw (n, .) noise arrays for `n` world-draws from one stream set."""
    T = spec.horizon
    z1 = streams["epsilon"].generator().standard_normal((n, T + 1))
    z2 = streams["eta"].generator().standard_normal((n, T))
    epsilon = _sigma_eps(spec) * z1
    sig_eta = np.asarray(spec.sigma_eta_at(np.arange(1, T + 1)), dtype=float)
    eta = sig_eta * (spec.rho * z1[:, :T] + math.sqrt(1.0 - spec.rho**2) * z2)
    uniforms = streams["assignment"].generator().random((n, T))
    out = {"epsilon": epsilon, "eta": eta, "uniforms": uniforms, "zeta": None,
           "u0": np.zeros(n), "u_z": None, "u_path": None}
    if spec.instrument is not None:
        out["zeta"] = spec.instrument.sigma_zeta * streams["zeta"].generator().standard_normal((n, T))
    u = _law_u_process(spec)
    if u is not None:
        gen = streams["u"].generator()
        z0 = gen.standard_normal(n)
        u_z = gen.standard_normal((n, T + 1))
        u0 = _u_initial(u, z0)
        out["u0"] = np.asarray(u0, dtype=float)
        out["u_z"] = u_z
        out["u_path"] = _u_forward(u, out["u0"], u_z[:, :T])
    return out


def draw_noise(spec: ScenarioSpec, streams: dict[str, SeedStream]) -> NoisePanel:
    """Draw the primitive innovations for one world."""
    raw = _draw_noise_arrays(spec, streams, 1)
    return NoisePanel(
        epsilon=raw["epsilon"][0],
        eta=raw["eta"][0],
        uniforms=raw["uniforms"][0],
        zeta=None if raw["zeta"] is None else raw["zeta"][0],
        u0=float(raw["u0"][0]),
        u_z=None if raw["u_z"] is None else raw["u_z"][0],
        u_path=None if raw["u_path"] is None else raw["u_path"][0],
        streams=streams,
    )


# ---------------------------------------------------------------------------
# Counterfactual replay
# ---------------------------------------------------------------------------


def _check_support(spec: ScenarioSpec, w: np.ndarray) -> None:
    if not np.all(np.isfinite(w)):
        raise ScenarioError("w_path", "treatment values must be finite")
    if spec.discrete_treatment and not np.all((w == 0.0) | (w == 1.0)):
        raise ScenarioError("w_path", "binary mechanisms support treatments in {0, 1}")


def _replay_arrays(spec: ScenarioSpec, w: np.ndarray, epsilon: np.ndarray,
                   u_path: np.ndarray | None, y0: float) -> np.ndarray:
    """Vectorized outcome replay; `w` has shape (n, t)."""
    t = w.shape[1]
    law = spec.coefficients
    if isinstance(law, LinearArLaw):
        x = law.mu + law.beta0 * w + epsilon[:, :t]
        zi = np.full((w.shape[0], 1), law.phi * y0)
        y, _ = lfilter([1.0], [1.0, -law.phi], x, axis=1, zi=zi)
        return y
    mat = law.coefficient_matrix(spec.horizon)
    y = u_path[:, :t].copy()
    for j in range(mat.shape[1]):
        if j >= t:
            break
        y[:, j:] += mat[j:t, j] * w[:, : t - j]
    return y


def replay_outcome(spec: ScenarioSpec, panel: NoisePanel, w_path) -> np.ndarray:
    """Potential-outcome path for `w_path` on the panel's fixed noise.

    Deterministic given (panel, w_path); prefixes never depend on later
    treatment entries.
    """
    w = np.asarray(w_path, dtype=float)
    if w.ndim != 1:
        raise ScenarioError("w_path", "expected a 1-d treatment path")
    if w.shape[0] > spec.horizon:
        raise ScenarioError("w_path", "treatment path longer than the horizon")
    if w.shape[0] == 0:
        return np.empty(0)
    _check_support(spec, w)
    u2d = None if panel.u_path is None else panel.u_path[None, :]
    return _replay_arrays(spec, w[None, :], panel.epsilon[None, :], u2d, panel.y0)[0]


# ---------------------------------------------------------------------------
# Factual simulation
# ---------------------------------------------------------------------------


def _simulate_paths(spec: ScenarioSpec, epsilon, eta, uniforms, u_path):
    """(W, Y) factual paths, shapes (n, T)."""
    T = spec.horizon
    mech = spec.mechanism
    if isinstance(mech, ShockNormal):
        w = eta[:, :T]
        return w, _replay_arrays(spec, w, epsilon, u_path, 0.0)
    if isinstance(mech, BernoulliIid):
        w = (uniforms < mech.pi).astype(float)
        return w, _replay_arrays(spec, w, epsilon, u_path, 0.0)

    n = eta.shape[0]
    law = spec.coefficients
    general = isinstance(law, LinearGeneralLaw)
    mat = law.coefficient_matrix(T) if general else None
    w = np.empty((n, T))
    y = np.empty((n, T))
    y_prev = np.zeros(n)
    w_prev = np.zeros(n)
    for i in range(T):
        if isinstance(mech, PolicyRule):
            w[:, i] = mech.gamma + mech.theta * w_prev + mech.delta * y_prev + eta[:, i]
        else:
            p1 = expit(mech.a + mech.b * y_prev + mech.c * w_prev)
            w[:, i] = (uniforms[:, i] < p1).astype(float)
        if general:
            acc = u_path[:, i].copy()
            for j in range(min(i, mat.shape[1] - 1) + 1):
                acc += mat[i, j] * w[:, i - j]
            y[:, i] = acc
        else:
            y[:, i] = law.mu + law.phi * y_prev + law.beta0 * w[:, i] + epsilon[:, i]
        y_prev = y[:, i]
        w_prev = w[:, i]
    return w, y


def _propensity_paths(spec: ScenarioSpec, w: np.ndarray, y: np.ndarray) -> np.ndarray:
    """p_t(W_t) or f_t(W_t) along realized paths, shape (n, T)."""
    T = w.shape[1]
    w_prev = np.concatenate([np.zeros((w.shape[0], 1)), w[:, :-1]], axis=1)
    y_prev = np.concatenate([np.zeros((w.shape[0], 1)), y[:, :-1]], axis=1)
    mech = spec.mechanism
    if isinstance(mech, ShockNormal):
        sd = np.asarray(spec.sigma_eta_at(np.arange(1, T + 1)), dtype=float)
        return _norm_pdf(w, 0.0, sd)
    if isinstance(mech, PolicyRule):
        mean = mech.gamma + mech.theta * w_prev + mech.delta * y_prev
        return _norm_pdf(w, mean, mech.sigma_eta)
    if isinstance(mech, BernoulliIid):
        return np.where(w == 1.0, mech.pi, 1.0 - mech.pi)
    p1 = expit(mech.a + mech.b * y_prev + mech.c * w_prev)
    return np.where(w == 1.0, p1, 1.0 - p1)


def _contamination(spec: ScenarioSpec, epsilon: np.ndarray, u_z: np.ndarray | None) -> np.ndarray:
    """lambda-weighted loading of the instrument on next-period outcome noise."""
    block = spec.instrument
    T = spec.horizon
    if block.lam == 0.0:
        return np.zeros((epsilon.shape[0], T))
    law = spec.coefficients
    if isinstance(law, LinearArLaw):
        return block.lam * law.phi * epsilon[:, 1 : T + 1]
    u = law.u
    if u.kind == "ar1":
        return block.lam * u.phi_u * u.sigma * u_z[:, 1 : T + 1]
    # iid-normal: zero AR coefficient, so lagged contamination moments vanish.
    return np.zeros((epsilon.shape[0], T))


def _instrument_paths(spec: ScenarioSpec, w, zeta, epsilon, u_z) -> np.ndarray:
    block = spec.instrument
    T = spec.horizon
    alpha1 = np.asarray(spec.alpha1_at(np.arange(1, T + 1)), dtype=float)
    return block.alpha0 + alpha1 * w + zeta + _contamination(spec, epsilon, u_z)


def simulate(spec: ScenarioSpec, panel: NoisePanel) -> PathBundle:
    """Run the assignment mechanism against the outcome law on one panel."""
    eps2 = panel.epsilon[None, :]
    eta2 = panel.eta[None, :]
    unif2 = panel.uniforms[None, :]
    u2 = None if panel.u_path is None else panel.u_path[None, :]
    w, y = _simulate_paths(spec, eps2, eta2, unif2, u2)
    prop = _propensity_paths(spec, w, y)
    what = None
    if spec.instrument is not None:
        uz2 = None if panel.u_z is None else panel.u_z[None, :]
        what = _instrument_paths(spec, w, panel.zeta[None, :], eps2, uz2)[0]
    return PathBundle(w=w[0], y=y[0], propensity=prop[0], what=what)


def simulate_batch(spec: ScenarioSpec, streams: dict[str, SeedStream], n: int):
    """n independent factual (W, Y) paths drawn from one stream set."""
    raw = _draw_noise_arrays(spec, streams, n)
    return _simulate_paths(spec, raw["epsilon"], raw["eta"], raw["uniforms"], raw["u_path"])


def draw_noise_arrays(spec: ScenarioSpec, streams: dict[str, SeedStream], n: int) -> dict:
    """Raw batch noise; rows are independent world-draws."""
    return _draw_noise_arrays(spec, streams, n)


def simulate_paths(spec: ScenarioSpec, raw: dict):
    """(W, Y) factual paths for a raw batch-noise dict."""
    return _simulate_paths(spec, raw["epsilon"], raw["eta"], raw["uniforms"], raw["u_path"])


# ---------------------------------------------------------------------------
# Propensities
# ---------------------------------------------------------------------------


def propensity(spec: ScenarioSpec, t: int, y_prev: float, w_prev: float, w: float) -> float:
    """Exact assignment probability (discrete) or density (continuous) at w."""
    mech = spec.mechanism
    if isinstance(mech, BernoulliIid):
        return mech.pi if w == 1.0 else 1.0 - mech.pi
    if isinstance(mech, BernoulliLogistic):
        p1 = float(expit(mech.a + mech.b * y_prev + mech.c * w_prev))
        return p1 if w == 1.0 else 1.0 - p1
    if isinstance(mech, ShockNormal):
        return float(_norm_pdf(w, 0.0, spec.sigma_eta_at(t)))
    return float(_norm_pdf(w, mech.gamma + mech.theta * w_prev + mech.delta * y_prev, mech.sigma_eta))


# ---------------------------------------------------------------------------
# Interventions
# ---------------------------------------------------------------------------


def _require_valid_assignment(spec: ScenarioSpec) -> None:
    if not spec.pots_valid:
        raise ApplicabilityError(
            "conditioning-as-intervention requires assignment independent of "
            "contemporaneous outcome innovations (rho = 0 or a discrete mechanism)"
        )


@dataclass(frozen=True, eq=False)
class ForwardState:
    """System state entering an intervention window at t0.

    Vectors of length n allow one state per history; `wtail` carries the last
    `lag` treatments before t0 (oldest first) for lag-polynomial laws.
    """

    y_prev: np.ndarray
    w_prev: np.ndarray
    wtail: np.ndarray | None = None


def prefix_state(spec: ScenarioSpec, panel: NoisePanel, bundle: PathBundle, t0: int):
    """(ForwardState, u_prev) for the realized history before t0."""
    y_prev = bundle.y[t0 - 2] if t0 >= 2 else panel.y0
    w_prev = bundle.w[t0 - 2] if t0 >= 2 else panel.w0
    if isinstance(spec.coefficients, LinearGeneralLaw):
        lag = spec.coefficients.lag_cutoff
        tail = np.zeros((1, lag))
        for j in range(1, lag + 1):
            idx = t0 - 1 - j  # 0-based index of w_{t0-j}
            if idx >= 0:
                tail[0, lag - j] = bundle.w[idx]
    else:
        tail = None
    if panel.u_path is not None:
        u_prev = panel.u_path[t0 - 2] if t0 >= 2 else panel.u0
    else:
        u_prev = 0.0
    state = ForwardState(y_prev=np.array([y_prev]), w_prev=np.array([w_prev]), wtail=tail)
    return state, u_prev


def make_forward_noise(
    spec: ScenarioSpec,
    t0: int,
    t_end: int,
    draws: int,
    mode: str,
    rng: np.random.Generator,
    *,
    panel: NoisePanel | None = None,
    u_prev=0.0,
) -> dict:
    """Noise for one intervention window, shared across arms.

    "weighted" mode broadcasts the panel's outcome-side noise (fixed
    potential outcomes); "crf" mode redraws outcome noise on [t0, t_end] and
    reruns the additive noise recursion from its state at t0 - 1.  Treatment
    draws are always fresh, from the caller's counterfactual generator.
    """
    if mode not in ("weighted", "crf"):
        raise ScenarioError("mode", f"unknown intervention mode {mode!r}")
    L = t_end - t0 + 1
    u_cfg = _law_u_process(spec)
    noise: dict = {"unif": None, "z_eta": None, "u_win": None}
    if spec.discrete_treatment:
        noise["unif"] = rng.random((draws, L))
    else:
        noise["z_eta"] = rng.standard_normal((draws, L))
    if mode == "crf":
        noise["eps_win"] = _sigma_eps(spec) * rng.standard_normal((draws, L))
        if u_cfg is not None:
            z_u = rng.standard_normal((draws, L))
            noise["u_win"] = _u_forward(u_cfg, np.broadcast_to(np.asarray(u_prev, dtype=float), (draws,)), z_u)
    else:
        if panel is None:
            raise ScenarioError("panel", "weighted mode fixes outcome noise from a panel")
        noise["eps_win"] = np.broadcast_to(panel.epsilon[t0 - 1 : t_end], (draws, L))
        if u_cfg is not None:
            noise["u_win"] = np.broadcast_to(panel.u_path[t0 - 1 : t_end], (draws, L))
    return noise


def forward_engine(
    spec: ScenarioSpec,
    t0: int,
    t_end: int,
    state: ForwardState,
    noise: dict,
    forced_value: float,
):
    """Run mechanism and outcome law forward with W_{t0} forced.

    Returns (W, Y) of shape (draws, t_end - t0 + 1).  Pure given its inputs;
    calling it once per arm with the same `noise` yields common random
    numbers across arms.
    """
    L = t_end - t0 + 1
    mech = spec.mechanism
    law = spec.coefficients
    general = isinstance(law, LinearGeneralLaw)
    mat = law.coefficient_matrix(spec.horizon) if general else None
    eps_win = noise["eps_win"]
    u_win = noise["u_win"]
    z_eta = noise["z_eta"]
    unif = noise["unif"]
    draws = eps_win.shape[0]
    sig_eta = np.asarray(spec.sigma_eta_at(np.arange(t0, t_end + 1)), dtype=float)

    lag = mat.shape[1] - 1 if general else 0
    w_arr = np.empty((draws, L))
    y_arr = np.empty((draws, L))
    wfull = np.zeros((draws, lag + L)) if general else None
    if general and lag:
        wfull[:, :lag] = state.wtail
    y_prev = np.broadcast_to(state.y_prev, (draws,)).astype(float)
    w_prev = np.broadcast_to(state.w_prev, (draws,)).astype(float)
    for s in range(L):
        t = t0 + s
        if s == 0:
            w_t = np.full(draws, float(forced_value))
        elif isinstance(mech, ShockNormal):
            w_t = sig_eta[s] * z_eta[:, s]
        elif isinstance(mech, PolicyRule):
            w_t = mech.gamma + mech.theta * w_prev + mech.delta * y_prev + mech.sigma_eta * z_eta[:, s]
        elif isinstance(mech, BernoulliIid):
            w_t = (unif[:, s] < mech.pi).astype(float)
        else:
            p1 = expit(mech.a + mech.b * y_prev + mech.c * w_prev)
            w_t = (unif[:, s] < p1).astype(float)
        w_arr[:, s] = w_t
        if general:
            wfull[:, lag + s] = w_t
            acc = u_win[:, s].copy()
            for j in range(min(t - 1, lag) + 1):
                acc += mat[t - 1, j] * wfull[:, lag + s - j]
            y_arr[:, s] = acc
        else:
            y_arr[:, s] = law.mu + law.phi * y_prev + law.beta0 * w_t + eps_win[:, s]
        y_prev = y_arr[:, s]
        w_prev = w_t
    return w_arr, y_arr


def paired_forward(
    spec: ScenarioSpec,
    panel: NoisePanel,
    bundle: PathBundle,
    t0: int,
    t_end: int,
    forced: Iterable[float],
    *,
    mode: str,
    rng: np.random.Generator,
    draws: int,
):
    """Forward continuations from t0 with W_{t0} forced, one set per arm.

    All arms share the same fresh noise (common random numbers), so
    differences between arms isolate the forced value.  Returns a list of
    (W, Y) pairs of shape (draws, t_end - t0 + 1), one per forced value.
    """
    _require_valid_assignment(spec)
    if not 1 <= t0 <= t_end <= spec.horizon:
        raise ScenarioError("t0", "need 1 <= t0 <= t_end <= horizon")
    forced = [float(v) for v in forced]
    for v in forced:
        _check_support(spec, np.array([v]))
    state, u_prev = prefix_state(spec, panel, bundle, t0)
    noise = make_forward_noise(spec, t0, t_end, draws, mode, rng, panel=panel, u_prev=u_prev)
    return [forward_engine(spec, t0, t_end, state, noise, v) for v in forced]


def intervene_forward(
    spec: ScenarioSpec,
    panel: NoisePanel,
    bundle: PathBundle,
    t0: int,
    w: float,
    t_end: int,
    *,
    mode: str = "crf",
    rng: np.random.Generator | None = None,
    draws: int = 1,
):
    """Continuation (W_{t0:t_end}, Y_{t0:t_end}) after forcing W_{t0} = w."""
    if rng is None:
        rng = counterfactual_rng(panel)
    return paired_forward(spec, panel, bundle, t0, t_end, (w,), mode=mode, rng=rng, draws=draws)[0]


def counterfactual_rng(panel: NoisePanel, jump: int = 0) -> np.random.Generator:
    if panel.streams is None:
        raise ApplicabilityError(
            "panel carries no stream set; pass an explicit rng for counterfactual draws"
        )
    return panel.streams["counterfactual"].generator(jump)


# ---------------------------------------------------------------------------
# Validity diagnostics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PotsCheck:
    name: str
    passed: bool
    statistics: dict
    note: str = ""


@dataclass(frozen=True)
class PotsReport:
    checks: tuple[PotsCheck, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def check(self, name: str) -> PotsCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            c.name: {"passed": c.passed, "statistics": c.statistics, "note": c.note}
            for c in self.checks
        }


def _ols_tstats(x_cols: list[np.ndarray], y: np.ndarray):
    """OLS of y on [1, x_cols]; returns (coef, hc0_se) for the slope block."""
    X = np.column_stack([np.ones_like(y)] + x_cols)
    xtx_inv = np.linalg.inv(X.T @ X)
    beta = xtx_inv @ (X.T @ y)
    resid = y - X @ beta
    meat = (X * resid[:, None]).T @ (X * resid[:, None])
    cov = xtx_inv @ meat @ xtx_inv
    se = np.sqrt(np.diag(cov))
    return beta[1:], se[1:]


def validate_pots(spec: ScenarioSpec, sample_size: int = 2000, master_seed: int = 97) -> PotsReport:
    """Simulation diagnostics for the scenario's causal-validity claims.

    Runs: (i) non-anticipation, replay prefixes bitwise invariant to future
    treatment perturbations; (ii) a shock test, regression of W_t on the
    lagged system state; (iii) exclusion, outcomes bitwise invariant to
    instrument-noise perturbations; plus an innovation-independence check of
    the treatment innovations against the contemporaneous outcome
    innovations.
    """
    from .core import derive_streams  # local import to avoid cycle at module load

    T = max(spec.horizon, min(sample_size, 20_000))
    spec_big = spec if T == spec.horizon else replace(spec, horizon=T)
    streams = derive_streams(master_seed, 0)
    panel = draw_noise(spec_big, streams)
    bundle = simulate(spec_big, panel)
    rng = streams["counterfactual"].generator()

    # (i) non-anticipation
    trials = int(min(max(sample_size // 10, 20), 500))
    violations = 0
    for _ in range(trials):
        t = int(rng.integers(1, T))
        w_alt = bundle.w.copy()
        if spec.discrete_treatment:
            w_alt[t:] = (rng.random(T - t) < 0.5).astype(float)
        else:
            w_alt[t:] = w_alt[t:] + rng.standard_normal(T - t)
        base = replay_outcome(spec_big, panel, bundle.w)[:t]
        pert = replay_outcome(spec_big, panel, w_alt)[:t]
        trunc = replay_outcome(spec_big, panel, bundle.w[:t])
        if not (np.array_equal(base, pert) and np.array_equal(base, trunc)):
            violations += 1
    checks = [
        PotsCheck(
            name="non_anticipation",
            passed=violations == 0,
            statistics={"trials": trials, "violations": violations},
        )
    ]

    # (ii) shock test: E[W_t | past] should carry no past-state signal.
    coefs, ses = _ols_tstats([bundle.y[:-1], bundle.w[:-1]], bundle.w[1:])
    tstats = coefs / ses
    checks.append(
        PotsCheck(
            name="shock",
            passed=bool(np.all(np.abs(tstats) < 3.0)),
            statistics={
                "coef_y_lag": float(coefs[0]),
                "coef_w_lag": float(coefs[1]),
                "se_y_lag": float(ses[0]),
                "se_w_lag": float(ses[1]),
            },
            note="" if spec.shock_treatment else "mechanism is not a shock; informational",
        )
    )

    # (iii) exclusion
    if spec.instrument is None:
        checks.append(
            PotsCheck(name="exclusion", passed=True, statistics={}, note="no instrument channel")
        )
    else:
        zeta_alt = panel.zeta + spec.instrument.sigma_zeta
        panel_alt = replace(panel, zeta=zeta_alt)
        bundle_alt = simulate(spec_big, panel_alt)
        same_y = np.array_equal(bundle.y, bundle_alt.y)
        moved = bool(np.any(bundle.what != bundle_alt.what))
        checks.append(
            PotsCheck(
                name="exclusion",
                passed=same_y and moved,
                statistics={"outcome_invariant": same_y, "instrument_moved": moved},
            )
        )

    # innovation independence (the rho diagnostic)
    coef, se = _ols_tstats([panel.epsilon[:T]], panel.eta)
    t_innov = float(coef[0] / se[0])
    checks.append(
        PotsCheck(
            name="innovation_independence",
            passed=abs(t_innov) < 3.0,
            statistics={"slope": float(coef[0]), "se": float(se[0]), "tstat": t_innov},
            note="treatment innovations regressed on contemporaneous outcome innovations",
        )
    )
    return PotsReport(checks=tuple(checks))


# ---------------------------------------------------------------------------
# Bundle CSV round-trip
# ---------------------------------------------------------------------------


def write_bundle_csv(bundle: PathBundle, path) -> None:
    """CSV export with 17 significant digits for replay fidelity."""
    cols = ["t", "W", "Y"] + (["What"] if bundle.what is not None else []) + ["propensity"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for i in range(bundle.horizon):
            row = [str(i + 1), f"{bundle.w[i]:.17g}", f"{bundle.y[i]:.17g}"]
            if bundle.what is not None:
                row.append(f"{bundle.what[i]:.17g}")
            row.append(f"{bundle.propensity[i]:.17g}")
            writer.writerow(row)


def read_bundle_csv(path) -> PathBundle:
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        expected = {"t", "W", "Y", "What", "propensity"}
        if not set(header).issubset(expected) or header[0] != "t":
            raise ScenarioError("bundle_csv", f"unrecognized header {header!r}")
        idx = {name: i for i, name in enumerate(header)}
        for required in ("W", "Y", "propensity"):
            if required not in idx:
                raise ScenarioError("bundle_csv", f"missing column {required!r}")
        rows = list(reader)
    if not rows:
        raise ScenarioError("bundle_csv", "no data rows")
    w = np.array([float(r[idx["W"]]) for r in rows])
    y = np.array([float(r[idx["Y"]]) for r in rows])
    prop = np.array([float(r[idx["propensity"]]) for r in rows])
    what = np.array([float(r[idx["What"]]) for r in rows]) if "What" in idx else None
    return PathBundle(w=w, y=y, propensity=prop, what=what)
