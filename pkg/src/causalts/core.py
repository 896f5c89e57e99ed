"""Domain types, scenario configuration and deterministic seed streams.

Everything downstream (simulation, estimands, estimators, experiments) is a
pure function of a validated ScenarioSpec plus seed streams derived from a
(master_seed, replication_id) pair, so replications can run in any order and
in parallel with no shared state.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

OUTCOME_LAWS = ("linear-ar", "linear-general", "binary-demo")
MECHANISMS = ("shock-normal", "policy-rule", "bernoulli-iid", "bernoulli-logistic")
U_KINDS = ("iid-normal", "ar1", "random-walk", "arch1", "zero")

# Channel labels, in spawn-key order.  Derivation of a stream from
# (master_seed, replication_id, label) is injective because the label index
# and replication id enter the SeedSequence spawn key.
STREAM_LABELS = ("epsilon", "eta", "zeta", "u", "assignment", "counterfactual")

DEFAULT_BURN_IN = 500
DEFAULT_MASTER_SEED = 123456789
# Replication ids at or above this value are reserved for oracle-target
# Monte Carlo so oracle draws never collide with experiment replications.
ORACLE_REPLICATION_BASE = 2_000_000_000


class ScenarioError(Exception):
    """Configuration document is malformed or violates a scenario invariant."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class ApplicabilityError(Exception):
    """Operation requested on a scenario/dataset it does not apply to."""


class NumericalError(Exception):
    """Numerical failure: explosive system, weak denominator, overlap floor."""


# ---------------------------------------------------------------------------
# Scenario components
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UProcess:
    """Additive outcome process for the lag-polynomial laws."""

    kind: str = "zero"
    sigma: float = 1.0
    phi_u: float = 0.0
    omega: float = 1.0
    alpha: float = 0.0


@dataclass(frozen=True)
class LinearArLaw:
    """First-order autoregressive outcome recursion."""

    phi: float
    mu: float = 0.0
    beta0: float = 1.0
    sigma_eps: float = 1.0


@dataclass(frozen=True, eq=False)
class LinearGeneralLaw:
    """Finite lag polynomial in treatments plus an additive noise process.

    Exactly one of `beta` (time-invariant coefficients, lag 0..L) or
    `beta_table` (a (horizon, L+1) table of per-period coefficients) is set.
    """

    beta: np.ndarray | None
    beta_table: np.ndarray | None
    u: UProcess = field(default_factory=UProcess)

    @property
    def lag_cutoff(self) -> int:
        if self.beta is not None:
            return self.beta.shape[0] - 1
        return self.beta_table.shape[1] - 1

    def coefficient_matrix(self, horizon: int) -> np.ndarray:
        """(horizon, L+1) coefficients; entries with lag >= t are zeroed."""
        if self.beta_table is not None:
            mat = np.array(self.beta_table, dtype=float)
        else:
            mat = np.tile(self.beta, (horizon, 1)).astype(float)
        if mat.shape[0] != horizon:
            raise ScenarioError(
                "coefficients.beta_table",
                f"table has {mat.shape[0]} rows but horizon is {horizon}",
            )
        for j in range(1, mat.shape[1]):
            mat[:j, j] = 0.0
        mat.flags.writeable = False
        return mat


@dataclass(frozen=True)
class ShockNormal:
    """Treatment is its own mean-zero Gaussian innovation."""

    kind: str = "shock-normal"
    sigma_eta: float = 1.0
    sigma_eta_late: float | None = None  # applies for t > horizon // 2


@dataclass(frozen=True)
class PolicyRule:
    """Gaussian policy feedback rule on lagged treatment and outcome."""

    theta: float
    delta: float
    gamma: float = 0.0
    sigma_eta: float = 1.0
    kind: str = "policy-rule"


@dataclass(frozen=True)
class BernoulliIid:
    pi: float
    kind: str = "bernoulli-iid"


@dataclass(frozen=True)
class BernoulliLogistic:
    a: float
    b: float
    c: float
    kind: str = "bernoulli-logistic"


@dataclass(frozen=True)
class InstrumentBlock:
    """Noisy linear measurement of the treatment.

    `lam` couples the measurement to the next period's outcome-noise
    innovation (weighted by the noise process's AR coefficient), producing an
    instrument that is uncorrelated with the treatment at all leads and lags
    yet correlated with future potential outcomes.
    """

    alpha1: float
    alpha0: float = 0.0
    sigma_zeta: float = 1.0
    lam: float = 0.0
    alpha1_late: float | None = None  # applies for t > horizon // 2


Mechanism = ShockNormal | PolicyRule | BernoulliIid | BernoulliLogistic


@dataclass(frozen=True, eq=False)
class ScenarioSpec:
    """Validated description of one data-generating process."""

    horizon: int
    outcome_law: str
    coefficients: LinearArLaw | LinearGeneralLaw
    mechanism: Mechanism
    burn_in: int = DEFAULT_BURN_IN
    instrument: InstrumentBlock | None = None
    rho: float = 0.0
    pots_valid: bool = True

    # -- mechanism helpers ---------------------------------------------------

    @property
    def discrete_treatment(self) -> bool:
        return self.mechanism.kind in ("bernoulli-iid", "bernoulli-logistic")

    @property
    def shock_treatment(self) -> bool:
        return self.mechanism.kind == "shock-normal"

    def sigma_eta_at(self, t: int | np.ndarray) -> float | np.ndarray:
        """Treatment innovation sd at period t (1-based), 1.0 if unused."""
        if isinstance(self.mechanism, ShockNormal):
            late = self.mechanism.sigma_eta_late
            if late is None:
                return (
                    self.mechanism.sigma_eta
                    if np.isscalar(t)
                    else np.full(np.shape(t), self.mechanism.sigma_eta)
                )
            return np.where(np.asarray(t) > self.horizon // 2, late, self.mechanism.sigma_eta)
        if isinstance(self.mechanism, PolicyRule):
            return (
                self.mechanism.sigma_eta
                if np.isscalar(t)
                else np.full(np.shape(t), self.mechanism.sigma_eta)
            )
        return 1.0 if np.isscalar(t) else np.ones(np.shape(t))

    def alpha1_at(self, t: int | np.ndarray) -> float | np.ndarray:
        if self.instrument is None:
            raise ApplicabilityError("scenario has no instrument block")
        late = self.instrument.alpha1_late
        if late is None:
            return (
                self.instrument.alpha1
                if np.isscalar(t)
                else np.full(np.shape(t), self.instrument.alpha1)
            )
        return np.where(np.asarray(t) > self.horizon // 2, late, self.instrument.alpha1)

    # -- outcome-law helpers ---------------------------------------------------

    def beta_coefficient(self, t: int, s: int) -> float:
        """Causal lag coefficient of w_{t-s} in the time-t outcome."""
        if s >= t:
            return 0.0
        if isinstance(self.coefficients, LinearArLaw):
            law = self.coefficients
            return law.beta0 * law.phi**s
        mat = self.coefficients.coefficient_matrix(self.horizon)
        if s >= mat.shape[1]:
            return 0.0
        return float(mat[t - 1, s])

    def u_process(self) -> UProcess:
        if isinstance(self.coefficients, LinearArLaw):
            # The AR recursion is a lag polynomial in treatments on top of an
            # AR(1) noise process driven by the outcome innovations.
            return UProcess(kind="ar1", sigma=self.coefficients.sigma_eps, phi_u=self.coefficients.phi)
        return self.coefficients.u

    # -- serialization ---------------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "horizon": self.horizon,
            "burn_in": self.burn_in,
            "outcome_law": self.outcome_law,
            "rho": self.rho,
            "pots_valid": self.pots_valid,
        }
        if isinstance(self.coefficients, LinearArLaw):
            law = self.coefficients
            doc["coefficients"] = {
                "mu": law.mu,
                "phi": law.phi,
                "beta0": law.beta0,
                "sigma_eps": law.sigma_eps,
            }
        else:
            law = self.coefficients
            coef: dict[str, Any] = {}
            if law.beta is not None:
                coef["beta"] = [float(b) for b in law.beta]
            else:
                coef["beta_table"] = [[float(b) for b in row] for row in law.beta_table]
            u = law.u
            up: dict[str, Any] = {"kind": u.kind}
            if u.kind in ("iid-normal", "ar1", "random-walk"):
                up["sigma"] = u.sigma
            if u.kind == "ar1":
                up["phi_u"] = u.phi_u
            if u.kind == "arch1":
                up["omega"] = u.omega
                up["alpha"] = u.alpha
            coef["u_process"] = up
            doc["coefficients"] = coef
        mech = self.mechanism
        m: dict[str, Any] = {"kind": mech.kind}
        if isinstance(mech, ShockNormal):
            m["sigma_eta"] = mech.sigma_eta
            if mech.sigma_eta_late is not None:
                m["sigma_eta_late"] = mech.sigma_eta_late
        elif isinstance(mech, PolicyRule):
            m.update(gamma=mech.gamma, theta=mech.theta, delta=mech.delta, sigma_eta=mech.sigma_eta)
        elif isinstance(mech, BernoulliIid):
            m["pi"] = mech.pi
        else:
            m.update(a=mech.a, b=mech.b, c=mech.c)
        doc["treatment_mechanism"] = m
        if self.instrument is not None:
            ib = self.instrument
            block = {
                "alpha0": ib.alpha0,
                "alpha1": ib.alpha1,
                "sigma_zeta": ib.sigma_zeta,
                "lambda": ib.lam,
            }
            if ib.alpha1_late is not None:
                block["alpha1_late"] = ib.alpha1_late
            doc["instrument_block"] = block
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def sha256(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        ).hexdigest()


# ---------------------------------------------------------------------------
# Parsing and validation
# ---------------------------------------------------------------------------


def _require_keys(obj: dict, path: str, required: tuple, allowed: tuple) -> None:
    for key in obj:
        if key not in allowed:
            raise ScenarioError(f"{path}.{key}" if path else key, "unknown key")
    for key in required:
        if key not in obj:
            raise ScenarioError(f"{path}.{key}" if path else key, "missing required field")


def _real(obj: dict, path: str, key: str, default=None):
    if key not in obj:
        return default
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ScenarioError(f"{path}.{key}", "expected a real number")
    value = float(value)
    if not math.isfinite(value):
        raise ScenarioError(f"{path}.{key}", "must be finite")
    return value


def _positive(obj: dict, path: str, key: str, default=None):
    value = _real(obj, path, key, default)
    if value is not None and value <= 0:
        raise ScenarioError(f"{path}.{key}", "must be > 0")
    return value


def _integer(obj: dict, path: str, key: str, default=None):
    if key not in obj:
        return default
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, int):
        raise ScenarioError(f"{path}.{key}", "expected an integer")
    return value


def _parse_u_process(obj: Any, path: str) -> UProcess:
    if not isinstance(obj, dict):
        raise ScenarioError(path, "expected an object")
    _require_keys(obj, path, ("kind",), ("kind", "sigma", "phi_u", "omega", "alpha"))
    kind = obj["kind"]
    if kind not in U_KINDS:
        raise ScenarioError(f"{path}.kind", f"unknown noise process {kind!r}")
    if kind == "zero":
        _require_keys(obj, path, ("kind",), ("kind",))
        return UProcess(kind="zero")
    if kind == "arch1":
        _require_keys(obj, path, ("kind",), ("kind", "omega", "alpha"))
        omega = _positive(obj, path, "omega", 1.0)
        alpha = _real(obj, path, "alpha", 0.0)
        if not 0.0 <= alpha < 1.0:
            raise ScenarioError(f"{path}.alpha", "must lie in [0, 1)")
        return UProcess(kind="arch1", omega=omega, alpha=alpha)
    sigma = _positive(obj, path, "sigma", 1.0)
    if kind == "ar1":
        _require_keys(obj, path, ("kind",), ("kind", "sigma", "phi_u"))
        phi_u = _real(obj, path, "phi_u", None)
        if phi_u is None:
            raise ScenarioError(f"{path}.phi_u", "missing required field")
        if abs(phi_u) >= 1.0:
            raise ScenarioError(f"{path}.phi_u", "must lie in (-1, 1)")
        return UProcess(kind="ar1", sigma=sigma, phi_u=phi_u)
    _require_keys(obj, path, ("kind",), ("kind", "sigma"))
    return UProcess(kind=kind, sigma=sigma)


def _parse_coefficients(law: str, obj: Any, horizon: int) -> LinearArLaw | LinearGeneralLaw:
    path = "coefficients"
    if not isinstance(obj, dict):
        raise ScenarioError(path, "expected an object")
    if law == "linear-ar":
        _require_keys(obj, path, ("phi",), ("mu", "phi", "beta0", "sigma_eps"))
        return LinearArLaw(
            phi=_real(obj, path, "phi"),
            mu=_real(obj, path, "mu", 0.0),
            beta0=_real(obj, path, "beta0", 1.0),
            sigma_eps=_positive(obj, path, "sigma_eps", 1.0),
        )
    _require_keys(obj, path, (), ("beta", "beta_table", "u_process"))
    has_beta = "beta" in obj
    has_table = "beta_table" in obj
    if has_beta == has_table:
        raise ScenarioError(path, "exactly one of beta or beta_table is required")
    if has_beta:
        raw = obj["beta"]
        if not isinstance(raw, list) or not raw:
            raise ScenarioError(f"{path}.beta", "expected a non-empty list of reals")
        beta = np.array([_real({"v": b}, f"{path}.beta", "v") for b in raw], dtype=float)
        beta.flags.writeable = False
        table = None
    else:
        raw = obj["beta_table"]
        if not isinstance(raw, list) or not raw or not all(isinstance(r, list) for r in raw):
            raise ScenarioError(f"{path}.beta_table", "expected a list of coefficient rows")
        width = len(raw[0])
        if width == 0 or any(len(r) != width for r in raw):
            raise ScenarioError(f"{path}.beta_table", "rows must be non-empty and equal length")
        if len(raw) != horizon:
            raise ScenarioError(
                f"{path}.beta_table", f"needs one row per period ({horizon}), got {len(raw)}"
            )
        table = np.array(
            [[_real({"v": b}, f"{path}.beta_table", "v") for b in row] for row in raw],
            dtype=float,
        )
        table.flags.writeable = False
        beta = None
    default_u = {"kind": "zero"} if law == "binary-demo" else {"kind": "iid-normal", "sigma": 1.0}
    u = _parse_u_process(obj.get("u_process", default_u), f"{path}.u_process")
    return LinearGeneralLaw(beta=beta, beta_table=table, u=u)


def _parse_mechanism(obj: Any) -> Mechanism:
    path = "treatment_mechanism"
    if not isinstance(obj, dict):
        raise ScenarioError(path, "expected an object")
    kind = obj.get("kind")
    if kind not in MECHANISMS:
        raise ScenarioError(f"{path}.kind", f"unknown mechanism name {kind!r}")
    if kind == "shock-normal":
        _require_keys(obj, path, ("kind",), ("kind", "sigma_eta", "sigma_eta_late"))
        return ShockNormal(
            sigma_eta=_positive(obj, path, "sigma_eta", 1.0),
            sigma_eta_late=_positive(obj, path, "sigma_eta_late", None),
        )
    if kind == "policy-rule":
        _require_keys(obj, path, ("kind", "theta", "delta"), ("kind", "gamma", "theta", "delta", "sigma_eta"))
        return PolicyRule(
            gamma=_real(obj, path, "gamma", 0.0),
            theta=_real(obj, path, "theta"),
            delta=_real(obj, path, "delta"),
            sigma_eta=_positive(obj, path, "sigma_eta", 1.0),
        )
    if kind == "bernoulli-iid":
        _require_keys(obj, path, ("kind", "pi"), ("kind", "pi"))
        pi = _real(obj, path, "pi")
        if not 0.0 < pi < 1.0:
            raise ScenarioError(f"{path}.pi", "must lie strictly inside (0, 1)")
        return BernoulliIid(pi=pi)
    _require_keys(obj, path, ("kind", "a", "b", "c"), ("kind", "a", "b", "c"))
    return BernoulliLogistic(a=_real(obj, path, "a"), b=_real(obj, path, "b"), c=_real(obj, path, "c"))


def spec_from_dict(doc: dict[str, Any]) -> ScenarioSpec:
    """Validate a scenario document; fills and echoes defaults."""
    if not isinstance(doc, dict):
        raise ScenarioError("", "scenario document must be a JSON object")
    _require_keys(
        doc,
        "",
        ("horizon", "outcome_law", "coefficients", "treatment_mechanism"),
        (
            "horizon",
            "burn_in",
            "outcome_law",
            "coefficients",
            "treatment_mechanism",
            "instrument_block",
            "rho",
            "pots_valid",
        ),
    )
    horizon = _integer(doc, "", "horizon")
    if horizon is None or horizon < 2:
        raise ScenarioError("horizon", "must be an integer >= 2")
    burn_in = _integer(doc, "", "burn_in", DEFAULT_BURN_IN)
    if burn_in < 0:
        raise ScenarioError("burn_in", "must be >= 0")
    law_name = doc["outcome_law"]
    if law_name not in OUTCOME_LAWS:
        raise ScenarioError("outcome_law", f"unknown outcome law {law_name!r}")
    coefficients = _parse_coefficients(law_name, doc["coefficients"], horizon)
    mechanism = _parse_mechanism(doc["treatment_mechanism"])
    rho = _real(doc, "", "rho", 0.0)
    if not -1.0 < rho < 1.0:
        raise ScenarioError("rho", "must lie strictly inside (-1, 1)")

    instrument = None
    if "instrument_block" in doc:
        block = doc["instrument_block"]
        if not isinstance(block, dict):
            raise ScenarioError("instrument_block", "expected an object")
        _require_keys(
            block,
            "instrument_block",
            ("alpha1",),
            ("alpha0", "alpha1", "sigma_zeta", "lambda", "alpha1_late"),
        )
        alpha1 = _real(block, "instrument_block", "alpha1")
        if alpha1 == 0.0:
            raise ScenarioError("instrument_block.alpha1", "must be nonzero (relevance)")
        instrument = InstrumentBlock(
            alpha0=_real(block, "instrument_block", "alpha0", 0.0),
            alpha1=alpha1,
            sigma_zeta=_positive(block, "instrument_block", "sigma_zeta", 1.0),
            lam=_real(block, "instrument_block", "lambda", 0.0),
            alpha1_late=_real(block, "instrument_block", "alpha1_late", None),
        )

    discrete = mechanism.kind in ("bernoulli-iid", "bernoulli-logistic")
    valid_default = rho == 0.0 or discrete
    if "pots_valid" in doc:
        flag = doc["pots_valid"]
        if not isinstance(flag, bool):
            raise ScenarioError("pots_valid", "expected a boolean")
        if flag and not valid_default:
            raise ScenarioError(
                "pots_valid",
                "a continuous mechanism with rho != 0 correlates treatments with "
                "contemporaneous outcome innovations, so treatment assignment is "
                "not non-anticipating and the flag cannot be set",
            )
        pots_valid = flag
    else:
        pots_valid = valid_default

    if instrument is not None and instrument.lam != 0.0:
        u = coefficients.u if isinstance(coefficients, LinearGeneralLaw) else None
        if u is not None and u.kind in ("random-walk", "arch1", "zero"):
            raise ScenarioError(
                "instrument_block.lambda",
                "contamination needs an outcome-noise innovation channel "
                "(linear-ar, or a linear-general law with iid-normal/ar1 noise)",
            )

    return ScenarioSpec(
        horizon=horizon,
        burn_in=burn_in,
        outcome_law=law_name,
        coefficients=coefficients,
        mechanism=mechanism,
        instrument=instrument,
        rho=rho,
        pots_valid=pots_valid,
    )


def parse_scenario(text: str) -> ScenarioSpec:
    """Parse a JSON scenario document into a validated ScenarioSpec."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError("", f"invalid JSON: {exc}") from exc
    return spec_from_dict(doc)


def load_scenario(path) -> ScenarioSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_scenario(fh.read())


# ---------------------------------------------------------------------------
# Seed streams
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SeedStream:
    """One named noise channel of one replication.

    The (master_seed, replication_id, label) triple is hashed into a
    SeedSequence spawn key, so streams are order-independent, injective and
    platform-stable, and distinct labels are statistically independent.
    """

    master_seed: int
    replication_id: int
    label: str

    def __post_init__(self):
        if not 0 <= self.master_seed < 2**64:
            raise ScenarioError("master_seed", "must be an unsigned 64-bit integer")
        if self.replication_id < 0:
            raise ScenarioError("replication_id", "must be >= 0")
        if self.label not in STREAM_LABELS:
            raise ScenarioError("stream_label", f"unknown label {self.label!r}")

    def seed_sequence(self) -> np.random.SeedSequence:
        return np.random.SeedSequence(
            entropy=self.master_seed,
            spawn_key=(self.replication_id, STREAM_LABELS.index(self.label)),
        )

    def generator(self, jump: int = 0) -> np.random.Generator:
        """Fresh generator; `jump` selects a far-separated substream."""
        bit_gen = np.random.PCG64(self.seed_sequence())
        if jump:
            bit_gen = bit_gen.jumped(jump)
        return np.random.Generator(bit_gen)

    def state(self) -> dict:
        return self.generator().bit_generator.state


def derive_streams(master_seed: int, replication_id: int) -> dict[str, SeedStream]:
    """One stream per channel label for the given replication."""
    return {
        label: SeedStream(master_seed, replication_id, label) for label in STREAM_LABELS
    }


# ---------------------------------------------------------------------------
# Path bundle
# ---------------------------------------------------------------------------


def _readonly(arr: np.ndarray) -> np.ndarray:
    out = np.asarray(arr, dtype=float)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class PathBundle:
    """One realized factual dataset.

    `propensity` records p_t(W_t) for discrete mechanisms and the density
    f_t(W_t) for continuous ones, evaluated at the realized treatment.
    """

    w: np.ndarray
    y: np.ndarray
    propensity: np.ndarray
    what: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "w", _readonly(self.w))
        object.__setattr__(self, "y", _readonly(self.y))
        object.__setattr__(self, "propensity", _readonly(self.propensity))
        if self.what is not None:
            object.__setattr__(self, "what", _readonly(self.what))
        n = self.w.shape[0]
        if self.y.shape[0] != n or self.propensity.shape[0] != n:
            raise ScenarioError("path_bundle", "all series must share the same length")
        if self.what is not None and self.what.shape[0] != n:
            raise ScenarioError("path_bundle", "instrument series length mismatch")
        if not np.all(self.propensity > 0.0):
            raise NumericalError(
                "recorded propensity/density not strictly positive at a realized treatment"
            )

    @property
    def horizon(self) -> int:
        return self.w.shape[0]
