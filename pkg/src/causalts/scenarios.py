"""Built-in reference scenarios used across the test and acceptance suites."""
from __future__ import annotations

import copy
from typing import Any

from .core import ScenarioSpec, spec_from_dict

_BUILTINS: dict[str, dict[str, Any]] = {
    # Autoregressive outcome driven by a pure Gaussian shock treatment.
    "s1": {
        "horizon": 200,
        "outcome_law": "linear-ar",
        "coefficients": {"mu": 0.0, "phi": 0.5, "beta0": 2.0, "sigma_eps": 1.0},
        "treatment_mechanism": {"kind": "shock-normal", "sigma_eta": 1.0},
    },
    # Same outcome family with a policy feedback rule for the treatment.
    "s2": {
        "horizon": 200,
        "outcome_law": "linear-ar",
        "coefficients": {"mu": 0.0, "phi": 0.4, "beta0": 1.0, "sigma_eps": 1.0},
        "treatment_mechanism": {
            "kind": "policy-rule",
            "gamma": 0.0,
            "theta": 0.2,
            "delta": 0.2,
            "sigma_eta": 1.0,
        },
    },
    # Short binary-treatment demo: two-lag outcome, fair-coin assignment.
    "s3": {
        "horizon": 8,
        "outcome_law": "binary-demo",
        "coefficients": {
            "beta": [1.0, 0.5],
            "u_process": {"kind": "iid-normal", "sigma": 1.0},
        },
        "treatment_mechanism": {"kind": "bernoulli-iid", "pi": 0.5},
    },
    # S3 with the additive noise switched off, for hand-checkable numbers.
    "s3-deterministic": {
        "horizon": 8,
        "outcome_law": "binary-demo",
        "coefficients": {"beta": [1.0, 0.5], "u_process": {"kind": "zero"}},
        "treatment_mechanism": {"kind": "bernoulli-iid", "pi": 0.5},
    },
    # S1 plus a noisy measurement of the treatment as an instrument.
    "s4": {
        "horizon": 200,
        "outcome_law": "linear-ar",
        "coefficients": {"mu": 0.0, "phi": 0.5, "beta0": 2.0, "sigma_eps": 1.0},
        "treatment_mechanism": {"kind": "shock-normal", "sigma_eta": 1.0},
        "instrument_block": {
            "alpha0": 0.0,
            "alpha1": 0.8,
            "sigma_zeta": 0.5,
            "lambda": 0.0,
        },
    },
    # S4 with the instrument contaminated by future outcome-noise innovations.
    "s4-contaminated": {
        "horizon": 200,
        "outcome_law": "linear-ar",
        "coefficients": {"mu": 0.0, "phi": 0.5, "beta0": 2.0, "sigma_eps": 1.0},
        "treatment_mechanism": {"kind": "shock-normal", "sigma_eta": 1.0},
        "instrument_block": {
            "alpha0": 0.0,
            "alpha1": 0.8,
            "sigma_zeta": 0.5,
            "lambda": 0.5,
        },
    },
}


def builtin_names() -> list[str]:
    return sorted(_BUILTINS)


def builtin_document(name: str, horizon: int | None = None) -> dict[str, Any]:
    """Deep copy of a built-in scenario document, optionally re-sized."""
    key = name.lower()
    if key not in _BUILTINS:
        raise KeyError(f"unknown builtin scenario {name!r}; have {builtin_names()}")
    doc = copy.deepcopy(_BUILTINS[key])
    if horizon is not None:
        doc["horizon"] = horizon
    return doc


def builtin(name: str, horizon: int | None = None, **overrides: Any) -> ScenarioSpec:
    """Validated built-in scenario; top-level keys can be overridden."""
    doc = builtin_document(name, horizon)
    doc.update(overrides)
    return spec_from_dict(doc)
