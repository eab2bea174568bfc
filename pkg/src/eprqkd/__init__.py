"""Desk-scale simulator and analysis toolkit for position/momentum QKD."""

from .source import (
    PumpProfile,
    SourceModel,
    PairSample,
    build_source,
    sample_pair,
    sample_pairs,
    joint_density,
    marginal_std,
    calibrate_source,
    UnphysicalSourceError,
    CalibrationError,
)
from .detection import (
    SlitDetector,
    StationConfig,
    ClickOutcome,
    QuadratureError,
    readout_coordinate,
    latent_from_coordinate,
    click,
    coincidence_probability,
    acceptance_mass,
    detected_variance,
    derive_partner_centers,
    equalize_levels,
    diagonal_attenuation,
)
from .protocol import (
    SessionConfig,
    PairEvent,
    CoincidenceTable,
    QberReport,
    SessionResult,
    ProtocolError,
    run_session,
    tally_coincidences,
    sift,
    qber_from_counts,
    qber_with_eve_prediction,
    three_party_probability,
    abort_decision,
)
from .adversary import (
    AttackConfig,
    EveRecord,
    intercept,
    resolve_attack,
    predicted_qber,
)
from .analysis import (
    ScanData,
    GaussianFit,
    EprCheckResult,
    FitError,
    fit_gaussian,
    conditional_variance,
    conversion_for,
    duan_check,
    poisson_errors,
    scan_simulation,
)
from .defaults import default_setup

__all__ = [
    "PumpProfile",
    "SourceModel",
    "PairSample",
    "build_source",
    "sample_pair",
    "sample_pairs",
    "joint_density",
    "marginal_std",
    "calibrate_source",
    "UnphysicalSourceError",
    "CalibrationError",
    "SlitDetector",
    "StationConfig",
    "ClickOutcome",
    "QuadratureError",
    "readout_coordinate",
    "latent_from_coordinate",
    "click",
    "coincidence_probability",
    "acceptance_mass",
    "detected_variance",
    "derive_partner_centers",
    "equalize_levels",
    "diagonal_attenuation",
    "SessionConfig",
    "PairEvent",
    "CoincidenceTable",
    "QberReport",
    "SessionResult",
    "ProtocolError",
    "run_session",
    "tally_coincidences",
    "sift",
    "qber_from_counts",
    "qber_with_eve_prediction",
    "three_party_probability",
    "abort_decision",
    "AttackConfig",
    "EveRecord",
    "intercept",
    "resolve_attack",
    "predicted_qber",
    "ScanData",
    "GaussianFit",
    "EprCheckResult",
    "FitError",
    "fit_gaussian",
    "conditional_variance",
    "conversion_for",
    "duan_check",
    "poisson_errors",
    "scan_simulation",
    "default_setup",
]

__version__ = "0.1.0"
