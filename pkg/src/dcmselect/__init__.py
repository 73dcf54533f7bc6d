"""Bayesian diagnostic classification models and predictive model selection."""

from dcmselect.model import (
    ItemParameters,
    ModelStructure,
    ModelVariant,
    QMatrix,
    active_effects,
    build_design_vector,
    enumerate_profiles,
    response_probability,
)

__version__ = "0.1.0"

__all__ = [
    "ItemParameters",
    "ModelStructure",
    "ModelVariant",
    "QMatrix",
    "active_effects",
    "build_design_vector",
    "enumerate_profiles",
    "response_probability",
    "__version__",
]
