"""Structured mixed-mu design of bandpass damping controllers.

The pipeline builds a payload-swept nanopositioner family, models its
variation with structured (real parametric) and unstructured (complex)
uncertainty, bounds the robust-performance structured singular value and
tunes a bandpass controller against it.
"""

from .lti import RationalTF, freq_response
from .mu import BlockStructure, mu_upper_mixed, robust_performance_profile
from .plant_family import extract_mode_stats, nanopositioner_family
from .synthesis import BandpassParams, ParamBounds, bandpass_tf, synthesize
from .uncertainty import UncertainPlant, assemble_uncertain_plant, envelope

__version__ = "0.1.0"

__all__ = [
    "BandpassParams",
    "BlockStructure",
    "ParamBounds",
    "RationalTF",
    "UncertainPlant",
    "assemble_uncertain_plant",
    "bandpass_tf",
    "envelope",
    "extract_mode_stats",
    "freq_response",
    "mu_upper_mixed",
    "nanopositioner_family",
    "robust_performance_profile",
    "synthesize",
]
