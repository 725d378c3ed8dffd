"""Bayesian measurement-error correction for occupational cohort survival analysis.

A library and CLI for fitting hierarchical survival models that correct for
mixtures of shared/unshared classical and Berkson exposure measurement error
arising from job-exposure matrices, plus a synthetic cohort generator used to
validate the correction end to end.
"""

__version__ = "0.1.0"

from . import cohort, diagnostics, disease, dist, measurement, sampler, simgen

__all__ = [
    "cohort",
    "diagnostics",
    "disease",
    "dist",
    "measurement",
    "sampler",
    "simgen",
    "__version__",
]
