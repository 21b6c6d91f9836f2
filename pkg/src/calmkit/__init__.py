"""Hoelder-calmness certificates for parametric equilibrium problems."""

from . import calmcert, epsolve, harness, metricsets, nshvi, trifunc

__all__ = ["calmcert", "epsolve", "harness", "metricsets", "nshvi", "trifunc"]
__version__ = "0.1.0"
