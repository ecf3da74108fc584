"""Bayesian clustering of subjects from multivariate longitudinal markers.

Random effects of a multivariate GLMM follow a finite normal mixture; the
mixture components define clusters.
"""

__version__ = "0.1.0"
