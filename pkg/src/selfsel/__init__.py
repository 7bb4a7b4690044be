"""Parameter recovery from self-selected observations and coarse Gaussian data.

Subpackages:

* :mod:`selfsel.stats_core` -- Gaussian / truncated-Gaussian primitives.
* :mod:`selfsel.models` -- problem instances and synthetic observation
  generators (max selection, second-price, coarse partitions).
* :mod:`selfsel.likelihood` -- per-sample likelihoods, conditional samplers
  and stochastic gradient oracles for the selection models.
* :mod:`selfsel.optimizer` -- multi-stage projected SGD, projections,
  permutation-matched distance and the clustering booster.
* :mod:`selfsel.coarse` -- convex partitions, localization, set-truncated
  sampling and the coarse mean estimator.
* :mod:`selfsel.diagnostics` -- finite-difference / stationarity / Hessian /
  growth checks.
* :mod:`selfsel.cli` -- reproducible experiment harness.
"""

__version__ = "0.1.0"
