"""tdtmle: counterfactual outcome means under dynamic treatment policies.

Fits a heterogeneous-token transformer to longitudinal trajectories with
temporal-difference supervision, then removes first-order plug-in bias by
targeted minimum loss-based fluctuation, with influence-function-based
confidence intervals.
"""

from tdtmle.backend import backend_name

__version__ = "0.1.0"

__all__ = ["backend_name", "__version__"]
