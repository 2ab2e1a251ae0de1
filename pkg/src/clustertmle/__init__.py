"""Two-stage and single-stage TMLE for cluster-randomized trials."""
__version__ = "0.1.0"

from .inference import EffectEstimate, EstimationError  # noqa: E402
from .power import PowerParams, clusters_per_arm, power_given_design  # noqa: E402
from .trial_data import (DataError, PopulationSpec, Trial, load_trial,  # noqa: E402
                         select_population)
from .two_stage import stage1_endpoints, stage2_effect, two_stage_effect  # noqa: E402

__all__ = ["EffectEstimate", "EstimationError", "PowerParams", "clusters_per_arm",
           "power_given_design", "DataError", "PopulationSpec", "Trial", "load_trial",
           "select_population", "stage1_endpoints", "stage2_effect", "two_stage_effect",
           "__version__"]
