"""Multi-robot cooperative localization with covariance intersection.

GS-CI (global-state CI) and four local-state baselines, graph tools for
the covariance boundedness criterion, a deterministic simulation harness
and a reader for the UTIAS multi-robot dataset.
"""

__version__ = "0.1.0"

from .errors import *  # noqa: F401,F403
from .estimation import CIWeights, GaussianEstimate, ci_fuse, select_ci_weights
from .models import Measurement, NoiseConfig, OdometryInput, RobotPose
from .gsci import GlobalState, GSCITeam
from .baselines import LSBDATeam, LSCenTeam, LSCITeam, LSSCITeam
from .graphs import TopologyGraph, boundedness_predicate
from .sim import ScenarioConfig, run_analysis, run_batch, run_experiment, run_sweep

__all__ = [
    "CIWeights", "GaussianEstimate", "ci_fuse", "select_ci_weights",
    "Measurement", "NoiseConfig", "OdometryInput", "RobotPose",
    "GlobalState", "GSCITeam", "LSBDATeam", "LSCenTeam", "LSCITeam", "LSSCITeam",
    "TopologyGraph", "boundedness_predicate",
    "ScenarioConfig", "run_analysis", "run_batch", "run_experiment", "run_sweep",
]
