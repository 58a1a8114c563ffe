"""Double kernel representation learning for heterogeneous treatment effects."""

__version__ = "0.1.0"

from .bandit import BanditTrace, EtcConfig, etc_run, etc_treatment_only, regret_slope, suggest_explore_rounds
from .baselines import BaselineModel, baseline_fit, baseline_predict
from .estimators import (
    DkrlConfig,
    DkrlModel,
    NuclearConfig,
    OutcomeConfig,
    cross_validate,
    dkrl_fit,
    dkrl_fit_design,
    dkrl_predict,
    extract_gamma,
    extract_theta,
    nuclear_fit,
    residualize,
)
from .kernels import KernelSpec, gram, krr_fit, krr_predict, nystrom
from .numerics import NumericFailure, SingularSystemError
from .simdata import FixedBasisDesign, NoiseSpec, ThetaSpec, gen_design, gen_theta, sample_dataset

__all__ = [
    "BanditTrace", "BaselineModel", "DkrlConfig", "DkrlModel", "EtcConfig", "FixedBasisDesign",
    "KernelSpec", "NoiseSpec", "NuclearConfig", "NumericFailure", "OutcomeConfig", "SingularSystemError",
    "ThetaSpec", "baseline_fit", "baseline_predict", "cross_validate", "dkrl_fit", "dkrl_fit_design",
    "dkrl_predict", "etc_run", "etc_treatment_only", "extract_gamma", "extract_theta", "gen_design",
    "gen_theta", "gram", "krr_fit", "krr_predict", "nuclear_fit", "nystrom", "regret_slope", "residualize",
    "sample_dataset", "suggest_explore_rounds",
]
