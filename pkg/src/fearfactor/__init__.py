"""Common fear factors from firm-level option-implied variance."""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # source checkout without install
    __version__ = "0.1.0"

from .cross_section import FamaMacBeth, ThreePass, fama_macbeth, three_pass  # noqa: E402
from .factors import EMPCA, FactorSeries, RollingEMPCA, em_pca, rolling_factor  # noqa: E402
from .implied_variance import VariancePanel, build_panel, compute_variance  # noqa: E402
from .market_data import compute_forward, filter_chain  # noqa: E402
from .portfolio import SortSpec, sort_portfolios  # noqa: E402
from .synth import SyntheticSpec, synthetic_market  # noqa: E402

__all__ = [
    "EMPCA", "FactorSeries", "FamaMacBeth", "RollingEMPCA", "SortSpec", "SyntheticSpec",
    "ThreePass", "VariancePanel", "build_panel", "compute_forward", "compute_variance",
    "em_pca", "fama_macbeth", "filter_chain", "rolling_factor", "sort_portfolios",
    "synthetic_market", "three_pass",
]
