"""BN-indicator one-shot architecture search on a small numpy tensor engine."""

from .space import SpaceConfig, build_subnet, build_supernet, flops
from .indicator import BnScorer, score_table, subnet_score
from .search import EaConfig, SearchReport, evolutionary_search, exhaustive_search
from .trainer import TrainConfig, retrain_subnet, train_supernet

__all__ = [
    "SpaceConfig", "build_subnet", "build_supernet", "flops",
    "BnScorer", "score_table", "subnet_score",
    "EaConfig", "SearchReport", "evolutionary_search", "exhaustive_search",
    "TrainConfig", "retrain_subnet", "train_supernet",
]
__version__ = "0.1.0"
