"""Super-network progressive shrinking (SNPS) and differentiable neural
architecture distillation (DNAD) at desk scale, on a small numpy autodiff
engine."""

from .config import RunConfig, build_config, load_config, preset
from .controller import ControllerConfig, ControllerState
from .data import Dataset, gen_synthetic, load_idx
from .distillation import TeacherBundle, TeacherNet, load_teacher, save_teacher, train_teacher
from .driver import ParetoSet, Search, SearchConfig, count_cost, retrain, run_search
from .estimators import ArchitectureSearch, DiscreteNetClassifier
from .objectives import KDConfig, KDVariant
from .search_space import DiscreteArch, NetConfig, SuperNet, build_supernet
from .training import RetrainConfig

__version__ = "0.1.0"

__all__ = [
    "ArchitectureSearch",
    "ControllerConfig",
    "ControllerState",
    "Dataset",
    "DiscreteArch",
    "DiscreteNetClassifier",
    "KDConfig",
    "KDVariant",
    "NetConfig",
    "ParetoSet",
    "RetrainConfig",
    "RunConfig",
    "Search",
    "SearchConfig",
    "SuperNet",
    "TeacherBundle",
    "TeacherNet",
    "build_config",
    "build_supernet",
    "count_cost",
    "gen_synthetic",
    "load_config",
    "load_idx",
    "load_teacher",
    "preset",
    "retrain",
    "run_search",
    "save_teacher",
    "train_teacher",
]
