"""Gradient-based search over DAG cell architectures, at desk scale.

Layers, bottom to top: a float64 autodiff engine (`tensor`), optimizers
(`optim`), the candidate operation registry (`ops`), the relaxed/discrete
cell (`cell`), vector classifier networks built from cells (`network`),
built-in tasks and data handling (`tasks`), the bilevel search loop and
baselines (`search`), search-space counting (`counting`), and the command
line front end (`cli`).
"""

__version__ = "0.1.0"

from .cell import CellSpec, Genotype, derive_genotype, init_alpha  # noqa: F401
from .counting import SpaceQuery, count_discrete, count_relaxed  # noqa: F401
from .search import (  # noqa: F401
    SearchConfig,
    desk_search_config,
    random_search,
    search,
    select_architecture,
    toy_search_config,
)
from .tasks import DataConfig, SyntheticCellTask, ToyBilevelTask, default_task  # noqa: F401
from .tensor import Tape, Value, backward  # noqa: F401
