"""Grid-cell spoken term detection with phonetic term embeddings, in numpy."""

__version__ = "0.1.0"

from .grid import CellGrid, CellLocal, EventSpan  # noqa: E402
from .embedding import HashEmbedder, Term  # noqa: E402
from .loss import LossWeights, TrainingTarget  # noqa: E402
from .net import NetConfig, init_params, forward, backward  # noqa: E402
from .trainer import TrainConfig, preset, train  # noqa: E402

__all__ = [
    "CellGrid", "CellLocal", "EventSpan", "HashEmbedder", "Term", "LossWeights", "TrainingTarget",
    "NetConfig", "init_params", "forward", "backward", "TrainConfig", "preset", "train",
]
