"""Interactive road extraction toolkit.

Core pieces: a numpy autodiff engine (`autodiff`), the refinement network
(`network`), simulated prompting (`prompts`), the composite loss (`loss`),
topology metrics (`metrics`), the synthetic scene generator (`synth`),
single-road instantiation (`instantiate`), the training loop (`train`) and
the HTTP annotation service (`service`).
"""

from .autodiff import Tensor
from .instantiate import InstantiateConfig, NoRoadStructure, instantiate
from .loss import LossConfig, total_loss
from .metrics import apls, betti_numbers, cl_dice, evaluate_masks, extract_graph
from .network import NetworkConfig, PromptMap, RoadNet
from .prompts import Stroke, sample_point, sample_scribble, simulate_round
from .synth import SceneConfig, generate_scene, generate_split, load_split
from .train import TrainConfig, evaluate_rounds, train_interactive

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "InstantiateConfig",
    "NoRoadStructure",
    "instantiate",
    "LossConfig",
    "total_loss",
    "apls",
    "betti_numbers",
    "cl_dice",
    "evaluate_masks",
    "extract_graph",
    "NetworkConfig",
    "PromptMap",
    "RoadNet",
    "Stroke",
    "sample_point",
    "sample_scribble",
    "simulate_round",
    "SceneConfig",
    "generate_scene",
    "generate_split",
    "load_split",
    "TrainConfig",
    "evaluate_rounds",
    "train_interactive",
    "__version__",
]
