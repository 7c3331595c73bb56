"""Map-constrained trajectory recovery from sparse, irregularly sampled GPS."""

from .road_network import RoadNetwork, RoadSegment, NetworkPoint, load_network, grid_network
from .trajectory_data import RawTrajectory, MapTrajectory
from .model import ModelConfig, TedTrajRec
from .training import TrainConfig, fit, recover

__all__ = ["RoadNetwork", "RoadSegment", "NetworkPoint", "load_network", "grid_network",
           "RawTrajectory", "MapTrajectory", "ModelConfig", "TedTrajRec", "TrainConfig", "fit",
           "recover"]
__version__ = "0.1.0"
