"""Self-supervised translation between 2D images and 3D shapes."""
from .geom3d import CameraModel, DepthMap, Viewpoint, VoxelGrid, render_depth
from .nets import NetConfig, SISTNetworks
from .losses import LossWeights
from .trainer import TrainConfig, Trainer, run_training
from .apps import SISTModel

__version__ = "0.1.0"
