"""aortaseg: Dilated convolutional aorta segmentation."""

from .dilated_net import build_network, canonical_spec, load_checkpoint, save_checkpoint
from .metrics import evaluate
from .phantom import PhantomSpec, generate_phantom, make_dataset
from .pipeline import segment
from .trainer import TrainConfig, train
from .version import __version__
from .volume import LabelVolume, Plane, ProbabilityVolume, Volume
