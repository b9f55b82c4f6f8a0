"""Multi-strand classifiers whose inter-layer crossings come from braid words."""

from .arch import ArchSpec, build_braidnet, build_dnn, build_ndnn, build_random
from .braid import BraidWord, make_word, permutation, random_word
from .experiments import RunConfig, compare, run, sweep_crossings
from .model import BraidNetModel, MixConfig, apply_crossing, predict, train_step

__version__ = "0.1.0"
