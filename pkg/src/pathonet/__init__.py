"""PathoNet Ki-67 / TIL cell detection pipeline on numpy."""

from .evaluate import (MatchConfig, MatchReport, PRF, ScoreReport, compute_prf, ki67_score, match_detections,
                       til_score, tune_thresholds)
from .labels import CLASSES, CellAnnotation, LabelRenderConfig, render_density_map
from .model import ArchDescriptor, ModelParams, build_pathonet, forward, load_checkpoint, predict, save_checkpoint
from .postprocess import PostprocessConfig, distance_transform, extract_cells, watershed_basic, watershed_seeded
from .synth import SynthConfig, generate_tile

__version__ = "0.1.0"
