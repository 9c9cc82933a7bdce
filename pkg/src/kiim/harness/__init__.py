from .checkpoint import Checkpoint, TrainState
from .data import PatchTensors
from .evaluate import PALETTE, colorize, decode_palette, evaluate, predict_render
from .search import ABLATION_ROWS, DEFAULT_GRIDS, ablate, ablation_config, ablation_table, grid_search
from .train import RunReport, TrainingDivergedError, projection_for, train
from .transfer import finetune, fraction_tag, pretrain_then_finetune, take_fraction
