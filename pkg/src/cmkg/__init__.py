"""Lifelong multimodal knowledge-graph construction (MNER / MRE) on a small numpy autodiff core."""

from .balance import ModulationState, coefficient, contribution_scores, modulated_scales
from .distill import asym_delta, attention_distill_loss, pool, total_loss
from .encoder import DualStreamModel, EncoderConfig, collate
from .errors import CMKGError
from .memory import MemoryBank
from .metrics import ScoreMatrix, forgetting_metric, micro_f1, plasticity_metric
from .taskstream import SyntheticConfig, TaskStream, generate_stream, load_stream, save_stream
from .trainer import DistillConfig, LifelongTrainer, TrainerConfig, ablate, run_lifelong, train_joint

__version__ = "0.1.0"
