"""Input-dependent neuron pruning for a hierarchical segmentation
transformer: a small float64 autodiff core, the gated-pair layer with
its annealed top-fraction selection, a static magnitude baseline,
two-stage teacher-student training, and analysis tooling (neuron
statistics, gate activation counts, a closed-form compute model)."""

from .analysis import (FlopsReport, GateActivationCount, NeuronStats,
                       NeuronType, Taxonomy, classify_neurons,
                       collect_neuron_stats, count_gate_activations,
                       flops_report)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .data import (SyntheticSegmentation, confusion_matrix, evaluate_miou,
                   gen_sample, miou)
from .distill import (DistillConfig, LossReport, ce_loss, soft_ce_loss,
                      stage1_loss, stage2_loss, train_teacher,
                      train_two_stage)
from .errors import (CheckpointError, ContractError, DimensionError,
                     DivergenceError, EmptyInputError, NonFiniteError,
                     UsageError)
from .gating import (GateContext, GateMask, GatePredictor, SparsitySchedule,
                     anneal, dgl_pair_forward, dgl_pair_forward_compact,
                     gate_flops, kept_count, predict_gate, sparsity_loss,
                     top_r)
from .model import (FeatureMap, MitConfig, Segmenter, StageConfig,
                    mit_b0_config, tiny_config)
from .optim import Adam, PolyLR
from .static_pruning import (StaticMask, apply_static, build_static_masks,
                             magnitude_mask)
from .tensor import Tensor, no_grad

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
