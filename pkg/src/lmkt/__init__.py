"""Knowledge tracing as language modeling, with difficulty-controlled
question generation, evaluated against a synthetic student oracle.

The pieces, bottom to top:

  autodiff    reverse-mode engine over float64 numpy arrays
  decoder     small GPT-style causal decoder + checkpoint format
  corpus      token conventions, encodings, dataset files, SLAM ingestion
  simworld    template-grammar world with 2PL ground-truth students
  ktrain      knowledge-tracing training and difficulty inference
  qgen        controlled generation: control vector, masked loss, sampling
  evaluation  AUC, calibration, ablations, control sweep, pool benchmark
  config/cli  run configuration and the command-line surface
"""

__version__ = "0.1.0"

from .autodiff import Adam, Tensor, backward, finite_diff_check, no_grad
from .corpus import (Interaction, Question, QuestionIdRegistry, StudentHistory,
                     Vocab, ingest_slam, read_histories, write_histories)
from .decoder import Model, ModelConfig, forward, init_model, load_model, save_model
from .simworld import (SimQuestion, SimStudent, SimWorld, WorldConfig,
                       gen_question_bank, make_splits, simulate_student,
                       true_correct_prob)
from .ktrain import (KT, DifficultyPrediction, TrainConfig, build_kt_dataset,
                     load_kt, new_kt, predict_batch, predict_difficulty, save_kt,
                     train_kt)
from .qgen import (QG, ControlProjection, GenerationError, QGExample,
                   SamplingParams, build_qg_dataset, generate, generate_batch,
                   load_qg, new_qg, save_qg, train_qg)
from .evaluation import (ablation_perplexity, auc_roc, calibration,
                         control_sweep, fluency_proxy, kt_instances,
                         novelty_rate, pool_benchmark)
from .config import RunConfig, config_hash, load_config, save_config

__all__ = [
    "__version__",
    "Adam", "Tensor", "backward", "finite_diff_check", "no_grad",
    "Interaction", "Question", "QuestionIdRegistry", "StudentHistory", "Vocab",
    "ingest_slam", "read_histories", "write_histories",
    "Model", "ModelConfig", "forward", "init_model", "load_model", "save_model",
    "SimQuestion", "SimStudent", "SimWorld", "WorldConfig",
    "gen_question_bank", "make_splits", "simulate_student", "true_correct_prob",
    "KT", "DifficultyPrediction", "TrainConfig", "build_kt_dataset", "load_kt",
    "new_kt", "predict_batch", "predict_difficulty", "save_kt", "train_kt",
    "QG", "ControlProjection", "GenerationError", "QGExample", "SamplingParams",
    "build_qg_dataset", "generate", "generate_batch", "load_qg", "new_qg",
    "save_qg", "train_qg",
    "ablation_perplexity", "auc_roc", "calibration", "control_sweep",
    "fluency_proxy", "kt_instances", "novelty_rate", "pool_benchmark",
    "RunConfig", "config_hash", "load_config", "save_config",
]
