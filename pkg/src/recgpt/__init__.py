"""GPT-decoder sequential recommender: two-stage training (autoregressive
pre-training + personalized prompt-tuning) with one-step and two-step
autoregressive top-k recall."""

__version__ = "0.1.0"

from .model import HyperParams, ModelParams  # noqa: F401
from .data import SplitDataset, build_splits, ingest_tsv, kcore_filter  # noqa: F401
from .training import generate_prompts, pretrain, prompt_tune  # noqa: F401
from .recall import recall_one_step, recall_two_step  # noqa: F401
from .evaluation import evaluate, hr_at_k, ndcg_at_k  # noqa: F401
