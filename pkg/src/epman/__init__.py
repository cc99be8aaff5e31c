"""Episodic memory attention: chunk memory, relevance-weighted decoder attention, training and evaluation."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .datagen import default_tokenizer, generate_dataset, load_dataset, serialize_dataset
from .decoder import DecoderConfig, DecoderParams, attend_epman, forward_standard, forward_with_memory, generate_greedy
from .epmem import EmbedderConfig, EpisodicMemory, MemorySelection, Mode, chunk_document, make_selection
from .evaluation import recall_score, run_epman_eval, token_f1
from .tensor import Tensor, backward, no_grad
from .tokenizer import Tokenizer
from .training import NoiseConfig, TrainingExample, sample_noisy_weights, total_loss, train_phase1, train_phase2

__version__ = "0.1.0"
