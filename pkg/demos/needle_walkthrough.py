"""Train a small decoder to recall a needle sentence from episodic memory.

Walks through the library API end to end: generate episodes, train the
decoder on noisy relevance weights, then compare the three inference modes
on held-out episodes. Takes a few minutes on one CPU core.

    python demos/needle_walkthrough.py
"""

from epman.checkpoint import Checkpoint
from epman.datagen import default_tokenizer, generate_dataset
from epman.decoder import DecoderConfig, DecoderParams
from epman.evaluation import run_epman_eval
from epman.training import MemoryOps, NoiseConfig, OptimizerState, TrainingExample, train_phase2

tok = default_tokenizer()

# 16 chunks of at most 32 tokens; each completion is drawn per episode so the
# decoder has to read it from memory instead of memorising it
train = generate_dataset("needle", 2000, seed=1, chunk_len=32, vary_completion=True)
held = generate_dataset("needle", 200, seed=2, chunk_len=32, vary_completion=True)
print("query: ", held[0].query)
print("answer:", held[0].gold_answer)

cfg = DecoderConfig(tok.vocab_size, chunk_len=32, max_positions=576)
params = DecoderParams.init(cfg, seed=3)
ckpt = Checkpoint(cfg, params, tok, MemoryOps())


def report(epoch):
    score = run_epman_eval(held[:50], ckpt, "narrow", 5).aggregate
    print(f"epoch {epoch}: narrow recall on 50 held-out episodes = {score:.1f}")
    return score


train_phase2(
    [TrainingExample.from_episode(e) for e in train], params, cfg, tok, epochs=4,
    noise=NoiseConfig(seed=3), optimizer=OptimizerState(lr=1e-3), memory_ops=ckpt.memory_ops, eval_fn=report,
)

for mode in ("exact", "narrow", "broad"):
    run = run_epman_eval(held, ckpt, mode, 5)
    print(f"{mode:>6}: recall {run.aggregate:.1f} over {run.n} episodes")

ep, rec = held[0], run.records[0]
print("selected chunks:", rec["selection"], "relevant:", ep.relevant_index)
print("prediction:", rec["prediction"])
