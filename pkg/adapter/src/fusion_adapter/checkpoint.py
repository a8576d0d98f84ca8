"""Build a tiny, self-contained causal LM checkpoint for tests and demos.

The checkpoint is a genuinely forward-passing GPT-2 architecture with a
word-level tokenizer, small enough to run per-step inference in
milliseconds on CPU. Weights are seeded, so two builds with the same seed
produce identical checkpoints.
"""

from __future__ import annotations

from pathlib import Path

import torch
from tokenizers import Tokenizer
from tokenizers.models import WordLevel
from tokenizers.pre_tokenizers import WhitespaceSplit
from transformers import GPT2Config, GPT2LMHeadModel, PreTrainedTokenizerFast

SPECIAL_TOKENS = ("<unk>", "<eos>", "<pad>")

WORD_TOKENS = (
    "think", "step", "wait", "so", "let", "check", "again", "answer",
    "x", "y", "n", "k", "plus", "minus", "times", "equals",
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
    "\\boxed{42}", "\\boxed{41}", "\\boxed{7}", "\\frac{1}{2}",
    ".", ",", "(", ")", "=", "?",
)


def build_test_checkpoint(
    output_dir: str | Path,
    seed: int = 0,
    n_embd: int = 32,
    n_layer: int = 2,
    n_head: int = 2,
    n_positions: int = 256,
) -> Path:
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)

    tokens = SPECIAL_TOKENS + WORD_TOKENS
    vocab = {tok: i for i, tok in enumerate(tokens)}
    tokenizer = Tokenizer(WordLevel(vocab, unk_token="<unk>"))
    tokenizer.pre_tokenizer = WhitespaceSplit()
    fast = PreTrainedTokenizerFast(
        tokenizer_object=tokenizer,
        unk_token="<unk>",
        eos_token="<eos>",
        pad_token="<pad>",
    )
    fast.save_pretrained(output_dir)

    config = GPT2Config(
        vocab_size=len(tokens),
        n_positions=n_positions,
        n_embd=n_embd,
        n_layer=n_layer,
        n_head=n_head,
        resid_pdrop=0.0,
        embd_pdrop=0.0,
        attn_pdrop=0.0,
        eos_token_id=vocab["<eos>"],
        bos_token_id=vocab["<eos>"],
    )
    torch.manual_seed(seed)
    model = GPT2LMHeadModel(config)
    model.save_pretrained(output_dir)
    return output_dir
