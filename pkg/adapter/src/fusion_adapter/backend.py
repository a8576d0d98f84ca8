"""Checkpoint wrapper: deterministic final-position logits for a prefix.

Loads a causal LM plus its tokenizer, validates that the tokenizer length
matches the model's output vocabulary, and serves the pre-softmax logits of
the last position as float32 regardless of the model's internal compute
dtype. The whole prefix is re-run on every call: incremental and
full-prefix queries are therefore identical by construction. Forward passes
are serialized behind a lock so concurrent sessions stay deterministic.
"""

from __future__ import annotations

import threading
from typing import Sequence

import numpy as np
import torch
from transformers import AutoModelForCausalLM, AutoTokenizer


class CheckpointBackend:
    def __init__(self, checkpoint: str, device: str = "cpu") -> None:
        self.tokenizer = AutoTokenizer.from_pretrained(checkpoint)
        self.model = AutoModelForCausalLM.from_pretrained(checkpoint, dtype=torch.float32)
        self.model.eval()
        self.device = torch.device(device)
        self.model.to(self.device)

        out_embed = self.model.get_output_embeddings()
        self.vocab_size = int(out_embed.weight.shape[0])
        if len(self.tokenizer) != self.vocab_size:
            raise RuntimeError(
                f"tokenizer has {len(self.tokenizer)} tokens but the model emits "
                f"{self.vocab_size} logits; refusing to serve a misaligned vocabulary"
            )
        if self.tokenizer.eos_token_id is None:
            raise RuntimeError("tokenizer defines no eos token")
        self.eos_id = int(self.tokenizer.eos_token_id)
        self.special_ids = sorted(int(i) for i in set(self.tokenizer.all_special_ids))
        self.token_table = [
            self.tokenizer.convert_ids_to_tokens(i) for i in range(self.vocab_size)
        ]
        self.max_positions = int(getattr(self.model.config, "n_positions", 0) or
                                 getattr(self.model.config, "max_position_embeddings", 0) or 2**31)
        self._forward_lock = threading.Lock()

    def logits_for(self, prefix: Sequence[int]) -> np.ndarray:
        """Final-position pre-softmax logits for a non-empty token prefix."""
        if not prefix:
            raise ValueError("prefix must contain at least one token")
        if len(prefix) > self.max_positions:
            raise ValueError(
                f"prefix length {len(prefix)} exceeds the model's {self.max_positions} positions"
            )
        ids = torch.tensor([list(prefix)], dtype=torch.long, device=self.device)
        with self._forward_lock, torch.no_grad():
            out = self.model(input_ids=ids)
        vec = out.logits[0, -1, :].to(torch.float32).cpu().numpy()
        return np.ascontiguousarray(vec, dtype="<f4")
