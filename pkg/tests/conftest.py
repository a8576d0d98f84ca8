from __future__ import annotations

import socket
import threading
import time
from contextlib import contextmanager

import numpy as np
import pytest

from logitfuse.providers import TableLM, Vocabulary

# Ensure "from oracles import ..." works regardless of invocation directory.
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def chain_vocab() -> Vocabulary:
    return Vocabulary(tokens=("step", "reflect", "<eos>"), eos_id=2, special_ids=frozenset({2}))


# State-dependent logit tables for the guidance scenario: the guider pushes
# "reflect" and suppresses the end token relative to its (all-zero) base, so
# fused decoding terminates later than the target alone.
CHAIN_TARGET_TABLE = {
    (): [1.5, -1.0, 1.0],
    (0,): [1.5, -1.0, 1.0],
    (1,): [1.8, -1.2, 0.2],
}
CHAIN_GUIDER_TABLE = {
    (): [0.0, 2.0, -0.6],
    (0,): [0.0, 2.0, -0.6],
    (1,): [0.5, 0.5, -0.5],
}


def make_chain_models(vocab: Vocabulary) -> tuple[TableLM, TableLM, TableLM]:
    target = TableLM(vocab, order=1, table=CHAIN_TARGET_TABLE)
    base = TableLM(vocab, order=1)  # all-zero default rows
    guider = TableLM(vocab, order=1, table=CHAIN_GUIDER_TABLE)
    return target, base, guider


@pytest.fixture
def chain_models(chain_vocab):
    return make_chain_models(chain_vocab)


def random_scenario(rng: np.random.Generator, *, eos_bias: float = 1.0):
    """A random compatible (target, base, guider) TableLM triple.

    ``eos_bias`` shifts the end token's target logit so runs stay short.
    """
    size = int(rng.integers(4, 9))
    tokens = tuple(f"t{i}" for i in range(size - 1)) + ("<eos>",)
    eos_id = size - 1
    vocab = Vocabulary(tokens=tokens, eos_id=eos_id, special_ids=frozenset({eos_id}))

    def random_table():
        table = {(): rng.normal(size=size) * 1.5}
        for i in range(size):
            table[(i,)] = rng.normal(size=size) * 1.5
        return table

    target_table = random_table()
    for row in target_table.values():
        row[eos_id] += eos_bias
    return (
        TableLM(vocab, 1, target_table),
        TableLM(vocab, 1, random_table()),
        TableLM(vocab, 1, random_table()),
        vocab,
    )


TOY_TOKENS = ("think", "\\boxed{42}", "\\boxed{41}", "<eos>")


def write_toy_workspace(root: Path, n_questions: int = 3, n_samples: int = 2, seed: int = 0,
                        max_new_tokens: int = 24) -> dict[str, Path]:
    """Materialize a complete toy experiment: fixtures, dataset, config.

    The guider pushes the correct boxed answer; the target often prefers the
    wrong one, so guided and target-only runs grade differently.
    """
    import json

    import yaml

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    vocab = Vocabulary(tokens=TOY_TOKENS, eos_id=3, special_ids=frozenset({3}))

    target = TableLM(
        vocab,
        order=1,
        table={
            (): [1.2, -0.5, 0.8, -0.5],
            (0,): [0.8, -0.5, 0.8, 0.4],
            (1,): [-2.0, -2.0, -2.0, 2.5],
            (2,): [-2.0, -2.0, -2.0, 2.5],
        },
    )
    base = TableLM(vocab, order=1)
    guider = TableLM(
        vocab,
        order=1,
        table={
            (): [0.0, 2.5, -2.5, 0.0],
            (0,): [0.0, 2.5, -2.5, 0.0],
        },
    )
    paths = {
        "root": root,
        "target": root / "target.json",
        "base": root / "base.json",
        "guider": root / "guider.json",
        "dataset": root / "questions.jsonl",
        "config": root / "run.yaml",
    }
    target.save(paths["target"])
    base.save(paths["base"])
    guider.save(paths["guider"])

    with open(paths["dataset"], "w") as fh:
        for i in range(n_questions):
            fh.write(
                json.dumps(
                    {"id": f"q{i:02d}", "prompt": "think think", "answer": "42", "source": "toy"}
                )
                + "\n"
            )

    config = {
        "providers": {
            "target": {"fixture": "target.json"},
            "base": {"fixture": "base.json"},
            "guider": {"fixture": "guider.json"},
        },
        "guidance": {"alpha": 1.0, "warmup_tokens": 2},
        "sampling": {"temperature": 0.6, "top_p": 0.95, "seed": seed},
        "decode": {
            "max_new_tokens": max_new_tokens,
            "mode": "guided",
            "n_samples": n_samples,
            "forcing_tokens": [0],
        },
        "dataset": "questions.jsonl",
        "output_dir": "out",
    }
    paths["config"].write_text(yaml.safe_dump(config))
    return paths


@contextmanager
def run_uvicorn(app):
    """Serve an ASGI app on an ephemeral localhost port in a thread."""
    import uvicorn

    config = uvicorn.Config(app, host="127.0.0.1", port=0, log_level="error", lifespan="off")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.time() + 10
    while not server.started:
        if time.time() > deadline:
            raise RuntimeError("uvicorn did not start within 10s")
        time.sleep(0.01)
    sock: socket.socket = server.servers[0].sockets[0]
    host, port = sock.getsockname()[:2]
    try:
        yield f"http://{host}:{port}"
    finally:
        server.should_exit = True
        thread.join(timeout=10)
