"""Adapter CLI: serve a checkpoint, export its token table, build a test one."""

from __future__ import annotations

import json
from pathlib import Path

import click


@click.group()
def main() -> None:
    """Fusion wire protocol v1 model adapter."""


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--device", default="cpu", show_default=True)
@click.option("--max-sessions", default=256, show_default=True, type=int)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8391, show_default=True, type=int)
def serve(checkpoint, device, max_sessions, host, port) -> None:
    """Serve per-step logits for a causal LM checkpoint."""
    import uvicorn

    from .backend import CheckpointBackend
    from .server import build_app

    backend = CheckpointBackend(checkpoint, device=device)
    click.echo(
        f"serving {checkpoint} (|V|={backend.vocab_size}, eos={backend.eos_id}) "
        f"on http://{host}:{port}"
    )
    uvicorn.run(build_app(backend, max_sessions=max_sessions), host=host, port=port, log_level="warning")


@main.command("export-vocab")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--output", required=True, type=click.Path())
def export_vocab(checkpoint, output) -> None:
    """Write the ordered token table (plus hash) for cross-checking."""
    from .backend import CheckpointBackend
    from .vocabhash import token_table_hash

    backend = CheckpointBackend(checkpoint)
    payload = {
        "tokens": backend.token_table,
        "eos_id": backend.eos_id,
        "special_ids": backend.special_ids,
        "content_hash": token_table_hash(backend.token_table),
    }
    Path(output).write_text(json.dumps(payload, indent=2) + "\n")
    click.echo(f"wrote {len(backend.token_table)} tokens to {output}")


@main.command("make-test-checkpoint")
@click.option("--output", required=True, type=click.Path())
@click.option("--seed", default=0, show_default=True, type=int)
def make_test_checkpoint(output, seed) -> None:
    """Build the tiny seeded checkpoint used by the test suite."""
    from .checkpoint import build_test_checkpoint

    path = build_test_checkpoint(output, seed=seed)
    click.echo(f"checkpoint written to {path}")


if __name__ == "__main__":
    main()
