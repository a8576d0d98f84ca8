from __future__ import annotations

import socket
import threading
import time
from contextlib import contextmanager

import pytest

from fusion_adapter.backend import CheckpointBackend
from fusion_adapter.checkpoint import build_test_checkpoint
from fusion_adapter.server import build_app


@pytest.fixture(scope="session")
def checkpoint_dir(tmp_path_factory):
    return build_test_checkpoint(tmp_path_factory.mktemp("ckpt"), seed=0)


@pytest.fixture(scope="session")
def backend(checkpoint_dir):
    return CheckpointBackend(str(checkpoint_dir))


@pytest.fixture()
def app(backend):
    return build_app(backend, max_sessions=64)


@contextmanager
def run_uvicorn(app):
    import uvicorn

    config = uvicorn.Config(app, host="127.0.0.1", port=0, log_level="error", lifespan="off")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.time() + 15
    while not server.started:
        if time.time() > deadline:
            raise RuntimeError("uvicorn did not start within 15s")
        time.sleep(0.01)
    sock: socket.socket = server.servers[0].sockets[0]
    host, port = sock.getsockname()[:2]
    try:
        yield f"http://{host}:{port}"
    finally:
        server.should_exit = True
        thread.join(timeout=15)
