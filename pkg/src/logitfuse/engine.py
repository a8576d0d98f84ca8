"""Guided decoding loop: fan out to providers, fuse, sample, trace.

One :class:`DecodeEngine` holds the target/base/guider provider triple and
is shareable across threads; each decode owns fresh provider sessions and
its own RNG stream, so traces replay bit-identically from (request, seed,
sample index). Modes:

* ``guided`` — per step, query all three providers, fuse with warm-up,
  sample. Refused up front unless the three vocabularies are compatible.
* ``target_only`` — plain single-model baseline; base/guider never queried.
* ``budget_forcing`` — target-only, but a sampled end-of-sequence token is
  replaced by the configured continuation tokens (until the replacement
  budget runs out), so generation only stops at the token cap.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import LogitFuseError, TransportError, VocabMismatchError
from .fusion import GuidanceConfig, fuse_with_warmup
from .providers import LogitProvider, ProviderSession, check_compatibility, decode_logits, encode_logits
from .sampling import (
    RNG_ALGORITHM,
    RNG_SEED_SCHEME,
    SamplingConfig,
    make_rng,
    sample,
    stream_seed,
    to_probabilities,
    top_p_filter,
)

TRACE_SCHEMA_VERSION = 1

MODES = ("guided", "target_only", "budget_forcing")

DEFAULT_MAX_NEW_TOKENS = 8192


@dataclass(frozen=True)
class DecodeRequest:
    prompt_tokens: tuple[int, ...]
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    max_new_tokens: int = DEFAULT_MAX_NEW_TOKENS
    mode: str = "guided"
    forcing_tokens: tuple[int, ...] = ()
    forcing_budget: int | None = None  # None = unlimited replacements
    record_logits: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "prompt_tokens", tuple(int(t) for t in self.prompt_tokens))
        object.__setattr__(self, "forcing_tokens", tuple(int(t) for t in self.forcing_tokens))
        if self.max_new_tokens < 1:
            raise ValueError(f"max_new_tokens must be >= 1, got {self.max_new_tokens}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "budget_forcing" and not self.forcing_tokens:
            raise ValueError("budget_forcing mode requires non-empty forcing_tokens")
        if self.forcing_budget is not None and self.forcing_budget < 0:
            raise ValueError(f"forcing_budget must be >= 0, got {self.forcing_budget}")

    def to_json(self) -> dict:
        return {
            "prompt_tokens": list(self.prompt_tokens),
            "guidance": {"alpha": self.guidance.alpha, "warmup_tokens": self.guidance.warmup_tokens},
            "sampling": {
                "temperature": self.sampling.temperature,
                "top_p": self.sampling.top_p,
                "seed": self.sampling.seed,
                "greedy": self.sampling.greedy,
            },
            "max_new_tokens": self.max_new_tokens,
            "mode": self.mode,
            "forcing_tokens": list(self.forcing_tokens),
            "forcing_budget": self.forcing_budget,
            "record_logits": self.record_logits,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "DecodeRequest":
        return cls(
            prompt_tokens=tuple(payload["prompt_tokens"]),
            guidance=GuidanceConfig(**payload.get("guidance", {})),
            sampling=SamplingConfig(**payload.get("sampling", {})),
            max_new_tokens=int(payload.get("max_new_tokens", DEFAULT_MAX_NEW_TOKENS)),
            mode=payload.get("mode", "guided"),
            forcing_tokens=tuple(payload.get("forcing_tokens", ())),
            forcing_budget=payload.get("forcing_budget"),
            record_logits=bool(payload.get("record_logits", False)),
        )


@dataclass
class StepRecord:
    index: int
    token: int
    fused: bool
    forced: bool = False
    logits: dict[str, np.ndarray] | None = None


@dataclass(frozen=True)
class RngInfo:
    algorithm: str
    seed_scheme: str
    base_seed: int
    sample_index: int
    stream_seed: int

    def to_json(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "seed_scheme": self.seed_scheme,
            "base_seed": self.base_seed,
            "sample_index": self.sample_index,
            "stream_seed": self.stream_seed,
        }


@dataclass
class DecodeTrace:
    """Auditable record of one decode: the source of truth for a run."""

    request: DecodeRequest
    steps: list[StepRecord]
    stop_reason: str  # eos | max_tokens | aborted
    rng: RngInfo
    error: str | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def generated_count(self) -> int:
        return len(self.steps)

    @property
    def tokens(self) -> list[int]:
        return [s.token for s in self.steps]

    @property
    def ok(self) -> bool:
        return self.stop_reason in ("eos", "max_tokens")

    def to_lines(self) -> list[str]:
        header = {
            "type": "header",
            "schema_version": TRACE_SCHEMA_VERSION,
            "request": self.request.to_json(),
            "rng": self.rng.to_json(),
        }
        lines = [json.dumps(header, sort_keys=True)]
        for s in self.steps:
            rec: dict = {"type": "step", "i": s.index, "token": s.token, "fused": s.fused, "forced": s.forced}
            if s.logits is not None:
                rec["logits"] = {name: encode_logits(vec) for name, vec in sorted(s.logits.items())}
            lines.append(json.dumps(rec, sort_keys=True))
        end = {
            "type": "end",
            "stop_reason": self.stop_reason,
            "generated_count": self.generated_count,
            "error": self.error,
            "diagnostics": self.diagnostics,
        }
        lines.append(json.dumps(end, sort_keys=True))
        return lines


def repeat_ngram_rate(tokens: Sequence[int], n: int = 4) -> float:
    """Fraction of n-grams that repeat an earlier occurrence (diagnostic only)."""
    grams = [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]
    if not grams:
        return 0.0
    return 1.0 - len(set(grams)) / len(grams)


def write_traces(path: str | Path, traces: Iterable[DecodeTrace]) -> None:
    with open(path, "w") as fh:
        for trace in traces:
            for line in trace.to_lines():
                fh.write(line + "\n")


def read_traces(path: str | Path) -> list[DecodeTrace]:
    traces: list[DecodeTrace] = []
    request: DecodeRequest | None = None
    rng: RngInfo | None = None
    steps: list[StepRecord] = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        rec = json.loads(line)
        kind = rec.get("type")
        if kind == "header":
            request = DecodeRequest.from_json(rec["request"])
            rng = RngInfo(**rec["rng"])
            steps = []
        elif kind == "step":
            logits = None
            if "logits" in rec:
                logits = {name: decode_logits(b64) for name, b64 in rec["logits"].items()}
            steps.append(
                StepRecord(
                    index=int(rec["i"]),
                    token=int(rec["token"]),
                    fused=bool(rec["fused"]),
                    forced=bool(rec.get("forced", False)),
                    logits=logits,
                )
            )
        elif kind == "end":
            if request is None or rng is None:
                raise ValueError(f"{path}:{lineno}: end record before header")
            traces.append(
                DecodeTrace(
                    request=request,
                    steps=steps,
                    stop_reason=rec["stop_reason"],
                    rng=rng,
                    error=rec.get("error"),
                    diagnostics=rec.get("diagnostics", {}),
                )
            )
            request, rng, steps = None, None, []
        else:
            raise ValueError(f"{path}:{lineno}: unknown trace record type {kind!r}")
    return traces


@dataclass
class BatchItem:
    request_index: int
    sample_index: int
    trace: DecodeTrace | None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.trace is not None and self.trace.ok and self.error is None


class DecodeEngine:
    """Orchestrates guided generation over a provider triple."""

    def __init__(
        self,
        target: LogitProvider,
        base: LogitProvider | None = None,
        guider: LogitProvider | None = None,
    ) -> None:
        self.target = target
        self.base = base
        self.guider = guider
        self._vocab = target.describe_vocab()
        self.compatibility_error: str | None = None
        if base is not None and guider is not None:
            self.compatibility_error = check_compatibility(
                self._vocab, base.describe_vocab(), guider.describe_vocab()
            )
        self._fanout_pool: ThreadPoolExecutor | None = None
        if any(
            p is not None and getattr(p, "prefers_concurrent_io", False)
            for p in (target, base, guider)
        ):
            self._fanout_pool = ThreadPoolExecutor(max_workers=3, thread_name_prefix="fanout")

    @property
    def vocab(self):
        return self._vocab

    def _require_guided_providers(self) -> None:
        if self.base is None or self.guider is None:
            raise LogitFuseError("guided mode requires base and guider providers")
        if self.compatibility_error is not None:
            raise VocabMismatchError(self.compatibility_error)

    def _fan_out(self, queries: list[tuple[LogitProvider, ProviderSession, list[int]]]):
        if self._fanout_pool is not None and len(queries) > 1:
            futures = [
                self._fanout_pool.submit(p.next_logits, s, toks) for p, s, toks in queries
            ]
            return [f.result() for f in futures]
        return [p.next_logits(s, toks) for p, s, toks in queries]

    def decode(
        self,
        request: DecodeRequest,
        sample_index: int = 0,
        on_token: Callable[[StepRecord], None] | None = None,
    ) -> DecodeTrace:
        guided = request.mode == "guided"
        if guided:
            self._require_guided_providers()
        eos_id = self._vocab.eos_id
        for t in request.prompt_tokens + request.forcing_tokens:
            if not (0 <= t < self._vocab.size):
                raise ValueError(f"token id {t} out of range for vocab size {self._vocab.size}")

        providers: list[LogitProvider] = [self.target]
        if guided:
            providers += [self.base, self.guider]  # type: ignore[list-item]
        sessions = [p.open_session() for p in providers]

        seed = stream_seed(request.sampling.seed, sample_index)
        rng = make_rng(seed)
        rng_info = RngInfo(RNG_ALGORITHM, RNG_SEED_SCHEME, request.sampling.seed, sample_index, seed)

        steps: list[StepRecord] = []
        pending = list(request.prompt_tokens)
        forcing_queue: list[int] = []
        forcing_left = request.forcing_budget  # None = unlimited
        stop_reason = "max_tokens"
        error: str | None = None

        try:
            while len(steps) < request.max_new_tokens:
                if forcing_queue:
                    token = forcing_queue.pop(0)
                    rec = StepRecord(len(steps), token, fused=False, forced=True)
                    steps.append(rec)
                    pending.append(token)
                    if on_token:
                        on_token(rec)
                    continue

                vectors = self._fan_out([(p, s, pending) for p, s in zip(providers, sessions)])
                pending = []
                if guided:
                    fused_flag = len(steps) >= request.guidance.warmup_tokens
                    logits = fuse_with_warmup(
                        vectors[0], vectors[2], vectors[1], request.guidance, len(steps)
                    )
                else:
                    fused_flag = False
                    logits = vectors[0]

                probs = to_probabilities(logits, request.sampling.temperature)
                probs = top_p_filter(probs, request.sampling.top_p)
                token = sample(probs, rng, greedy=request.sampling.greedy)

                if token == eos_id and request.mode == "budget_forcing" and (
                    forcing_left is None or forcing_left > 0
                ):
                    if forcing_left is not None:
                        forcing_left -= 1
                    # Replace the end token with the continuation sequence;
                    # eos itself is never emitted or appended.
                    forcing_queue = list(request.forcing_tokens)
                    continue

                snapshot = None
                if request.record_logits:
                    snapshot = {"target": vectors[0].copy(), "fused": np.asarray(logits).copy()}
                    if guided:
                        snapshot["base"] = vectors[1].copy()
                        snapshot["guider"] = vectors[2].copy()
                rec = StepRecord(len(steps), token, fused=fused_flag, forced=False, logits=snapshot)
                steps.append(rec)
                if on_token:
                    on_token(rec)
                if token == eos_id:
                    stop_reason = "eos"
                    break
                pending.append(token)
        except TransportError as exc:
            stop_reason = "aborted"
            error = str(exc)
        finally:
            for p, s in zip(providers, sessions):
                try:
                    p.close_session(s)
                except LogitFuseError:
                    pass

        trace = DecodeTrace(
            request=request, steps=steps, stop_reason=stop_reason, rng=rng_info, error=error
        )
        trace.diagnostics["repeat_4gram_rate"] = round(repeat_ngram_rate(trace.tokens), 6)
        return trace

    def decode_budget_forcing(
        self, request: DecodeRequest, sample_index: int = 0
    ) -> DecodeTrace:
        """Target-only decoding that swaps sampled eos for forcing_tokens."""
        if request.mode != "budget_forcing":
            raise ValueError(f"expected budget_forcing mode, got {request.mode!r}")
        return self.decode(request, sample_index=sample_index)

    def decode_batch(
        self,
        requests: Sequence[DecodeRequest],
        n_samples: int = 1,
        max_workers: int = 1,
    ) -> list[BatchItem]:
        """n_samples independent traces per request, seeds base_seed + i.

        Per-item failures are isolated; output order is deterministic
        (request order, then sample index).
        """
        if n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {n_samples}")
        jobs = [(ri, si, req) for ri, req in enumerate(requests) for si in range(n_samples)]

        def run(job) -> BatchItem:
            ri, si, req = job
            try:
                trace = self.decode(req, sample_index=si)
            except LogitFuseError as exc:
                return BatchItem(ri, si, trace=None, error=str(exc))
            err = trace.error if trace.stop_reason == "aborted" else None
            return BatchItem(ri, si, trace=trace, error=err)

        if max_workers > 1:
            with ThreadPoolExecutor(max_workers=max_workers) as pool:
                return list(pool.map(run, jobs))
        return [run(job) for job in jobs]
