"""Command-line gateway: decode, eval, build-prefs, dpo-check, serve, sweep.

Exit codes: 0 success, 2 configuration error, 3 transport error, 4 partial
failure (some questions failed but outputs were preserved).
"""

from __future__ import annotations

import json
import math
import sys
from pathlib import Path

import click
import numpy as np

from .config import RunConfig, load_config
from .dpo import DpoConfig, ToyPolicy, TokenPair, dpo_gradient, dpo_loss, gradient_step_improves
from .engine import DecodeEngine, DecodeRequest, write_traces, read_traces
from .errors import ConfigError, LogitFuseError, TransportError
from .evaluation import (
    EvalQuestion,
    evaluate_question,
    aggregate,
    load_questions,
    write_graded_completions,
    write_records,
)
from .preferences import (
    build_guider_only_pairs,
    build_pairs,
    read_graded,
    read_pairs,
    subsample,
    write_pairs,
)
from .providers import Vocabulary
from .report import render_eval_figures, write_summary, write_sweep_summary

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TRANSPORT = 3
EXIT_PARTIAL = 4

# Exported so external trainers consume the same defaults the pair data was
# built for; apply-time knobs only, nothing here is used by this package.
TRAINING_MANIFEST_DEFAULTS = {
    "method": "dpo",
    "beta": 0.1,
    "epochs": 1,
    "learning_rate": 5e-6,
    "optimizer": "adamw",
    "lr_scheduler": "cosine_with_warmup",
    "warmup_ratio": 0.1,
    "batch_size": 32,
    "cutoff_length": 8192,
    "lora": {
        "rank": 64,
        "alpha": 128,
        "target_modules": ["q_proj", "k_proj", "v_proj", "o_proj"],
        "bias": "none",
    },
}


@click.group()
def main() -> None:
    """Logit-fusion decoding engine and experiment runner."""


def _fail(code: int, message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_cfg(config_path: str) -> RunConfig:
    try:
        return load_config(config_path)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
        raise AssertionError("unreachable")


def _apply_overrides(cfg: RunConfig, seed, alpha, warmup, mode, output) -> RunConfig:
    from dataclasses import replace

    try:
        if seed is not None:
            cfg = replace(cfg, sampling=replace(cfg.sampling, seed=seed))
        if alpha is not None:
            cfg = replace(cfg, guidance=replace(cfg.guidance, alpha=alpha))
        if warmup is not None:
            cfg = replace(cfg, guidance=replace(cfg.guidance, warmup_tokens=warmup))
        if mode is not None:
            cfg = replace(cfg, mode=mode)
        if output is not None:
            cfg = replace(cfg, output_dir=Path(output))
    except ValueError as exc:
        _fail(EXIT_CONFIG, str(exc))
    missing = [r for r in cfg.provider_roles_needed() if r not in cfg.providers]
    if missing:
        _fail(EXIT_CONFIG, f"providers.{missing[0]}: required for mode {cfg.mode!r}")
    return cfg


def _build_engine(cfg: RunConfig) -> DecodeEngine:
    roles = cfg.provider_roles_needed()
    built = {}
    for role in roles:
        spec = cfg.providers[role]
        try:
            provider = spec.build()
            provider.describe_vocab()  # fail fast on unreachable endpoints
        except (TransportError, OSError) as exc:
            where = spec.endpoint or str(spec.fixture)
            _fail(EXIT_TRANSPORT, f"provider {role!r} unreachable at {where}: {exc}")
        except LogitFuseError as exc:
            _fail(EXIT_CONFIG, f"provider {role!r}: {exc}")
        built[role] = provider
    engine = DecodeEngine(built["target"], built.get("base"), built.get("guider"))
    if cfg.mode == "guided" and engine.compatibility_error is not None:
        _fail(EXIT_CONFIG, f"vocab incompatibility: {engine.compatibility_error}")
    return engine


def _load_display_vocab(cfg: RunConfig, override: str | None = None) -> Vocabulary:
    source = Path(override) if override else cfg.display_vocab_source()
    if source is None:
        _fail(EXIT_CONFIG, "vocab: no token table available (set vocab: in config or --vocab)")
    try:
        payload = json.loads(Path(source).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        _fail(EXIT_CONFIG, f"vocab: cannot read {source}: {exc}")
    if "tokens" in payload:
        return Vocabulary.from_json(payload)
    if "vocab" in payload:
        return Vocabulary.from_json(payload["vocab"])
    _fail(EXIT_CONFIG, f"vocab: {source} is neither a vocabulary nor a TableLM fixture")
    raise AssertionError("unreachable")


def _prompt_tokens(question: EvalQuestion, vocab: Vocabulary) -> tuple[int, ...]:
    if question.prompt_tokens is not None:
        return question.prompt_tokens
    try:
        return tuple(vocab.token_id(tok) for tok in question.prompt.split())
    except KeyError as exc:
        raise ConfigError(f"question {question.id!r}: {exc.args[0]}") from exc


def _decode_dataset(cfg: RunConfig, engine: DecodeEngine, out_dir: Path) -> tuple[int, int]:
    """Decode every dataset question; returns (n_questions, n_failures)."""
    if cfg.dataset is None:
        _fail(EXIT_CONFIG, "dataset: required for decode")
    try:
        questions = load_questions(cfg.dataset)
    except ValueError as exc:
        _fail(EXIT_CONFIG, f"dataset: {exc}")
    vocab = _load_display_vocab(cfg)
    traces_dir = out_dir / "traces"
    traces_dir.mkdir(parents=True, exist_ok=True)
    failures = 0
    for question in questions:
        try:
            request = DecodeRequest(
                prompt_tokens=_prompt_tokens(question, vocab),
                guidance=cfg.guidance,
                sampling=cfg.sampling,
                max_new_tokens=cfg.max_new_tokens,
                mode=cfg.mode,
                forcing_tokens=cfg.forcing_tokens,
                forcing_budget=cfg.forcing_budget,
                record_logits=cfg.record_logits,
            )
        except (ValueError, ConfigError) as exc:
            _fail(EXIT_CONFIG, str(exc))
        items = engine.decode_batch([request], n_samples=cfg.n_samples)
        bad = [item for item in items if not item.ok]
        if bad:
            failures += 1
            for item in bad:
                click.echo(f"question {question.id}: sample {item.sample_index} failed: {item.error}", err=True)
        produced = [item.trace for item in items if item.trace is not None]
        if produced:
            write_traces(traces_dir / f"{question.id}.jsonl", produced)
    return len(questions), failures


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=None)
@click.option("--alpha", type=float, default=None)
@click.option("--warmup", type=int, default=None)
@click.option("--mode", type=click.Choice(["guided", "target_only", "budget_forcing"]), default=None)
@click.option("--output", type=click.Path(), default=None)
def decode(config_path, seed, alpha, warmup, mode, output) -> None:
    """Run batched decoding over the configured dataset."""
    cfg = _apply_overrides(_load_cfg(config_path), seed, alpha, warmup, mode, output)
    engine = _build_engine(cfg)
    n_questions, failures = _decode_dataset(cfg, engine, cfg.output_dir)
    click.echo(f"decoded {n_questions - failures}/{n_questions} questions into {cfg.output_dir / 'traces'}")
    sys.exit(EXIT_PARTIAL if failures else EXIT_OK)


def _evaluate_traces(
    cfg: RunConfig, traces_dir: Path, out_dir: Path, vocab_override: str | None = None
):
    if cfg.dataset is None:
        _fail(EXIT_CONFIG, "dataset: required for eval")
    questions = {q.id: q for q in load_questions(cfg.dataset)}
    vocab = _load_display_vocab(cfg, vocab_override)
    trace_files = sorted(Path(traces_dir).glob("*.jsonl"))
    if not trace_files:
        write_summary([], out_dir)
        _fail(EXIT_CONFIG, f"no trace files found in {traces_dir}")
    unmatched = [p for p in trace_files if p.stem not in questions]
    records = []
    for path in trace_files:
        if path.stem not in questions:
            continue
        question = questions[path.stem]
        completions = []
        for trace in read_traces(path):
            text = vocab.decode(trace.tokens, skip_special=True)
            completions.append((text, trace.generated_count))
        records.append(evaluate_question(question, completions))
    rows = aggregate(records)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_records(out_dir / "results.jsonl", records)
    write_summary(rows, out_dir)
    render_eval_figures(records, rows, out_dir)
    return records, rows, unmatched, questions


@main.command("eval")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--traces", "traces_dir", type=click.Path(), default=None)
@click.option("--output", type=click.Path(), default=None)
@click.option("--vocab", "vocab_override", type=click.Path(), default=None)
@click.option("--graded-out", type=click.Path(), default=None)
@click.option("--origin", type=click.Choice(["L", "S"]), default="L")
def eval_cmd(config_path, traces_dir, output, vocab_override, graded_out, origin) -> None:
    """Grade decoded traces and emit result tables plus figures."""
    cfg = _load_cfg(config_path)
    out_dir = Path(output) if output else cfg.output_dir
    traces = Path(traces_dir) if traces_dir else cfg.output_dir / "traces"
    records, rows, unmatched, questions = _evaluate_traces(cfg, traces, out_dir, vocab_override)
    if graded_out:
        prompts = {qid: q.prompt for qid, q in questions.items()}
        write_graded_completions(graded_out, records, origin, prompts)
    click.echo((out_dir / "summary.txt").read_text(), nl=False)
    if unmatched:
        for path in unmatched:
            click.echo(f"unmatched trace file (no such question id): {path.name}", err=True)
        sys.exit(EXIT_PARTIAL)
    sys.exit(EXIT_OK)


@main.command("build-prefs")
@click.option("--graded", "graded_paths", multiple=True, required=True, type=click.Path(exists=True))
@click.option("--output", required=True, type=click.Path())
@click.option("--guider-only", is_flag=True, default=False)
@click.option("--subsample", "subsample_n", type=int, default=None)
@click.option("--seed", type=int, default=0)
@click.option("--dedup", is_flag=True, default=False)
def build_prefs(graded_paths, output, guider_only, subsample_n, seed, dedup) -> None:
    """Construct preference pairs and the counts manifest."""
    completions = []
    for path in graded_paths:
        try:
            completions.extend(read_graded(path))
        except ValueError as exc:
            _fail(EXIT_CONFIG, str(exc))
    if guider_only:
        pairs, counts = build_guider_only_pairs(completions)
    else:
        pairs, counts = build_pairs(completions, dedup=dedup)
    manifest: dict = {"schema_version": 1, "counts": counts.to_json()}
    if subsample_n is not None:
        try:
            pairs, sub_counts = subsample(pairs, subsample_n, seed)
        except ValueError as exc:
            _fail(EXIT_CONFIG, str(exc))
        manifest["subsample"] = {"n": subsample_n, "seed": seed, "counts": sub_counts.to_json()}
    out_dir = Path(output)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_pairs(out_dir / "pairs.jsonl", pairs)
    (out_dir / "counts.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    training = dict(TRAINING_MANIFEST_DEFAULTS)
    if counts.n_type1 + counts.n_type2 > 0:
        training["lambda"] = counts.to_json()["lambda"]
    (out_dir / "training_manifest.json").write_text(json.dumps(training, indent=2, sort_keys=True) + "\n")
    click.echo(f"wrote {len(pairs)} pairs to {out_dir / 'pairs.jsonl'}")
    sys.exit(EXIT_OK)


def _tokenize_with(vocab_tokens: list[str], text: str, where: str) -> tuple[int, ...]:
    index = {tok: i for i, tok in enumerate(vocab_tokens)}
    try:
        return tuple(index[tok] for tok in text.split())
    except KeyError as exc:
        raise ConfigError(f"{where}: token {exc.args[0]!r} not in toy vocabulary") from exc


@main.command("dpo-check")
@click.option("--pairs", "pairs_path", required=True, type=click.Path(exists=True))
@click.option("--policy", "policy_path", required=True, type=click.Path(exists=True))
@click.option("--output", required=True, type=click.Path())
@click.option("--step-size", type=float, default=1e-3)
def dpo_check(pairs_path, policy_path, output, step_size) -> None:
    """Verify the preference objective on a toy policy over exported pairs."""
    try:
        spec = json.loads(Path(policy_path).read_text())
        vocab_tokens = list(spec["vocab"])
        beta = float(spec.get("beta", 0.1))
        init = spec.get("init", "zeros")
        seed = int(spec.get("seed", 0))
        scale = float(spec.get("scale", 1.0))
        noise = float(spec.get("policy_noise", 0.0))
        lam_raw = spec.get("lambda")
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        _fail(EXIT_CONFIG, f"policy spec: {exc}")
    size = len(vocab_tokens)
    try:
        reference = ToyPolicy.random(size, seed, scale) if init == "random" else ToyPolicy.zeros(size)
        policy = reference.copy()
        if noise:
            policy = ToyPolicy(policy.logits + ToyPolicy.random(size, seed + 1, noise).logits)

        all_pairs = read_pairs(pairs_path)
        d1, d2 = [], []
        for p in all_pairs:
            tp = TokenPair(
                x=_tokenize_with(vocab_tokens, p.prompt, f"pair {p.question_id} prompt") or (0,),
                chosen=_tokenize_with(vocab_tokens, p.chosen, f"pair {p.question_id} chosen"),
                rejected=_tokenize_with(vocab_tokens, p.rejected, f"pair {p.question_id} rejected"),
            )
            (d2 if p.pair_type == "type2" else d1).append(tp)
        if not d1 and not d2:
            _fail(EXIT_CONFIG, "no pairs to check")
        if lam_raw is None:
            lam = len(d1) / (len(d1) + len(d2))
        else:
            lam = float(lam_raw)
        config = DpoConfig(beta=beta, lam=lam)
        loss = dpo_loss(policy, reference, d1, d2, config)
        grad = dpo_gradient(policy, reference, d1, d2, config)
        step = gradient_step_improves(policy, reference, d1, d2, config, step_size)
    except (ConfigError, ValueError, LogitFuseError) as exc:
        _fail(EXIT_CONFIG, str(exc))
    report = {
        "schema_version": 1,
        "loss": loss,
        "ln2": math.log(2),
        "is_reference_policy": bool(noise == 0.0),
        "lambda": lam,
        "beta": beta,
        "n_d1": len(d1),
        "n_d2": len(d2),
        "grad_max_abs": float(np.abs(grad).max()),
        "step": {
            "size": step_size,
            "loss_before": step.loss_before,
            "loss_after": step.loss_after,
            "improved": step.improved,
        },
    }
    Path(output).parent.mkdir(parents=True, exist_ok=True)
    Path(output).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    click.echo(f"loss={loss:.6f} (ln 2 = {math.log(2):.6f}), wrote {output}")
    sys.exit(EXIT_OK)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
def serve(config_path) -> None:
    """Serve fused decoding over HTTP (POST /v1/generate, streamed events)."""
    import uvicorn

    from .server import build_fusion_app

    cfg = _load_cfg(config_path)
    engine = _build_engine(cfg)
    app = build_fusion_app(engine, max_concurrency=cfg.service.max_concurrency)
    uvicorn.run(app, host=cfg.service.host, port=cfg.service.port, log_level="warning")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=None)
@click.option("--output", type=click.Path(), default=None)
def sweep(config_path, seed, output) -> None:
    """Run the ablation grid (alpha values, warm-up off, budget forcing)."""
    from dataclasses import replace

    cfg = _apply_overrides(_load_cfg(config_path), seed, None, None, None, output)
    variants: list[tuple[str, RunConfig]] = []
    for a in cfg.sweep.alphas:
        variants.append((f"alpha_{a:g}", replace(cfg, mode="guided", guidance=replace(cfg.guidance, alpha=a))))
    if cfg.sweep.no_warmup:
        variants.append(("no_warmup", replace(cfg, mode="guided", guidance=replace(cfg.guidance, warmup_tokens=0))))
    if cfg.sweep.budget_forcing:
        if not cfg.forcing_tokens:
            _fail(EXIT_CONFIG, "sweep.budget_forcing: decode.forcing_tokens must be set")
        variants.append(("budget_forcing", replace(cfg, mode="budget_forcing")))
    if cfg.sweep.target_only:
        variants.append(("target_only", replace(cfg, mode="target_only")))
    if not variants:
        _fail(EXIT_CONFIG, "sweep: no variants configured")

    needs_guided = any(v.mode == "guided" for _, v in variants)
    engine_cfg = cfg if needs_guided else replace(cfg, mode="target_only")
    engine = _build_engine(replace(engine_cfg, mode="guided") if needs_guided else engine_cfg)

    failures = 0
    variant_rows = []
    for name, vcfg in variants:
        vdir = cfg.output_dir / name
        _, bad = _decode_dataset(vcfg, engine, vdir)
        failures += bad
        _, rows, _, _ = _evaluate_traces(vcfg, vdir / "traces", vdir)
        for row in rows:
            variant_rows.append((name, row))
        click.echo(f"variant {name}: done")
    write_sweep_summary(variant_rows, cfg.output_dir)
    click.echo((cfg.output_dir / "sweep.txt").read_text(), nl=False)
    sys.exit(EXIT_PARTIAL if failures else EXIT_OK)


if __name__ == "__main__":
    main()
