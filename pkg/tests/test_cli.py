from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path

import pytest
import yaml
from click.testing import CliRunner

from logitfuse.cli import main
from logitfuse.engine import read_traces

from conftest import write_toy_workspace


@pytest.fixture
def runner():
    return CliRunner()


def invoke(runner, args):
    result = runner.invoke(main, args, catch_exceptions=False)
    return result


def tree_digest(root: Path, patterns=("**/*",)) -> dict[str, str]:
    out = {}
    for pattern in patterns:
        for path in sorted(Path(root).glob(pattern)):
            if path.is_file():
                out[str(path.relative_to(root))] = hashlib.sha256(path.read_bytes()).hexdigest()
    return out


class TestDecode:
    def test_counting_contract(self, runner, tmp_path):
        paths = write_toy_workspace(tmp_path, n_questions=3, n_samples=2)
        result = invoke(runner, ["decode", "--config", str(paths["config"])])
        assert result.exit_code == 0, result.output
        trace_files = sorted((tmp_path / "out" / "traces").glob("*.jsonl"))
        assert [p.stem for p in trace_files] == ["q00", "q01", "q02"]
        for path in trace_files:
            assert len(read_traces(path)) == 2

    def test_unreachable_endpoint_named(self, runner, tmp_path):
        paths = write_toy_workspace(tmp_path)
        raw = yaml.safe_load(paths["config"].read_text())
        raw["providers"]["guider"] = {"endpoint": "http://127.0.0.1:1/unreachable"}
        paths["config"].write_text(yaml.safe_dump(raw))
        result = runner.invoke(main, ["decode", "--config", str(paths["config"])])
        assert result.exit_code == 3
        assert "guider" in result.output and "127.0.0.1:1" in result.output

    def test_vocab_mismatch_refused(self, runner, tmp_path):
        paths = write_toy_workspace(tmp_path)
        fixture = json.loads(paths["guider"].read_text())
        fixture["vocab"]["tokens"] = ["think", "\\boxed{42}", "\\boxed{43}", "<eos>"]
        paths["guider"].write_text(json.dumps(fixture))
        result = runner.invoke(main, ["decode", "--config", str(paths["config"])])
        assert result.exit_code == 2
        assert "content_hash" in result.output

    def test_seed_and_alpha_overrides(self, runner, tmp_path):
        paths = write_toy_workspace(tmp_path)
        invoke(runner, ["decode", "--config", str(paths["config"]), "--seed", "9", "--output", str(tmp_path / "a")])
        [trace] = read_traces(next((tmp_path / "a" / "traces").glob("*.jsonl")))[:1]
        assert trace.rng.base_seed == 9
        invoke(runner, ["decode", "--config", str(paths["config"]), "--alpha", "0.25", "--output", str(tmp_path / "b")])
        [trace] = read_traces(next((tmp_path / "b" / "traces").glob("*.jsonl")))[:1]
        assert trace.request.guidance.alpha == 0.25


class TestEval:
    def run_pipeline(self, runner, tmp_path, **kw):
        paths = write_toy_workspace(tmp_path, **kw)
        assert invoke(runner, ["decode", "--config", str(paths["config"])]).exit_code == 0
        result = invoke(runner, ["eval", "--config", str(paths["config"])])
        return paths, result

    def test_tables_and_figures_written(self, runner, tmp_path):
        paths, result = self.run_pipeline(runner, tmp_path)
        assert result.exit_code == 0, result.output
        out = tmp_path / "out"
        assert (out / "summary.tsv").exists()
        assert (out / "summary.txt").exists()
        assert (out / "results.jsonl").exists()
        assert (out / "pass_rates.png").exists()
        assert (out / "token_lengths.png").exists()
        header = (out / "summary.tsv").read_text().splitlines()[0].split("\t")
        assert header == ["dataset", "questions", "samples", "pass@1", "pass@8", "avg_tokens"]

    def test_hand_graded_fixture_table(self, runner, tmp_path):
        # Greedy decoding makes the outcome exactly predictable: the guider
        # forces the correct boxed token right after warm-up.
        paths = write_toy_workspace(tmp_path, n_questions=2, n_samples=1)
        raw = yaml.safe_load(paths["config"].read_text())
        raw["sampling"]["greedy"] = True
        paths["config"].write_text(yaml.safe_dump(raw))
        assert invoke(runner, ["decode", "--config", str(paths["config"])]).exit_code == 0
        result = invoke(runner, ["eval", "--config", str(paths["config"])])
        assert result.exit_code == 0
        row = (tmp_path / "out" / "summary.tsv").read_text().splitlines()[1].split("\t")
        assert row[0] == "toy"
        assert float(row[3]) == 1.0  # guided greedy always lands on \boxed{42}

    def test_empty_trace_dir_is_config_error(self, runner, tmp_path):
        paths = write_toy_workspace(tmp_path)
        (tmp_path / "out" / "traces").mkdir(parents=True)
        result = runner.invoke(main, ["eval", "--config", str(paths["config"])])
        assert result.exit_code == 2
        assert "no trace files" in result.output

    def test_unmatched_ids_listed_and_excluded(self, runner, tmp_path):
        paths, _ = self.run_pipeline(runner, tmp_path)
        traces = tmp_path / "out" / "traces"
        (traces / "ghost.jsonl").write_text((traces / "q00.jsonl").read_text())
        result = runner.invoke(main, ["eval", "--config", str(paths["config"])])
        assert result.exit_code == 4
        assert "ghost" in result.output
        lines = (tmp_path / "out" / "results.jsonl").read_text().splitlines()
        assert all(json.loads(line)["question_id"] != "ghost" for line in lines)

    def test_graded_export(self, runner, tmp_path):
        paths, _ = self.run_pipeline(runner, tmp_path)
        graded = tmp_path / "graded.jsonl"
        result = invoke(
            runner,
            ["eval", "--config", str(paths["config"]), "--graded-out", str(graded), "--origin", "S"],
        )
        assert result.exit_code == 0
        rows = [json.loads(line) for line in graded.read_text().splitlines()]
        assert len(rows) == 3 * 2
        assert all(r["origin"] == "S" for r in rows)
        assert all(r["prompt"] == "think think" for r in rows)


class TestDeterminism:
    def test_repeat_run_byte_identical(self, runner, tmp_path):
        digests = []
        for name in ("run1", "run2"):
            paths = write_toy_workspace(tmp_path / name, seed=5)
            invoke(runner, ["decode", "--config", str(paths["config"])])
            invoke(runner, ["eval", "--config", str(paths["config"])])
            digests.append(tree_digest(tmp_path / name / "out"))
        assert digests[0] == digests[1]
        assert any(k.endswith(".png") for k in digests[0])


class TestSweep:
    def test_alpha_grid_subdirectories(self, runner, tmp_path):
        paths = write_toy_workspace(tmp_path, n_questions=2, n_samples=1)
        raw = yaml.safe_load(paths["config"].read_text())
        raw["sweep"] = {"alphas": [0, 0.5, 1, 1.5]}
        paths["config"].write_text(yaml.safe_dump(raw))
        result = invoke(runner, ["sweep", "--config", str(paths["config"])])
        assert result.exit_code == 0, result.output
        subdirs = sorted(p.name for p in (tmp_path / "out").iterdir() if p.is_dir())
        assert subdirs == ["alpha_0", "alpha_0.5", "alpha_1", "alpha_1.5"]
        assert (tmp_path / "out" / "sweep.tsv").exists()
        assert (tmp_path / "out" / "sweep.png").exists()

    def test_full_ablation_matrix(self, runner, tmp_path):
        paths = write_toy_workspace(tmp_path, n_questions=1, n_samples=1)
        raw = yaml.safe_load(paths["config"].read_text())
        raw["sweep"] = {"alphas": [1], "no_warmup": True, "budget_forcing": True, "target_only": True}
        paths["config"].write_text(yaml.safe_dump(raw))
        result = invoke(runner, ["sweep", "--config", str(paths["config"])])
        assert result.exit_code == 0, result.output
        rows = (tmp_path / "out" / "sweep.tsv").read_text().splitlines()
        variants = [line.split("\t")[0] for line in rows[1:]]
        assert variants == ["alpha_1", "no_warmup", "budget_forcing", "target_only"]


class TestBuildPrefs:
    def write_graded(self, path: Path):
        rows = []
        for qid, origin, correct, text in [
            ("q0", "L", True, "l ok"),
            ("q0", "L", True, "l ok 2"),
            ("q0", "L", False, "l bad"),
            ("q0", "S", True, "s ok"),
            ("q0", "S", False, "s bad"),
            ("q0", "S", False, "s bad 2"),
        ]:
            rows.append(
                {"question_id": qid, "origin": origin, "text": text, "correct": correct, "prompt": "p"}
            )
        path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")

    def test_counts_manifest_matches_brute_force(self, runner, tmp_path):
        graded = tmp_path / "graded.jsonl"
        self.write_graded(graded)
        out = tmp_path / "prefs"
        result = invoke(runner, ["build-prefs", "--graded", str(graded), "--output", str(out)])
        assert result.exit_code == 0
        manifest = json.loads((out / "counts.json").read_text())
        assert manifest["counts"]["n_type1"] == 2 * 2  # {L ok} x {S bad}
        assert manifest["counts"]["n_type2"] == 1 * 1
        assert manifest["counts"]["lambda"] == 4 / 5
        assert "proportions" in manifest["counts"]
        training = json.loads((out / "training_manifest.json").read_text())
        assert training["method"] == "dpo" and training["lambda"] == 4 / 5
        pairs = [json.loads(line) for line in (out / "pairs.jsonl").read_text().splitlines()]
        assert len(pairs) == 5
        assert {p["type"] for p in pairs} == {"type1", "type2"}

    def test_guider_only_and_subsample(self, runner, tmp_path):
        graded = tmp_path / "graded.jsonl"
        self.write_graded(graded)
        out = tmp_path / "prefs"
        result = invoke(
            runner,
            ["build-prefs", "--graded", str(graded), "--output", str(out), "--guider-only",
             "--subsample", "1", "--seed", "3"],
        )
        assert result.exit_code == 0
        pairs = [json.loads(line) for line in (out / "pairs.jsonl").read_text().splitlines()]
        assert len(pairs) == 1
        assert pairs[0]["type"] == "guider_only"
        manifest = json.loads((out / "counts.json").read_text())
        assert manifest["counts"]["n_guider_only"] == 2
        assert manifest["subsample"]["n"] == 1


class TestDpoCheck:
    def test_reference_mode_reports_ln2(self, runner, tmp_path):
        pairs_path = tmp_path / "pairs.jsonl"
        rows = [
            {"question_id": "q", "prompt": "a", "chosen": "b c", "rejected": "c", "type": "type1"},
            {"question_id": "q", "prompt": "a", "chosen": "c", "rejected": "b b", "type": "type2"},
        ]
        pairs_path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
        policy_path = tmp_path / "policy.json"
        policy_path.write_text(json.dumps({"vocab": ["a", "b", "c"], "beta": 0.1, "init": "random", "seed": 4}))
        report_path = tmp_path / "report.json"
        result = invoke(
            runner,
            ["dpo-check", "--pairs", str(pairs_path), "--policy", str(policy_path),
             "--output", str(report_path)],
        )
        assert result.exit_code == 0, result.output
        report = json.loads(report_path.read_text())
        assert abs(report["loss"] - math.log(2)) < 1e-12
        assert report["is_reference_policy"] is True
        assert report["lambda"] == 0.5
        assert report["step"]["improved"] is True

    def test_unknown_token_is_config_error(self, runner, tmp_path):
        pairs_path = tmp_path / "pairs.jsonl"
        pairs_path.write_text(
            json.dumps({"question_id": "q", "prompt": "zzz", "chosen": "a", "rejected": "b", "type": "type1"}) + "\n"
        )
        policy_path = tmp_path / "policy.json"
        policy_path.write_text(json.dumps({"vocab": ["a", "b"]}))
        result = runner.invoke(
            main,
            ["dpo-check", "--pairs", str(pairs_path), "--policy", str(policy_path),
             "--output", str(tmp_path / "r.json")],
        )
        assert result.exit_code == 2
        assert "zzz" in result.output


def test_missing_config_is_exit_2(runner, tmp_path):
    result = runner.invoke(main, ["decode", "--config", str(tmp_path / "nope.yaml")])
    assert result.exit_code == 2
