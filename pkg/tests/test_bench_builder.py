import json
import os
import re

import pytest

from optiweave.bench_builder import (
    BundleSelections,
    FilterConfig,
    TaskBundle,
    build_tasks,
    emit_task_bundle,
    extract_test_cases,
    keyword_filter,
    pick_target_function,
    semantic_confirm,
    size_filter,
    stem,
    validate_manifest,
)
from optiweave.edit_history import CommitRecord, EditRecord, FileDiff, Hunk
from optiweave.errors import ModelFailureError, NoTestsError, SchemaViolationError
from optiweave.model_gateway import ScriptedProvider

from conftest import git, make_corpus


def commit(sha, message, files=((3, 3),)):
    """Synthetic commit with (added, removed) line counts per file."""
    diffs = []
    for idx, (added, removed) in enumerate(files):
        lines = tuple([f"-old{i}" for i in range(removed)] + [f"+new{i}" for i in range(added)])
        diffs.append(FileDiff(
            old_path=f"src/file{idx}.py", new_path=f"src/file{idx}.py",
            hunks=(Hunk(1, max(removed, 1), 1, max(added, 1), lines),),
        ))
    return CommitRecord(sha=sha, message=message, timestamp=0, diffs=tuple(diffs))


HIT_MESSAGES = [
    "optimize the tokenizer inner loop",
    "reduce latency in the request path",
    "improve efficiency of the scheduler",
    "make startup fast again",
    "speed up parser, 2x faster",
    "add caching for config lookups",
    "fix performance regression in joins",
    "accelerated matrix kernel",
    "remove bottleneck in io layer",
    "quicker retries for flaky sockets",
    "increase throughput of the consumer",
    "perf: avoid quadratic rescan",
]

MISS_MESSAGES = [
    "fix typo in docs", "update readme badges", "bump version to 1.2",
    "refactor module imports", "add unit coverage for parser",
    "handle none input gracefully", "rename internal helper",
    "support python 3.12", "migrate ci to new runner",
    "fix crash on empty config", "add logging around startup",
    "clean dead code", "sort imports", "update license year",
    "add contributor guide", "translate error messages",
    "upgrade linter", "pin dependencies", "fix race in shutdown",
    "improve error wording", "add type hints to models",
    "document release steps", "merge duplicate branches",
    "fix off by one in pagination", "validate schema on load",
    "drop legacy shims", "tidy test fixtures", "expand api docs",
    "correct spelling of receiver", "adjust default colors",
    "move constants to module", "add issue templates",
    "guard against missing env", "normalize line endings",
    "restructure package layout", "return early on none",
    "handle unicode filenames", "simplify branching logic",
]


def keyword_oracle(message: str, keywords) -> bool:
    # brute-force scan: stemmed token membership, independent of TF-IDF plumbing
    stems = {stem(k) for k in keywords}
    return any(stem(w) in stems for w in re.findall(r"[A-Za-z]+", message))


class TestStem:
    @pytest.mark.parametrize("word,expected_match", [
        ("faster", "fast"), ("fastest", "fast"), ("optimized", "optimize"),
        ("optimization", "optimize"), ("optimizing", "optimize"),
        ("latencies", "latency"), ("caching", "cache"), ("speeds", "speed"),
        ("quickly", "quick"), ("performant", "performance"),
    ])
    def test_inflections_share_stems(self, word, expected_match):
        assert stem(word) == stem(expected_match)

    def test_short_words_survive(self):
        assert stem("io") == "io"
        assert stem("perf") == "perf"


class TestKeywordFilter:
    def test_kept_and_dropped_examples(self):
        kept = keyword_filter([commit("a", "speed up parser, 2x faster")])
        assert len(kept) == 1
        dropped = keyword_filter([commit("b", "fix typo in docs")])
        assert dropped == []

    def test_synthetic_corpus_matches_oracle(self):
        config = FilterConfig()
        commits = [commit(f"h{i:02d}", m) for i, m in enumerate(HIT_MESSAGES)]
        commits += [commit(f"m{i:02d}", m) for i, m in enumerate(MISS_MESSAGES)]
        assert len(commits) == 50  # 12 keyword hits + 38 misses
        kept = keyword_filter(commits, config)
        expected = {c.sha for c in commits if keyword_oracle(c.message, config.keywords)}
        assert {c.sha for c in kept} == expected
        assert expected == {f"h{i:02d}" for i in range(len(HIT_MESSAGES))}

    def test_determinism(self):
        commits = [commit(f"s{i}", m) for i, m in enumerate(HIT_MESSAGES + MISS_MESSAGES)]
        first = [c.sha for c in keyword_filter(commits)]
        second = [c.sha for c in keyword_filter(commits)]
        assert first == second

    def test_threshold_zero_means_any_hit(self):
        config = FilterConfig(tfidf_threshold=0.0)
        assert keyword_filter([commit("a", "optimize")], config)

    def test_high_threshold_drops_weak_hits(self):
        config = FilterConfig(tfidf_threshold=50.0)
        assert keyword_filter([commit("a", "optimize the thing")], config) == []


class TestSizeFilter:
    @pytest.mark.parametrize("added,removed,kept", [
        (2, 2, False),   # 4 lines: below minimum
        (3, 2, True),    # 5 lines: boundary kept
        (75, 75, True),  # 150 lines: boundary kept
        (76, 75, False),  # 151 lines: above maximum
    ])
    def test_line_boundaries(self, added, removed, kept):
        result = size_filter([commit("x", "msg", files=((added, removed),))])
        assert bool(result) is kept

    @pytest.mark.parametrize("nfiles,kept", [(4, True), (5, False)])
    def test_file_boundaries(self, nfiles, kept):
        files = tuple((2, 1) for _ in range(nfiles))  # 3 lines per file, total within bounds
        result = size_filter([commit("x", "msg", files=files)])
        assert bool(result) is kept

    def test_typical_kept(self):
        result = size_filter([commit("x", "msg", files=((5, 5), (5, 5)))])
        assert len(result) == 1

    def test_config_validation(self):
        with pytest.raises(ValueError):
            FilterConfig(min_lines=10, max_lines=5)
        with pytest.raises(ValueError):
            FilterConfig(keywords=())


class TestSemanticConfirm:
    def scripted(self, verdict="relevant", score=0.9):
        return ScriptedProvider([{
            "kind": "text",
            "content": json.dumps({"verdict": verdict, "score": score, "rationale": "r"}),
        }])

    def test_relevant_kept(self):
        verdict = semantic_confirm(commit("a", "speed up"), self.scripted("relevant"))
        assert verdict.verdict == "relevant"

    def test_irrelevant_dropped(self):
        verdict = semantic_confirm(commit("a", "memory fix"), self.scripted("irrelevant"))
        assert verdict.verdict == "irrelevant"

    def test_model_failure_raises_for_needs_review(self):
        provider = ScriptedProvider([{"kind": "error", "message": "down"}])
        with pytest.raises(ModelFailureError):
            semantic_confirm(commit("a", "speed up"), provider)

    def test_audit_log_records_prompt_and_response(self):
        audit = []
        semantic_confirm(commit("abc123", "speed up"), self.scripted(), audit=audit)
        assert audit and audit[0]["sha"] == "abc123"
        assert "speed up" in audit[0]["prompt"]


TEST_PROJECT = {
    "calc.py": (
        "def slow_sum(xs):\n"
        "    total = 0\n"
        "    for x in xs:\n"
        "        total = total + x\n"
        "    return total\n"
        "\n"
        "\n"
        "def unrelated():\n"
        "    return 42\n"
    ),
    "tests/test_calc.py": (
        "from calc import slow_sum\n"
        "\n"
        "\n"
        "def test_slow_sum():\n"
        "    assert slow_sum([1, 2, 3]) == 6\n"
        "\n"
        "\n"
        "def test_fast_path():\n"
        "    assert slow_sum([]) == 0\n"
        "\n"
        "\n"
        "def test_unrelated_feature():\n"
        "    assert 1 + 1 == 2\n"
    ),
}


class TestExtractTestCases:
    def make_commit_touching(self, *test_functions):
        # a diff whose after-side lines fall inside the named test functions
        corpus = make_corpus(TEST_PROJECT)
        unit = corpus.units["tests/test_calc.py"]
        hunks = []
        for fn in unit.functions:
            if fn.name in test_functions:
                hunks.append(Hunk(fn.start_line + 1, 1, fn.start_line + 1, 1,
                                  ("-    old", "+    new")))
        fd = FileDiff(old_path="tests/test_calc.py", new_path="tests/test_calc.py",
                      hunks=tuple(hunks))
        return CommitRecord(sha="c1", message="optimize", timestamp=0, diffs=(fd,))

    def test_patch_test_ordered_first(self):
        corpus = make_corpus(TEST_PROJECT)
        commit_rec = self.make_commit_touching("test_fast_path")
        tests = extract_test_cases(commit_rec, corpus, "calc.slow_sum")
        assert tests[0] == "tests/test_calc.py::test_fast_path"
        # reachability oracle: test_slow_sum and test_fast_path call slow_sum
        assert "tests/test_calc.py::test_slow_sum" in tests
        assert "tests/test_calc.py::test_unrelated_feature" not in tests

    def test_no_tests_rejected(self):
        corpus = make_corpus({"calc.py": TEST_PROJECT["calc.py"]})
        commit_rec = CommitRecord(sha="c2", message="m", timestamp=0, diffs=())
        with pytest.raises(NoTestsError):
            extract_test_cases(commit_rec, corpus, "calc.unrelated")

    def test_reaching_tests_found_without_patch_tests(self):
        corpus = make_corpus(TEST_PROJECT)
        commit_rec = CommitRecord(sha="c3", message="m", timestamp=0, diffs=())
        tests = extract_test_cases(commit_rec, corpus, "calc.slow_sum")
        assert set(tests) == {"tests/test_calc.py::test_slow_sum",
                              "tests/test_calc.py::test_fast_path"}


class TestPickTarget:
    def test_most_edited_function_wins(self):
        edits = [
            EditRecord(origin="s", path="a.py", function_id="a.small",
                       before="def small():\n    return 1",
                       after="def small():\n    return 2", message=""),
            EditRecord(origin="s", path="a.py", function_id="a.big",
                       before="def big():\n    x = 1\n    y = 2\n    return x",
                       after="def big():\n    p = 9\n    q = 8\n    r = 7\n    return p",
                       message=""),
        ]
        target = pick_target_function(commit("s", "speed things up"), edits)
        assert target == "a.big"

    def test_override_wins(self):
        assert pick_target_function(commit("s", "m"), [], override="x.y") == "x.y"

    def test_no_candidates(self):
        assert pick_target_function(commit("s", "m"), []) is None


class TestEmitBundle:
    def selections(self):
        corpus = make_corpus(TEST_PROJECT)
        return BundleSelections(
            target_id="calc.slow_sum",
            tests=["tests/test_calc.py::test_slow_sum"],
            task_prompt="optimize slow_sum",
            history=[EditRecord(origin="h1", path="calc.py", function_id="calc.unrelated",
                                before="def unrelated():\n    return 41",
                                after="def unrelated():\n    return 42", message="fix")],
            corpus_before=corpus,
            ground_truth_bodies={"calc.slow_sum": "def slow_sum(xs):\n    return sum(xs)"},
            revision="abc^",
        )

    def test_emit_and_load_round_trip(self, tmp_path):
        out = str(tmp_path / "bundle")
        bundle = emit_task_bundle(commit("abc", "optimize slow_sum"), self.selections(), out)
        manifest_bytes = (tmp_path / "bundle" / "manifest.json").read_bytes()
        loaded = TaskBundle.load(out)
        loaded.save()
        assert (tmp_path / "bundle" / "manifest.json").read_bytes() == manifest_bytes
        assert loaded.target_id == "calc.slow_sum"
        assert loaded.tests == ["tests/test_calc.py::test_slow_sum"]
        assert loaded.history()[0].origin == "h1"
        assert os.path.exists(os.path.join(out, "project", "calc.py"))
        assert os.path.exists(os.path.join(out, "ground_truth.diff"))

    def test_missing_task_prompt_stays_null(self, tmp_path):
        selections = self.selections()
        selections.task_prompt = None
        out = str(tmp_path / "bundle")
        bundle = emit_task_bundle(commit("abc", ""), selections, out)
        assert bundle.task_prompt is None  # generic instruction marker

    def test_unknown_target_is_schema_violation(self, tmp_path):
        selections = self.selections()
        selections.target_id = "calc.missing"
        with pytest.raises(SchemaViolationError):
            emit_task_bundle(commit("abc", "m"), selections, str(tmp_path / "b"))

    def test_manifest_schema_rejects_missing_components(self):
        with pytest.raises(SchemaViolationError):
            validate_manifest({"schema_version": 1, "task_id": "t"})
        with pytest.raises(SchemaViolationError):
            validate_manifest({
                "schema_version": 1, "task_id": "t",
                "target_function": {"id": "a", "body": "b", "path": "p"},
                "task_prompt": None, "history": "h",
                "project": {"revision": "r", "root": "p", "environment": "e"},
                "tests": [],  # tests must be nonempty
                "ground_truth": {"diff": "d", "bodies": {}},
            })


@pytest.fixture
def buildable_repo(tmp_path):
    repo = str(tmp_path / "repo")
    os.makedirs(repo + "/tests")
    git(repo, "init", "-q", "-b", "main")
    (tmp_path / "repo" / "calc.py").write_text(TEST_PROJECT["calc.py"])
    (tmp_path / "repo" / "tests" / "test_calc.py").write_text(TEST_PROJECT["tests/test_calc.py"])
    git(repo, "add", "-A")
    git(repo, "commit", "-q", "-m", "initial project layout")

    fast = TEST_PROJECT["calc.py"].replace(
        "def slow_sum(xs):\n"
        "    total = 0\n"
        "    for x in xs:\n"
        "        total = total + x\n"
        "    return total\n",
        "def slow_sum(xs):\n"
        "    acc = 0\n"
        "    for x in xs:\n"
        "        acc += x\n"
        "    return acc\n",
    )
    (tmp_path / "repo" / "calc.py").write_text(fast)
    new_tests = TEST_PROJECT["tests/test_calc.py"] + (
        "\n\ndef test_speedy():\n    assert slow_sum([5]) == 5\n"
    )
    (tmp_path / "repo" / "tests" / "test_calc.py").write_text(new_tests)
    git(repo, "add", "-A")
    git(repo, "commit", "-q", "-m", "optimize slow_sum for speed")
    return repo


class TestBuildTasks:
    def test_end_to_end_single_bundle(self, buildable_repo, tmp_path):
        model = ScriptedProvider([{
            "kind": "text",
            "content": json.dumps({"verdict": "relevant", "score": 0.9, "rationale": "speed"}),
        }])
        out_root = str(tmp_path / "bundles")
        report = build_tasks(buildable_repo, out_root, model)
        assert report.mined == 2
        assert report.after_keyword == 1  # only the optimization commit
        assert report.after_size == 1
        assert report.after_semantic == 1
        assert len(report.emitted) == 1

        bundle = TaskBundle.load(report.emitted[0])
        assert bundle.target_id == "calc.slow_sum"
        assert bundle.tests[0] == "tests/test_calc.py::test_speedy"
        # project tree is the pre-commit revision with post-commit tests overlaid
        calc = open(os.path.join(bundle.project_root, "calc.py")).read()
        assert "total = total + x" in calc
        tests_src = open(os.path.join(bundle.project_root, "tests/test_calc.py")).read()
        assert "test_speedy" in tests_src
        # ground truth carries the post-commit body
        assert "acc += x" in bundle.ground_truth_bodies()["calc.slow_sum"]

    def test_filter_chain_is_nested(self, buildable_repo, tmp_path):
        # each stage keeps a subset of the previous stage
        model = ScriptedProvider([{
            "kind": "text",
            "content": json.dumps({"verdict": "relevant", "score": 0.9, "rationale": "s"}),
        }])
        report = build_tasks(buildable_repo, str(tmp_path / "out"), model)
        assert report.mined >= report.after_keyword >= report.after_size >= report.after_semantic

    def test_model_failure_parks_commit_for_review(self, buildable_repo, tmp_path):
        model = ScriptedProvider([{"kind": "error", "message": "down"}])
        report = build_tasks(buildable_repo, str(tmp_path / "out"), model)
        assert len(report.needs_review) == 1
        assert report.emitted == []
