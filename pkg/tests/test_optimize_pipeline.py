import pytest

from optiweave.edit_agent import ValidAssociatedEdits
from optiweave.edit_history import EditRecord
from optiweave.errors import PatchApplyError, UnparseableCandidateError
from optiweave.knowledge_store import RetrievalResult, Snippet
from optiweave.model_gateway import InteractionLog, ScriptedProvider
from optiweave.optimize_pipeline import (
    GENERIC_GOAL,
    EditCandidate,
    OptimizationTask,
    PatchEntry,
    PipelineConfig,
    PipelineProviders,
    ProjectPatch,
    append_history,
    apply_patch,
    augment,
    extract_code,
    generate_initial_edit,
    integrate,
    propose_optimized,
    run_sequence,
)
from optiweave.relevance import ScriptedRelevanceScorer, build_sequence
from optiweave.syntax_graph import build_call_graph, load_corpus_from_dir, parse_unit

from conftest import make_corpus

NO_EDITS = ValidAssociatedEdits(edits=(), rationales=())


def fn_record(body="def work(x):\n    return x + 1\n", path="m.py"):
    return parse_unit(path, body).functions[0]


def text(content):
    return {"kind": "text", "content": f"```python\n{content}\n```"}


def snippet(sid, body, origin="internal", sim=0.9):
    snip = Snippet(id=sid, origin=origin, source_tag="t", body=body, embedding=(1.0,))
    return (snip, sim)


class TestExtractCode:
    def test_fenced(self):
        assert extract_code("noise\n```python\ndef f(): pass\n```\ntail") == "def f(): pass"

    def test_bare(self):
        assert extract_code("def f(): pass\n") == "def f(): pass"


class TestGenerateInitialEdit:
    def test_scripted_loop_hoisted_body(self):
        hoisted = "def work(x):\n    delta = 1\n    return x + delta"
        provider = ScriptedProvider([text(hoisted)])
        candidate = generate_initial_edit(fn_record(), NO_EDITS, None, provider)
        assert candidate.stage == "initial"
        assert candidate.new_body == hoisted

    def test_invalid_syntax_twice_raises(self):
        provider = ScriptedProvider([
            {"kind": "text", "content": "not python (("},
            {"kind": "text", "content": "still not python (("},
        ])
        with pytest.raises(UnparseableCandidateError):
            generate_initial_edit(fn_record(), NO_EDITS, None, provider)

    def test_recovers_after_one_bad_reply(self):
        fixed = "def work(x):\n    return x + 1"
        provider = ScriptedProvider([
            {"kind": "text", "content": "garbage"},
            text(fixed),
        ])
        candidate = generate_initial_edit(fn_record(), NO_EDITS, None, provider)
        assert candidate.new_body == fixed

    def test_rename_rejected(self):
        provider = ScriptedProvider([
            text("def other(x):\n    return x"),
            text("def also_other(x):\n    return x"),
        ])
        with pytest.raises(UnparseableCandidateError):
            generate_initial_edit(fn_record(), NO_EDITS, None, provider)

    def test_generic_instruction_without_task_prompt(self):
        log = InteractionLog()
        provider = ScriptedProvider([text("def work(x):\n    return x + 1")],
                                    interaction_log=log)
        generate_initial_edit(fn_record(), NO_EDITS, None, provider)
        prompt = log.entries[0]["messages"][0]["content"]
        assert GENERIC_GOAL in prompt

    def test_task_prompt_used_when_present(self):
        log = InteractionLog()
        provider = ScriptedProvider([text("def work(x):\n    return x + 1")],
                                    interaction_log=log)
        generate_initial_edit(fn_record(), NO_EDITS, "make it 2x faster", provider)
        prompt = log.entries[0]["messages"][0]["content"]
        assert "make it 2x faster" in prompt
        assert GENERIC_GOAL not in prompt


class TestAugment:
    def initial(self):
        return EditCandidate(function_id="m.work", stage="initial",
                             new_body="def work(x):\n    return x + 1")

    def test_counts_internal_plus_external(self):
        internal = RetrievalResult(entries=(
            snippet("i1", "def a(): return 1"), snippet("i2", "def b(): return 2"),
        ))
        external = RetrievalResult(entries=(snippet("e1", "def c(): return 3", "external"),))
        prompt = augment(self.initial(), internal, external)
        assert len(prompt.alternatives) == 4
        assert prompt.alternatives[0] == self.initial().new_body  # initial first
        assert prompt.alternatives[1].startswith("def a")  # internal before external

    def test_duplicate_of_initial_deduplicated(self):
        dupe = "def work(x):\n    return x + 1\n"  # whitespace-insensitive match
        internal = RetrievalResult(entries=(snippet("i1", dupe), snippet("i2", "def b(): pass")))
        external = RetrievalResult(entries=(snippet("e1", "def c(): pass", "external"),))
        prompt = augment(self.initial(), internal, external)
        assert len(prompt.alternatives) == 3

    def test_zero_retrieval(self):
        prompt = augment(self.initial(), RetrievalResult(entries=()),
                         RetrievalResult(entries=()))
        assert prompt.alternatives == (self.initial().new_body,)

    def test_requires_initial_stage(self):
        optimized = EditCandidate(function_id="m.work", stage="optimized", new_body="def work(x): return x")
        with pytest.raises(ValueError):
            augment(optimized, RetrievalResult(entries=()), RetrievalResult(entries=()))


class TestProposeOptimized:
    def prompt(self):
        fast = "def work(x):\n    return x + 1"
        faster = "def work(x):\n    return x.__add__(1)"
        return augment(
            EditCandidate(function_id="m.work", stage="initial", new_body=fast),
            RetrievalResult(entries=(snippet("i1", faster),)),
            RetrievalResult(entries=()),
        )

    def test_selects_known_alternative_verbatim(self):
        prompt = self.prompt()
        provider = ScriptedProvider([text(prompt.alternatives[1])])
        candidate = propose_optimized(prompt, provider, "m.work")
        assert candidate.new_body == prompt.alternatives[1]
        assert "alternative 2 verbatim" in candidate.provenance

    def test_single_alternative(self):
        prompt = augment(
            EditCandidate(function_id="m.work", stage="initial",
                          new_body="def work(x):\n    return x + 1"),
            RetrievalResult(entries=()), RetrievalResult(entries=()),
        )
        provider = ScriptedProvider([text(prompt.alternatives[0])])
        candidate = propose_optimized(prompt, provider, "m.work")
        assert candidate.new_body == prompt.alternatives[0]

    def test_failure_falls_back_to_initial(self):
        prompt = self.prompt()
        provider = ScriptedProvider([{"kind": "error", "message": "down"}])
        candidate = propose_optimized(prompt, provider, "m.work")
        assert candidate.new_body == prompt.alternatives[0]
        assert candidate.provenance.startswith("fallback")

    def test_unparseable_output_falls_back(self):
        prompt = self.prompt()
        provider = ScriptedProvider([{"kind": "text", "content": "((("}])
        candidate = propose_optimized(prompt, provider, "m.work")
        assert candidate.new_body == prompt.alternatives[0]


class TestIntegrate:
    def setup_corpus(self):
        corpus = make_corpus({
            "m.py": (
                "def work(x):\n"
                "    return x + 1\n"
                "\n"
                "\n"
                "def caller(v):\n"
                "    return work(v)\n"
            ),
        })
        graph = build_call_graph(corpus.units.values())
        return corpus, graph, corpus.get_function("m.work")

    def test_clean_candidate_passthrough(self):
        corpus, graph, fn = self.setup_corpus()
        optimized = EditCandidate(function_id=fn.id, stage="optimized",
                                  new_body="def work(x):\n    return 1 + x")
        provider = ScriptedProvider([text(optimized.new_body)])
        integrated = integrate(fn, optimized, corpus, graph, provider)
        assert integrated.stage == "integrated"
        assert integrated.new_body == optimized.new_body

    def test_renamed_public_function_rejected_then_fallback(self):
        corpus, graph, fn = self.setup_corpus()
        optimized = EditCandidate(function_id=fn.id, stage="optimized",
                                  new_body="def work(x):\n    return 1 + x")
        renamed = text("def work_fast(x):\n    return 1 + x")
        provider = ScriptedProvider([renamed, renamed])
        integrated = integrate(fn, optimized, corpus, graph, provider)
        assert integrated.new_body == fn.body  # no-op fallback
        assert "fallback" in integrated.provenance

    def test_arity_change_rejected_then_fallback(self):
        corpus, graph, fn = self.setup_corpus()
        optimized = EditCandidate(function_id=fn.id, stage="optimized",
                                  new_body="def work(x):\n    return 1 + x")
        two_args = text("def work(x, scale):\n    return scale * x")
        provider = ScriptedProvider([two_args, two_args])
        integrated = integrate(fn, optimized, corpus, graph, provider)
        assert integrated.new_body == fn.body

    def test_reprompt_can_recover(self):
        corpus, graph, fn = self.setup_corpus()
        optimized = EditCandidate(function_id=fn.id, stage="optimized",
                                  new_body="def work(x):\n    return 1 + x")
        provider = ScriptedProvider([
            text("def wrong(x):\n    return x"),
            text("def work(x):\n    return 1 + x"),
        ])
        integrated = integrate(fn, optimized, corpus, graph, provider)
        assert integrated.new_body == optimized.new_body

    def test_model_failure_falls_back(self):
        corpus, graph, fn = self.setup_corpus()
        optimized = EditCandidate(function_id=fn.id, stage="optimized",
                                  new_body="def work(x):\n    return 1 + x")
        provider = ScriptedProvider([{"kind": "error", "message": "down"}])
        integrated = integrate(fn, optimized, corpus, graph, provider)
        assert integrated.new_body == fn.body


class TestAppendHistory:
    def test_append_grows_history(self):
        history = [
            EditRecord(origin=f"s{i}", path="p", function_id=f"f{i}", before="a", after="b",
                       message="") for i in range(3)
        ]
        out = append_history(history, "m.f", "m.py", "old body", "new body")
        assert len(out) == 4

    def test_noop_leaves_history_unchanged(self):
        out = append_history([], "m.f", "m.py", "same", "same")
        assert out == []

    def test_duplicate_rejected(self):
        once = append_history([], "m.f", "m.py", "old", "new")
        twice = append_history(once, "m.f", "m.py", "old", "new")
        assert len(twice) == 1


class TestApplyPatch:
    def test_apply_and_idempotence(self, toy_repo_dir):
        corpus = load_corpus_from_dir(toy_repo_dir)
        fn = corpus.get_function("mod.f_c")
        new_body = "def f_c(chunk):\n    return len(chunk) + 0"
        patch = ProjectPatch(base_revision="r", entries=(
            PatchEntry("mod.f_c", "mod.py", fn.body, new_body),
        ))
        patched = apply_patch(corpus, patch)
        assert patched.get_function("mod.f_c").body == new_body
        again = apply_patch(patched, patch)  # re-application detected, no error
        assert again.get_function("mod.f_c").body == new_body

    def test_mismatch_raises(self, toy_repo_dir):
        corpus = load_corpus_from_dir(toy_repo_dir)
        patch = ProjectPatch(base_revision="r", entries=(
            PatchEntry("mod.f_c", "mod.py", "def f_c(chunk):\n    pass", "def f_c(chunk):\n    return 0"),
        ))
        with pytest.raises(PatchApplyError):
            apply_patch(corpus, patch)

    def test_round_trip_json(self, tmp_path):
        patch = ProjectPatch(base_revision="rev", entries=(
            PatchEntry("a.f", "a.py", "x", "y"),
        ))
        path = str(tmp_path / "patch.json")
        patch.save(path)
        assert ProjectPatch.load(path) == patch


def touched(body: str) -> str:
    return body + "\n    _touched = True"


def passthrough_providers(corpus, sequence, modify=(), fail_on=()):
    """Scripted edit model: initial + integrate responses per sequence entry."""
    script = []
    for entry in sequence.entries:
        body = corpus.get_function(entry.function_id).body
        out = touched(body) if entry.function_id in modify else body
        if entry.function_id in fail_on:
            script.append({"kind": "error", "message": "scripted failure"})
            continue  # initial fails; integrate never reached for this function
        script.append(text(out))
        script.append(text(out))
    edit_model = ScriptedProvider(script)
    return PipelineProviders(
        edit_model=edit_model,
        optimizer_model=ScriptedProvider([]),
        agent_model=ScriptedProvider([]),
        scorer=ScriptedRelevanceScorer({}),
        knowledge=None,
    )


def toy_sequence(corpus):
    graph = build_call_graph(corpus.units.values())
    scorer = ScriptedRelevanceScorer({"mod.f_d": 0.9, "mod.f_a": 0.8,
                                      "mod.f_b": 0.6, "mod.f_c": 0.12})
    return build_sequence(graph, corpus, "mod.f_t", scorer)


class TestRunSequence:
    def test_passthrough_patch_order_matches_sequence(self, toy_repo_dir):
        corpus = load_corpus_from_dir(toy_repo_dir)
        sequence = toy_sequence(corpus)
        providers = passthrough_providers(corpus, sequence)
        config = PipelineConfig(enable_vae=False, enable_retrieval=False)
        task = OptimizationTask(corpus=corpus, target_id="mod.f_t")
        patch, report = run_sequence(task, sequence, providers, config)
        assert [e.function_id for e in patch.entries] == list(sequence.ids())
        assert len(patch.entries) == 4

    def test_singleton_sequence(self):
        corpus = make_corpus({"m.py": "def only():\n    return 1\n"})
        graph = build_call_graph(corpus.units.values())
        sequence = build_sequence(graph, corpus, "m.only", ScriptedRelevanceScorer({}))
        providers = passthrough_providers(corpus, sequence)
        config = PipelineConfig(enable_vae=False, enable_retrieval=False)
        patch, _ = run_sequence(OptimizationTask(corpus=corpus, target_id="m.only"),
                                sequence, providers, config)
        assert len(patch.entries) == 1

    def test_failing_function_degrades_to_noop(self, toy_repo_dir):
        corpus = load_corpus_from_dir(toy_repo_dir)
        sequence = toy_sequence(corpus)
        providers = passthrough_providers(
            corpus, sequence,
            modify={"mod.f_d", "mod.f_t", "mod.f_b"},
            fail_on={"mod.f_a"},
        )
        config = PipelineConfig(enable_vae=False, enable_retrieval=False)
        patch, report = run_sequence(OptimizationTask(corpus=corpus, target_id="mod.f_t"),
                                     sequence, providers, config)
        by_id = {e.function_id: e for e in patch.entries}
        assert by_id["mod.f_a"].is_noop
        assert not by_id["mod.f_d"].is_noop
        assert not by_id["mod.f_t"].is_noop
        f_a_info = next(i for i in report.functions if i["function_id"] == "mod.f_a")
        assert f_a_info["outcome"] == "noop"
        assert any("initial edit failed" in d for d in f_a_info["degradations"])

    def test_edits_applied_cumulatively_and_history_grows(self, toy_repo_dir):
        corpus = load_corpus_from_dir(toy_repo_dir)
        sequence = toy_sequence(corpus)
        providers = passthrough_providers(corpus, sequence,
                                          modify={"mod.f_d", "mod.f_t"})
        config = PipelineConfig(enable_vae=False, enable_retrieval=False)
        task = OptimizationTask(corpus=corpus, target_id="mod.f_t")
        patch, report = run_sequence(task, sequence, providers, config)
        patched = apply_patch(corpus, patch)
        assert patched.get_function("mod.f_d").body.endswith("_touched = True")
        # original corpus untouched
        assert not corpus.get_function("mod.f_d").body.endswith("_touched = True")

    def test_corpus_parseable_after_every_step(self, toy_repo_dir):
        corpus = load_corpus_from_dir(toy_repo_dir)
        sequence = toy_sequence(corpus)
        providers = passthrough_providers(corpus, sequence,
                                          modify={fid for fid in sequence.ids()})
        config = PipelineConfig(enable_vae=False, enable_retrieval=False)
        patch, _ = run_sequence(OptimizationTask(corpus=corpus, target_id="mod.f_t"),
                                sequence, providers, config)
        patched = apply_patch(corpus, patch)
        for unit in patched.units.values():
            assert unit.diagnostics == []

    def test_caller_arity_preserved_for_patched_functions(self, toy_repo_dir):
        from optiweave.syntax_graph import call_argument_counts

        corpus = load_corpus_from_dir(toy_repo_dir)
        sequence = toy_sequence(corpus)
        providers = passthrough_providers(corpus, sequence,
                                          modify={fid for fid in sequence.ids()})
        config = PipelineConfig(enable_vae=False, enable_retrieval=False)
        patch, _ = run_sequence(OptimizationTask(corpus=corpus, target_id="mod.f_t"),
                                sequence, providers, config)
        patched = apply_patch(corpus, patch)
        graph = build_call_graph(patched.units.values())
        for entry in patch.entries:
            fn = patched.get_function(entry.function_id)
            positional = [p for p in fn.signature if not p.startswith("*")]
            for count in call_argument_counts(patched, graph, entry.function_id):
                assert count <= len(positional) or any(p.startswith("*") for p in fn.signature)
