import json
import os
import subprocess

import pytest

from optiweave.syntax_graph import Corpus, parse_unit

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")
TOY_BUNDLE = os.path.join(FIXTURES, "toy_bundle")

FAST_COUNT_COMMON = (
    "def count_common(a_text, b_text):\n"
    "    return len(set(tokenize(a_text)) & set(tokenize(b_text)))"
)

INITIAL_COUNT_COMMON = (
    "def count_common(a_text, b_text):\n"
    "    b_words = set(tokenize(b_text))\n"
    "    count = 0\n"
    "    seen = set()\n"
    "    for word in tokenize(a_text):\n"
    "        if word in seen:\n"
    "            continue\n"
    "        seen.add(word)\n"
    "        if word in b_words:\n"
    "            count += 1\n"
    "    return count"
)


def fenced(body: str) -> dict:
    return {"kind": "text", "content": f"```python\n{body}\n```"}


def tool_call(i: int, j: int) -> dict:
    return {"kind": "tool_call", "name": "get_fragments_range",
            "arguments": {"i": i, "j": j}}


def final_answer(picks: list) -> dict:
    return {"kind": "text", "content": json.dumps({"valid_edits": picks})}


def build_e2e_assets(tmp_path, *, enable_vae=True, enable_retrieval=True,
                     probe="auto", stub_counts=None) -> str:
    """Write scripted transcripts, an external index and a config document
    for a full run over the toy bundle. Returns the config path."""
    from optiweave.knowledge_store import KnowledgeIndex
    from optiweave.model_gateway import HashingEmbedder
    from optiweave.syntax_graph import load_corpus_from_dir

    corpus = load_corpus_from_dir(os.path.join(TOY_BUNDLE, "project"))
    bodies = {
        fid: corpus.get_function(fid).body
        for fid in ("textstats.tokenize", "textstats.count_common", "textstats.common_ratio")
    }

    index = KnowledgeIndex(HashingEmbedder(dim=64, seed=0))
    index.ingest([("ext.fast_common_words", FAST_COUNT_COMMON)],
                 origin="external", source_tag="curated-sample")
    index_path = str(tmp_path / "external_index.jsonl")
    index.save(index_path)

    agent_script = []
    if enable_vae:
        agent_script = [
            tool_call(1, 2), final_answer([{"index": 1, "rationale": "set conversion"}]),
            tool_call(1, 3), final_answer([{"index": 1, "rationale": "quadratic scan to set"}]),
            tool_call(1, 2), final_answer([]),
        ]

    editor_script = [
        fenced(bodies["textstats.tokenize"]),  # initial: tokenize unchanged
        fenced(bodies["textstats.tokenize"]),  # integrate: passthrough
        fenced(INITIAL_COUNT_COMMON),          # initial improvement for the target
    ]
    if enable_retrieval:
        editor_script.append(fenced(FAST_COUNT_COMMON))  # integrate the optimizer pick
    else:
        editor_script.append(fenced(INITIAL_COUNT_COMMON))
    editor_script += [
        fenced(bodies["textstats.common_ratio"]),
        fenced(bodies["textstats.common_ratio"]),
    ]

    optimizer_script = []
    if enable_retrieval:
        optimizer_script = [
            fenced(bodies["textstats.tokenize"]),
            fenced(FAST_COUNT_COMMON),  # selects the external alternative verbatim
            fenced(bodies["textstats.common_ratio"]),
        ]

    paths = {}
    for name, script in (("agent", agent_script), ("editor", editor_script),
                         ("optimizer", optimizer_script)):
        path = str(tmp_path / f"{name}_script.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(script, fh, indent=2)
        paths[name] = path

    config = {
        "providers": {
            "agent": {"kind": "scripted", "script": paths["agent"]},
            "editor": {"kind": "scripted", "script": paths["editor"]},
            "optimizer": {"kind": "scripted", "script": paths["optimizer"]},
        },
        "relevance": {
            "scripted_combined": {
                "textstats.tokenize": 0.9,
                "textstats.common_ratio": 0.8,
                "dupes.has_duplicates": 0.95,
            },
        },
        "retrieval": {"external_index": index_path, "use_bundled_external": False},
        "pipeline": {"enable_vae": enable_vae, "enable_retrieval": enable_retrieval},
        "eval": {
            "probe": probe,
            "stub_counts": stub_counts or {},
        },
    }
    config_path = str(tmp_path / "config.yaml")
    import yaml

    with open(config_path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(config, fh)
    return config_path


def make_corpus(files: dict[str, str]) -> Corpus:
    corpus = Corpus()
    for path, content in files.items():
        corpus.add(parse_unit(path, content))
    return corpus


def git(repo: str, *args: str, check: bool = True) -> str:
    env = dict(os.environ)
    env.update({
        "GIT_AUTHOR_NAME": "tester", "GIT_AUTHOR_EMAIL": "tester@example.com",
        "GIT_COMMITTER_NAME": "tester", "GIT_COMMITTER_EMAIL": "tester@example.com",
        "GIT_AUTHOR_DATE": "2024-01-01T00:00:00", "GIT_COMMITTER_DATE": "2024-01-01T00:00:00",
    })
    proc = subprocess.run(["git", "-C", repo, *args], capture_output=True, text=True, env=env)
    if check and proc.returncode != 0:
        raise AssertionError(f"git {' '.join(args)} failed: {proc.stderr}")
    return proc.stdout


@pytest.fixture
def toy_repo_dir() -> str:
    return os.path.join(FIXTURES, "toy")
