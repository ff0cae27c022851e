"""Tool-driven selection of valid associated edits from ranked history.

The agent offers the model a single tool, get_fragments_range(i, j), lets it
page through the relevance-ranked edits, and stops on a final JSON answer or
after the iteration budget. Edits the model references but that are not in
the ranked input are dropped, so the result is always a subset of the input.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional

from .edit_history import EditRecord, RankedEdits, truncate_for_prompt
from .errors import EmptyRangeError, ModelFailureError
from .model_gateway import ChatProvider, ModelRequest, ToolSchema
from .syntax_graph import FunctionRecord

log = logging.getLogger(__name__)

DEFAULT_MAX_ITERATIONS = 10
DEFAULT_FRAGMENTS_PER_CALL = 10

TOOL_NAME = "get_fragments_range"
TOOL_SCHEMA = ToolSchema(
    name=TOOL_NAME,
    description="Return the ranked historical edits from position i to j (1-based, inclusive).",
    parameters={
        "type": "object",
        "properties": {
            "i": {"type": "integer", "description": "first rank to return (1-based)"},
            "j": {"type": "integer", "description": "last rank to return (inclusive)"},
        },
        "required": ["i", "j"],
    },
)


def load_template(name: str) -> str:
    text = resources.files("optiweave.templates").joinpath(name).read_text("utf-8")
    # strip the version header line
    lines = text.split("\n")
    if lines and lines[0].startswith("# template-version"):
        lines = lines[1:]
    return "\n".join(lines).strip("\n")


@dataclass
class AgentConfig:
    max_iterations: int = DEFAULT_MAX_ITERATIONS
    fragments_per_call_cap: int = DEFAULT_FRAGMENTS_PER_CALL
    system_template: str = "agent_system.txt"
    definition_template: str = "agent_valid_edit_definition.txt"
    tool_template: str = "agent_tool_description.txt"
    format_template: str = "agent_output_format.txt"

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")

    def first_prompt(self, function: FunctionRecord, ranked_size: int) -> list[dict]:
        """Assemble the opening messages from the four prompt aspects."""
        system = "\n\n".join([
            load_template(self.system_template),
            load_template(self.definition_template),
            load_template(self.tool_template),
            load_template(self.format_template),
        ])
        user = (
            f"Function under optimization ({function.id}):\n"
            f"```python\n{function.body}\n```\n\n"
            f"There are {ranked_size} ranked historical edits available."
        )
        return [
            {"role": "system", "content": system},
            {"role": "user", "content": user},
        ]


@dataclass
class AgentTranscript:
    turns: list[dict] = field(default_factory=list)
    aborted: Optional[str] = None  # abort reason, None on a clean final answer

    def tool_call_count(self) -> int:
        return sum(1 for t in self.turns if t.get("tool_call"))

    def to_json(self) -> dict:
        return {"turns": self.turns, "aborted": self.aborted}


@dataclass(frozen=True)
class ValidAssociatedEdits:
    edits: tuple[EditRecord, ...]
    rationales: tuple[str, ...]

    def __post_init__(self):
        if len(self.edits) != len(self.rationales):
            raise ValueError("one rationale per edit required")

    def to_json(self) -> dict:
        return {
            "edits": [e.to_json() for e in self.edits],
            "rationales": list(self.rationales),
        }


EMPTY_RESULT = ValidAssociatedEdits(edits=(), rationales=())


def get_fragments_range(ranked: RankedEdits, i: int, j: int,
                        cap: int = DEFAULT_FRAGMENTS_PER_CALL) -> tuple[list[EditRecord], bool]:
    """Entries i..j (1-based, inclusive) of the ranked list.

    j is clamped to the list length (and the per-call cap); returns the
    records plus a flag saying whether clamping happened.
    """
    size = len(ranked)
    i = max(1, i)
    if i > size:
        raise EmptyRangeError(f"range start {i} beyond {size} ranked edits")
    clamped = False
    if j > size:
        j, clamped = size, True
    if j < i:
        j = i
    if cap and j - i + 1 > cap:
        j, clamped = i + cap - 1, True
    return [ranked.entries[k][0] for k in range(i - 1, j)], clamped


def _render_fragments(records: list[EditRecord], start_rank: int, clamped: bool) -> str:
    parts = []
    for offset, record in enumerate(records):
        parts.append(f"[rank {start_rank + offset}]\n{truncate_for_prompt(record)}")
    text = "\n\n".join(parts)
    if clamped:
        text += "\n\n(note: range was clamped to the available edits)"
    return text


_JSON_RE = re.compile(r"\{.*\}", re.DOTALL)


def _parse_final_answer(content: str) -> Optional[list[dict]]:
    match = _JSON_RE.search(content)
    if not match:
        return None
    try:
        doc = json.loads(match.group(0))
    except json.JSONDecodeError:
        return None
    picks = doc.get("valid_edits")
    if not isinstance(picks, list):
        return None
    return picks


def identify_valid_edits(
    function: FunctionRecord,
    ranked: RankedEdits,
    model: ChatProvider,
    config: Optional[AgentConfig] = None,
) -> tuple[ValidAssociatedEdits, AgentTranscript]:
    """Run the selection loop; always terminates within the iteration budget."""
    config = config or AgentConfig()
    transcript = AgentTranscript()
    if len(ranked) == 0:
        return EMPTY_RESULT, transcript

    messages = config.first_prompt(function, len(ranked))
    tool_calls = 0
    reprompted = False

    while True:
        try:
            response = model.complete(ModelRequest(messages=list(messages), tools=[TOOL_SCHEMA]))
        except ModelFailureError as err:
            transcript.aborted = f"MODEL_FAILURE: {err}"
            log.warning("agent degraded to zero associated edits: %s", err)
            return EMPTY_RESULT, transcript

        if response.kind == "text":
            picks = _parse_final_answer(response.content)
            if picks is None:
                if reprompted:
                    transcript.turns.append({"model": response.content, "tool_call": None,
                                             "tool_result": None})
                    transcript.aborted = "MALFORMED_ANSWER"
                    return EMPTY_RESULT, transcript
                reprompted = True
                transcript.turns.append({"model": response.content, "tool_call": None,
                                         "tool_result": None})
                messages.append({"role": "assistant", "content": response.content})
                messages.append({
                    "role": "user",
                    "content": "Your reply was not valid JSON. "
                               + load_template(config.format_template),
                })
                continue
            transcript.turns.append({"model": response.content, "tool_call": None,
                                     "tool_result": None, "final": True})
            return _collect(picks, ranked), transcript

        # tool call
        if response.tool_name != TOOL_NAME:
            if reprompted:
                transcript.aborted = f"MALFORMED_TOOL_CALL: unknown tool {response.tool_name}"
                return EMPTY_RESULT, transcript
            reprompted = True
            messages.append({
                "role": "user",
                "content": f"Unknown tool {response.tool_name!r}; only {TOOL_NAME} exists. "
                           + load_template(config.tool_template),
            })
            continue
        try:
            i = int(response.tool_arguments.get("i"))
            j = int(response.tool_arguments.get("j"))
        except (TypeError, ValueError):
            if reprompted:
                transcript.aborted = "MALFORMED_TOOL_CALL: non-integer range"
                return EMPTY_RESULT, transcript
            reprompted = True
            messages.append({
                "role": "user",
                "content": "Tool arguments must be integers i and j. "
                           + load_template(config.tool_template),
            })
            continue

        tool_calls += 1
        try:
            records, clamped = get_fragments_range(ranked, i, j, config.fragments_per_call_cap)
            rendered = _render_fragments(records, max(1, i), clamped)
        except EmptyRangeError as err:
            rendered = f"error: {err.code}: {err.message}"
        transcript.turns.append({
            "model": None,
            "tool_call": {"name": TOOL_NAME, "i": i, "j": j},
            "tool_result": rendered,
        })
        messages.append({"role": "assistant", "content": f"{TOOL_NAME}({i}, {j})"})
        messages.append({"role": "user", "content": rendered})

        if tool_calls >= config.max_iterations:
            transcript.aborted = f"ITERATION_BUDGET: {tool_calls} tool calls"
            log.warning("agent hit the %d tool-call budget for %s",
                        config.max_iterations, function.id)
            return EMPTY_RESULT, transcript


def _collect(picks: list[dict], ranked: RankedEdits) -> ValidAssociatedEdits:
    """Map model-cited ranks to records, dropping fabrications and duplicates."""
    edits: list[EditRecord] = []
    rationales: list[str] = []
    seen: set[int] = set()
    for pick in picks:
        if not isinstance(pick, dict):
            continue
        try:
            rank = int(pick.get("index"))
        except (TypeError, ValueError):
            log.info("dropping edit reference without a usable index: %r", pick)
            continue
        if rank < 1 or rank > len(ranked) or rank in seen:
            if rank not in seen:
                log.info("dropping fabricated edit reference: rank %d of %d", rank, len(ranked))
            continue
        seen.add(rank)
        edits.append(ranked.entries[rank - 1][0])
        rationales.append(str(pick.get("rationale", "")))
    return ValidAssociatedEdits(edits=tuple(edits), rationales=tuple(rationales))


def save_transcript(transcript: AgentTranscript, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(transcript.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
