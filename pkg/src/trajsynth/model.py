"""Canonical records passed between pipeline stages.

Every record serializes to one JSON object per line with fields in
declaration order; those JSONL files are the contract between stages.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence

from .actions import Action, AgentResponse, parse_action, parse_agent_response, render_action


class InvalidSpecError(ValueError):
    pass


def make_id(stage: str, counter: int) -> str:
    """Ids are ``{stage}-{zero padded counter}`` in scheduling order."""
    return f"{stage}-{counter:06d}"


@dataclass(frozen=True)
class Persona:
    id: str
    name: str
    skills: tuple[str, ...]
    interests: tuple[str, ...]
    description: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "skills", tuple(self.skills))
        object.__setattr__(self, "interests", tuple(self.interests))
        if len(self.skills) != 3 or len(self.interests) != 3:
            raise InvalidSpecError(
                f"persona {self.name!r} needs exactly 3 skills and 3 interests"
            )
        if not self.name.strip():
            raise InvalidSpecError("persona name is empty")

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "name": self.name,
            "skills": list(self.skills),
            "interests": list(self.interests),
            "description": self.description,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Persona:
        return cls(d["id"], d["name"], d["skills"], d["interests"], d["description"])


@dataclass(frozen=True)
class TaskSpec:
    id: str
    site: str
    persona_id: str | None
    intent_template: str
    bindings: dict[str, str]
    intent: str
    hints: tuple[str, ...]
    anchor_step: int
    source_exploration_id: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "hints", tuple(self.hints))
        object.__setattr__(self, "bindings", dict(self.bindings))

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "site": self.site,
            "persona_id": self.persona_id,
            "intent_template": self.intent_template,
            "bindings": dict(self.bindings),
            "intent": self.intent,
            "hints": list(self.hints),
            "anchor_step": self.anchor_step,
            "source_exploration_id": self.source_exploration_id,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> TaskSpec:
        return cls(
            d["id"], d["site"], d.get("persona_id"), d["intent_template"],
            d.get("bindings", {}), d["intent"], d.get("hints", []),
            d.get("anchor_step", 0), d.get("source_exploration_id", ""),
        )


@dataclass(frozen=True)
class AgentTask:
    """What the acting agent sees. There is deliberately no field for hints,
    persona or exploration content."""

    id: str
    site: str
    intent: str

    def to_dict(self) -> dict[str, Any]:
        return {"id": self.id, "site": self.site, "intent": self.intent}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> AgentTask:
        return cls(d["id"], d["site"], d["intent"])


def to_agent_task(spec: TaskSpec) -> AgentTask:
    if not spec.intent.strip():
        raise InvalidSpecError(f"task {spec.id} has an empty intent")
    return AgentTask(id=spec.id, site=spec.site, intent=spec.intent)


@dataclass(frozen=True)
class Observation:
    url: str
    axtree_text: str
    goal: str
    screenshot_ref: str | None = None
    last_action: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "url": self.url,
            "axtree_text": self.axtree_text,
            "screenshot_ref": self.screenshot_ref,
            "goal": self.goal,
            "last_action": self.last_action,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Observation:
        return cls(
            url=d["url"], axtree_text=d["axtree_text"], goal=d["goal"],
            screenshot_ref=d.get("screenshot_ref"), last_action=d.get("last_action"),
        )


@dataclass(frozen=True)
class Step:
    index: int
    observation: Observation
    response: AgentResponse | None
    executed: Action | None
    error: str | None = None
    # Model output kept verbatim when it could not be parsed into a response.
    raw_response: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "index": self.index,
            "observation": self.observation.to_dict(),
            "response": None if self.response is None else self.response.raw,
            "executed": None if self.executed is None else render_action(self.executed),
            "error": self.error,
            "raw_response": self.raw_response,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Step:
        return cls(
            index=d["index"],
            observation=Observation.from_dict(d["observation"]),
            response=None if d.get("response") is None else parse_agent_response(d["response"]),
            executed=None if d.get("executed") is None else parse_action(d["executed"]),
            error=d.get("error"),
            raw_response=d.get("raw_response"),
        )


TERMINAL_KINDS = ("message", "step_limit", "env_error")


@dataclass(frozen=True)
class Terminal:
    kind: str
    text: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in TERMINAL_KINDS:
            raise ValueError(f"unknown terminal kind {self.kind!r}")

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "text": self.text}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Terminal:
        return cls(d["kind"], d.get("text"))


@dataclass(frozen=True)
class Trajectory:
    id: str
    task_id: str
    steps: tuple[Step, ...]
    terminal: Terminal
    attempt: int = 1
    # Observation after the last executed action; the judge reads its tree.
    final_observation: Observation | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))

    @property
    def actions(self) -> list[Action]:
        return [s.executed for s in self.steps if s.executed is not None]

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "task_id": self.task_id,
            "steps": [s.to_dict() for s in self.steps],
            "terminal": self.terminal.to_dict(),
            "attempt": self.attempt,
            "final_observation": (
                None if self.final_observation is None else self.final_observation.to_dict()
            ),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Trajectory:
        fo = d.get("final_observation")
        return cls(
            id=d["id"],
            task_id=d["task_id"],
            steps=tuple(Step.from_dict(s) for s in d["steps"]),
            terminal=Terminal.from_dict(d["terminal"]),
            attempt=d.get("attempt", 1),
            final_observation=None if fo is None else Observation.from_dict(fo),
        )


def validate_trajectory(traj: Trajectory, step_limit: int) -> list[str]:
    """Rule violations for ``traj``; an empty list means well-formed."""
    violations: list[str] = []
    if len(traj.steps) > step_limit:
        violations.append("step_limit_exceeded")
    if any(s.index != i for i, s in enumerate(traj.steps)):
        violations.append("non_contiguous_indices")
    if traj.attempt < 1:
        violations.append("invalid_attempt")
    last = traj.steps[-1].executed if traj.steps else None
    ends_with_message = last is not None and last.verb == "send_msg_to_user"
    if (traj.terminal.kind == "message") != ends_with_message:
        violations.append("terminal_mismatch")
    return violations


OPTIMALITY_LABELS = ("Complete Failure", "Suboptimal", "Somewhat Optimal", "Completely Optimal")
YES_NO = ("Yes", "No")
SUCCESS_LABELS = ("Successful", "Unsuccessful")


@dataclass(frozen=True)
class Verdict:
    trajectory_id: str
    loop: str
    side_effects: str
    optimality: str
    success: str
    raw_text: str
    hints_used: bool
    option_permutation_seed: int

    def __post_init__(self) -> None:
        for value, labels in (
            (self.loop, YES_NO),
            (self.side_effects, YES_NO),
            (self.optimality, OPTIMALITY_LABELS),
            (self.success, SUCCESS_LABELS),
        ):
            if value not in labels:
                raise ValueError(f"{value!r} is not one of {labels}")

    @property
    def successful(self) -> bool:
        return self.success == "Successful"

    def to_dict(self) -> dict[str, Any]:
        return {
            "trajectory_id": self.trajectory_id,
            "loop": self.loop,
            "side_effects": self.side_effects,
            "optimality": self.optimality,
            "success": self.success,
            "raw_text": self.raw_text,
            "hints_used": self.hints_used,
            "option_permutation_seed": self.option_permutation_seed,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Verdict:
        return cls(**d)


MANIFEST_COUNTS = (
    "personas",
    "explorations_scheduled",
    "explorations_succeeded",
    "tasks_scheduled",
    "tasks",
    "trajectories",
    "verdicts",
    "unjudged",
    "retained",
    "exported_conversations",
    "exported_examples",
)


@dataclass
class RunManifest:
    config_digest: str
    seed: int
    counts: dict[str, int] = field(default_factory=lambda: {k: 0 for k in MANIFEST_COUNTS})
    timestamps: dict[str, str] = field(default_factory=dict)
    digests: dict[str, str] = field(default_factory=dict)
    errors: dict[str, int] = field(default_factory=dict)

    def check(self) -> list[str]:
        c = self.counts
        problems = []
        if not c["retained"] <= c["verdicts"] <= c["trajectories"]:
            problems.append("retained <= judged <= trajectories violated")
        if c["explorations_succeeded"] > c["explorations_scheduled"]:
            problems.append("more explorations succeeded than scheduled")
        return problems

    def to_dict(self) -> dict[str, Any]:
        return {
            "config_digest": self.config_digest,
            "counts": dict(self.counts),
            "seed": self.seed,
            "timestamps": dict(self.timestamps),
            "digests": dict(self.digests),
            "errors": dict(self.errors),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> RunManifest:
        return cls(
            config_digest=d["config_digest"], seed=d["seed"], counts=dict(d["counts"]),
            timestamps=dict(d.get("timestamps", {})), digests=dict(d.get("digests", {})),
            errors=dict(d.get("errors", {})),
        )


def dumps(record: Any) -> str:
    payload = record.to_dict() if hasattr(record, "to_dict") else record
    return json.dumps(payload, ensure_ascii=False)


def write_jsonl(path: str | os.PathLike, records: Iterable[Any]) -> int:
    """Write records one per line; returns the number written."""
    n = 0
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        for r in records:
            f.write(dumps(r))
            f.write("\n")
            n += 1
    os.replace(tmp, path)
    return n


def iter_jsonl(path: str | os.PathLike) -> Iterator[dict[str, Any]]:
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                yield json.loads(line)


def read_jsonl(path: str | os.PathLike, cls: Any = None) -> list[Any]:
    rows = list(iter_jsonl(path))
    return rows if cls is None else [cls.from_dict(r) for r in rows]


def check_unique_ids(records: Sequence[Any]) -> list[str]:
    seen: set[str] = set()
    dupes = []
    for r in records:
        if r.id in seen:
            dupes.append(r.id)
        seen.add(r.id)
    return dupes
