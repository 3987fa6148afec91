"""Task design: personas, persona-conditioned exploration, task synthesis."""

from __future__ import annotations

import re
import unicodedata
from dataclasses import dataclass
from typing import Any, Callable, Sequence

from .actions import find_all_tags, find_tag, render_action
from .axtree import TokenBudget, estimate_tokens, truncate_to_budget
from .backend import (
    ChatBackend,
    ChatMessage,
    GenParams,
    RetriesExhaustedError,
    is_retryable,
    no_backoff,
    with_retries,
)
from .env import SiteSpec, run_episode
from .model import AgentTask, Persona, TaskSpec, Trajectory, make_id
from .personas import builtin_personas
from .prompts import agent_system_prompt, load_prompt

TERMINATION_SENTENCE = "I am done exploring the websites."
MIN_EXPLORATION_STEPS = 10
EXPLORATION_STEP_CAP = 20

PLACEHOLDER_RE = re.compile(r"\{\{([a-z0-9_]+)\}\}")


class GenerationError(RuntimeError):
    pass


class SynthesisError(RuntimeError):
    def __init__(self, anchor: int, message: str):
        super().__init__(f"anchor {anchor}: {message}")
        self.anchor = anchor


class InstantiationError(ValueError):
    def __init__(self, variable: str):
        super().__init__(f"unbound template variable {variable!r}")
        self.variable = variable


class ReplyFormatError(ValueError):
    """A model reply that does not follow the requested block format."""


class DuplicateIntentError(ReplyFormatError):
    pass


def _retry_format(exc: BaseException) -> bool:
    return is_retryable(exc) or isinstance(exc, (ReplyFormatError, InstantiationError))


# -- personas ---------------------------------------------------------------


def describe_persona(p: Persona) -> str:
    return (
        f"Name: {p.name}\n"
        f"Skills: {', '.join(p.skills)}\n"
        f"Interests: {', '.join(p.interests)}\n"
        f"{p.description}"
    )


def _split3(block: str | None, what: str) -> tuple[str, ...]:
    if block is None:
        raise ReplyFormatError(f"missing <{what}> block")
    items = tuple(x.strip() for x in block.split(";") if x.strip())
    if len(items) != 3:
        raise ReplyFormatError(f"<{what}> must list exactly 3 items, got {len(items)}")
    return items


def parse_persona_reply(text: str, persona_id: str) -> Persona:
    name = (find_tag(text, "name") or "").strip()
    description = (find_tag(text, "description") or "").strip()
    if not name or not description:
        raise ReplyFormatError("persona reply needs <name> and <description>")
    return Persona(
        persona_id, name, _split3(find_tag(text, "skills"), "skills"),
        _split3(find_tag(text, "interests"), "interests"), description,
    )


def generate_personas(
    n: int,
    backend: ChatBackend | None = None,
    seed: int = 0,
    *,
    max_retries: int = 10,
    params: GenParams = GenParams(),
    backoff: Callable[[int], float] = no_backoff,
) -> list[Persona]:
    """``n`` personas, from the bundled pool or by asking ``backend``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if backend is None:
        return builtin_personas(n, seed)
    out: list[Persona] = []
    for i in range(n):
        pid = make_id("persona", i + 1)
        taken = ", ".join(p.name for p in out) or "none"
        request = [ChatMessage("user", f"{load_prompt('persona')}\n\nPersona {i + 1} of {n}. Names already used: {taken}.")]

        def ask(attempt: int) -> Persona:
            persona = parse_persona_reply(backend.chat(request, params), pid)
            if any(p.name == persona.name for p in out):
                raise ReplyFormatError(f"duplicate persona name {persona.name!r}")
            return persona

        try:
            persona, _ = with_retries(ask, max_retries, backoff, retry_on=_retry_format)
        except (RetriesExhaustedError, ReplyFormatError) as exc:
            raise GenerationError(f"persona {i + 1}: {exc}") from exc
        out.append(persona)
    return out


# -- exploration --------------------------------------------------------------


@dataclass(frozen=True)
class ExplorationTrace:
    id: str
    persona_id: str
    site: str
    trajectory: Trajectory
    succeeded: bool

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "persona_id": self.persona_id,
            "site": self.site,
            "trajectory": self.trajectory.to_dict(),
            "succeeded": self.succeeded,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ExplorationTrace:
        return cls(d["id"], d["persona_id"], d["site"], Trajectory.from_dict(d["trajectory"]), d["succeeded"])


def exploration_goal(persona: Persona) -> str:
    return load_prompt("exploration").replace("{persona}", describe_persona(persona))


def check_exploration_success(trace: ExplorationTrace | Trajectory) -> bool:
    traj = trace.trajectory if isinstance(trace, ExplorationTrace) else trace
    if traj.terminal.kind != "message" or TERMINATION_SENTENCE not in (traj.terminal.text or ""):
        return False
    steps_before_message = len(traj.steps) - 1
    return steps_before_message >= MIN_EXPLORATION_STEPS


def explore(
    persona: Persona,
    site: SiteSpec,
    backend: ChatBackend,
    budget: TokenBudget = TokenBudget(),
    *,
    exploration_id: str | None = None,
    max_retries: int = 10,
    params: GenParams = GenParams(),
    backoff: Callable[[int], float] = no_backoff,
) -> ExplorationTrace:
    eid = exploration_id or f"expl-{persona.id}-{site.site}"
    task = AgentTask(eid, site.site, exploration_goal(persona))
    traj = run_episode(
        backend, task, site, budget, max_retries,
        system_prompt=agent_system_prompt(), params=params, trajectory_id=eid,
        step_limit=EXPLORATION_STEP_CAP, backoff=backoff,
    )
    return ExplorationTrace(eid, persona.id, site.site, traj, check_exploration_success(traj))


# -- task synthesis -----------------------------------------------------------


@dataclass(frozen=True)
class AnnotatorInstructions:
    abstract: str
    creative: str
    template: str

    _HEADINGS = ("Abstract and high-level", "Creative", "Template-based with variables")

    def __post_init__(self) -> None:
        if not all(x.strip() for x in (self.abstract, self.creative, self.template)):
            raise ValueError("all three instruction blocks are required")

    @classmethod
    def from_text(cls, text: str) -> AnnotatorInstructions:
        blocks: dict[str, list[str]] = {}
        current = None
        for line in text.splitlines():
            if line.startswith("## "):
                current = line[3:].strip()
                blocks[current] = []
            elif current is not None:
                blocks[current].append(line)
        try:
            parts = ["\n".join(blocks[h]).strip() for h in cls._HEADINGS]
        except KeyError as exc:
            raise ValueError(f"instructions missing block {exc}") from exc
        return cls(*parts)

    @classmethod
    def default(cls) -> AnnotatorInstructions:
        return cls.from_text(load_prompt("annotator_instructions"))

    def text(self) -> str:
        return "\n\n".join(
            f"{i}. {h}: {body}"
            for i, (h, body) in enumerate(zip(self._HEADINGS, (self.abstract, self.creative, self.template)), 1)
        )


def instantiate_template(template: str, bindings: dict[str, str]) -> str:
    def sub(m: re.Match) -> str:
        name = m.group(1)
        if name not in bindings:
            raise InstantiationError(name)
        return bindings[name]

    out = PLACEHOLDER_RE.sub(sub, template)
    if "{{" in out:
        bad = re.search(r"\{\{([^}]*)\}?\}?", out)
        raise InstantiationError(bad.group(1) if bad else "{{")
    return out


def normalize_intent(text: str) -> str:
    stripped = "".join(c for c in text.lower() if not unicodedata.category(c).startswith("P"))
    return " ".join(stripped.split())


def select_anchors(length: int, k: int) -> list[int]:
    """``k`` distinct step indices spread over a trace of ``length`` steps."""
    if k < 1 or length < k:
        raise ValueError(f"cannot pick {k} anchors from {length} steps")
    chosen: list[int] = []
    for i in range(1, k + 1):
        a = i * length // (k + 1)
        while a in chosen and a < length - 1:
            a += 1
        if a in chosen:
            a = min(set(range(length)) - set(chosen))
        chosen.append(a)
    return chosen


def parse_bindings(block: str | None) -> dict[str, str]:
    if block is None or not block.strip():
        return {}
    out: dict[str, str] = {}
    for item in block.split(";"):
        if not item.strip():
            continue
        if "=" not in item:
            raise ReplyFormatError(f"binding {item.strip()!r} lacks '='")
        name, value = item.split("=", 1)
        name = name.strip()
        if not re.fullmatch(r"[a-z0-9_]+", name):
            raise ReplyFormatError(f"invalid variable name {name!r}")
        out[name] = value.strip()
    return out


def parse_task_reply(text: str) -> tuple[str, dict[str, str], list[str]]:
    template = (find_tag(text, "template") or "").strip()
    if not template:
        raise ReplyFormatError("reply has no <template> block")
    hints = [h.strip() for h in find_all_tags(text, "hint") if h.strip()]
    if not hints:
        raise ReplyFormatError("reply has no <hint> block")
    return template, parse_bindings(find_tag(text, "bindings")), hints


def _render_prefix(traj: Trajectory, anchor: int) -> str:
    lines = []
    for s in traj.steps[: anchor + 1]:
        lines.append(f"Step {s.index}")
        lines.append(f"URL: {s.observation.url}")
        if s.response is not None and s.response.thought:
            lines.append(f"Thought: {s.response.thought}")
        lines.append(f"Action: {render_action(s.executed) if s.executed else '(none)'}")
    return "\n".join(lines)


def synthesis_messages(
    trace: ExplorationTrace,
    persona: Persona,
    instructions: AnnotatorInstructions,
    anchor: int,
    avoid: Sequence[str] = (),
    budget: TokenBudget = TokenBudget(),
) -> list[ChatMessage]:
    system = load_prompt("synthesis").replace("{instructions}", instructions.text())
    head = (
        f"Persona:\n{describe_persona(persona)}\n\n"
        f"Site: {trace.site}\n\n"
        f"Exploration record:\n{_render_prefix(trace.trajectory, anchor)}\n\n"
        f"Anchor step: {anchor}\n"
    )
    tail = ""
    if avoid:
        tail = "\nThese tasks were already proposed; propose a different one:\n" + "\n".join(f"- {a}" for a in avoid)
    tree = trace.trajectory.steps[anchor].observation.axtree_text
    room = budget.max_prompt - estimate_tokens(system) - estimate_tokens(head + tail) - 16
    tree = truncate_to_budget(tree, max(room, 0))
    user = f"{head}Page at the anchor step:\n{tree}\n{tail}"
    return [ChatMessage("system", system), ChatMessage("user", user)]


def synthesize_tasks(
    trace: ExplorationTrace,
    persona: Persona,
    instructions: AnnotatorInstructions,
    backend: ChatBackend,
    k: int = 2,
    *,
    task_ids: Sequence[str] | None = None,
    budget: TokenBudget = TokenBudget(),
    max_retries: int = 10,
    params: GenParams = GenParams(),
    backoff: Callable[[int], float] = no_backoff,
) -> tuple[list[TaskSpec], list[SynthesisError]]:
    """Up to ``k`` grounded tasks from one successful exploration.

    Each anchor is handled independently; an anchor whose replies stay
    malformed (or duplicate an earlier intent) for ``max_retries`` asks is
    reported as a SynthesisError while the others still produce tasks.
    """
    if not trace.succeeded:
        raise ValueError(f"exploration {trace.id} did not succeed")
    anchors = select_anchors(len(trace.trajectory.steps), k)
    ids = list(task_ids) if task_ids is not None else [f"{trace.id}-task{j}" for j in range(k)]
    seen: dict[str, str] = {}
    tasks: list[TaskSpec] = []
    errors: list[SynthesisError] = []
    for j, anchor in enumerate(anchors):
        avoid: list[str] = []

        def ask(attempt: int) -> TaskSpec:
            messages = synthesis_messages(trace, persona, instructions, anchor, avoid, budget)
            template, bindings, hints = parse_task_reply(backend.chat(messages, params))
            intent = instantiate_template(template, bindings)
            key = normalize_intent(intent)
            if key in seen:
                avoid.append(intent)
                raise DuplicateIntentError(f"intent duplicates {seen[key]}")
            return TaskSpec(
                id=ids[j], site=trace.site, persona_id=persona.id, intent_template=template,
                bindings=bindings, intent=intent, hints=hints, anchor_step=anchor,
                source_exploration_id=trace.id,
            )

        try:
            spec, _ = with_retries(ask, max_retries, backoff, retry_on=_retry_format)
        except (RetriesExhaustedError, ReplyFormatError, InstantiationError) as exc:
            errors.append(SynthesisError(anchor, str(exc)))
            continue
        seen[normalize_intent(spec.intent)] = spec.id
        tasks.append(spec)
    return tasks, errors


def schedule_counts(personas: int, sites: int, k: int) -> dict[str, int]:
    """Upper-bound schedule: every persona visits every site; k tasks each."""
    return {"explorations": personas * sites, "tasks": personas * sites * k}


def exploration_id(persona_index: int, site_index: int, n_sites: int) -> str:
    return make_id("expl", persona_index * n_sites + site_index + 1)
