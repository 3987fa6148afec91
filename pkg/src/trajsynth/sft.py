"""SFT conversations with loss masks, dataset statistics and ablation transforms."""

from __future__ import annotations

import os
import random
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence, TypeVar

from .actions import AgentResponse, parse_agent_response, render_action, render_agent_response
from .axtree import Estimator, TokenBudget, compose_observation_prompt, estimate_tokens
from .model import AgentTask, TaskSpec, Trajectory, Verdict, read_jsonl, write_jsonl

R = TypeVar("R")

EXPORT_MODES = ("multiturn", "per_step")


class ConversionError(ValueError):
    pass


class ExportError(OSError):
    pass


@dataclass(frozen=True)
class SftMessage:
    role: str
    text: str
    loss: bool

    def to_dict(self) -> dict[str, Any]:
        return {"role": self.role, "text": self.text, "loss": self.loss}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> SftMessage:
        return cls(d["role"], d["text"], d["loss"])


@dataclass(frozen=True)
class SftConversation:
    id: str
    task_id: str
    site: str
    messages: tuple[SftMessage, ...]
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "messages", tuple(self.messages))
        problems = check_conversation(self)
        if problems:
            raise ValueError(f"conversation {self.id}: {problems[0]}")
        if not self.meta:
            object.__setattr__(self, "meta", _meta(self.messages))

    @property
    def assistant_texts(self) -> list[str]:
        return [m.text for m in self.messages if m.role == "assistant"]

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "task_id": self.task_id,
            "site": self.site,
            "messages": [m.to_dict() for m in self.messages],
            "meta": dict(self.meta),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> SftConversation:
        return cls(
            d["id"], d["task_id"], d["site"],
            tuple(SftMessage.from_dict(m) for m in d["messages"]), dict(d.get("meta", {})),
        )


def _meta(messages: Sequence[SftMessage]) -> dict[str, Any]:
    chars = [len(m.text) for m in messages if m.role == "assistant"]
    return {"steps": len(chars), "response_chars": chars}


def check_conversation(conv: SftConversation) -> list[str]:
    """Role alternation and loss-mask problems; empty when well formed."""
    msgs = conv.messages
    if len(msgs) < 3 or msgs[0].role != "system":
        return ["must start with a system message followed by at least one exchange"]
    problems = []
    for i, m in enumerate(msgs[1:]):
        want = "user" if i % 2 == 0 else "assistant"
        if m.role != want:
            problems.append(f"message {i + 1} should be {want}, got {m.role}")
    if msgs[-1].role != "assistant":
        problems.append("must end with an assistant message")
    for i, m in enumerate(msgs):
        if m.loss != (m.role == "assistant"):
            problems.append(f"message {i} has loss={m.loss} for role {m.role}")
    return problems


def to_sft_conversation(
    traj: Trajectory,
    task: AgentTask | TaskSpec,
    system_prompt: str,
    budget: TokenBudget = TokenBudget(),
    estimator: Estimator = estimate_tokens,
) -> SftConversation:
    """One exchange per step: the observation prompt the agent saw, then its reply."""
    if not traj.steps:
        raise ConversionError(f"trajectory {traj.id} has no steps")
    reserved = estimator(system_prompt)
    messages = [SftMessage("system", system_prompt, False)]
    for s in traj.steps:
        if s.response is None:
            raise ConversionError(f"trajectory {traj.id} step {s.index} has no parsed response")
        try:
            reply = render_agent_response(s.response)
        except ValueError as exc:
            raise ConversionError(f"trajectory {traj.id} step {s.index}: {exc}") from exc
        prompt = compose_observation_prompt(s.observation, budget, estimator, reserved=reserved)
        messages.append(SftMessage("user", prompt, False))
        messages.append(SftMessage("assistant", reply, True))
    return SftConversation(traj.id, task.id, task.site, tuple(messages))


def _per_step(conv: SftConversation) -> list[dict[str, Any]]:
    system = conv.messages[0]
    rows = []
    for i in range(1, len(conv.messages), 2):
        user, assistant = conv.messages[i], conv.messages[i + 1]
        rows.append({
            "id": f"{conv.id}-step{(i - 1) // 2:03d}",
            "task_id": conv.task_id,
            "site": conv.site,
            "messages": [system.to_dict(), user.to_dict(), assistant.to_dict()],
        })
    return rows


def export_jsonl(convs: Iterable[SftConversation], path: str | os.PathLike, mode: str = "multiturn") -> dict[str, int]:
    if mode not in EXPORT_MODES:
        raise ValueError(f"mode must be one of {EXPORT_MODES}")
    convs = list(convs)
    examples = sum(c.meta["steps"] for c in convs)
    records: list[Any] = convs if mode == "multiturn" else [r for c in convs for r in _per_step(c)]
    try:
        lines = write_jsonl(path, records)
    except OSError as exc:
        raise ExportError(f"cannot write {path}: {exc}") from exc
    return {"conversations": len(convs), "examples": examples, "lines": lines}


def export_unfiltered(
    records: Iterable[tuple[Trajectory, AgentTask | TaskSpec, Verdict | None]],
    path: str | os.PathLike,
    system_prompt: str,
    budget: TokenBudget = TokenBudget(),
    mode: str = "multiturn",
) -> dict[str, int]:
    """Export every judged trajectory, whatever its verdict."""
    convs = []
    skipped = 0
    for traj, task, verdict in records:
        if verdict is None:
            continue
        try:
            convs.append(to_sft_conversation(traj, task, system_prompt, budget))
        except ConversionError:
            skipped += 1
    counts = export_jsonl(convs, path, mode)
    counts["skipped"] = skipped
    return counts


# -- statistics ---------------------------------------------------------------


def lower_median(values: Sequence[int]) -> int:
    if not values:
        return 0
    ordered = sorted(values)
    return ordered[(len(ordered) - 1) // 2]


@dataclass(frozen=True)
class DataStats:
    trajectories: int
    examples: int
    avg_steps: float
    avg_response_chars: float
    avg_response_chars_inner: float
    thought_median_chars: int
    think_present_rate: float
    think_median_chars: int
    action_distribution: dict[str, float]

    def to_dict(self) -> dict[str, Any]:
        return {
            "trajectories": self.trajectories,
            "examples": self.examples,
            "avg_steps": self.avg_steps,
            "avg_response_chars": self.avg_response_chars,
            "avg_response_chars_inner": self.avg_response_chars_inner,
            "thought_median_chars": self.thought_median_chars,
            "think_present_rate": self.think_present_rate,
            "think_median_chars": self.think_median_chars,
            "action_distribution": dict(self.action_distribution),
        }


def _ratio(num: int, den: int) -> float:
    return float(Fraction(num, den)) if den else 0.0


def compute_stats(convs: Iterable[SftConversation]) -> DataStats:
    """Corpus statistics over assistant replies.

    ``avg_response_chars`` counts the full reply including tags;
    ``avg_response_chars_inner`` counts only the text inside the blocks.
    """
    n_conv = 0
    total_chars = inner_chars = 0
    thoughts: list[int] = []
    thinks: list[int] = []
    verbs: Counter[str] = Counter()
    examples = 0
    for conv in convs:
        n_conv += 1
        for text in conv.assistant_texts:
            r = parse_agent_response(text)
            examples += 1
            total_chars += len(text)
            inner_chars += len(render_action(r.action)) + len(r.thought or "") + len(r.think or "")
            if r.thought is not None:
                thoughts.append(len(r.thought))
            if r.think is not None:
                thinks.append(len(r.think))
            verbs[r.action.verb] += 1
    return DataStats(
        trajectories=n_conv,
        examples=examples,
        avg_steps=_ratio(examples, n_conv),
        avg_response_chars=_ratio(total_chars, examples),
        avg_response_chars_inner=_ratio(inner_chars, examples),
        thought_median_chars=lower_median(thoughts),
        think_present_rate=_ratio(len(thinks), examples),
        think_median_chars=lower_median(thinks),
        action_distribution={v: _ratio(c, examples) for v, c in sorted(verbs.items())},
    )


# -- ablation transforms ------------------------------------------------------


def _map_assistant(conv: SftConversation, fn: Callable[[AgentResponse], AgentResponse]) -> SftConversation:
    messages = tuple(
        SftMessage(m.role, render_agent_response(fn(parse_agent_response(m.text))), True)
        if m.role == "assistant" else m
        for m in conv.messages
    )
    return SftConversation(conv.id, conv.task_id, conv.site, messages)


def transform_reasoning(convs: Iterable[SftConversation], mode: str, k: int | None = None) -> list[SftConversation]:
    """``truncate`` keeps the first ``k`` characters of each reasoning block; ``remove`` drops them."""
    if mode == "truncate":
        if k is None or k <= 0:
            raise ValueError("truncate needs k > 0")

        def fn(r: AgentResponse) -> AgentResponse:
            return AgentResponse(
                r.action,
                None if r.thought is None else r.thought[:k],
                None if r.think is None else r.think[:k],
            )
    elif mode == "remove":
        def fn(r: AgentResponse) -> AgentResponse:
            return AgentResponse(r.action)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return [_map_assistant(c, fn) for c in convs]


def allocate(sizes: dict[str, int], n: int) -> dict[str, int]:
    """Largest-remainder split of ``n`` in proportion to ``sizes``.

    Ties on the remainder go to the larger stratum, then by name.
    """
    total = sum(sizes.values())
    if not 0 <= n <= total:
        raise ValueError(f"cannot take {n} of {total} records")
    if total == 0:
        return {s: 0 for s in sizes}
    quotas = {s: Fraction(c * n, total) for s, c in sizes.items()}
    alloc = {s: int(q) for s, q in quotas.items()}
    left = n - sum(alloc.values())
    order = sorted(sizes, key=lambda s: (-(quotas[s] - alloc[s]), -sizes[s], s))
    for s in order[:left]:
        alloc[s] += 1
    return alloc


def subsample(
    records: Sequence[R],
    n: int,
    seed: int = 0,
    stratify_by: Callable[[R], str] = lambda r: r.site,
) -> list[R]:
    """Seeded stratified sample; chosen records keep their input order."""
    if n > len(records):
        raise ValueError(f"n={n} exceeds corpus size {len(records)}")
    groups: dict[str, list[int]] = {}
    for i, r in enumerate(records):
        groups.setdefault(stratify_by(r), []).append(i)
    alloc = allocate({s: len(ix) for s, ix in groups.items()}, n)
    chosen: set[int] = set()
    for s in sorted(groups):
        rng = random.Random(f"{seed}:{s}")
        chosen.update(rng.sample(groups[s], alloc[s]))
    return [records[i] for i in sorted(chosen)]


def read_conversations(path: str | os.PathLike) -> list[SftConversation]:
    if not Path(path).exists():
        raise FileNotFoundError(path)
    return read_jsonl(path, SftConversation)
