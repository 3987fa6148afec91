"""Trajectory judging: prompt composition, verdict parsing, filtering, flip reports."""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Sequence

from .actions import find_tag, render_action
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
from .model import OPTIMALITY_LABELS, SUCCESS_LABELS, YES_NO, TaskSpec, Trajectory, Verdict
from .prompts import load_prompt


@dataclass(frozen=True)
class Question:
    tag: str
    text: str
    labels: tuple[str, ...]


# Fixed order; the success question always comes last.
QUESTIONS = (
    Question("loop", "Did the agent keep repeating the same actions without making progress?", YES_NO),
    Question("side", "Did the agent take actions with effects the goal did not ask for?", YES_NO),
    Question("optimal", "How efficiently did the agent pursue the goal?", OPTIMALITY_LABELS),
    Question("success", "Was the goal accomplished?", SUCCESS_LABELS),
)


class VerdictParseError(ValueError):
    pass


class JudgeError(RuntimeError):
    def __init__(self, trajectory_id: str, message: str, attempts: int = 0):
        super().__init__(f"{trajectory_id}: {message}")
        self.trajectory_id = trajectory_id
        self.attempts = attempts


@dataclass(frozen=True)
class JudgeOptions:
    include_hints: bool = True
    option_seed: int = 0
    include_screenshots: bool = False


def option_order(seed: int, trajectory_id: str, tag: str, labels: Sequence[str]) -> tuple[str, ...]:
    """Per-question, per-trajectory permutation derived from a hash counter."""
    key = hashlib.sha256(f"{seed}|{trajectory_id}|{tag}".encode("utf-8")).digest()
    rng = random.Random(int.from_bytes(key[:8], "big"))
    order = list(labels)
    rng.shuffle(order)
    return tuple(order)


def _question_block(orders: dict[str, Sequence[str]]) -> str:
    lines = []
    for i, q in enumerate(QUESTIONS, 1):
        options = " / ".join(orders[q.tag])
        lines.append(f"{i}. {q.text}\nOptions: {options}\nAnswer inside <{q.tag}></{q.tag}>.")
    return "\n\n".join(lines)


def _step_block(traj: Trajectory) -> str:
    out = []
    for s in traj.steps:
        lines = [f"### Step {s.index}", f"URL: {s.observation.url}"]
        if s.response is not None:
            if s.response.thought:
                lines.append(f"Thought: {s.response.thought}")
            if s.response.think:
                lines.append(f"Think: {s.response.think}")
        lines.append(f"Action: {render_action(s.executed) if s.executed is not None else '(none)'}")
        if s.error:
            lines.append(f"Error: {s.error}")
        out.append("\n".join(lines))
    return "\n\n".join(out) if out else "(no steps)"


def compose_judge_prompt(
    traj: Trajectory,
    task: TaskSpec,
    opts: JudgeOptions = JudgeOptions(),
    budget: TokenBudget = TokenBudget(),
    orders: dict[str, Sequence[str]] | None = None,
) -> list[ChatMessage]:
    """System message plus one user message holding the whole record.

    ``orders`` overrides the seeded option permutation (used to test that
    parsing does not depend on it).
    """
    system = load_prompt("judge_system")
    if orders is None:
        orders = {q.tag: option_order(opts.option_seed, traj.id, q.tag, q.labels) for q in QUESTIONS}
    goal = f"## Goal\n{task.intent}\n\n"
    if opts.include_hints and task.hints:
        goal += "## Hints\n" + "\n".join(f"- {h}" for h in task.hints) + "\n\n"
    steps = f"## Steps\n{_step_block(traj)}\n\n"
    final = traj.final_observation or (traj.steps[-1].observation if traj.steps else None)
    final_head = f"## Final page\nURL: {final.url if final else '(unknown)'}\n"
    questions = f"\n\n## Questions\n{_question_block(orders)}"
    fixed = goal + steps + final_head + questions
    room = budget.max_prompt - estimate_tokens(system) - estimate_tokens(fixed) - 1
    tree = truncate_to_budget(final.axtree_text if final else "", max(room, 0))
    user = goal + steps + final_head + tree + questions

    attachments: tuple[str, ...] = ()
    if opts.include_screenshots and traj.steps:
        refs = [traj.steps[0].observation.screenshot_ref, final.screenshot_ref if final else None]
        attachments = tuple(dict.fromkeys(r for r in refs if r))
    return [ChatMessage("system", system), ChatMessage("user", user, attachments)]


def _match_label(text: str | None, tag: str, labels: Sequence[str]) -> str:
    if text is None:
        raise VerdictParseError(f"missing <{tag}> tag")
    answer = text.strip().casefold()
    for label in labels:
        if label.casefold() == answer:
            return label
    raise VerdictParseError(f"<{tag}> answer {text.strip()!r} is not one of {list(labels)}")


def parse_verdict(
    text: str,
    trajectory_id: str = "",
    hints_used: bool = False,
    option_seed: int = 0,
) -> Verdict:
    answers = {q.tag: _match_label(find_tag(text, q.tag), q.tag, q.labels) for q in QUESTIONS}
    return Verdict(
        trajectory_id=trajectory_id,
        loop=answers["loop"],
        side_effects=answers["side"],
        optimality=answers["optimal"],
        success=answers["success"],
        raw_text=text,
        hints_used=hints_used,
        option_permutation_seed=option_seed,
    )


def judge_trajectory(
    backend: ChatBackend,
    traj: Trajectory,
    task: TaskSpec,
    opts: JudgeOptions = JudgeOptions(),
    *,
    max_retries: int = 10,
    budget: TokenBudget = TokenBudget(),
    params: GenParams = GenParams(),
    backoff: Callable[[int], float] = no_backoff,
) -> Verdict:
    """Ask the judge until its reply parses, at most ``max_retries`` times."""
    messages = compose_judge_prompt(traj, task, opts, budget)

    def ask(attempt: int) -> Verdict:
        return parse_verdict(backend.chat(messages, params), traj.id, opts.include_hints, opts.option_seed)

    def retry_on(exc: BaseException) -> bool:
        return isinstance(exc, VerdictParseError) or is_retryable(exc)

    try:
        verdict, _ = with_retries(ask, max_retries, backoff, retry_on=retry_on)
    except RetriesExhaustedError as exc:
        raise JudgeError(traj.id, str(exc.last_error), exc.attempts) from exc
    except Exception as exc:
        raise JudgeError(traj.id, str(exc), 1) from exc
    return verdict


def filter_successful(records: Iterable[tuple[Any, Verdict | None]]) -> list[tuple[Any, Verdict]]:
    """Keep the pairs judged Successful, in input order. Unjudged pairs drop out."""
    return [(t, v) for t, v in records if v is not None and v.successful]


@dataclass(frozen=True)
class FlipReport:
    total_rejudged: int
    flipped: int
    s_to_u: int
    u_to_s: int

    def __post_init__(self) -> None:
        if self.flipped != self.s_to_u + self.u_to_s or not 0 <= self.flipped <= self.total_rejudged:
            raise ValueError("inconsistent flip counts")

    @property
    def flip_rate(self) -> float:
        return self.flipped / self.total_rejudged if self.total_rejudged else 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "total_rejudged": self.total_rejudged,
            "flipped": self.flipped,
            "s_to_u": self.s_to_u,
            "u_to_s": self.u_to_s,
            "flip_rate": self.flip_rate,
        }


def _by_id(verdicts: Iterable[Verdict], which: str) -> dict[str, Verdict]:
    out: dict[str, Verdict] = {}
    for v in verdicts:
        if v.trajectory_id in out:
            raise ValueError(f"duplicate trajectory id {v.trajectory_id!r} in {which} verdicts")
        out[v.trajectory_id] = v
    return out


def flip_analysis(with_hints: Iterable[Verdict], without_hints: Iterable[Verdict]) -> FlipReport:
    """Compare success labels for trajectories judged both with and without hints.

    ``s_to_u`` counts Successful with hints but Unsuccessful without.
    """
    a = _by_id(with_hints, "with-hints")
    b = _by_id(without_hints, "without-hints")
    total = s_to_u = u_to_s = 0
    for tid, va in a.items():
        vb = b.get(tid)
        if vb is None:
            continue
        total += 1
        if va.successful and not vb.successful:
            s_to_u += 1
        elif vb.successful and not va.successful:
            u_to_s += 1
    return FlipReport(total, s_to_u + u_to_s, s_to_u, u_to_s)
