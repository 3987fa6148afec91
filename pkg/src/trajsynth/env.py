"""Deterministic simulated web environment.

A site is a JSON document of pages. Each page has an accessibility tree and
a table of effects keyed by bid; acting on a bid applies its effects to a
small variable store. Node names and values may reference variables with
``{{name}}`` and are re-rendered on every observation.

URLs have the form ``sim://{site}/{page}``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Callable

import yaml

from .actions import Action, AgentResponse, NoActionError, parse_agent_response, render_action
from .axtree import (
    AxNode,
    BudgetExceededError,
    Estimator,
    InvalidTreeError,
    TokenBudget,
    compose_observation_prompt,
    estimate_tokens,
    render_axtree,
)
from .backend import (
    BackendError,
    ChatBackend,
    ChatMessage,
    GenParams,
    RetriesExhaustedError,
    no_backoff,
    with_retries,
)
from .model import AgentTask, Observation, Step, Terminal, Trajectory

_PLACEHOLDER = re.compile(r"\{\{([a-z0-9_]+)\}\}")

BUILTIN_SITES = ("forum", "code", "commerce", "admin", "wiki", "map", "micro")


class SiteLoadError(ValueError):
    def __init__(self, message: str, field: str = "", line: int | None = None):
        where = field or "<root>"
        if line is not None:
            where += f" (line {line})"
        super().__init__(f"{where}: {message}")
        self.field = field
        self.line = line


class GoalEvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class Effect:
    kind: str  # navigate | set_var | append_var | noop
    target: str = ""  # page for navigate, variable otherwise
    value: str = ""
    from_fill_text: bool = False

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Effect:
        kind = d.get("type")
        if kind == "navigate":
            return cls("navigate", target=d["page"])
        if kind in ("set_var", "append_var"):
            source = d.get("source", "literal")
            if source not in ("literal", "from_fill_text"):
                raise ValueError(f"unknown value source {source!r}")
            return cls(kind, target=d["name"], value=str(d.get("value", "")),
                       from_fill_text=source == "from_fill_text")
        if kind == "noop":
            return cls("noop")
        raise ValueError(f"unknown effect type {kind!r}")


@dataclass(frozen=True)
class Goal:
    """Boolean goal expression over the environment state.

    ``op`` is one of and, or, not, var_equals, var_contains, on_page,
    message_contains, const.
    """

    op: str
    args: tuple[Any, ...]

    @classmethod
    def from_dict(cls, d: Any) -> Goal:
        if not isinstance(d, dict) or len(d) != 1:
            raise ValueError(f"goal must be a single-key object, got {d!r}")
        (op, arg), = d.items()
        if op in ("and", "or"):
            return cls(op, tuple(cls.from_dict(x) for x in arg))
        if op == "not":
            return cls(op, (cls.from_dict(arg),))
        if op in ("var_equals", "var_contains"):
            name, value = arg
            return cls(op, (str(name), str(value)))
        if op in ("on_page", "message_contains"):
            return cls(op, (str(arg),))
        if op == "const":
            return cls(op, (bool(arg),))
        raise ValueError(f"unknown goal operator {op!r}")

    def to_dict(self) -> dict[str, Any]:
        if self.op in ("and", "or"):
            return {self.op: [a.to_dict() for a in self.args]}
        if self.op == "not":
            return {"not": self.args[0].to_dict()}
        if self.op in ("var_equals", "var_contains"):
            return {self.op: list(self.args)}
        return {self.op: self.args[0]}

    def variables(self) -> set[str]:
        if self.op in ("and", "or", "not"):
            return set().union(*(a.variables() for a in self.args)) if self.args else set()
        return {self.args[0]} if self.op.startswith("var_") else set()

    def pages(self) -> set[str]:
        if self.op in ("and", "or", "not"):
            return set().union(*(a.pages() for a in self.args)) if self.args else set()
        return {self.args[0]} if self.op == "on_page" else set()


def var_equals(name: str, value: str) -> Goal:
    return Goal("var_equals", (name, value))


def var_contains(name: str, substr: str) -> Goal:
    return Goal("var_contains", (name, substr))


def on_page(page: str) -> Goal:
    return Goal("on_page", (page,))


def message_contains(substr: str) -> Goal:
    return Goal("message_contains", (substr,))


def all_of(*goals: Goal) -> Goal:
    return Goal("and", goals)


def any_of(*goals: Goal) -> Goal:
    return Goal("or", goals)


def negate(goal: Goal) -> Goal:
    return Goal("not", (goal,))


@dataclass(frozen=True)
class Page:
    id: str
    axtree: AxNode
    effects: dict[str, tuple[Effect, ...]]
    bids: frozenset[str]


@dataclass(frozen=True)
class SiteTask:
    """A hand-written task with a programmatic goal, bundled with a site."""

    id: str
    intent: str
    hints: tuple[str, ...]
    goal: Goal


@dataclass(frozen=True)
class SiteSpec:
    site: str
    step_limit: int
    pages: dict[str, Page]
    start_page: str
    variables: dict[str, str]
    tasks: tuple[SiteTask, ...] = ()

    def url(self, page: str) -> str:
        return f"sim://{self.site}/{page}"

    def task(self, task_id: str) -> SiteTask:
        for t in self.tasks:
            if t.id == task_id:
                return t
        raise KeyError(task_id)


@dataclass(frozen=True)
class EnvState:
    current_page: str
    variables: dict[str, str]
    messages: tuple[str, ...] = ()
    steps_taken: int = 0
    previous_page: str | None = None
    goal: str = ""


@dataclass(frozen=True)
class Transition:
    state: EnvState
    observation: Observation
    terminal: Terminal | None = None
    error: str | None = None


# -- loading ----------------------------------------------------------------


def _line_index(text: str) -> dict[str, int]:
    """Map dotted JSON paths to 1-based source lines (best effort)."""
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return {}
    index: dict[str, int] = {}

    def visit(node: Any, path: str) -> None:
        index[path] = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                child = f"{path}.{k.value}" if path else str(k.value)
                index[child] = k.start_mark.line + 1
                visit(v, child)
                index[child] = k.start_mark.line + 1
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                visit(v, f"{path}[{i}]")

    if root is not None:
        visit(root, "")
    return index


def _placeholders(node: AxNode) -> set[str]:
    names: set[str] = set()
    for n in node.walk():
        names.update(_PLACEHOLDER.findall(n.name))
        if n.value:
            names.update(_PLACEHOLDER.findall(n.value))
    return names


def parse_site(doc: dict[str, Any], lines: dict[str, int] | None = None) -> SiteSpec:
    lines = lines or {}

    def fail(msg: str, path: str) -> SiteLoadError:
        # Walk up to the nearest path we know a line for.
        probe = path
        while probe and probe not in lines:
            probe = re.sub(r"(\.[^.\[]*|\[\d+\])$", "", probe)
        return SiteLoadError(msg, path, lines.get(probe))

    if not isinstance(doc, dict):
        raise fail("site spec must be an object", "")
    site = doc.get("site")
    if not isinstance(site, str) or not site:
        raise fail("must be a nonempty string", "site")
    limit = doc.get("step_limit")
    if isinstance(limit, bool) or not isinstance(limit, int) or limit < 1:
        raise fail("must be an integer >= 1", "step_limit")
    variables = doc.get("variables", {})
    if not isinstance(variables, dict):
        raise fail("must be an object", "variables")
    variables = {str(k): str(v) for k, v in variables.items()}
    raw_pages = doc.get("pages")
    if not isinstance(raw_pages, dict) or not raw_pages:
        raise fail("must be a nonempty object", "pages")
    start = doc.get("start_page")
    if start not in raw_pages:
        raise fail(f"unknown page {start!r}", "start_page")

    pages: dict[str, Page] = {}
    for pid, raw in raw_pages.items():
        base = f"pages.{pid}"
        try:
            tree = AxNode.from_dict(raw["axtree"])
            render_axtree(tree)
        except KeyError as exc:
            raise fail(f"missing field {exc}", base) from exc
        except (InvalidTreeError, TypeError, AttributeError) as exc:
            raise fail(str(exc), f"{base}.axtree") from exc
        missing = _placeholders(tree) - variables.keys()
        if missing:
            raise fail(f"undeclared variables {sorted(missing)}", f"{base}.axtree")
        bids = frozenset(n.bid for n in tree.walk())
        effects: dict[str, tuple[Effect, ...]] = {}
        for bid, raw_effect in raw.get("effects", {}).items():
            path = f"{base}.effects.{bid}"
            if bid not in bids:
                raise fail(f"bid {bid!r} is not on the page", path)
            items = raw_effect if isinstance(raw_effect, list) else [raw_effect]
            parsed = []
            for i, item in enumerate(items):
                ipath = f"{path}[{i}]" if isinstance(raw_effect, list) else path
                try:
                    eff = Effect.from_dict(item)
                except (ValueError, KeyError, AttributeError) as exc:
                    raise fail(f"bad effect: {exc}", ipath) from exc
                if eff.kind == "navigate" and eff.target not in raw_pages:
                    raise fail(f"effect targets missing page {eff.target!r}", ipath)
                if eff.kind in ("set_var", "append_var") and eff.target not in variables:
                    raise fail(f"effect uses undeclared variable {eff.target!r}", ipath)
                parsed.append(eff)
            effects[bid] = tuple(parsed)
        pages[pid] = Page(pid, tree, effects, bids)

    tasks = []
    for i, raw in enumerate(doc.get("tasks", [])):
        path = f"tasks[{i}]"
        try:
            goal = Goal.from_dict(raw["goal"])
            task = SiteTask(str(raw["id"]), str(raw["intent"]), tuple(raw.get("hints", [])), goal)
        except (KeyError, ValueError, TypeError) as exc:
            raise fail(f"bad task: {exc}", path) from exc
        if goal.variables() - variables.keys():
            raise fail(f"goal uses undeclared variables {sorted(goal.variables() - variables.keys())}", path)
        if goal.pages() - raw_pages.keys():
            raise fail(f"goal uses unknown pages {sorted(goal.pages() - raw_pages.keys())}", path)
        tasks.append(task)
    return SiteSpec(site, limit, pages, start, variables, tuple(tasks))


def load_site(path: str | Path) -> SiteSpec:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SiteLoadError(exc.msg, "", exc.lineno) from exc
    return parse_site(doc, _line_index(text))


def builtin_site_path(name: str) -> Path:
    if name not in BUILTIN_SITES:
        raise KeyError(f"no bundled site {name!r}; choose from {BUILTIN_SITES}")
    return Path(str(resources.files("trajsynth") / "data" / "sites" / f"{name}.json"))


def resolve_site(ref: str, base_dir: Path | None = None) -> SiteSpec:
    """Load ``builtin:<name>`` or a path (relative to ``base_dir``)."""
    if ref.startswith("builtin:"):
        return load_site(builtin_site_path(ref.split(":", 1)[1]))
    path = Path(ref)
    if base_dir is not None and not path.is_absolute():
        path = base_dir / path
    return load_site(path)


# -- dynamics ---------------------------------------------------------------


def _resolve(node: AxNode, variables: dict[str, str]) -> AxNode:
    def sub(s: str) -> str:
        return _PLACEHOLDER.sub(lambda m: variables[m.group(1)], s)

    return AxNode(
        node.bid, node.role, sub(node.name),
        None if node.value is None else sub(node.value),
        tuple(_resolve(c, variables) for c in node.children),
    )


def observe(state: EnvState, spec: SiteSpec, last_action: str | None = None) -> Observation:
    page = spec.pages[state.current_page]
    return Observation(
        url=spec.url(state.current_page),
        axtree_text=render_axtree(_resolve(page.axtree, state.variables)),
        goal=state.goal,
        last_action=last_action,
    )


def reset(spec: SiteSpec, goal: str = "") -> tuple[EnvState, Observation]:
    state = EnvState(current_page=spec.start_page, variables=dict(spec.variables), goal=goal)
    return state, observe(state, spec)


def _advance(state: EnvState, spec: SiteSpec, step_limit: int | None) -> tuple[EnvState, Terminal | None]:
    state = replace(state, steps_taken=state.steps_taken + 1)
    limit = spec.step_limit if step_limit is None else step_limit
    return state, (Terminal("step_limit") if state.steps_taken >= limit else None)


def tick(state: EnvState, spec: SiteSpec, note: str, step_limit: int | None = None) -> Transition:
    """Consume a step without acting (e.g. the agent produced no action)."""
    state, terminal = _advance(state, spec, step_limit)
    return Transition(state, observe(state, spec), terminal, note)


def step(state: EnvState, action: Action, spec: SiteSpec, step_limit: int | None = None) -> Transition:
    page = spec.pages[state.current_page]
    variables = state.variables
    current, previous = state.current_page, state.previous_page
    messages = state.messages
    error: str | None = None
    terminal: Terminal | None = None

    def navigate(target: str) -> None:
        nonlocal current, previous
        if target != current:
            previous, current = current, target

    if action.bid is not None:
        if action.bid not in page.bids:
            error = f"unknown bid {action.bid!r} on page {page.id!r}"
        else:
            variables = dict(variables)
            for eff in page.effects.get(action.bid, ()):
                if eff.kind == "navigate":
                    navigate(eff.target)
                elif eff.kind in ("set_var", "append_var"):
                    if eff.from_fill_text:
                        if action.text is None:
                            error = f"{action.verb} supplies no text for {eff.target!r}"
                            continue
                        value = action.text
                    else:
                        value = eff.value
                    old = variables[eff.target]
                    if eff.kind == "set_var" or not old:
                        variables[eff.target] = value
                    else:
                        variables[eff.target] = old + "\n" + value
    elif action.verb == "goto":
        prefix = f"sim://{spec.site}/"
        target = action.text[len(prefix):] if action.text.startswith(prefix) else None
        if target in spec.pages:
            navigate(target)
        else:
            error = f"cannot navigate to {action.text!r}"
    elif action.verb == "go_back":
        if previous is None:
            error = "no page to go back to"
        else:
            current, previous = previous, None
    elif action.verb == "send_msg_to_user":
        messages = messages + (action.text,)
        terminal = Terminal("message", action.text)
    # scroll, keyboard_press and registered extra verbs are recorded no-ops

    state = replace(
        state, current_page=current, previous_page=previous,
        variables=variables, messages=messages,
    )
    state, limit_hit = _advance(state, spec, step_limit)
    terminal = terminal or limit_hit
    return Transition(state, observe(state, spec, render_action(action)), terminal, error)


def check_goal(state: EnvState, goal: Goal) -> bool:
    op, args = goal.op, goal.args
    if op == "and":
        return all(check_goal(state, g) for g in args)
    if op == "or":
        return any(check_goal(state, g) for g in args)
    if op == "not":
        return not check_goal(state, args[0])
    if op in ("var_equals", "var_contains"):
        name, value = args
        if name not in state.variables:
            raise GoalEvaluationError(f"undeclared variable {name!r}")
        have = state.variables[name]
        return have == value if op == "var_equals" else value in have
    if op == "on_page":
        return state.current_page == args[0]
    if op == "message_contains":
        return any(args[0] in m for m in state.messages)
    if op == "const":
        return bool(args[0])
    raise GoalEvaluationError(f"unknown operator {op!r}")


def replay(spec: SiteSpec, actions: list[Action], goal: str = "", step_limit: int | None = None) -> EnvState:
    """Final state after executing ``actions`` from a fresh reset."""
    state, _ = reset(spec, goal)
    for a in actions:
        state = step(state, a, spec, step_limit).state
    return state


# -- episodes ---------------------------------------------------------------

def run_episode(
    backend: ChatBackend,
    task: AgentTask,
    spec: SiteSpec,
    budget: TokenBudget = TokenBudget(),
    max_retries: int = 10,
    *,
    system_prompt: str,
    params: GenParams = GenParams(),
    trajectory_id: str | None = None,
    step_limit: int | None = None,
    backoff: Callable[[int], float] = no_backoff,
    estimator: Estimator = estimate_tokens,
) -> Trajectory:
    """Drive one task to a terminal state.

    A backend failure abandons the attempt; the environment is reset and the
    episode restarts, up to ``max_retries`` attempts in total.
    """
    limit = spec.step_limit if step_limit is None else min(step_limit, spec.step_limit)
    reserved = estimator(system_prompt)
    last: dict[str, Any] = {"steps": [], "attempt": 1}

    def attempt(n: int) -> Trajectory:
        steps: list[Step] = []
        last["steps"], last["attempt"] = steps, n
        state, obs = reset(spec, task.intent)
        while True:
            prompt = compose_observation_prompt(obs, budget, estimator, reserved=reserved)
            messages = [ChatMessage("system", system_prompt), ChatMessage("user", prompt)]
            if obs.screenshot_ref:
                messages[-1] = ChatMessage("user", prompt, (obs.screenshot_ref,))
            text = backend.chat(messages, params)
            try:
                response: AgentResponse | None = parse_agent_response(text)
            except NoActionError as exc:
                response = None
                tr = tick(state, spec, f"no_action: {exc}", limit)
            else:
                tr = step(state, response.action, spec, limit)
            steps.append(Step(
                index=len(steps), observation=obs, response=response,
                executed=None if response is None else response.action,
                error=tr.error, raw_response=text if response is None else None,
            ))
            state, obs = tr.state, tr.observation
            if tr.terminal is not None:
                return Trajectory(
                    id=trajectory_id or f"traj-{task.id}", task_id=task.id, steps=steps,
                    terminal=tr.terminal, attempt=n, final_observation=obs,
                )

    try:
        traj, _ = with_retries(attempt, max_attempts=max_retries, backoff=backoff)
        return traj
    except (RetriesExhaustedError, BackendError, BudgetExceededError) as exc:
        return Trajectory(
            id=trajectory_id or f"traj-{task.id}", task_id=task.id, steps=last["steps"],
            terminal=Terminal("env_error", str(exc)), attempt=last["attempt"],
        )
