"""Accessibility trees: rendering, token estimates and prompt budgeting.

Rendered line grammar, one node per line, two spaces of indent per depth::

    [bid] role 'name'
    [bid] role 'name' value='value'

Inside quotes, backslash, single quote and line breaks are escaped
(``\\\\``, ``\\'``, ``\\n``, ``\\r``) so each node stays on its own line.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable

from .model import Observation

ROLES = frozenset({
    "RootWebArea", "WebArea", "article", "banner", "button", "cell", "checkbox",
    "columnheader", "combobox", "complementary", "contentinfo", "dialog", "form",
    "generic", "grid", "heading", "img", "link", "list", "listbox", "listitem",
    "main", "menu", "menuitem", "navigation", "option", "paragraph", "radio",
    "region", "row", "rowheader", "search", "searchbox", "separator", "slider",
    "spinbutton", "StaticText", "status", "switch", "tab", "table", "tablist",
    "tabpanel", "textbox", "toolbar", "tree", "treeitem",
})

TRUNCATION_MARKER = "…[truncated]"


class InvalidTreeError(ValueError):
    pass


class BudgetExceededError(ValueError):
    pass


@dataclass(frozen=True)
class AxNode:
    bid: str
    role: str
    name: str = ""
    value: str | None = None
    children: tuple[AxNode, ...] = ()

    def __post_init__(self) -> None:
        if not self.bid:
            raise InvalidTreeError("node bid must be nonempty")
        if self.role not in ROLES:
            object.__setattr__(self, "role", "generic")
        object.__setattr__(self, "children", tuple(self.children))

    def walk(self):
        yield self
        for c in self.children:
            yield from c.walk()

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"bid": self.bid, "role": self.role, "name": self.name}
        if self.value is not None:
            d["value"] = self.value
        if self.children:
            d["children"] = [c.to_dict() for c in self.children]
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> AxNode:
        return cls(
            bid=str(d["bid"]),
            role=str(d.get("role", "generic")),
            name=str(d.get("name", "")),
            value=None if d.get("value") is None else str(d["value"]),
            children=tuple(cls.from_dict(c) for c in d.get("children", ())),
        )


@dataclass(frozen=True)
class TokenBudget:
    max_total: int = 65536
    max_prompt: int = 57344
    max_new: int = 8192

    def __post_init__(self) -> None:
        if min(self.max_total, self.max_prompt, self.max_new) < 0:
            raise ValueError("token budgets must be nonnegative")
        if self.max_prompt + self.max_new > self.max_total:
            raise ValueError("max_prompt + max_new exceeds max_total")


def _quote(s: str) -> str:
    s = s.replace("\\", "\\\\").replace("'", "\\'").replace("\n", "\\n").replace("\r", "\\r")
    return f"'{s}'"


def render_axtree(root: AxNode) -> str:
    seen: set[str] = set()
    lines: list[str] = []

    def visit(node: AxNode, depth: int) -> None:
        if node.bid in seen:
            raise InvalidTreeError(f"duplicate bid {node.bid!r}")
        seen.add(node.bid)
        line = f"{'  ' * depth}[{node.bid}] {node.role} {_quote(node.name)}"
        if node.value is not None:
            line += f" value={_quote(node.value)}"
        lines.append(line)
        for child in node.children:
            visit(child, depth + 1)

    visit(root, 0)
    return "\n".join(lines)


def estimate_tokens(text: str) -> int:
    """ceil(utf-8 bytes / 4)."""
    return math.ceil(len(text.encode("utf-8")) / 4)


Estimator = Callable[[str], int]


def truncate_to_budget(text: str, budget_tokens: int, estimator: Estimator = estimate_tokens) -> str:
    """Keep the longest run of leading whole lines that fits with the marker.

    Assumes the estimator is monotone over line prefixes.
    """
    if budget_tokens < 0:
        raise ValueError("budget must be nonnegative")
    if estimator(text) <= budget_tokens:
        return text
    if estimator(TRUNCATION_MARKER) > budget_tokens:
        return ""
    lines = text.split("\n")

    if estimator is estimate_tokens:
        # prefix of j lines + "\n" + marker, in bytes
        marker_bytes = len(TRUNCATION_MARKER.encode("utf-8"))
        limit = budget_tokens * 4
        total = 0
        keep = 0
        for j, line in enumerate(lines):
            total += len(line.encode("utf-8")) + 1
            if total + marker_bytes > limit:
                break
            keep = j + 1
    else:
        def fits(j: int) -> bool:
            return estimator("\n".join(lines[:j] + [TRUNCATION_MARKER])) <= budget_tokens

        lo, hi = 0, len(lines)  # fits(lo) holds, answer in [lo, hi)
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if fits(mid):
                lo = mid
            else:
                hi = mid
        keep = lo
    return "\n".join(lines[:keep] + [TRUNCATION_MARKER])


def _sections(obs: Observation, tree: str) -> str:
    return (
        f"# Goal\n{obs.goal}\n\n"
        f"# Current URL\n{obs.url}\n\n"
        f"# Last action\n{obs.last_action if obs.last_action is not None else 'None'}\n\n"
        f"# Accessibility tree\n{tree}"
    )


def compose_observation_prompt(
    obs: Observation,
    budget: TokenBudget = TokenBudget(),
    estimator: Estimator = estimate_tokens,
    reserved: int = 0,
) -> str:
    """User message for one step: goal, url, last action, then the tree.

    Only the tree is cut to make the message fit ``max_prompt - reserved``;
    ``reserved`` accounts for other messages sharing the prompt (e.g. system).
    """
    limit = budget.max_prompt - reserved
    head_cost = estimator(_sections(obs, ""))
    if head_cost > limit:
        raise BudgetExceededError(
            f"goal/url/last_action need {head_cost} tokens, over the {limit} token budget"
        )
    room = limit - head_cost
    while True:
        prompt = _sections(obs, truncate_to_budget(obs.axtree_text, room, estimator))
        if estimator(prompt) <= limit:
            return prompt
        room -= 1
        if room < 0:
            raise BudgetExceededError("observation cannot be fitted into the prompt budget")
