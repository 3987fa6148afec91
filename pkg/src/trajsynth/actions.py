"""Agent action language: parsing and canonical rendering.

Grammar (whitespace allowed between tokens)::

    action   := verb "(" [arg ("," arg)*] ")"
    verb     := [A-Za-z_][A-Za-z0-9_]*
    arg      := string | integer
    string   := '"' (char | escape)* '"'  |  "'" (char | escape)* "'"
    escape   := "\\" ( '"' | "'" | "\\" | "n" | "r" | "t" )
    integer  := ["-"] [0-9]+

Canonical rendering uses double quotes, ``", "`` between arguments and escapes
``\\``, ``"``, newline and carriage return so that every action fits on one
line.

Agent responses carry up to three tagged blocks::

    <thought>...</thought>
    <think>...</think>
    <action>...</action>
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Union

Arg = Union[str, int]

STR = "str"
INT = "int"

# verb -> parameter kinds; element actions take a bid first.
ACTION_SIGNATURES: dict[str, tuple[str, ...]] = {
    "click": (STR,),
    "fill": (STR, STR),
    "select_option": (STR, STR),
    "scroll": (INT, INT),
    "keyboard_press": (STR,),
    "hover": (STR,),
    "goto": (STR,),
    "go_back": (),
    "send_msg_to_user": (STR,),
}
ELEMENT_VERBS = {"click", "fill", "select_option", "hover"}


class ActionParseError(ValueError):
    kind = "action-parse"


class UnknownActionError(ActionParseError):
    kind = "unknown-action"


class MalformedArgumentsError(ActionParseError):
    kind = "malformed-arguments"


class MalformedStringError(ActionParseError):
    kind = "malformed-string"


class NoActionError(ValueError):
    """Response has no usable ``<action>`` block."""

    def __init__(self, message: str, cause: ActionParseError | None = None):
        super().__init__(message)
        self.cause = cause


def register_action(verb: str, params: tuple[str, ...], element: bool = False) -> None:
    """Add a verb to the registry so that it parses and renders."""
    if not re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", verb):
        raise ValueError(f"invalid verb name {verb!r}")
    if any(p not in (STR, INT) for p in params):
        raise ValueError(f"parameter kinds must be {STR!r} or {INT!r}")
    if element and (not params or params[0] != STR):
        raise ValueError("element actions take a string bid first")
    ACTION_SIGNATURES[verb] = tuple(params)
    if element:
        ELEMENT_VERBS.add(verb)


@dataclass(frozen=True)
class Action:
    verb: str
    args: tuple[Arg, ...] = ()

    def __post_init__(self) -> None:
        sig = ACTION_SIGNATURES.get(self.verb)
        if sig is None:
            raise UnknownActionError(f"unknown action {self.verb!r}")
        if len(sig) != len(self.args):
            raise MalformedArgumentsError(
                f"{self.verb} takes {len(sig)} argument(s), got {len(self.args)}"
            )
        for kind, value in zip(sig, self.args):
            if kind == INT and (isinstance(value, bool) or not isinstance(value, int)):
                raise MalformedArgumentsError(f"{self.verb}: expected integer, got {value!r}")
            if kind == STR and not isinstance(value, str):
                raise MalformedArgumentsError(f"{self.verb}: expected string, got {value!r}")
        if self.verb in ELEMENT_VERBS and not self.args[0]:
            raise MalformedArgumentsError(f"{self.verb}: bid must be nonempty")

    @property
    def bid(self) -> str | None:
        return self.args[0] if self.verb in ELEMENT_VERBS else None  # type: ignore[return-value]

    @property
    def text(self) -> str | None:
        """Free-text argument: fill text, selected option, url, key or message."""
        if self.verb in ("fill", "select_option"):
            return self.args[1]  # type: ignore[return-value]
        if self.verb in ("goto", "keyboard_press", "send_msg_to_user"):
            return self.args[0]  # type: ignore[return-value]
        return None

    def __str__(self) -> str:
        return render_action(self)


def click(bid: str) -> Action:
    return Action("click", (bid,))


def fill(bid: str, text: str) -> Action:
    return Action("fill", (bid, text))


def select_option(bid: str, option: str) -> Action:
    return Action("select_option", (bid, option))


def scroll(dx: int, dy: int) -> Action:
    return Action("scroll", (dx, dy))


def keyboard_press(key: str) -> Action:
    return Action("keyboard_press", (key,))


def hover(bid: str) -> Action:
    return Action("hover", (bid,))


def goto(url: str) -> Action:
    return Action("goto", (url,))


def go_back() -> Action:
    return Action("go_back", ())


def send_msg_to_user(text: str) -> Action:
    return Action("send_msg_to_user", (text,))


_ESCAPES_OUT = {"\\": "\\\\", '"': '\\"', "\n": "\\n", "\r": "\\r"}
_ESCAPES_IN = {'"': '"', "'": "'", "\\": "\\", "n": "\n", "r": "\r", "t": "\t"}


def _quote(s: str) -> str:
    return '"' + "".join(_ESCAPES_OUT.get(c, c) for c in s) + '"'


def render_action(action: Action) -> str:
    parts = [_quote(a) if isinstance(a, str) else str(a) for a in action.args]
    return f"{action.verb}({', '.join(parts)})"


class _Scanner:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def skip_ws(self) -> None:
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self) -> str:
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def at_end(self) -> bool:
        return self.pos >= len(self.text)

    def string(self) -> str:
        quote = self.text[self.pos]
        self.pos += 1
        out: list[str] = []
        while True:
            if self.pos >= len(self.text):
                raise MalformedStringError("unterminated string literal")
            c = self.text[self.pos]
            if c == quote:
                self.pos += 1
                return "".join(out)
            if c == "\\":
                nxt = self.text[self.pos + 1] if self.pos + 1 < len(self.text) else ""
                if nxt == "":
                    raise MalformedStringError("unterminated string literal")
                if nxt not in _ESCAPES_IN:
                    raise MalformedStringError(f"invalid escape \\{nxt}")
                out.append(_ESCAPES_IN[nxt])
                self.pos += 2
                continue
            out.append(c)
            self.pos += 1

    def integer(self) -> int:
        m = re.compile(r"-?[0-9]+").match(self.text, self.pos)
        if not m:
            raise MalformedArgumentsError(f"unexpected token at offset {self.pos}")
        self.pos = m.end()
        return int(m.group())


_VERB_RE = re.compile(r"\s*([A-Za-z_][A-Za-z0-9_]*)\s*\(")


def parse_action(text: str) -> Action:
    """Parse one action such as ``fill("q", "say \\"hi\\"")``."""
    m = _VERB_RE.match(text)
    if not m:
        raise MalformedArgumentsError(f"not an action call: {text.strip()[:80]!r}")
    verb = m.group(1)
    if verb not in ACTION_SIGNATURES:
        raise UnknownActionError(f"unknown action {verb!r}")
    sc = _Scanner(text)
    sc.pos = m.end()
    args: list[Arg] = []
    sc.skip_ws()
    if sc.peek() == ")":
        sc.pos += 1
    else:
        while True:
            sc.skip_ws()
            c = sc.peek()
            if c in ('"', "'"):
                args.append(sc.string())
            elif c == "-" or c.isdigit():
                args.append(sc.integer())
            elif c == "":
                raise MalformedArgumentsError("unexpected end of input")
            else:
                raise MalformedArgumentsError(f"unexpected character {c!r} at offset {sc.pos}")
            sc.skip_ws()
            c = sc.peek()
            if c == ",":
                sc.pos += 1
                continue
            if c == ")":
                sc.pos += 1
                break
            raise MalformedArgumentsError(f"expected ',' or ')' at offset {sc.pos}")
    sc.skip_ws()
    if not sc.at_end():
        raise MalformedArgumentsError(f"trailing text after action: {text[sc.pos:][:40]!r}")
    return Action(verb, tuple(args))


@dataclass(frozen=True)
class AgentResponse:
    action: Action
    thought: str | None = None
    think: str | None = None
    raw: str = ""

    def __post_init__(self) -> None:
        if not self.raw:
            object.__setattr__(self, "raw", render_agent_response(self))

    def fields(self) -> tuple[str | None, str | None, Action]:
        return (self.thought, self.think, self.action)


def find_tag(text: str, tag: str) -> str | None:
    """Inner text of the first ``<tag>...</tag>`` block, or None."""
    open_, close = f"<{tag}>", f"</{tag}>"
    start = text.find(open_)
    if start < 0:
        return None
    start += len(open_)
    end = text.find(close, start)
    if end < 0:
        return None
    return text[start:end]


def find_all_tags(text: str, tag: str) -> list[str]:
    open_, close = f"<{tag}>", f"</{tag}>"
    out: list[str] = []
    pos = 0
    while True:
        start = text.find(open_, pos)
        if start < 0:
            return out
        start += len(open_)
        end = text.find(close, start)
        if end < 0:
            return out
        out.append(text[start:end])
        pos = end + len(close)


def _find_action_block(text: str) -> str | None:
    # Closing tag search skips quoted strings so fill text may contain "</action>".
    start = text.find("<action>")
    if start < 0:
        return None
    i = start + len("<action>")
    quote = ""
    while i < len(text):
        c = text[i]
        if quote:
            if c == "\\":
                i += 2
                continue
            if c == quote:
                quote = ""
        elif c in ('"', "'"):
            quote = c
        elif text.startswith("</action>", i):
            return text[start + len("<action>"):i]
        i += 1
    # Unbalanced quotes: fall back to the plain first closing tag.
    return find_tag(text[start:], "action")


def parse_agent_response(text: str) -> AgentResponse:
    block = _find_action_block(text)
    if block is None:
        raise NoActionError("response has no <action> block")
    try:
        action = parse_action(block.strip())
    except ActionParseError as exc:
        raise NoActionError(f"unparseable action ({exc.kind}): {exc}", exc) from exc
    return AgentResponse(
        action=action,
        thought=find_tag(text, "thought"),
        think=find_tag(text, "think"),
        raw=text,
    )


def render_agent_response(response: AgentResponse) -> str:
    blocks = []
    if response.thought is not None:
        blocks.append(f"<thought>{response.thought}</thought>")
    if response.think is not None:
        blocks.append(f"<think>{response.think}</think>")
    blocks.append(f"<action>{render_action(response.action)}</action>")
    text = "\n".join(blocks)
    if parse_agent_response(text).fields() != response.fields():
        raise ValueError("reasoning text contains tag markers and cannot be rendered canonically")
    return text
