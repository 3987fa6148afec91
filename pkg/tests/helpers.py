"""Shared builders and independent oracles for the test suite."""

from __future__ import annotations

import random
import re
from fractions import Fraction

from trajsynth.actions import (
    Action,
    AgentResponse,
    click,
    fill,
    go_back,
    goto,
    hover,
    keyboard_press,
    parse_action,
    scroll,
    select_option,
    send_msg_to_user,
)
from trajsynth.env import SiteSpec, check_goal, replay, reset, step
from trajsynth.model import (
    OPTIMALITY_LABELS,
    Observation,
    Step,
    TaskSpec,
    Terminal,
    Trajectory,
    Verdict,
)
from trajsynth.sft import SftConversation, SftMessage

TAG_MARKERS = ("<thought>", "</thought>", "<think>", "</think>", "<action>", "</action>")


# -- random values ------------------------------------------------------------

_ALPHABET = "abcXYZ 019\"'\\\n\r\t,()<>/=éß中😀"


def random_text(rng: random.Random, max_len: int = 40, alphabet: str = _ALPHABET) -> str:
    while True:
        s = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, max_len)))
        if not any(m in s for m in TAG_MARKERS):
            return s


def random_bid(rng: random.Random) -> str:
    return random_text(rng, 6, "abn0123456789_-") or "a1"


def random_action(rng: random.Random) -> Action:
    verb = rng.randrange(9)
    if verb == 0:
        return click(random_bid(rng))
    if verb == 1:
        return fill(random_bid(rng), random_text(rng))
    if verb == 2:
        return select_option(random_bid(rng), random_text(rng))
    if verb == 3:
        return scroll(rng.randint(-10**6, 10**6), rng.randint(-10**6, 10**6))
    if verb == 4:
        return keyboard_press(random_text(rng, 10))
    if verb == 5:
        return hover(random_bid(rng))
    if verb == 6:
        return goto(random_text(rng))
    if verb == 7:
        return go_back()
    return send_msg_to_user(random_text(rng))


def random_response(rng: random.Random) -> AgentResponse:
    thought = random_text(rng, 200) if rng.random() < 0.8 else None
    think = random_text(rng, 120) if rng.random() < 0.6 else None
    return AgentResponse(random_action(rng), thought, think)


# -- episodes -----------------------------------------------------------------


def play(spec: SiteSpec, intent: str, actions: list[Action], traj_id: str, task_id: str,
         step_limit: int | None = None) -> Trajectory:
    """Trajectory obtained by executing ``actions`` directly in the simulator."""
    state, obs = reset(spec, intent)
    steps = []
    terminal = None
    for n, a in enumerate(actions):
        tr = step(state, a, spec, step_limit)
        steps.append(Step(n, obs, AgentResponse(a, f"Step {n} of the plan.", None), a, tr.error))
        state, obs = tr.state, tr.observation
        if tr.terminal is not None:
            terminal = tr.terminal
            break
    return Trajectory(traj_id, task_id, steps, terminal or Terminal("step_limit"), 1, obs)


def random_episode_actions(spec: SiteSpec, rng: random.Random, n: int, episode: int) -> list[Action]:
    state, _ = reset(spec)
    out: list[Action] = []
    for _ in range(n):
        page = spec.pages[state.current_page]
        r = rng.random()
        if r < 0.2 and "b2" in page.bids:
            a = fill("b2", rng.choice(["blue", "red", "teal"]))
        elif r < 0.4 and "b3" in page.bids:
            a = select_option("b3", rng.choice(["red", "green"]))
        else:
            a = click(rng.choice(sorted(page.bids)))
        out.append(a)
        state = step(state, a, spec, 1000).state
    out.append(send_msg_to_user(f"Finished attempt {episode}"))
    return out


def goal_oracle_judge(sites: dict[str, SiteSpec], invert: frozenset[int] = frozenset()):
    """Scripted judge reply: replays the actions listed in the prompt and checks the goal.

    Episodes whose closing message names an index in ``invert`` get the
    opposite success label.
    """
    intents = {t.intent: (spec, t.goal) for spec in sites.values() for t in spec.tasks}

    def reply(messages) -> str:
        text = messages[-1].text
        intent = text.split("## Goal\n", 1)[1].split("\n", 1)[0]
        spec, goal = intents[intent]
        actions = [parse_action(line[len("Action: "):]) for line in text.splitlines() if line.startswith("Action: ")]
        ok = check_goal(replay(spec, actions, intent, 1000), goal)
        m = re.search(r'Finished attempt (\d+)', text)
        if m and int(m.group(1)) in invert:
            ok = not ok
        answer = "Successful" if ok else "Unsuccessful"
        return f"<loop>No</loop><side>No</side><optimal>Suboptimal</optimal><success>{answer}</success>"

    return reply


# -- full-scale aggregate fixtures -------------------------------------------

# Per-site split of the 2,322 retained conversations. The total and the
# 99 eight-step conversations are forced by 2,322 and 16,353; the split
# across sites is a fixture choice.
FULL_SITES = {"forum": 520, "code": 410, "commerce": 480, "admin": 390, "map": 262, "wiki": 260}
FULL_RETAINED = 2322
FULL_JUDGED = 2999
FULL_EXAMPLES = 16353
FULL_REJUDGED = 2968
FULL_FLIPS = 632
FULL_S_TO_U = 144


def _verdict(tid: str, success: bool, hints: bool) -> Verdict:
    return Verdict(tid, "No", "No", OPTIMALITY_LABELS[3 if success else 0],
                   "Successful" if success else "Unsuccessful", "", hints, 0)


def full_scale_verdicts() -> tuple[list[Verdict], list[Verdict]]:
    """(with-hints, without-hints) verdict lists matching the published counts."""
    ids = [f"traj-{i:06d}" for i in range(1, FULL_JUDGED + 1)]
    with_hints = [_verdict(t, i < FULL_RETAINED, True) for i, t in enumerate(ids)]
    u_to_s = FULL_FLIPS - FULL_S_TO_U
    without = []
    for i, t in enumerate(ids[:FULL_REJUDGED]):
        success = i < FULL_RETAINED
        if i < FULL_S_TO_U or FULL_RETAINED <= i < FULL_RETAINED + u_to_s:
            success = not success
        without.append(_verdict(t, success, False))
    return with_hints, without


def tiny_conversation(cid: str, site: str, steps: int) -> SftConversation:
    msgs = [SftMessage("system", "sys", False)]
    for n in range(steps):
        msgs.append(SftMessage("user", f"obs {n}", False))
        msgs.append(SftMessage("assistant", f'<thought>plan {n}</thought>\n<action>click("b{n}")</action>', True))
    return SftConversation(cid, cid.replace("conv", "task"), site, tuple(msgs))


def full_scale_conversations() -> list[SftConversation]:
    eights = FULL_EXAMPLES - 7 * FULL_RETAINED
    convs = []
    n = 0
    for site, count in FULL_SITES.items():
        for _ in range(count):
            convs.append(tiny_conversation(f"conv-{n:06d}", site, 8 if n < eights else 7))
            n += 1
    return convs


# -- random conversations and the brute-force statistics recount -----------------


def random_conversations(n: int, seed: int) -> list[SftConversation]:
    rng = random.Random(seed)
    sites = ["forum", "code", "commerce", "admin", "map", "wiki"]
    out = []
    for i in range(n):
        msgs = [SftMessage("system", "system prompt", False)]
        for _ in range(rng.randint(1, 12)):
            msgs.append(SftMessage("user", random_text(rng, 30), False))
            msgs.append(SftMessage("assistant", random_response(rng).raw, True))
        out.append(SftConversation(f"conv-{i:06d}", f"task-{i:06d}", rng.choice(sites), tuple(msgs)))
    return out


_BLOCK = {t: re.compile(rf"<{t}>(.*?)</{t}>", re.S) for t in ("thought", "think")}


def brute_stats(convs: list[SftConversation]) -> dict:
    """Single-pass recount from raw text with regexes; exact rationals throughout."""
    rows = []
    for c in convs:
        for m in c.messages:
            if m.role != "assistant":
                continue
            thought = _BLOCK["thought"].search(m.text.split("<action>")[0])
            think = _BLOCK["think"].search(m.text.split("<action>")[0])
            action = m.text[m.text.index("<action>") + 8:m.text.rindex("</action>")]
            verb = action[:action.index("(")].strip()
            rows.append((m.text, thought, think, action, verb))
    n = len(rows)

    def lower_median(xs):
        xs = sorted(xs)
        return xs[(len(xs) - 1) // 2] if xs else 0

    verbs: dict[str, int] = {}
    for r in rows:
        verbs[r[4]] = verbs.get(r[4], 0) + 1
    return {
        "trajectories": len(convs),
        "examples": n,
        "avg_steps": Fraction(n, len(convs)) if convs else Fraction(0),
        "avg_response_chars": Fraction(sum(len(r[0]) for r in rows), n) if n else Fraction(0),
        "avg_response_chars_inner": Fraction(
            sum(len(r[3]) + (len(r[1].group(1)) if r[1] else 0) + (len(r[2].group(1)) if r[2] else 0) for r in rows), n
        ) if n else Fraction(0),
        "thought_median_chars": lower_median([len(r[1].group(1)) for r in rows if r[1]]),
        "think_present_rate": Fraction(sum(1 for r in rows if r[2]), n) if n else Fraction(0),
        "think_median_chars": lower_median([len(r[2].group(1)) for r in rows if r[2]]),
        "action_distribution": {v: Fraction(c, n) for v, c in verbs.items()},
    }


def stats_mismatches(stats, oracle: dict) -> list[str]:
    got = stats.to_dict()
    bad = []
    for key, want in oracle.items():
        have = got[key]
        if key == "action_distribution":
            if set(have) != set(want) or any(abs(have[v] - float(want[v])) > 1e-9 for v in want):
                bad.append(key)
        elif isinstance(want, Fraction):
            if abs(have - float(want)) > 1e-9:
                bad.append(key)
        elif have != want:
            bad.append(key)
    return bad


def obs(goal: str = "g", tree: str = "[root] RootWebArea 'x'", url: str = "sim://s/p", last: str | None = None) -> Observation:
    return Observation(url, tree, goal, None, last)


def spec_for(intent: str, hints: tuple[str, ...] | list[str] = ("It is done.",), site: str = "micro", tid: str = "task-000001") -> TaskSpec:
    return TaskSpec(tid, site, None, intent, {}, intent, hints, 0, "expl-000001")
