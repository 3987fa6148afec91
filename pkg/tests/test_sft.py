import json
from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from trajsynth.actions import click, fill, go_back, parse_agent_response, send_msg_to_user
from trajsynth.axtree import TokenBudget, estimate_tokens
from trajsynth.env import resolve_site
from trajsynth.model import Step, Terminal, Trajectory
from trajsynth.sft import (
    ConversionError,
    SftConversation,
    SftMessage,
    allocate,
    compute_stats,
    export_jsonl,
    export_unfiltered,
    lower_median,
    read_conversations,
    subsample,
    to_sft_conversation,
    transform_reasoning,
)

from helpers import (
    FULL_EXAMPLES,
    FULL_RETAINED,
    FULL_SITES,
    _verdict,
    brute_stats,
    full_scale_conversations,
    play,
    random_conversations,
    spec_for,
    stats_mismatches,
    tiny_conversation,
)

SYSTEM = "You are a web agent."


def _traj(actions, tid="traj-000001"):
    return play(resolve_site("builtin:micro"), "Type blue into the answer box.", actions, tid, "task-000001")


SEVEN = [click("n2"), fill("b2", "red"), fill("b2", "blue"), click("n3"), click("n2"), go_back(), send_msg_to_user("ok")]


def test_seven_step_conversation():
    conv = to_sft_conversation(_traj(SEVEN), spec_for("Type blue into the answer box."), SYSTEM)
    assert len(conv.messages) == 15
    assert [m.role for m in conv.messages[:3]] == ["system", "user", "assistant"]
    assert [m.loss for m in conv.messages] == [m.role == "assistant" for m in conv.messages]
    assert conv.meta["steps"] == 7
    assert "# Goal\nType blue into the answer box." in conv.messages[1].text
    assert parse_agent_response(conv.messages[4].text).action == fill("b2", "red")


def test_single_step_conversation():
    conv = to_sft_conversation(_traj([send_msg_to_user("hi")]), spec_for("x"), SYSTEM)
    assert len(conv.messages) == 3


def test_conversion_respects_budget():
    budget = TokenBudget(max_total=200, max_prompt=150, max_new=50)
    conv = to_sft_conversation(_traj(SEVEN), spec_for("x"), SYSTEM, budget)
    for m in conv.messages[1::2]:
        assert estimate_tokens(SYSTEM) + estimate_tokens(m.text) <= 150


def test_conversion_rejects_empty_and_unparsed():
    empty = Trajectory("t", "task", [], Terminal("env_error", "boom"))
    with pytest.raises(ConversionError):
        to_sft_conversation(empty, spec_for("x"), SYSTEM)
    traj = _traj(SEVEN)
    broken = Step(0, traj.steps[0].observation, None, None, "no action", "free text")
    with pytest.raises(ConversionError):
        to_sft_conversation(Trajectory("t", "task", [broken], Terminal("step_limit")), spec_for("x"), SYSTEM)


def test_malformed_conversations_rejected():
    with pytest.raises(ValueError):
        SftConversation("c", "t", "s", (SftMessage("system", "s", False), SftMessage("user", "u", True),
                                        SftMessage("assistant", "a", True)))
    with pytest.raises(ValueError):
        SftConversation("c", "t", "s", (SftMessage("system", "s", False), SftMessage("user", "u", False)))


def test_export_modes(tmp_path):
    convs = [tiny_conversation("conv-000001", "forum", 3), tiny_conversation("conv-000002", "wiki", 2)]
    counts = export_jsonl(convs, tmp_path / "m.jsonl")
    assert counts == {"conversations": 2, "examples": 5, "lines": 2}
    assert read_conversations(tmp_path / "m.jsonl") == convs
    counts = export_jsonl(convs, tmp_path / "p.jsonl", "per_step")
    assert counts["lines"] == 5
    rows = [json.loads(line) for line in (tmp_path / "p.jsonl").read_text().splitlines()]
    assert rows[0]["id"] == "conv-000001-step000"
    assert all(len(r["messages"]) == 3 and r["messages"][2]["loss"] for r in rows)


def test_empty_export(tmp_path):
    assert export_jsonl([], tmp_path / "e.jsonl")["conversations"] == 0
    assert (tmp_path / "e.jsonl").read_text() == ""
    with pytest.raises(ValueError):
        export_jsonl([], tmp_path / "e.jsonl", "chat")


def test_export_unfiltered_keeps_failures(tmp_path):
    records = [(_traj(SEVEN, f"traj-{i:06d}"), spec_for("x"), _verdict(f"traj-{i:06d}", i % 2 == 0, True))
               for i in range(4)]
    records.append((_traj(SEVEN, "traj-000099"), spec_for("x"), None))
    counts = export_unfiltered(records, tmp_path / "u.jsonl", SYSTEM)
    assert counts["conversations"] == 4 and counts["skipped"] == 0


def test_stats_degenerate_corpus():
    msgs = [SftMessage("system", "s", False)]
    for _ in range(4):
        msgs += [SftMessage("user", "u", False), SftMessage("assistant", "<action>go_back()</action>", True)]
    stats = compute_stats([SftConversation("c", "t", "forum", tuple(msgs))])
    assert stats.action_distribution == {"go_back": 1.0}
    assert stats.thought_median_chars == 0 and stats.think_present_rate == 0.0
    assert stats.avg_steps == 4.0


def test_stats_full_scale_fixture():
    stats = compute_stats(full_scale_conversations())
    assert stats.trajectories == FULL_RETAINED
    assert stats.examples == FULL_EXAMPLES
    assert f"{stats.avg_steps:.2f}" == "7.04"


def test_stats_empty():
    stats = compute_stats([])
    assert stats.trajectories == 0 and stats.avg_steps == 0.0


def test_stats_match_brute_force():
    convs = random_conversations(200, 3)
    assert stats_mismatches(compute_stats(convs), brute_stats(convs)) == []


def test_lower_median():
    assert lower_median([]) == 0
    assert lower_median([3, 1, 2]) == 2
    assert lower_median([4, 1, 3, 2]) == 2


def _reasoning(convs):
    return [parse_agent_response(t) for c in convs for t in c.assistant_texts]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 80))
def test_truncate_properties(seed, k):
    convs = random_conversations(10, seed)
    out = transform_reasoning(convs, "truncate", k)
    for before, after in zip(_reasoning(convs), _reasoning(out)):
        assert after.action == before.action
        for b, a in ((before.thought, after.thought), (before.think, after.think)):
            assert a == (None if b is None else b[:k])
    assert transform_reasoning(out, "truncate", k) == out
    for c_in, c_out in zip(convs, out):
        assert [m.text for m in c_in.messages if m.role != "assistant"] == \
               [m.text for m in c_out.messages if m.role != "assistant"]


def test_truncate_long_thought():
    msgs = (SftMessage("system", "s", False), SftMessage("user", "u", False),
            SftMessage("assistant", f"<thought>{'x' * 996}</thought>\n<action>click(\"a\")</action>", True))
    (out,) = transform_reasoning([SftConversation("c", "t", "s", msgs)], "truncate", 500)
    assert parse_agent_response(out.assistant_texts[0]).thought == "x" * 500


def test_remove_reasoning():
    out = transform_reasoning(random_conversations(30, 9), "remove")
    for r in _reasoning(out):
        assert r.thought is None and r.think is None
    for t in (t for c in out for t in c.assistant_texts):
        assert "<thought>" not in t and "<think>" not in t


def _sites(convs):
    return Counter(c.site for c in convs)


def test_subsample_proportional():
    convs = [tiny_conversation(f"conv-{i:06d}", "a" if i < 60 else "b", 1) for i in range(100)]
    out = subsample(convs, 10, seed=1)
    assert _sites(out) == {"a": 6, "b": 4}
    assert [c.id for c in out] == sorted(c.id for c in out)
    assert subsample(convs, 10, seed=1) == out
    assert subsample(convs, 100, seed=1) == convs
    with pytest.raises(ValueError):
        subsample(convs, 101)


def test_subsample_full_scale():
    convs = full_scale_conversations()
    out = subsample(convs, 285, seed=0)
    assert len(out) == 285
    for site, count in FULL_SITES.items():
        assert abs(_sites(out)[site] - 285 * count / FULL_RETAINED) <= 1


@given(st.dictionaries(st.sampled_from("abcdefg"), st.integers(0, 50), min_size=1), st.data())
def test_allocate_properties(sizes, data):
    total = sum(sizes.values())
    n = data.draw(st.integers(0, total))
    alloc = allocate(sizes, n)
    assert sum(alloc.values()) == n
    for s, c in sizes.items():
        assert alloc[s] <= c
        assert abs(alloc[s] - n * c / total) < 1 if total else True

