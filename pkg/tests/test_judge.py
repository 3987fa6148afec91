import itertools
import random
from dataclasses import replace

import pytest

from trajsynth.actions import click, fill, send_msg_to_user
from trajsynth.backend import ScriptedBackend
from trajsynth.env import resolve_site
from trajsynth.judge import (
    QUESTIONS,
    JudgeError,
    JudgeOptions,
    VerdictParseError,
    compose_judge_prompt,
    filter_successful,
    flip_analysis,
    judge_trajectory,
    option_order,
    parse_verdict,
)
from trajsynth.model import OPTIMALITY_LABELS, Verdict

from helpers import (
    FULL_FLIPS,
    FULL_REJUDGED,
    FULL_S_TO_U,
    _verdict,
    goal_oracle_judge,
    full_scale_verdicts,
    play,
    spec_for,
)

GOOD = "<loop>No</loop><side>No</side><optimal>Suboptimal</optimal><success>Successful</success>"


def _traj(tid="traj-000001"):
    micro = resolve_site("builtin:micro")
    return play(micro, "Type blue into the answer box.",
                [click("n2"), fill("b2", "blue"), send_msg_to_user("done")], tid, "task-000001")


def _task():
    return spec_for("Type blue into the answer box.", ["The answer box shows blue.", "No dialog remains open."])


def test_prompt_hint_block_is_the_only_difference():
    traj, task = _traj(), _task()
    with_h = compose_judge_prompt(traj, task, JudgeOptions(include_hints=True))[1].text
    without = compose_judge_prompt(traj, task, JudgeOptions(include_hints=False))[1].text
    block = "## Hints\n- The answer box shows blue.\n- No dialog remains open.\n\n"
    assert with_h.index("## Hints") > with_h.index("## Goal")
    assert with_h.replace(block, "") == without
    assert "## Hints" not in without


def test_prompt_lists_steps_and_questions_in_order():
    text = compose_judge_prompt(_traj(), _task())[1].text
    assert 'Action: fill("b2", "blue")' in text
    assert "Thought: Step 1 of the plan." in text
    positions = [text.index(f"<{q.tag}></{q.tag}>") for q in QUESTIONS]
    assert positions == sorted(positions)
    assert QUESTIONS[-1].tag == "success"


def test_option_order_is_seeded_and_complete():
    a = option_order(3, "traj-1", "optimal", OPTIMALITY_LABELS)
    assert a == option_order(3, "traj-1", "optimal", OPTIMALITY_LABELS)
    assert sorted(a) == sorted(OPTIMALITY_LABELS)
    seen = {option_order(s, "traj-1", "optimal", OPTIMALITY_LABELS) for s in range(200)}
    assert len(seen) > 10


def test_screenshots_attached_on_request():
    traj = _traj()
    first = replace(traj.steps[0], observation=replace(traj.steps[0].observation, screenshot_ref="shot-0.png"))
    traj = replace(traj, steps=[first, *traj.steps[1:]],
                   final_observation=replace(traj.final_observation, screenshot_ref="shot-end.png"))
    msgs = compose_judge_prompt(traj, _task(), JudgeOptions(include_screenshots=True))
    assert msgs[1].attachments == ("shot-0.png", "shot-end.png")
    assert not compose_judge_prompt(traj, _task())[1].attachments
    assert not compose_judge_prompt(_traj(), _task())[1].attachments


def test_parse_examples():
    v = parse_verdict(GOOD, "t")
    assert (v.loop, v.side_effects, v.optimality, v.success) == ("No", "No", "Suboptimal", "Successful")
    assert parse_verdict(GOOD.replace("Successful", " unsuccessful "), "t").success == "Unsuccessful"
    with pytest.raises(VerdictParseError):
        parse_verdict(GOOD.replace("Successful", "Mostly Successful"), "t")
    with pytest.raises(VerdictParseError):
        parse_verdict(GOOD.replace("<optimal>Suboptimal</optimal>", ""), "t")
    with pytest.raises(VerdictParseError):
        parse_verdict("The agent succeeded.", "t")


def test_free_text_judge_exhausts_after_ten():
    b = ScriptedBackend(default="Looks fine to me.")
    with pytest.raises(JudgeError) as info:
        judge_trajectory(b, _traj(), _task())
    assert b.calls == 10 and info.value.attempts == 10


def test_judge_retries_until_parse():
    replies = iter(["nonsense", GOOD])
    b = ScriptedBackend(default=lambda m: next(replies))
    v = judge_trajectory(b, _traj(), _task())
    assert v.successful and b.calls == 2 and v.hints_used


def test_verdict_invariant_under_option_permutations():
    traj, task = _traj(), _task()
    micro = {"micro": resolve_site("builtin:micro")}
    judge = goal_oracle_judge(micro)
    results = set()
    for perm in itertools.permutations(OPTIMALITY_LABELS):
        orders = {q.tag: q.labels for q in QUESTIONS}
        orders["optimal"] = perm
        prompt = compose_judge_prompt(traj, task, orders=orders)
        assert "Options: " + " / ".join(perm) in prompt[1].text
        results.add(parse_verdict(judge(prompt), traj.id).success)
    assert results == {"Successful"}


def test_filter_successful():
    rng = random.Random(5)
    pairs = [(i, _verdict(f"t{i}", rng.random() < 0.6, True) if i % 7 else None) for i in range(100)]
    kept = filter_successful(pairs)
    assert all(v.successful for _, v in kept)
    assert [i for i, _ in kept] == [i for i, v in pairs if v is not None and v.successful]
    assert filter_successful(kept) == kept


def test_flip_analysis_identical_and_inverted():
    base = [_verdict(f"t{i}", i % 2 == 0, True) for i in range(100)]
    assert flip_analysis(base, base).flipped == 0
    other = [_verdict(v.trajectory_id, not v.successful if i < 10 else v.successful, False) for i, v in enumerate(base)]
    rep = flip_analysis(base, other)
    assert (rep.flipped, rep.s_to_u, rep.u_to_s) == (10, 5, 5)
    assert rep.flip_rate == pytest.approx(0.1)


def test_flip_analysis_rejects_duplicates():
    v = _verdict("t1", True, True)
    with pytest.raises(ValueError):
        flip_analysis([v, v], [v])


def test_flip_analysis_full_scale_counts():
    with_h, without = full_scale_verdicts()
    rep = flip_analysis(with_h, without)
    assert rep.total_rejudged == FULL_REJUDGED
    assert rep.flipped == FULL_FLIPS and rep.s_to_u == FULL_S_TO_U
    assert f"{100 * rep.flip_rate:.1f}" == "21.3"


def test_verdict_rejects_bad_labels():
    with pytest.raises(ValueError):
        Verdict("t", "maybe", "No", "Suboptimal", "Successful", "", True, 0)
