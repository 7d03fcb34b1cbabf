import numpy as np
import pytest

from bargein.errors import DataError
from bargein.metrics import accuracy, frr_at_far, report_by_condition
from bargein.nnet import TcnConfig, count_cost


def brute_force_frr(scores, is_target, far_target):
    """Independent sweep: minimize FRR over feasible thresholds, then take
    the largest threshold achieving that FRR."""
    scores = np.asarray(scores, dtype=float)
    tags = np.asarray(is_target, dtype=bool)
    feasible = []
    for theta in list(np.unique(scores)) + [np.inf]:
        fires = scores >= theta
        if np.mean(fires[~tags]) <= far_target:
            feasible.append((np.mean(~fires[tags]), theta))
    best_frr = min(f for f, _ in feasible)
    return best_frr, max(t for f, t in feasible if f == best_frr)


def random_scoreset(rng, n=40):
    # one-decimal scores force plenty of threshold ties
    scores = np.round(rng.uniform(0, 1, n), 1)
    tags = rng.random(n) < 0.5
    tags[0], tags[1] = True, False  # both classes present
    return scores, tags


# --- accuracy -------------------------------------------------------------


def test_accuracy_hand_counted():
    assert accuracy([0, 1, 2, 1], [0, 2, 2, 1]) == 0.75
    assert accuracy(np.array([5]), np.array([5])) == 1.0
    with pytest.raises(DataError):
        accuracy([0, 1], [0, 1, 2])
    with pytest.raises(DataError):
        accuracy([], [])


# --- frr_at_far -----------------------------------------------------------


def test_frr_worked_example_spends_budget_at_the_permissive_end():
    # thresholds 0.2 and 0.7 both sit exactly at FAR 0.5; 0.2 also accepts
    # every target, so minimum FRR wins over the more conservative candidate
    scores = [0.9, 0.8, 0.2, 0.7, 0.1]
    is_target = [True, True, True, False, False]
    frr, theta = frr_at_far(scores, is_target, 0.5)
    assert frr == 0.0
    assert theta == 0.2


def test_frr_zero_far_budget_admits_only_silent_false_accepts():
    frr, theta = frr_at_far([0.9, 0.6, 0.7, 0.1], [True, True, False, False], 0.0)
    assert (frr, theta) == (0.5, 0.9)


def test_frr_falls_back_to_never_firing():
    # the lone non-target outscores every target, so FAR 0 forces theta = inf
    frr, theta = frr_at_far([0.5, 0.9], [True, False], 0.0)
    assert frr == 1.0 and theta == np.inf


def test_frr_perfect_separation_is_free():
    scores = [0.9, 0.8, 0.75, 0.3, 0.2]
    tags = [True, True, True, False, False]
    assert frr_at_far(scores, tags, 0.0) == (0.0, 0.75)


def test_frr_matches_exhaustive_search():
    rng = np.random.default_rng(0)
    for trial in range(50):
        scores, tags = random_scoreset(rng)
        for far_target in (0.0, 0.1, 0.3, 0.5, 1.0):
            got = frr_at_far(scores, tags, far_target)
            want = brute_force_frr(scores, tags, far_target)
            assert got == want, (trial, far_target)


def test_frr_monotone_in_far_target():
    rng = np.random.default_rng(1)
    for _ in range(20):
        scores, tags = random_scoreset(rng)
        frrs = [frr_at_far(scores, tags, f)[0] for f in np.linspace(0, 1, 11)]
        assert all(b <= a for a, b in zip(frrs, frrs[1:])), frrs


def test_frr_invariant_under_strictly_monotone_transform():
    rng = np.random.default_rng(2)
    scores, tags = random_scoreset(rng)
    for far_target in (0.0, 0.2, 0.6):
        frr, theta = frr_at_far(scores, tags, far_target)
        frr2, theta2 = frr_at_far(3.0 * scores - 1.0, tags, far_target)
        assert frr2 == frr
        assert np.isclose(theta2, 3.0 * theta - 1.0) or np.isinf(theta)


def test_frr_validation():
    with pytest.raises(DataError):
        frr_at_far([0.5, 0.6], [True, True], 0.1)  # no non-targets
    with pytest.raises(DataError):
        frr_at_far([0.5, 0.6], [False, False], 0.1)  # no targets
    with pytest.raises(DataError):
        frr_at_far([0.5, 0.6], [True, False], 1.5)
    with pytest.raises(DataError):
        frr_at_far([0.5, 0.6], [True, False], -0.1)
    with pytest.raises(DataError):
        frr_at_far([0.5, 0.6, 0.7], [True, False], 0.1)


# --- condition report -------------------------------------------------------


def make_rows():
    rng = np.random.default_rng(3)
    rows = []
    for cond, n in (("non_playback", 20), ("playback_tts", 16), ("playback_music", 12)):
        for i in range(n):
            label = int(rng.integers(0, 3))
            pred = label if rng.random() < 0.8 else int(rng.integers(0, 3))
            is_target = bool(rng.random() < 0.6)
            score = rng.uniform(0.5, 1.0) if is_target else rng.uniform(0.0, 0.6)
            rows.append({"condition": cond, "prediction": pred, "label": label,
                         "score": round(score, 2), "is_target": is_target})
    return rows


def test_report_recomputes_per_condition_and_overall():
    rows = make_rows()
    text, records = report_by_condition(rows, far_target=0.3)
    assert [r["condition"] for r in records] == [
        "non_playback", "playback_music", "playback_tts", "overall"]
    for rec in records:
        subset = (rows if rec["condition"] == "overall"
                  else [r for r in rows if r["condition"] == rec["condition"]])
        assert rec["n"] == len(subset)
        want_acc = np.mean([r["prediction"] == r["label"] for r in subset])
        assert rec["accuracy"] == want_acc
        want_frr, want_theta = brute_force_frr([r["score"] for r in subset],
                                               [r["is_target"] for r in subset], 0.3)
        assert rec["frr_at_far"] == want_frr
        assert rec["threshold"] == want_theta
    assert "frr@far=0.3" in text
    assert len(text.splitlines()) == 1 + len(records)


def test_report_single_class_condition_has_no_operating_point():
    rows = [{"condition": "non_playback", "prediction": 1, "label": 1,
             "score": 0.9, "is_target": True} for _ in range(4)]
    text, records = report_by_condition(rows)
    assert all(np.isnan(r["frr_at_far"]) for r in records)
    assert "-" in text.split()


def test_report_attaches_cost_columns_by_condition():
    cfg = TcnConfig(fusion="mask_d2")
    playback = count_cost(cfg, playback_mode=True)
    quiet = count_cost(cfg, playback_mode=False)
    text, records = report_by_condition(make_rows(), cost=playback,
                                        cost_non_playback=quiet)
    by_cond = {r["condition"]: r for r in records}
    assert by_cond["non_playback"]["flops_per_output_frame"] == quiet.flops_per_output_frame
    for cond in ("playback_tts", "playback_music", "overall"):
        assert by_cond[cond]["flops_per_output_frame"] == playback.flops_per_output_frame
        assert by_cond[cond]["params"] == playback.params
    assert "flops/frame" in text and "params" in text


def test_report_rejects_empty_rows():
    with pytest.raises(DataError):
        report_by_condition([])
