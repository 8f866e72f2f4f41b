"""Repair agent: edit classification, scale control, frame and pass behavior."""

import json
import math

import pytest

from storymend.artifacts import ArtifactStore
from storymend.audit import AuditAgent, load_prompt_templates
from storymend.backends import build_mock_suite, scenario_from_dict
from storymend.backends.base import EmbeddingVec
from storymend.errors import RepairFrameFailed
from storymend.initagent import InitMode, initialize_run
from storymend.memory import (
    OUTCOME_ACCEPTED,
    OUTCOME_OVER_EDITED,
    OUTCOME_SKIPPED,
    OUTCOME_TOO_SUBTLE,
    SharedMemory,
)
from storymend.repair import RepairAgent, ScaleController, adjust_scale, evaluate_edit
from storymend.schema import parse_story_script

from conftest import load_scenario_dict


class FixedEmbedder:
    def __init__(self, mapping, dim=2):
        self.mapping = mapping
        self._dim = dim

    @property
    def dim(self):
        return self._dim

    def embed(self, image):
        return EmbeddingVec.from_list(self.mapping[image.id])


def test_evaluate_identity_edit_is_too_subtle():
    store = ArtifactStore()
    ref = store.put(b"ref", "x")
    panel = store.put(b"panel", "x")
    embedder = FixedEmbedder({ref.id: [1, 0], panel.id: [0.8, 0.6]})
    outcome, ci = evaluate_edit(embedder, panel, panel, ref, ScaleController())
    assert outcome == OUTCOME_TOO_SUBTLE
    assert ci == pytest.approx(90.0)


def test_evaluate_over_edit_threshold():
    store = ArtifactStore()
    ref = store.put(b"ref", "x")
    before = store.put(b"before", "x")
    after = store.put(b"after", "x")
    # cos(after, ref) = 0.1 -> CI 55 < default threshold 60
    embedder = FixedEmbedder({ref.id: [1, 0], before.id: [0.9, 0.436], after.id: [0.1, 0.995]})
    outcome, ci = evaluate_edit(embedder, before, after, ref, ScaleController())
    assert outcome == OUTCOME_OVER_EDITED
    assert ci == pytest.approx(55.0, abs=0.05)


def test_evaluate_accepted_hand_computed_vectors():
    # CI-to-R of the edit is 80 and cos(before, after) = 0.9: both rules pass
    store = ArtifactStore()
    ref = store.put(b"ref", "x")
    before = store.put(b"before", "x")
    after = store.put(b"after", "x")
    phi = math.atan2(0.8, 0.6)  # after at cos 0.6 from ref -> CI 80
    theta = math.acos(0.9)
    before_vec = [math.cos(phi - theta), math.sin(phi - theta)]
    embedder = FixedEmbedder({ref.id: [1, 0], before.id: before_vec, after.id: [0.6, 0.8]})
    outcome, ci = evaluate_edit(embedder, before, after, ref, ScaleController())
    assert outcome == OUTCOME_ACCEPTED
    assert ci == pytest.approx(80.0, abs=1e-9)


def test_adjust_scale_arithmetic_and_clamps():
    c = ScaleController(scale=0.37)
    c = adjust_scale(c, OUTCOME_TOO_SUBTLE)
    assert c.scale == pytest.approx(0.29)
    c = adjust_scale(c, OUTCOME_TOO_SUBTLE)
    assert c.scale == pytest.approx(0.21)
    low = adjust_scale(ScaleController(scale=0.12), OUTCOME_TOO_SUBTLE)
    assert low.scale == 0.10
    high = adjust_scale(ScaleController(scale=0.90), OUTCOME_OVER_EDITED)
    assert high.scale == 0.95
    with pytest.raises(ValueError):
        adjust_scale(ScaleController(), OUTCOME_ACCEPTED)


def test_scale_monotone_under_repeated_outcomes():
    c = ScaleController(scale=0.5)
    seq = []
    for _ in range(10):
        c = adjust_scale(c, OUTCOME_TOO_SUBTLE)
        seq.append(c.scale)
    assert seq == sorted(seq, reverse=True) and seq[-1] == c.scale_min
    c = ScaleController(scale=0.5)
    seq = []
    for _ in range(10):
        c = adjust_scale(c, OUTCOME_OVER_EDITED)
        seq.append(c.scale)
    assert seq == sorted(seq) and seq[-1] == c.scale_max


def cape_setup(tmp_path, listing4, scenario_doc=None, seed=5):
    doc = scenario_doc or load_scenario_dict("cape_drift")
    suite = build_mock_suite(scenario_from_dict(doc))
    memory = SharedMemory(tmp_path / "runs", suite.store)
    script = parse_story_script(listing4, strict=False)
    run_id = memory.create_run(script, {"seed": seed})
    initialize_run(memory, run_id, suite, InitMode.EDITING_BASED, seed, default_scale=0.37)
    auditor = AuditAgent(suite=suite, templates=load_prompt_templates())
    return memory, run_id, suite, auditor


def test_repair_frame_subtle_then_accept_trajectory(tmp_path, listing_texts):
    doc = load_scenario_dict("cape_drift")
    doc["edits"] = {"3": {"passes": {"1": [{"result": "too_subtle"}, {"result": "apply"}]}}}
    memory, run_id, suite, auditor = cape_setup(tmp_path, listing_texts[4], doc)
    auditor.run_audit(memory, run_id)
    agent = RepairAgent(suite=suite)
    result = agent.repair_frame(memory, run_id, 3, pass_no=1, seed=5)
    assert result.outcome == OUTCOME_ACCEPTED
    assert result.scales_used == pytest.approx([0.37, 0.29])
    snap = memory.snapshot(run_id)
    assert [e.outcome for e in snap.edit_log] == [OUTCOME_TOO_SUBTLE, OUTCOME_ACCEPTED]
    assert [e.scale for e in snap.edit_log] == pytest.approx([0.37, 0.29])
    assert snap.panel(3).conditioning_scale == pytest.approx(0.29)
    assert snap.panel(3).last_refined_prompt == "change the cape color of the boy to red."


def test_repair_frame_exhaustion_skips(tmp_path, listing_texts):
    doc = load_scenario_dict("cape_drift")
    doc["edits"] = {"3": {"default": [{"result": "too_subtle"}]}}
    memory, run_id, suite, auditor = cape_setup(tmp_path, listing_texts[4], doc)
    auditor.run_audit(memory, run_id)
    before_hash = memory.snapshot(run_id).panel(3).image.content_hash
    agent = RepairAgent(suite=suite)
    result = agent.repair_frame(memory, run_id, 3, pass_no=1, seed=5)
    assert result.outcome == OUTCOME_SKIPPED
    assert result.scales_used == pytest.approx([0.37, 0.29, 0.21])
    snap = memory.snapshot(run_id)
    panel = snap.panel(3)
    assert panel.skipped and panel.image.content_hash == before_hash
    assert panel.attempt_count == 3
    assert snap.edit_log[-1].outcome == OUTCOME_SKIPPED


def test_repair_frame_rejects_non_repairable(tmp_path, listing_texts):
    memory, run_id, suite, auditor = cape_setup(tmp_path, listing_texts[4])
    auditor.run_audit(memory, run_id)
    agent = RepairAgent(suite=suite)
    with pytest.raises(ValueError):
        agent.repair_frame(memory, run_id, 1, pass_no=1, seed=5)


def test_repair_frame_all_backend_errors(tmp_path, listing_texts):
    doc = load_scenario_dict("cape_drift")
    doc["edits"] = {"3": {"default": [{"result": "error"}]}}
    memory, run_id, suite, auditor = cape_setup(tmp_path, listing_texts[4], doc)
    auditor.run_audit(memory, run_id)
    agent = RepairAgent(suite=suite)
    with pytest.raises(RepairFrameFailed):
        agent.repair_frame(memory, run_id, 3, pass_no=1, seed=5)
    panel = memory.snapshot(run_id).panel(3)
    assert panel.skipped  # exhausted, revisited next audit


def test_repair_pass_isolation_and_convergence(tmp_path, listing_texts):
    memory, run_id, suite, auditor = cape_setup(tmp_path, listing_texts[4])
    report = auditor.run_audit(memory, run_id)
    assert report.repairable_indexes() == [3]
    hashes_before = {p.index: p.image.content_hash for p in memory.snapshot(run_id).panels}
    agent = RepairAgent(suite=suite)
    summary = agent.repair_pass(memory, run_id, pass_no=1, seed=5)
    assert summary.attempted == (3,) and summary.accepted == (3,)
    hashes_after = {p.index: p.image.content_hash for p in memory.snapshot(run_id).panels}
    for index in (1, 2, 4, 5):
        assert hashes_after[index] == hashes_before[index]
    assert hashes_after[3] != hashes_before[3]
    # the drift is gone, so the next audit flags nothing
    second = auditor.run_audit(memory, run_id)
    assert second.repairable_indexes() == []
    assert second.ci > report.ci


def test_zero_repairable_means_zero_edit_calls(tmp_path, listing_texts):
    doc = load_scenario_dict("cape_drift")
    doc["panels"] = {}
    doc["reference"] = {}
    memory, run_id, suite, auditor = cape_setup(tmp_path, listing_texts[4], doc)
    auditor.run_audit(memory, run_id)
    calls = []
    original_edit = suite.editor.edit

    def counting_edit(*args, **kwargs):
        calls.append(args)
        return original_edit(*args, **kwargs)

    suite.editor.edit = counting_edit
    summary = RepairAgent(suite=suite).repair_pass(memory, run_id, pass_no=1, seed=5)
    assert summary.attempted == () and calls == []


def test_skipped_frame_revisited_next_audit(tmp_path, listing_texts):
    doc = load_scenario_dict("cape_drift")
    doc["edits"] = {"3": {
        "passes": {
            "1": [{"result": "too_subtle"}],
            "2": [{"result": "apply"}],
        }
    }}
    memory, run_id, suite, auditor = cape_setup(tmp_path, listing_texts[4], doc)
    auditor.run_audit(memory, run_id)
    agent = RepairAgent(suite=suite)
    first = agent.repair_pass(memory, run_id, pass_no=1, seed=5)
    assert first.skipped == (3,)
    second_report = auditor.run_audit(memory, run_id)
    assert second_report.repairable_indexes() == [3]  # revisited after the skip
    second = agent.repair_pass(memory, run_id, pass_no=2, seed=5)
    assert second.accepted == (3,)


def test_intentional_only_deviations_not_repairable(tmp_path):
    doc = load_scenario_dict("maze")
    suite = build_mock_suite(scenario_from_dict(doc))
    memory = SharedMemory(tmp_path / "runs", suite.store)
    script_doc = {
        "Main Characters": [
            {"Name": "Emily", "Description": "A girl with pigtails wearing a striped dress", "Category": "girl"},
            {"Name": "Whiskers", "Description": "Small, adventurous hamster", "Category": "hamster"},
        ],
        "Story": [
            {"Image_Prompt": "Emily and Whiskers at the maze entrance.", "Location_Description": "maze"},
            {"Image_Prompt": "Emily and Whiskers rest.", "Location_Description": "maze"},
            {"Image_Prompt": "Emily, now in a polka-dot dress, dances with Whiskers.", "Location_Description": "maze"},
        ],
    }
    script = parse_story_script(json.dumps(script_doc))
    run_id = memory.create_run(script, {})
    initialize_run(memory, run_id, suite, InitMode.EDITING_BASED, 3, default_scale=0.37)
    auditor = AuditAgent(suite=suite, templates=load_prompt_templates())
    report = auditor.run_audit(memory, run_id)
    finding = report.finding(3)
    assert [m.intentional for m in finding.mismatches] == [True]
    assert report.repairable_indexes() == []
