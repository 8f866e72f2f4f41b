"""Story initialization: call counts, modes, failure contract, determinism."""

import json

import pytest

from storymend.backends import MockImage, build_mock_suite, scenario_from_dict
from storymend.errors import PartialInit
from storymend.initagent import (
    InitMode,
    build_reference,
    extended_prompt_set,
    generate_panels,
    initialize_run,
)
from storymend.memory import SharedMemory
from storymend.schema import merged_character_prompt, parse_story_script

from conftest import load_scenario_dict


class RecordingGenerator:
    def __init__(self, inner):
        self.inner = inner
        self.calls = []

    def generate(self, prompt, *, seed, context=None):
        self.calls.append(("generate", prompt))
        return self.inner.generate(prompt, seed=seed, context=context)

    def generate_conditioned(self, reference, prompt, *, seed, context=None):
        self.calls.append(("conditioned", prompt))
        return self.inner.generate_conditioned(reference, prompt, seed=seed, context=context)


@pytest.fixture()
def maze_setup(listing_texts):
    suite = build_mock_suite(scenario_from_dict(load_scenario_dict("maze")))
    script = parse_story_script(listing_texts[1], strict=False)
    return suite, script


def test_editing_mode_call_counts(maze_setup):
    suite, script = maze_setup
    recorder = RecordingGenerator(suite.generator)
    reference = build_reference(script, recorder, InitMode.EDITING_BASED, seed=3)
    panels = []
    generate_panels(
        script, reference, recorder, InitMode.EDITING_BASED, 3,
        default_scale=0.37, commit=panels.append,
    )
    assert len(recorder.calls) == script.num_panels + 1
    assert recorder.calls[0] == ("generate", merged_character_prompt(script))
    assert all(kind == "conditioned" for kind, _ in recorder.calls[1:])
    assert [p.index for p in panels] == [1, 2, 3, 4, 5, 6]
    assert all(p.conditioning_scale == 0.37 for p in panels)


def test_story_mode_prompt_set(maze_setup):
    suite, script = maze_setup
    prompts = extended_prompt_set(script)
    assert len(prompts) == script.num_panels + 1
    assert prompts[0] == merged_character_prompt(script)
    recorder = RecordingGenerator(suite.generator)
    reference = build_reference(script, recorder, InitMode.STORY_GENERATION, seed=3)
    generate_panels(
        script, reference, recorder, InitMode.STORY_GENERATION, 3,
        default_scale=0.37, commit=lambda p: None,
    )
    assert len(recorder.calls) == script.num_panels + 1


def test_reference_contains_every_character_category(maze_setup):
    suite, script = maze_setup
    reference = build_reference(script, suite.generator, InitMode.EDITING_BASED, seed=9)
    entities = MockImage.decode(suite.store.get(reference)).entities
    for character in script.characters:
        assert character.name in entities


def test_panel_attribute_maps_cover_prompt_entities(maze_setup):
    suite, script = maze_setup
    reference = build_reference(script, suite.generator, InitMode.EDITING_BASED, seed=9)
    panels = []
    generate_panels(
        script, reference, suite.generator, InitMode.EDITING_BASED, 9,
        default_scale=0.37, commit=panels.append,
    )
    # every Listing-1 prompt names both characters
    for panel in panels:
        entities = MockImage.decode(suite.store.get(panel.image)).entities
        assert {"Emily", "Whiskers"} <= set(entities) or panel.index == 5
    # panel 5 drops Whiskers per the scenario's absent list
    p5 = MockImage.decode(suite.store.get(panels[4].image)).entities
    assert "Whiskers" not in p5


def test_partial_init_keeps_earlier_panels(tmp_path, listing_texts):
    doc = load_scenario_dict("maze")
    doc["panels"]["4"] = {"generate_fails": True}
    suite = build_mock_suite(scenario_from_dict(doc))
    memory = SharedMemory(tmp_path / "runs", suite.store)
    script = parse_story_script(listing_texts[1], strict=False)
    run_id = memory.create_run(script, {})
    with pytest.raises(PartialInit) as exc:
        initialize_run(memory, run_id, suite, InitMode.EDITING_BASED, 7, default_scale=0.37)
    assert exc.value.panel_index == 4
    snap = memory.snapshot(run_id)
    assert [p.index for p in snap.panels] == [1, 2, 3]
    for index in (1, 2, 3):
        assert (memory.run_dir(run_id) / "panels" / f"{index}.mockimg").exists()


def test_same_seed_reproduces_panel_hashes(tmp_path, listing_texts):
    def run(subdir):
        suite = build_mock_suite(scenario_from_dict(load_scenario_dict("maze")))
        memory = SharedMemory(tmp_path / subdir, suite.store)
        script = parse_story_script(listing_texts[1], strict=False)
        run_id = memory.create_run(script, {})
        initialize_run(memory, run_id, suite, InitMode.EDITING_BASED, 21, default_scale=0.37)
        snap = memory.snapshot(run_id)
        return [p.image.hex_hash for p in snap.panels] + [snap.reference.hex_hash]

    assert run("one") == run("two")


def test_resume_skips_existing_panels(maze_setup):
    suite, script = maze_setup
    reference = build_reference(script, suite.generator, InitMode.EDITING_BASED, seed=3)
    recorder = RecordingGenerator(suite.generator)
    committed = []
    generate_panels(
        script, reference, recorder, InitMode.EDITING_BASED, 3,
        default_scale=0.37, commit=committed.append, existing={1, 2, 3},
    )
    assert [p.index for p in committed] == [4, 5, 6]
    assert len(recorder.calls) == 3


def test_concurrent_init_commits_in_index_order(maze_setup):
    suite, script = maze_setup
    reference = build_reference(script, suite.generator, InitMode.EDITING_BASED, seed=3)
    committed = []
    generate_panels(
        script, reference, suite.generator, InitMode.EDITING_BASED, 3,
        default_scale=0.37, commit=committed.append, sequential=False, max_workers=4,
    )
    assert [p.index for p in committed] == [1, 2, 3, 4, 5, 6]
