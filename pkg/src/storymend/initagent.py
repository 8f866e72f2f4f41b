"""Story initialization: produce the reference image and the initial panels.

Two modes: editing_based conditions every panel on a reference synthesized
from the merged character descriptions; story_generation prepends the same
merged description as the leading prompt of an extended prompt set and uses
its image as the reference. Either way the engine drives one generator call
for the reference plus one conditioned call per panel.
"""

from __future__ import annotations

import concurrent.futures
from enum import Enum
from typing import Callable

from .artifacts import ImageRef
from .backends.base import BackendSuite, GeneratorBackend
from .errors import BackendError, PartialInit
from .memory import PanelState, SharedMemory
from .schema import StoryScript, merged_character_prompt
from .seeds import derive_seed


class InitMode(str, Enum):
    EDITING_BASED = "editing_based"
    STORY_GENERATION = "story_generation"


def extended_prompt_set(script: StoryScript) -> list[str]:
    """Story-generation prompt set: merged character prompt first, then every scene."""
    return [merged_character_prompt(script)] + [scene.full_prompt() for scene in script.scenes]


def build_reference(script: StoryScript, generator: GeneratorBackend, mode: InitMode, seed: int) -> ImageRef:
    prompt = merged_character_prompt(script)
    context = {"purpose": "reference", "mode": mode.value}
    return generator.generate(prompt, seed=derive_seed(seed, "reference"), context=context)


def generate_panels(
    script: StoryScript,
    reference: ImageRef,
    generator: GeneratorBackend,
    mode: InitMode,
    seed: int,
    *,
    default_scale: float,
    commit: Callable[[PanelState], None],
    existing: set[int] | None = None,
    sequential: bool = True,
    max_workers: int = 4,
) -> list[PanelState]:
    """Generate panel i from (reference, P_i); commit in index order.

    A backend failure at panel i raises PartialInit(i) after panels 1..i-1
    have been committed. ``existing`` indices are skipped (crash resume).
    """
    existing = existing or set()
    todo = [i for i in range(1, script.num_panels + 1) if i not in existing]

    def render(index: int) -> PanelState:
        scene = script.scenes[index - 1]
        image = generator.generate_conditioned(
            reference,
            scene.full_prompt(),
            seed=derive_seed(seed, "panel", index),
            context={"purpose": "panel", "panel_index": index, "mode": mode.value},
        )
        return PanelState(index=index, image=image, conditioning_scale=default_scale)

    panels: list[PanelState] = []
    if sequential or len(todo) <= 1:
        for index in todo:
            try:
                panel = render(index)
            except BackendError as exc:
                raise PartialInit(index, exc) from exc
            commit(panel)
            panels.append(panel)
        return panels

    with concurrent.futures.ThreadPoolExecutor(max_workers=max_workers) as pool:
        futures = {index: pool.submit(render, index) for index in todo}
        for index in todo:  # commit strictly in index order
            try:
                panel = futures[index].result()
            except BackendError as exc:
                for later in todo[todo.index(index):]:
                    futures[later].cancel()
                raise PartialInit(index, exc) from exc
            commit(panel)
            panels.append(panel)
    return panels


def initialize_run(
    memory: SharedMemory,
    run_id: str,
    suite: BackendSuite,
    mode: InitMode,
    seed: int,
    *,
    default_scale: float,
    sequential: bool = True,
) -> None:
    """Idempotent full init against shared memory (safe to call on resume)."""
    state = memory.snapshot(run_id)
    if state.reference is None:
        reference = build_reference(state.script, suite.generator, mode, seed)
        memory.set_reference(run_id, reference)
        state = memory.snapshot(run_id)
    generate_panels(
        state.script,
        state.reference,
        suite.generator,
        mode,
        seed,
        default_scale=default_scale,
        commit=lambda panel: memory.add_panel(run_id, panel),
        existing={p.index for p in state.panels},
        sequential=sequential,
    )
