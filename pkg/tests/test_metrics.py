"""Metrics harness: pairwise oracles, FG masking, aggregation, formatting."""

import json

import numpy as np
import pytest

from storymend.artifacts import ArtifactStore
from storymend.backends import MockImage, build_mock_suite, scenario_from_dict
from storymend.backends.base import EmbeddingVec
from storymend.backends.mockimg import MEDIA_TYPE
from storymend.errors import ZeroVector
from storymend.metrics import (
    StoryMetrics,
    aggregate_corpus,
    attach_external_scores,
    composite_on_white,
    foreground_masked_metrics,
    format_cell,
    pairwise_distance,
    pairwise_similarity,
    render_csv,
    render_markdown,
    union_mask,
)

import oracles
from conftest import load_scenario_dict


class FixedEmbedder:
    def __init__(self, mapping, dim):
        self.mapping = mapping
        self._dim = dim
        self.calls = 0

    @property
    def dim(self):
        return self._dim

    def embed(self, image):
        self.calls += 1
        return EmbeddingVec.from_list(self.mapping[image.id])


def test_pairwise_counts_pairs():
    store = ArtifactStore()
    panels = [store.put(f"p{i}".encode(), "x") for i in range(7)]
    embedder = FixedEmbedder({p.id: [1.0, float(i)] for i, p in enumerate(panels)}, dim=2)
    pairwise_similarity(embedder, panels)
    assert embedder.calls == 7  # one embedding per panel, 21 pairs evaluated from them


def test_pairwise_identical_embeddings_is_one():
    store = ArtifactStore()
    panels = [store.put(f"p{i}".encode(), "x") for i in range(5)]
    embedder = FixedEmbedder({p.id: [0.2, 0.9, -0.1] for p in panels}, dim=3)
    assert pairwise_similarity(embedder, panels) == pytest.approx(1.0, abs=1e-12)


def test_pairwise_matches_bruteforce_oracle():
    rng = np.random.default_rng(7)
    store = ArtifactStore()
    for _ in range(10):
        n = int(rng.integers(2, 10))
        dim = int(rng.integers(2, 32))
        panels = [store.put(rng.bytes(8), "x") for _ in range(n)]
        vectors = {p.id: rng.standard_normal(dim).tolist() for p in panels}
        embedder = FixedEmbedder(vectors, dim=dim)
        got = pairwise_similarity(embedder, panels)
        want = oracles.pairwise_mean_cosine([vectors[p.id] for p in panels])
        assert got == pytest.approx(want, abs=1e-9)


def test_pairwise_permutation_invariant():
    rng = np.random.default_rng(3)
    store = ArtifactStore()
    panels = [store.put(rng.bytes(8), "x") for _ in range(6)]
    vectors = {p.id: rng.standard_normal(5).tolist() for p in panels}
    embedder = FixedEmbedder(vectors, dim=5)
    forward = pairwise_similarity(embedder, panels)
    shuffled = pairwise_similarity(embedder, list(reversed(panels)))
    assert forward == pytest.approx(shuffled, abs=1e-12)


def test_pairwise_needs_two_panels_and_rejects_zero_vectors():
    store = ArtifactStore()
    p0 = store.put(b"a", "x")
    p1 = store.put(b"b", "x")
    with pytest.raises(ValueError):
        pairwise_similarity(FixedEmbedder({p0.id: [1.0]}, 1), [p0])
    embedder = FixedEmbedder({p0.id: [1.0, 0.0], p1.id: [0.0, 0.0]}, dim=2)
    with pytest.raises(ZeroVector):
        pairwise_similarity(embedder, [p0, p1])


@pytest.fixture()
def maze_panels():
    suite = build_mock_suite(scenario_from_dict(load_scenario_dict("maze")))
    ref = suite.generator.generate("Emily and Whiskers", seed=3)
    panels = [
        suite.generator.generate_conditioned(ref, "Emily and Whiskers explore", seed=3, context={"panel_index": i})
        for i in (1, 2, 3)
    ]
    return suite, panels


def test_fg_identity_masks_equal_unmasked(maze_panels):
    suite, panels = maze_panels
    doc = load_scenario_dict("maze")
    for e in doc["entities"].values():
        e["box"] = [0.0, 0.0, 1.0, 1.0]
    full_suite = build_mock_suite(scenario_from_dict(doc))
    ref = full_suite.generator.generate("Emily and Whiskers", seed=3)
    panels = [
        full_suite.generator.generate_conditioned(ref, "Emily and Whiskers explore", seed=3, context={"panel_index": i})
        for i in (1, 2, 3)
    ]
    embedders = {"dino": full_suite.embedder, "clip_i": full_suite.extras["clip_embedder"]}
    base = {
        "dino": pairwise_similarity(full_suite.embedder, panels),
        "clip_i": pairwise_similarity(full_suite.extras["clip_embedder"], panels),
        "lpips": pairwise_distance(full_suite.extras["distance"], panels),
    }
    fg, excluded = foreground_masked_metrics(
        full_suite.store, full_suite.segmenter, panels, ["Emily", "Whiskers"],
        embedders=embedders, distance=full_suite.extras["distance"],
    )
    assert excluded == []
    assert fg["dino_fg"] == base["dino"]
    assert fg["clip_i_fg"] == base["clip_i"]
    assert fg["lpips_fg"] == base["lpips"]


def test_fg_empty_masks_exclude_panel(maze_panels):
    suite, panels = maze_panels
    fg, excluded = foreground_masked_metrics(
        suite.store, suite.segmenter, panels, ["unicorn"],
        embedders={"dino": suite.embedder},
    )
    assert excluded == [1, 2, 3]
    assert fg == {}


def test_fg_crops_to_requested_entities(maze_panels):
    """FG metrics with a single label must match hand-built single-entity images."""
    suite, panels = maze_panels
    fg, excluded = foreground_masked_metrics(
        suite.store, suite.segmenter, panels, ["Emily"],
        embedders={"dino": suite.embedder},
    )
    assert excluded == []
    expected_images = []
    for p in panels:
        img = MockImage.decode(suite.store.get(p))
        img.entities = {"Emily": img.entities["Emily"]}  # oracle: only the requested entity survives
        img.note = "foreground-on-white"
        expected_images.append(suite.store.put(img.encode(), MEDIA_TYPE))
    want = pairwise_similarity(suite.embedder, expected_images)
    assert fg["dino_fg"] == pytest.approx(want, abs=1e-12)


def test_union_mask_geometry(maze_panels):
    suite, panels = maze_panels
    mask = union_mask(suite.segmenter, panels[0], ["Emily", "Whiskers"])
    # left half union bottom-right quadrant of a 64x48 frame
    assert mask.area_fraction == pytest.approx(0.5 + 0.25, abs=1e-12)


def test_composite_full_mask_returns_same_ref(maze_panels):
    suite, panels = maze_panels
    full = union_mask(suite.segmenter, panels[0], ["Emily", "Whiskers"])
    full.data[:] = True
    out = composite_on_white(suite.store, panels[0], full, segmenter=suite.segmenter)
    assert out.content_hash == panels[0].content_hash


def test_composite_raster_path():
    from PIL import Image
    import io as _io
    store = ArtifactStore()
    raw = np.zeros((4, 4, 3), dtype=np.uint8)
    buf = _io.BytesIO()
    Image.fromarray(raw).save(buf, format="PNG")
    panel = store.put(buf.getvalue(), "image/png")
    from storymend.backends.base import Mask
    mask = Mask(width=4, height=4, data=np.zeros((4, 4), dtype=bool))
    mask.data[:2, :2] = True
    out = composite_on_white(store, panel, mask)
    with Image.open(_io.BytesIO(store.get(out))) as im:
        arr = np.asarray(im)
    assert (arr[:2, :2] == 0).all() and (arr[2:, 2:] == 255).all()


def test_aggregate_corpus_mean_std():
    stories = [
        StoryMetrics(num_panels=7, values={"dino": 0.4}),
        StoryMetrics(num_panels=7, values={"dino": 0.6}),
    ]
    agg = aggregate_corpus(stories)
    assert agg["dino"][0] == pytest.approx(0.5)
    assert agg["dino"][1] == pytest.approx(0.1)
    single = aggregate_corpus([StoryMetrics(num_panels=7, values={"dino": 0.4})])
    assert single["dino"] == (0.4, 0.0)


def test_table_cell_format():
    assert format_cell(0.5679, 0.1512) == "0.568±0.15"
    assert format_cell(0.8499, 0.0511) == "0.850±0.05"


def test_markdown_layout_and_footer():
    agg = {"dino": (0.568, 0.15), "lpips": (0.472, 0.07), "dino_fg": (0.682, 0.14)}
    md = render_markdown(agg, label="engine", include_fg=True, excluded={"run1": [2]})
    assert "| Method | CLIP-I↑ | DINO↑ | LPIPS↓ | CLIP-T↑ | HPS↑ | TIFA↑ |" in md
    assert "0.568±0.15" in md and "0.472±0.07" in md
    assert "DINO-FG↑" in md and "0.682±0.14" in md
    assert "excluded panels [2]" in md


def test_csv_rendering():
    agg = {"dino": (0.5, 0.1)}
    out = render_csv(agg, label="engine")
    assert out.splitlines()[0] == "method,metric,mean,std"
    assert "engine,dino,0.500000,0.100000" in out


def test_external_scores_averaged_only():
    values = {}
    attach_external_scores(values, {
        "1": {"CLIP-T": 0.30, "tifa": 0.7},
        "2": {"CLIP-T": 0.40, "tifa": 0.9},
    })
    assert values["clip_t"] == pytest.approx(0.35)
    assert values["tifa"] == pytest.approx(0.8)
