"""Network clients: retry policy, failure mapping, wire interchangeability."""

import json

import httpx
import numpy as np
import pytest

from storymend.artifacts import ArtifactStore
from storymend.backends import (
    SCHEMA_ENTITY_MATCH,
    MockImage,
    VlmMessage,
    VlmQuery,
    build_mock_suite,
    scenario_from_dict,
)
from storymend.backends.http import EndpointConfig, HttpEmbedder, WireClient, build_http_suite
from storymend.backends.wire import create_backend_app
from storymend.errors import (
    BackendRejected,
    BackendTimeout,
    BackendUnavailable,
    DimensionMismatch,
    UnparseableAnswer,
)

from conftest import load_scenario_dict
from utils import ServerThread


def _recording_transport(responses):
    calls = []

    def handler(request: httpx.Request) -> httpx.Response:
        calls.append(request)
        action = responses[min(len(calls) - 1, len(responses) - 1)]
        if isinstance(action, Exception):
            raise action
        status, body = action
        return httpx.Response(status, json=body)

    return httpx.MockTransport(handler), calls


def test_exactly_r_retries_then_unavailable():
    transport, calls = _recording_transport([(503, {"detail": "down"})])
    sleeps = []
    client = WireClient(
        EndpointConfig(base_url="http://backend", retries=3, backoff_s=0.25),
        transport=transport,
        sleep=sleeps.append,
    )
    with pytest.raises(BackendUnavailable):
        client.post("/v1/embed", {})
    assert len(calls) == 4  # 1 initial + exactly 3 retries
    assert sleeps == [0.25, 0.25, 0.25]


def test_retry_then_success():
    transport, calls = _recording_transport([(503, {}), (503, {}), (200, {"embedding": [1.0, 0.0]})])
    client = WireClient(EndpointConfig(base_url="http://backend", retries=2), transport=transport, sleep=lambda s: None)
    assert client.post("/v1/embed", {}) == {"embedding": [1.0, 0.0]}
    assert len(calls) == 3


def test_4xx_is_rejected_without_retry():
    transport, calls = _recording_transport([(422, {"detail": "bad prompt"})])
    client = WireClient(EndpointConfig(base_url="http://backend", retries=5), transport=transport, sleep=lambda s: None)
    with pytest.raises(BackendRejected):
        client.post("/v1/generate", {})
    assert len(calls) == 1


def test_timeout_maps_to_backend_timeout():
    transport, calls = _recording_transport([httpx.ConnectTimeout("slow")])
    client = WireClient(EndpointConfig(base_url="http://backend", retries=1), transport=transport, sleep=lambda s: None)
    with pytest.raises(BackendTimeout):
        client.post("/v1/embed", {})
    assert len(calls) == 2


def test_declared_dim_mismatch():
    transport, _ = _recording_transport([(200, {"embedding": [0.0] * 512})])
    store = ArtifactStore()
    ref = store.put(b"img", "image/png")
    embedder = HttpEmbedder(
        WireClient(EndpointConfig(base_url="http://backend"), transport=transport, sleep=lambda s: None),
        store,
        dim=768,
    )
    with pytest.raises(DimensionMismatch) as exc:
        embedder.embed(ref)
    assert exc.value.expected == 768 and exc.value.got == 512


@pytest.fixture(scope="module")
def wire_pair():
    """A mock suite served over real HTTP, plus a direct twin of it."""
    scenario = scenario_from_dict(load_scenario_dict("maze"))
    served = build_mock_suite(scenario)
    direct = build_mock_suite(scenario)
    app = create_backend_app(served)
    with ServerThread(app) as base_url:
        endpoints = {
            name: EndpointConfig(base_url=base_url, retries=1)
            for name in ("vlm", "generator", "editor", "embedder", "segmenter", "distance")
        }
        http_suite = build_http_suite(endpoints, embedding_dim=scenario.embedding_dim)
        yield direct, http_suite


def test_interchangeability_generate_and_edit(wire_pair):
    direct, remote = wire_pair
    prompt = "Emily and Whiskers at the maze entrance"
    d_ref = direct.generator.generate(prompt, seed=11)
    r_ref = remote.generator.generate(prompt, seed=11)
    assert d_ref.content_hash == r_ref.content_hash
    d_panel = direct.generator.generate_conditioned(d_ref, prompt, seed=11, context={"panel_index": 3})
    r_panel = remote.generator.generate_conditioned(r_ref, prompt, seed=11, context={"panel_index": 3})
    assert d_panel.content_hash == r_panel.content_hash
    sentence = "change the outfit of the girl to striped dress."
    d_edit = direct.editor.edit(d_panel, sentence, conditioning_scale=0.37, seed=4)
    r_edit = remote.editor.edit(r_panel, sentence, conditioning_scale=0.37, seed=4)
    assert d_edit.content_hash == r_edit.content_hash


def test_interchangeability_embed_segment_distance(wire_pair):
    direct, remote = wire_pair
    prompt = "Emily and Whiskers"
    d_img = direct.generator.generate(prompt, seed=2)
    r_img = remote.generator.generate(prompt, seed=2)
    assert np.allclose(direct.embedder.embed(d_img).values, remote.embedder.embed(r_img).values)
    d_mask = direct.segmenter.segment(d_img, "girl")
    r_mask = remote.segmenter.segment(r_img, "girl")
    assert d_mask.width == r_mask.width and d_mask.height == r_mask.height
    assert np.array_equal(d_mask.data, r_mask.data)
    d2 = direct.generator.generate_conditioned(d_img, prompt, seed=2, context={"panel_index": 3})
    r2 = remote.generator.generate_conditioned(r_img, prompt, seed=2, context={"panel_index": 3})
    assert direct.extras["distance"].distance(d_img, d2) == remote.extras["distance"].distance(r_img, r2)


def test_interchangeability_vlm(wire_pair):
    direct, remote = wire_pair
    prompt = "Emily and Whiskers"

    def match_answer(suite):
        ref = suite.generator.generate(prompt, seed=9)
        panel = suite.generator.generate_conditioned(ref, prompt, seed=9, context={"panel_index": 3})
        query = VlmQuery(
            messages=(VlmMessage(role="user", text="match entities", images=(panel, ref)),),
            schema_tag=SCHEMA_ENTITY_MATCH,
            context={"panel_index": 3},
        )
        return suite.vlm.ask(query).data

    assert match_answer(direct) == match_answer(remote)


def test_wire_vlm_unparseable_round_trips(wire_pair):
    _, remote = wire_pair
    scenario = scenario_from_dict({**load_scenario_dict("maze"), "vlm_unparseable": ["entity-match/1"]})
    served = build_mock_suite(scenario)
    with ServerThread(create_backend_app(served)) as base_url:
        endpoints = {
            name: EndpointConfig(base_url=base_url)
            for name in ("vlm", "generator", "editor", "embedder", "segmenter")
        }
        suite = build_http_suite(endpoints, embedding_dim=32, store=served.store)
        img = served.generator.generate("Emily", seed=1)
        query = VlmQuery(
            messages=(VlmMessage(role="user", text="match", images=(img,)),),
            schema_tag=SCHEMA_ENTITY_MATCH,
            context={"panel_index": 1},
        )
        with pytest.raises(UnparseableAnswer):
            suite.vlm.ask(query)


def test_full_pipeline_identical_over_wire(tmp_path):
    """The whole director loop behaves identically on mock and wire-served backends."""
    import json as _json
    from pathlib import Path

    from storymend.director import Director, DirectorConfig
    from storymend.memory import SharedMemory
    from storymend.report import report_json
    from storymend.schema import parse_story_script

    demo = Path(__file__).parent.parent / "demo"
    scenario = scenario_from_dict(_json.loads((demo / "scenario.json").read_text()))
    script = parse_story_script((demo / "story.json").read_text())

    direct_suite = build_mock_suite(scenario)
    direct_memory = SharedMemory(tmp_path / "direct", direct_suite.store)
    direct = Director(memory=direct_memory, suite=direct_suite).run_pipeline(
        script, DirectorConfig(seed=7)
    )

    served = build_mock_suite(scenario)
    with ServerThread(create_backend_app(served)) as base_url:
        endpoints = {
            name: EndpointConfig(base_url=base_url, retries=1)
            for name in ("vlm", "generator", "editor", "embedder", "segmenter")
        }
        http_suite = build_http_suite(endpoints, embedding_dim=scenario.embedding_dim)
        remote_memory = SharedMemory(tmp_path / "remote", http_suite.store)
        remote = Director(memory=remote_memory, suite=http_suite).run_pipeline(
            script, DirectorConfig(seed=7)
        )

    assert direct.status == remote.status == "done"
    assert direct.ci_history == remote.ci_history
    assert [p.image.hex_hash for p in direct.panels] == [p.image.hex_hash for p in remote.panels]
    assert report_json(direct.latest_report) == report_json(remote.latest_report)
