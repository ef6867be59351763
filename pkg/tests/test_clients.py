"""Mock client semantics and the HTTP adapter wire contract."""

import json
import threading
import time
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from diffurank.clients import (
    ClientAuthError,
    ClientHttpError,
    ClientProtocolError,
    ClientTimeoutError,
    DEFAULT_VLM_PROMPT,
    HttpCaptioner,
    HttpClientConfig,
    HttpEmbedder,
    HttpStatementConverter,
    HttpVlmSummarizer,
    MockCaptioner,
    MockEmbedder,
    MockLatentEncoder,
    MockSafetyScreen,
    MockStatementConverter,
    MockVlmSummarizer,
    RateLimiter,
    mock_captioner,
)
from diffurank.render import build_job, mock_render
from diffurank.scoring import Source
from diffurank.toy import generate_world, parse_tokens


@pytest.fixture(scope="module")
def world():
    return generate_world(4, seed=13)


@pytest.fixture(scope="module")
def renders(world, tmp_path_factory):
    out = tmp_path_factory.mktemp("client_renders")
    outputs = {}
    for obj in world.objects:
        job = build_job(obj.object_id, seed=13)
        outputs[obj.object_id] = mock_render(job, obj, out)
    return outputs


class TestMockCaptioner:
    def test_returns_exactly_n(self, world, renders):
        captioner = mock_captioner(world)
        ref = renders["obj-0000"].views[0].image_ref
        assert len(captioner.caption_view(ref, 5)) == 5
        assert len(captioner.caption_view(ref, 2)) == 2

    def test_same_seed_same_captions(self, world, renders):
        ref = renders["obj-0000"].views[0].image_ref
        a = MockCaptioner(error_rate=0.3, seed=2).caption_view(ref, 5)
        b = MockCaptioner(error_rate=0.3, seed=2).caption_view(ref, 5)
        assert a == b

    def test_corruption_rate_over_many_draws(self, world, renders):
        captioner = MockCaptioner(error_rate=0.5, seed=4)
        obj = world.objects[0]
        full_ref = next(
            v.image_ref for v in renders[obj.object_id].views
            if len(parse_tokens(" ".join(captioner.caption_view(v.image_ref, 1)))) == 3
        )
        truth = list(obj.tokens)
        corrupted = total = 0
        for caption in captioner.caption_view(full_ref, 1000):
            tokens = parse_tokens(caption)
            corrupted += sum(1 for got, want in zip(tokens, truth) if got != want)
            total += len(truth)
        assert 0.45 <= corrupted / total <= 0.55


class TestMockEncoder:
    def test_requires_exactly_twenty_views(self, world, renders):
        encoder = MockLatentEncoder(world)
        views = renders["obj-0001"].views
        transparent = [v.image_ref for v in views if v.view_id >= 8]
        latent = encoder.encode(transparent)
        assert latent.source is Source.ENCODER
        np.testing.assert_array_equal(latent.vector, world.objects[1].latent.vector)
        with pytest.raises(ValueError, match="exactly 20"):
            encoder.encode(transparent[:19])

    def test_rejects_mixed_objects(self, world, renders):
        a = [v.image_ref for v in renders["obj-0000"].views if v.view_id >= 8]
        b = [v.image_ref for v in renders["obj-0001"].views if v.view_id >= 8]
        with pytest.raises(ValueError, match="multiple objects"):
            MockLatentEncoder(world).encode(a[:10] + b[:10])


class TestMockSummarizer:
    def test_six_image_cap_enforced(self, renders):
        refs = [v.image_ref for v in renders["obj-0000"].views[:7]]
        with pytest.raises(ValueError, match="at most 6"):
            MockVlmSummarizer().summarize(refs)

    def test_unlimited_variant_accepts_all_views(self, renders):
        refs = [v.image_ref for v in renders["obj-0000"].views]
        result = MockVlmSummarizer(max_images=None).summarize(refs)
        assert result.caption is not None

    def test_caption_is_union_of_visible_attributes(self, world, renders):
        obj = world.objects[0]
        refs = [v.image_ref for v in renders[obj.object_id].views]
        result = MockVlmSummarizer(max_images=None).summarize(refs)
        assert set(parse_tokens(result.caption)) == set(obj.tokens)

    def test_policy_violation_is_outcome_not_error(self, renders):
        summarizer = MockVlmSummarizer(policy_violation_ids=frozenset({"obj-0000"}))
        refs = [v.image_ref for v in renders["obj-0000"].views[:3]]
        result = summarizer.summarize(refs)
        assert result.policy_violation and result.caption is None


class TestMockStatementConverter:
    def test_fixture_mapping_is_order_preserving(self):
        mapping = {("is it red?", ("yes", "no")): ["it is red", "it is not red"]}
        converter = MockStatementConverter(mapping)
        assert converter.to_statements("is it red?", ["yes", "no"]) == [
            "it is red", "it is not red",
        ]

    def test_fallback_matches_option_count(self):
        out = MockStatementConverter().to_statements("q?", ["a", "b", "c"])
        assert out == ["a", "b", "c"]


class TestMockEmbedder:
    def test_unit_norm(self, world):
        embedder = MockEmbedder(world)
        for text in ("a red cube object", "nothing known here", ""):
            vec = embedder.embed_text(text or "empty")
            assert np.linalg.norm(vec) == pytest.approx(1.0, abs=1e-6)

    def test_matching_attributes_collide(self, world, renders):
        embedder = MockEmbedder(world)
        obj = world.objects[0]
        caption_vec = embedder.embed_text(world.full_caption(obj))
        full_ref = next(
            v.image_ref for v in renders[obj.object_id].views
            if set(parse_tokens(" ".join(MockCaptioner().caption_view(v.image_ref, 1)))) == set(obj.tokens)
        )
        image_vec = embedder.embed_image(full_ref)
        assert float(caption_vec @ image_vec) == pytest.approx(1.0, abs=1e-9)

    def test_cosines_bounded(self, world, rng):
        embedder = MockEmbedder(world)
        pool = ["a red cube object", "a blue sphere object", "xyzzy", "a large pyramid object"]
        for a in pool:
            for b in pool:
                cos = float(embedder.embed_text(a) @ embedder.embed_text(b))
                assert -1.0 - 1e-9 <= cos <= 1.0 + 1e-9


class TestSafetyScreenStub:
    def test_default_passes_everything(self):
        assert MockSafetyScreen().screen(["a.png", "b.png"]) == [False, False]


# ---------------------------------------------------------------------------
# HTTP adapter against a local server
# ---------------------------------------------------------------------------


class _Script:
    """Queue of (status, body) responses; records received requests."""

    def __init__(self):
        self.responses = []
        self.requests = []


def _serve(script):
    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            length = int(self.headers.get("Content-Length", 0))
            body = self.rfile.read(length)
            script.requests.append(
                {"body": json.loads(body), "headers": dict(self.headers)}
            )
            status, payload = script.responses.pop(0)
            raw = payload if isinstance(payload, bytes) else json.dumps(payload).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(raw)))
            self.end_headers()
            self.wfile.write(raw)

        def log_message(self, *args):
            pass

    server = HTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server, f"http://127.0.0.1:{server.server_port}/"


@pytest.fixture()
def http_server():
    script = _Script()
    server, url = _serve(script)
    yield script, url
    server.shutdown()


def _config(url, **kwargs):
    kwargs.setdefault("backoff_base", 0.001)
    return HttpClientConfig(endpoint=url, api_key="test-key", **kwargs)


class TestHttpAdapter:
    def test_two_transient_errors_then_success(self, http_server):
        script, url = http_server
        script.responses = [
            (503, {"error": "busy"}),
            (502, {"error": "busy"}),
            (200, {"statements": ["s1", "s2"]}),
        ]
        client = HttpStatementConverter(_config(url))
        out = client.to_statements("q?", ["a", "b"])
        assert out == ["s1", "s2"]
        assert len(script.requests) == 3  # one call, two retries

    def test_idempotency_key_stable_across_retries(self, http_server):
        script, url = http_server
        script.responses = [(500, {}), (200, {"statements": ["s"]})]
        HttpStatementConverter(_config(url)).to_statements("q?", ["a"])
        keys = {r["headers"]["Idempotency-Key"] for r in script.requests}
        assert len(keys) == 1

    def test_auth_header_and_auth_failure(self, http_server):
        script, url = http_server
        script.responses = [(401, {"error": "no"})]
        with pytest.raises(ClientAuthError):
            HttpStatementConverter(_config(url)).to_statements("q?", ["a"])
        assert script.requests[0]["headers"]["Authorization"] == "Bearer test-key"

    def test_policy_violation_payload_is_outcome(self, http_server, tmp_path):
        script, url = http_server
        script.responses = [(200, {"flag": "content_policy_violation"})]
        image = tmp_path / "img.png"
        from PIL import Image

        Image.new("RGB", (4, 4)).save(image)
        result = HttpVlmSummarizer(_config(url)).summarize([str(image)])
        assert result.policy_violation
        assert script.requests[0]["body"]["prompt"] == DEFAULT_VLM_PROMPT

    def test_summarizer_records_usage_telemetry(self, http_server, tmp_path):
        script, url = http_server
        script.responses = [(200, {"caption": "a cube", "usage": {"prompt_tokens": 1867}})]
        image = tmp_path / "img.png"
        from PIL import Image

        Image.new("RGB", (4, 4)).save(image)
        client = HttpVlmSummarizer(_config(url))
        client.summarize([str(image)])
        assert client.last_usage == {"prompt_tokens": 1867}

    def test_captioner_passes_decode_options_through(self, http_server, tmp_path):
        script, url = http_server
        script.responses = [(200, {"captions": ["a", "b"]})]
        image = tmp_path / "img.png"
        from PIL import Image

        Image.new("RGB", (4, 4)).save(image)
        client = HttpCaptioner(_config(url), decode_options={"num_beams": 4})
        client.caption_view(str(image), 2)
        assert script.requests[0]["body"]["options"] == {"num_beams": 4}

    def test_malformed_json_carries_raw_body(self, http_server):
        script, url = http_server
        script.responses = [(200, b"this is not json")]
        with pytest.raises(ClientProtocolError) as excinfo:
            HttpStatementConverter(_config(url)).to_statements("q?", ["a"])
        assert excinfo.value.raw_body == "this is not json"

    def test_wrong_caption_count_is_protocol_error(self, http_server, tmp_path):
        script, url = http_server
        script.responses = [(200, {"captions": ["only one"]})]
        image = tmp_path / "img.png"
        from PIL import Image

        Image.new("RGB", (4, 4)).save(image)
        with pytest.raises(ClientProtocolError, match="expected 3"):
            HttpCaptioner(_config(url)).caption_view(str(image), 3)

    def test_non_retryable_client_error(self, http_server):
        script, url = http_server
        script.responses = [(404, {"error": "nope"})]
        with pytest.raises(ClientHttpError) as excinfo:
            HttpStatementConverter(_config(url)).to_statements("q?", ["a"])
        assert excinfo.value.status == 404
        assert len(script.requests) == 1

    def test_exhausted_retries_surface_last_error(self, http_server):
        script, url = http_server
        script.responses = [(500, {})] * 3
        with pytest.raises(ClientHttpError):
            HttpStatementConverter(_config(url, max_retries=2)).to_statements("q?", ["a"])
        assert len(script.requests) == 3

    def test_timeout_is_typed(self):
        # A local server that accepts but never answers forces a read timeout.
        class Stall(BaseHTTPRequestHandler):
            def do_POST(self):
                time.sleep(1.0)

            def log_message(self, *args):
                pass

        server = HTTPServer(("127.0.0.1", 0), Stall)
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        try:
            config = HttpClientConfig(
                endpoint=f"http://127.0.0.1:{server.server_port}/",
                timeout=0.1, max_retries=1, backoff_base=0.001,
            )
            with pytest.raises(ClientTimeoutError):
                HttpStatementConverter(config).to_statements("q?", ["a"])
        finally:
            server.shutdown()

    def test_embedder_normalizes(self, http_server):
        script, url = http_server
        script.responses = [(200, {"vector": [3.0, 4.0]})]
        vec = HttpEmbedder(_config(url)).embed_text("hello")
        np.testing.assert_allclose(vec, [0.6, 0.8])

    def test_from_env(self, monkeypatch):
        monkeypatch.setenv("DIFFURANK_ENDPOINT_CAPTIONER", "http://example.test/caption")
        monkeypatch.setenv("DIFFURANK_API_KEY", "k")
        config = HttpClientConfig.from_env("captioner")
        assert config.endpoint == "http://example.test/caption"
        assert config.api_key == "k"


class TestRateLimiter:
    def test_enforces_minimum_interval(self):
        limiter = RateLimiter(requests_per_second=50)
        start = time.monotonic()
        for _ in range(5):
            limiter.acquire()
        assert time.monotonic() - start >= 4 * 0.02 - 0.005
