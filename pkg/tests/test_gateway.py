"""Backend gateway: digests, mock replay, retries, and the live wire protocol."""

import json

import httpx
import pytest

from srlm import gateway
from conftest import FixtureBuilder

FAST = gateway.GatewayConfig(retry_budget=3, backoff_base=0.0)


def req(user="hello", **kwargs):
    return gateway.GenerationRequest(system_prompt="sys", user_prompt=user, **kwargs)


class TestRequestValidation:
    def test_defaults(self):
        r = req()
        assert (r.temperature, r.top_p, r.max_tokens, r.n_samples) == (0.2, 0.9, 8192, 1)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"temperature": -0.1},
            {"top_p": 0.0},
            {"top_p": 1.5},
            {"max_tokens": 0},
            {"n_samples": 0},
        ],
    )
    def test_rejects_out_of_range(self, kwargs):
        with pytest.raises(ValueError):
            req(**kwargs)

    def test_score_request_needs_continuation(self):
        with pytest.raises(ValueError):
            gateway.ScoreRequest(context="c", continuation="", model_ref="m")


class TestDigests:
    def test_generation_digest_stable(self):
        assert gateway.generation_digest("m", req()) == gateway.generation_digest("m", req())

    @pytest.mark.parametrize(
        "other",
        [
            ("m2", req()),
            ("m", req(user="different")),
            ("m", req(seed=7)),
            ("m", req(n_samples=5)),
            ("m", req(temperature=0.7)),
        ],
    )
    def test_generation_digest_varies(self, other):
        assert gateway.generation_digest("m", req()) != gateway.generation_digest(*other)

    def test_score_digest_varies_by_model(self):
        a = gateway.ScoreRequest(context="c", continuation="x", model_ref="m1")
        b = gateway.ScoreRequest(context="c", continuation="x", model_ref="m2")
        assert gateway.score_digest(a) != gateway.score_digest(b)


class TestMockGeneration:
    def test_replays_scripted_completions_in_order(self, tmp_path):
        builder = FixtureBuilder()
        request = req(n_samples=5)
        texts = [f"draft {i}" for i in range(5)]
        builder.generation("m", request, texts)
        handle = gateway.mock_handle(builder.write(tmp_path / "f.jsonl"), "m", FAST)
        completions = gateway.generate(handle, request)
        assert [c.text for c in completions] == texts
        assert all(not c.truncated for c in completions)

    def test_truncation_flags_preserved(self, tmp_path):
        builder = FixtureBuilder()
        request = req(n_samples=2)
        builder.generation("m", request, ["a", "b"], truncated=[False, True])
        handle = gateway.mock_handle(builder.write(tmp_path / "f.jsonl"), "m", FAST)
        assert [c.truncated for c in gateway.generate(handle, request)] == [False, True]

    def test_unscripted_digest_raises(self, tmp_path):
        builder = FixtureBuilder()
        builder.generation("m", req(), ["x"])
        handle = gateway.mock_handle(builder.write(tmp_path / "f.jsonl"), "m", FAST)
        with pytest.raises(gateway.MockFixtureError):
            gateway.generate(handle, req(user="never scripted"))

    def test_completion_count_mismatch(self, tmp_path):
        builder = FixtureBuilder()
        request = req(n_samples=5)
        digest = gateway.generation_digest("m", request)
        (tmp_path / "f.jsonl").write_text(
            json.dumps({"request_digest": digest, "completions": ["only", "three", "here"]})
            + "\n",
            encoding="utf-8",
        )
        handle = gateway.mock_handle(tmp_path / "f.jsonl", "m", FAST)
        with pytest.raises(gateway.MockFixtureError):
            gateway.generate(handle, request)

    def test_determinism_across_handles(self, tmp_path):
        builder = FixtureBuilder()
        request = req(n_samples=3, seed=11)
        builder.generation("m", request, ["a", "b", "c"])
        path = builder.write(tmp_path / "f.jsonl")
        first = gateway.generate(gateway.mock_handle(path, "m", FAST), request)
        second = gateway.generate(gateway.mock_handle(path, "m", FAST), request)
        assert first == second


class TestMockFixtureFile:
    def test_invalid_json_line(self, tmp_path):
        path = tmp_path / "f.jsonl"
        path.write_text("{broken\n", encoding="utf-8")
        with pytest.raises(gateway.MockFixtureError):
            gateway.mock_handle(path, "m")

    def test_missing_digest_field(self, tmp_path):
        path = tmp_path / "f.jsonl"
        path.write_text('{"completions":["x"]}\n', encoding="utf-8")
        with pytest.raises(gateway.MockFixtureError):
            gateway.mock_handle(path, "m")

    def test_duplicate_digest(self, tmp_path):
        path = tmp_path / "f.jsonl"
        line = json.dumps({"request_digest": "d" * 64, "completions": ["x"]})
        path.write_text(line + "\n" + line + "\n", encoding="utf-8")
        with pytest.raises(gateway.MockFixtureError):
            gateway.mock_handle(path, "m")


class TestRetries:
    def test_two_failures_within_budget_succeed(self, tmp_path):
        builder = FixtureBuilder()
        builder.generation("m", req(), ["recovered"], fail_times=2)
        handle = gateway.mock_handle(builder.write(tmp_path / "f.jsonl"), "m", FAST)
        completions = gateway.generate(handle, req())
        assert completions[0].text == "recovered"
        assert handle.stats.retries == 2

    def test_exhausted_budget_raises(self, tmp_path):
        builder = FixtureBuilder()
        builder.generation("m", req(), ["never"], fail_times=4)
        handle = gateway.mock_handle(builder.write(tmp_path / "f.jsonl"), "m", FAST)
        with pytest.raises(gateway.TransportError):
            gateway.generate(handle, req())
        assert handle.stats.retries == 3

    def test_with_model_shares_retry_stats(self, tmp_path):
        builder = FixtureBuilder()
        builder.generation("base", req(), ["a"])
        builder.generation("tuned", req(), ["b"], fail_times=1)
        handle = gateway.mock_handle(builder.write(tmp_path / "f.jsonl"), "base", FAST)
        derived = gateway.with_model(handle, "tuned")
        gateway.generate(handle, req())
        gateway.generate(derived, req())
        assert derived.stats is handle.stats
        assert handle.stats.retries == 1


class TestMockScoring:
    def test_sums_token_logprobs(self, tmp_path):
        builder = FixtureBuilder()
        request = gateway.ScoreRequest(context="ctx", continuation="ans", model_ref="m")
        builder.score(request, [-1.5, -0.25, -0.25])
        handle = gateway.mock_handle(builder.write(tmp_path / "f.jsonl"), "m", FAST)
        result = gateway.score_continuation(handle, request)
        assert result.total_logprob == pytest.approx(-2.0)
        assert result.token_count == 3

    def test_zero_logprob_tokens_allowed(self, tmp_path):
        builder = FixtureBuilder()
        request = gateway.ScoreRequest(context="c", continuation="a", model_ref="m")
        builder.score(request, [0.0, -1.0])
        handle = gateway.mock_handle(builder.write(tmp_path / "f.jsonl"), "m", FAST)
        assert gateway.score_continuation(handle, request).total_logprob == pytest.approx(-1.0)

    def test_positive_logprob_rejected(self, tmp_path):
        builder = FixtureBuilder()
        request = gateway.ScoreRequest(context="c", continuation="a", model_ref="m")
        builder.score(request, [-1.0, 0.5])
        handle = gateway.mock_handle(builder.write(tmp_path / "f.jsonl"), "m", FAST)
        with pytest.raises(gateway.GatewayError):
            gateway.score_continuation(handle, request)

    def test_nan_logprob_rejected(self, tmp_path):
        builder = FixtureBuilder()
        request = gateway.ScoreRequest(context="c", continuation="a", model_ref="m")
        builder.score(request, [float("nan")])
        handle = gateway.mock_handle(builder.write(tmp_path / "f.jsonl"), "m", FAST)
        with pytest.raises(gateway.GatewayError):
            gateway.score_continuation(handle, request)

    def test_empty_logprob_list_rejected(self, tmp_path):
        builder = FixtureBuilder()
        request = gateway.ScoreRequest(context="c", continuation="a", model_ref="m")
        builder.score(request, [])
        handle = gateway.mock_handle(builder.write(tmp_path / "f.jsonl"), "m", FAST)
        with pytest.raises(gateway.GatewayError):
            gateway.score_continuation(handle, request)

    def test_record_without_logprobs_is_unsupported(self, tmp_path):
        builder = FixtureBuilder()
        request = gateway.ScoreRequest(context="c", continuation="a", model_ref="m")
        digest = gateway.score_digest(request)
        (tmp_path / "f.jsonl").write_text(
            json.dumps({"request_digest": digest, "completions": ["x"]}) + "\n",
            encoding="utf-8",
        )
        handle = gateway.mock_handle(tmp_path / "f.jsonl", "m", FAST)
        with pytest.raises(gateway.UnsupportedCapabilityError):
            gateway.score_continuation(handle, request)


def live_test_handle(handler, config=FAST, model_ref="m"):
    handle = gateway.live_handle(model_ref, endpoint="http://backend.test", config=config)
    handle.backend._client = httpx.Client(
        base_url="http://backend.test", transport=httpx.MockTransport(handler)
    )
    return handle


class TestLiveProtocol:
    def test_generation_payload_and_response(self):
        seen = {}

        def handler(request):
            seen.update(json.loads(request.content))
            seen["path"] = request.url.path
            return httpx.Response(
                200,
                json={
                    "choices": [
                        {"text": "full", "finish_reason": "stop"},
                        {"text": "cut", "finish_reason": "length"},
                    ]
                },
            )

        handle = live_test_handle(handler)
        completions = gateway.generate(handle, req(n_samples=2, seed=9))
        assert seen["path"] == "/v1/chat/completions"
        assert seen["model"] == "m"
        assert seen["messages"] == [
            {"role": "system", "content": "sys"},
            {"role": "user", "content": "hello"},
        ]
        assert seen["n"] == 2
        assert seen["seed"] == 9
        assert completions == [
            gateway.Completion(text="full", truncated=False),
            gateway.Completion(text="cut", truncated=True),
        ]

    def test_empty_system_prompt_sends_no_system_message(self):
        seen = {}

        def handler(request):
            seen.update(json.loads(request.content))
            return httpx.Response(200, json={"choices": [{"text": "x"}]})

        handle = live_test_handle(handler)
        gateway.generate(
            handle, gateway.GenerationRequest(system_prompt="", user_prompt="u")
        )
        assert [m["role"] for m in seen["messages"]] == ["user"]
        assert "seed" not in seen

    def test_client_error_is_refusal_and_not_retried(self):
        calls = []

        def handler(request):
            calls.append(1)
            return httpx.Response(400, json={"error": "bad request"})

        handle = live_test_handle(handler)
        with pytest.raises(gateway.BackendRefusalError):
            gateway.generate(handle, req())
        assert len(calls) == 1

    def test_server_error_retried_then_raised(self):
        calls = []

        def handler(request):
            calls.append(1)
            return httpx.Response(503)

        handle = live_test_handle(handler, gateway.GatewayConfig(retry_budget=2, backoff_base=0.0))
        with pytest.raises(gateway.TransportError):
            gateway.generate(handle, req())
        assert len(calls) == 3

    def test_server_error_then_recovery(self):
        calls = []

        def handler(request):
            calls.append(1)
            if len(calls) == 1:
                return httpx.Response(500)
            return httpx.Response(200, json={"choices": [{"text": "ok"}]})

        handle = live_test_handle(handler)
        assert gateway.generate(handle, req())[0].text == "ok"
        assert handle.stats.retries == 1

    def test_choice_count_mismatch_is_transport_error(self):
        def handler(request):
            return httpx.Response(200, json={"choices": [{"text": "only one"}]})

        handle = live_test_handle(handler, gateway.GatewayConfig(retry_budget=0))
        with pytest.raises(gateway.TransportError):
            gateway.generate(handle, req(n_samples=3))

    def test_score_payload_and_sum(self):
        seen = {}

        def handler(request):
            seen.update(json.loads(request.content))
            seen["path"] = request.url.path
            return httpx.Response(200, json={"token_logprobs": [-0.5, -1.5]})

        handle = live_test_handle(handler)
        request = gateway.ScoreRequest(context="ctx", continuation="ans", model_ref="m")
        result = gateway.score_continuation(handle, request)
        assert seen["path"] == "/v1/score"
        assert seen == {
            "path": "/v1/score",
            "model": "m",
            "context": "ctx",
            "continuation": "ans",
        }
        assert result == gateway.ScoreResult(total_logprob=-2.0, token_count=2)

    def test_missing_score_endpoint_is_unsupported(self):
        def handler(request):
            return httpx.Response(404)

        handle = live_test_handle(handler)
        with pytest.raises(gateway.UnsupportedCapabilityError):
            gateway.score_continuation(
                handle, gateway.ScoreRequest(context="c", continuation="a", model_ref="m")
            )

    def test_score_response_without_logprobs_is_unsupported(self):
        def handler(request):
            return httpx.Response(200, json={"something_else": []})

        handle = live_test_handle(handler)
        with pytest.raises(gateway.UnsupportedCapabilityError):
            gateway.score_continuation(
                handle, gateway.ScoreRequest(context="c", continuation="a", model_ref="m")
            )

    def test_score_client_error_is_refusal(self):
        def handler(request):
            return httpx.Response(403)

        handle = live_test_handle(handler)
        with pytest.raises(gateway.BackendRefusalError):
            gateway.score_continuation(
                handle, gateway.ScoreRequest(context="c", continuation="a", model_ref="m")
            )

    def test_bearer_token_header(self, monkeypatch):
        monkeypatch.setenv("SRLM_BACKEND_TOKEN", "secret-token")
        handle = gateway.live_handle("m", endpoint="http://backend.test")
        assert handle.backend._client.headers["Authorization"] == "Bearer secret-token"

    def test_endpoint_required(self, monkeypatch):
        monkeypatch.delenv(gateway.ENV_BACKEND_URL, raising=False)
        with pytest.raises(gateway.GatewayError):
            gateway.live_handle("m")

    def test_endpoint_from_environment(self, monkeypatch):
        monkeypatch.setenv(gateway.ENV_BACKEND_URL, "http://from-env.test")
        handle = gateway.live_handle("m")
        assert handle.endpoint == "http://from-env.test"
