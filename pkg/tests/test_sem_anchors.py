import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from amcfg.clustering import LabelVector, fit_kmeans, assign
from amcfg.dataset_io import Dataset, EmbeddingMatrix, PostRecord
from amcfg.sem_anchors import (
    CATEGORIES,
    DEFAULT_TASKS,
    MBTI_TYPES,
    PROMPT_TEMPLATES,
    ClusterDigest,
    EmptyCluster,
    EmptyText,
    HashingEmbedder,
    HttpError,
    HttpLlmClient,
    LlmClientConfig,
    MalformedResponse,
    SemAnchorError,
    StubLlmClient,
    build_cluster_digest,
    embed_text,
    fit_semantic_table,
    load_semantic_table,
    lookup_semantic_features,
    prompt_hash,
    query_llm,
    render_prompt,
    save_semantic_table,
    stub_response,
)


def tiny_dataset(captions, embeddings, modality="text"):
    records = [
        PostRecord(f"p{i}", f"u{i}", float(i), {}, {"caption": c})
        for i, c in enumerate(captions)
    ]
    return Dataset(
        records=records,
        matrices={modality: EmbeddingMatrix(modality, np.asarray(embeddings, dtype=np.float64))},
    )


class TestClusterDigest:
    def test_cap_at_membership(self):
        data = [[0.0], [0.1], [0.2], [9.0]]
        ds = tiny_dataset(["a", "b", "c", "d"], data)
        model = fit_kmeans(ds.matrices["text"], k=2, seed=0, modality="text")
        labels = assign(model, ds.matrices["text"])
        small_cluster = labels.labels[0]
        digest = build_cluster_digest(ds, model, labels, int(small_cluster), R=8)
        assert digest.size == 3
        assert len(digest.exemplars) == 3

    def test_tie_breaks_to_lower_row_index(self):
        data = [[1.0], [-1.0], [1.0], [-1.0]]
        ds = tiny_dataset(["r0", "r1", "r2", "r3"], data)
        model = fit_kmeans(ds.matrices["text"], k=1, seed=0, modality="text")
        labels = assign(model, ds.matrices["text"])
        digest = build_cluster_digest(ds, model, labels, 0, R=2)
        # all rows equidistant from the centroid at 0 -> rows 0 then 1
        assert digest.exemplars == ["r0", "r1"]

    def test_matches_nearest_scan(self):
        rng = np.random.default_rng(0)
        data = rng.standard_normal((30, 4))
        ds = tiny_dataset([f"cap{i}" for i in range(30)], data)
        model = fit_kmeans(ds.matrices["text"], k=3, seed=1, modality="text")
        labels = assign(model, ds.matrices["text"])
        cluster = int(labels.labels[0])
        digest = build_cluster_digest(ds, model, labels, cluster, R=4)
        members = np.flatnonzero(labels.labels == cluster)
        dists = [float(np.sum((data[i] - model.centroids[cluster]) ** 2)) for i in members]
        expected = [f"cap{members[i]}" for i in np.argsort(dists, kind="stable")[:4]]
        assert digest.exemplars == expected

    def test_empty_cluster_raises(self):
        ds = tiny_dataset(["a", "b"], [[0.0], [0.1]])
        model = fit_kmeans(ds.matrices["text"], k=2, seed=0, modality="text")
        labels = LabelVector("text", [0, 0])
        with pytest.raises(EmptyCluster):
            build_cluster_digest(ds, model, labels, 1)


class TestRenderPrompt:
    def digest(self, exemplars=("first sample", "second sample")):
        return ClusterDigest(cluster_id=3, modality="text",
                             exemplars=list(exemplars), size=len(exemplars))

    def test_exemplars_in_order(self):
        prompt = render_prompt(PROMPT_TEMPLATES["theme"], self.digest())
        assert "1. first sample" in prompt
        assert "2. second sample" in prompt
        assert prompt.index("1. first") < prompt.index("2. second")

    def test_category_prompt_lists_all_21(self):
        prompt = render_prompt(PROMPT_TEMPLATES["category"], self.digest())
        assert len(CATEGORIES) == 21
        for category in CATEGORIES:
            assert category in prompt
        assert "Dance, Comedy, Lip Sync, Tutorial" in prompt
        assert "Pranks, and Others." in prompt

    def test_mbti_prompt_ends_with_type_only_instruction(self):
        prompt = render_prompt(PROMPT_TEMPLATES["mbti"], self.digest())
        assert prompt.endswith("Output only the most likely MBTI type (e.g., INFP, ESTJ).")

    def test_deterministic(self):
        a = render_prompt(PROMPT_TEMPLATES["summary"], self.digest())
        b = render_prompt(PROMPT_TEMPLATES["summary"], self.digest())
        assert a == b


class _ScriptedHandler(BaseHTTPRequestHandler):
    script: list = []  # (status, payload-dict or None)
    requests_seen: list = []

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        body = json.loads(self.rfile.read(length))
        type(self).requests_seen.append(body)
        status, payload = (
            self.script.pop(0) if self.script else (200, None)
        )
        if payload is None:
            payload = {
                "choices": [{"message": {"content": f"echo:{body['messages'][0]['content'][:20]}"}}]
            }
        data = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def llm_server():
    _ScriptedHandler.script = []
    _ScriptedHandler.requests_seen = []
    server = HTTPServer(("127.0.0.1", 0), _ScriptedHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}/v1/chat/completions", _ScriptedHandler
    server.shutdown()


class TestQueryLlm:
    def test_success_and_cache_hit(self, llm_server, tmp_path):
        url, handler = llm_server
        config = LlmClientConfig(endpoint=url, cache_dir=tmp_path / "cache")
        first = query_llm(config, "hello prompt")
        assert first.startswith("echo:")
        n_before = len(handler.requests_seen)
        second = query_llm(config, "hello prompt")
        assert second == first
        assert len(handler.requests_seen) == n_before  # zero network calls

    def test_http_500_after_retries(self, llm_server, tmp_path):
        url, handler = llm_server
        handler.script = [(500, {"oops": True})] * 3
        config = LlmClientConfig(endpoint=url, retries=2, cache_dir=tmp_path / "c")
        with pytest.raises(HttpError) as err:
            query_llm(config, "failing prompt")
        assert err.value.status == 500
        assert len(handler.requests_seen) == 3

    def test_malformed_response(self, llm_server, tmp_path):
        url, handler = llm_server
        handler.script = [(200, {"choices": []})]
        config = LlmClientConfig(endpoint=url, retries=2)
        with pytest.raises(MalformedResponse):
            query_llm(config, "prompt")

    def test_error_carries_prompt_hash(self, llm_server):
        url, handler = llm_server
        handler.script = [(404, {})]
        config = LlmClientConfig(endpoint=url, retries=0)
        with pytest.raises(HttpError) as err:
            query_llm(config, "p")
        assert err.value.prompt_hash == prompt_hash(config.model, 0.0, "p")

    def test_fallback_to_stub(self, llm_server):
        url, handler = llm_server
        handler.script = [(500, {})]
        client = HttpLlmClient(
            LlmClientConfig(endpoint=url, retries=0), fallback=StubLlmClient()
        )
        text = client.complete("What is the primary theme? 1. cats")
        assert text  # stub answer, no exception

    def test_request_body_shape(self, llm_server, tmp_path):
        url, handler = llm_server
        config = LlmClientConfig(endpoint=url, model="test-model", max_tokens=64)
        query_llm(config, "shape check")
        body = handler.requests_seen[-1]
        assert body["model"] == "test-model"
        assert body["messages"] == [{"role": "user", "content": "shape check"}]
        assert body["temperature"] == 0.0
        assert body["max_tokens"] == 64


class TestStub:
    def test_deterministic_mapping(self):
        client = StubLlmClient({"q": "a"})
        assert client.complete("q") == "a"
        assert client.calls == 1

    def test_task_routing(self):
        digest = ClusterDigest(0, "text", ["dancing dancing video"], 1)
        mbti = stub_response(render_prompt(PROMPT_TEMPLATES["mbti"], digest))
        assert mbti in MBTI_TYPES
        category = stub_response(render_prompt(PROMPT_TEMPLATES["category"], digest))
        assert category in CATEGORIES
        theme = stub_response(render_prompt(PROMPT_TEMPLATES["theme"], digest))
        assert "dancing" in theme

    def test_same_prompt_same_answer(self):
        assert stub_response("abc 1. xyz") == stub_response("abc 1. xyz")


class TestHashingEmbedder:
    def test_unit_norm(self):
        v = HashingEmbedder(64).embed("some text here")
        assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-9)

    def test_identical_texts_identical_vectors(self):
        e = HashingEmbedder(384)
        np.testing.assert_array_equal(e.embed("a b c"), e.embed("a b c"))

    def test_bag_of_words_order_invariance(self):
        e = HashingEmbedder(384)
        np.testing.assert_array_equal(e.embed("a b"), e.embed("b a"))

    def test_case_and_punctuation_folding(self):
        e = HashingEmbedder(128)
        np.testing.assert_array_equal(e.embed("Hello, World!"), e.embed("hello world"))

    def test_empty_text_raises(self):
        with pytest.raises(EmptyText):
            HashingEmbedder(16).embed("   ")
        with pytest.raises(EmptyText):
            embed_text(HashingEmbedder(16), "")

    def test_default_dim(self):
        assert HashingEmbedder().embed("x").shape == (384,)


class TestSemanticTable:
    def fixture(self, k=2, n=8, seed=0):
        rng = np.random.default_rng(seed)
        centers = np.array([[0.0] * 3, [8.0] * 3])
        labels_true = rng.integers(0, 2, n)
        data = centers[labels_true] + 0.1 * rng.standard_normal((n, 3))
        captions = [f"topic{t} clip words{t}" for t in labels_true]
        ds = tiny_dataset(captions, data)
        model = fit_kmeans(ds.matrices["text"], k=k, seed=0, modality="text")
        labels = assign(model, ds.matrices["text"])
        return ds, model, labels

    def test_two_clusters_deterministic(self):
        ds, model, labels = self.fixture()
        kwargs = dict(
            client=StubLlmClient(), embedder=HashingEmbedder(32), tasks=("theme",)
        )
        a = fit_semantic_table(ds, {"text": model}, {"text": labels}, **kwargs)
        b = fit_semantic_table(ds, {"text": model}, {"text": labels}, **kwargs)
        assert a.embeddings["text"].shape == (2, 32)
        np.testing.assert_array_equal(a.embeddings["text"], b.embeddings["text"])
        assert a.descriptions == b.descriptions

    def test_task_responses_concatenated_in_order(self):
        ds, model, labels = self.fixture()
        table = fit_semantic_table(
            ds, {"text": model}, {"text": labels},
            client=StubLlmClient(), embedder=HashingEmbedder(32),
            tasks=("mbti", "theme"),  # canonical order puts theme first
        )
        desc = table.descriptions["text"][0]
        lines = desc.split("\n")
        assert lines[0].startswith("Theme:")
        assert lines[1] in MBTI_TYPES
        assert table.tasks == ("theme", "mbti")

    def test_unpopulated_cluster_zero_vector(self):
        ds, model, labels = self.fixture()
        model.k = 3
        model.centroids = np.vstack([model.centroids, [[99.0] * 3]])
        table = fit_semantic_table(
            ds, {"text": model}, {"text": labels},
            client=StubLlmClient(), embedder=HashingEmbedder(16), tasks=("theme",),
        )
        np.testing.assert_array_equal(table.embeddings["text"][2], np.zeros(16))
        assert table.descriptions["text"][2] == ""

    def test_lookup_width_and_cluster_constancy(self):
        ds, model, labels = self.fixture()
        table = fit_semantic_table(
            ds, {"text": model}, {"text": labels},
            client=StubLlmClient(), embedder=HashingEmbedder(384), tasks=DEFAULT_TASKS,
        )
        block = lookup_semantic_features({"text": labels}, table)
        assert block.matrix.shape == (8, 384)
        same = np.flatnonzero(labels.labels == labels.labels[0])
        for i in same:
            np.testing.assert_array_equal(block.matrix[i], block.matrix[same[0]])

    def test_three_modalities_width(self):
        embed_dim = 384
        table_embeddings = {
            m: np.zeros((2, embed_dim)) for m in ("text", "video", "audio")
        }
        from amcfg.sem_anchors import SemanticTable

        table = SemanticTable(embed_dim=embed_dim)
        table.embeddings = table_embeddings
        labels = {m: LabelVector(m, [0, 1, 1]) for m in ("text", "video", "audio")}
        block = lookup_semantic_features(labels, table)
        assert block.matrix.shape == (3, 3 * embed_dim)

    def test_missing_modality_raises(self):
        from amcfg.sem_anchors import SemanticTable

        table = SemanticTable(embed_dim=8)
        with pytest.raises(SemAnchorError):
            lookup_semantic_features({"text": LabelVector("text", [0])}, table)

    def test_warm_cache_rerun_zero_network(self, llm_server, tmp_path):
        url, handler = llm_server
        ds, model, labels = self.fixture()
        config = LlmClientConfig(endpoint=url, cache_dir=tmp_path / "cache")
        client1 = HttpLlmClient(config)
        table1 = fit_semantic_table(
            ds, {"text": model}, {"text": labels},
            client=client1, embedder=HashingEmbedder(16), tasks=("theme",),
        )
        assert client1.network_calls == 2
        client2 = HttpLlmClient(config)
        table2 = fit_semantic_table(
            ds, {"text": model}, {"text": labels},
            client=client2, embedder=HashingEmbedder(16), tasks=("theme",),
        )
        assert client2.network_calls == 0
        assert client2.cache_hits == 2
        np.testing.assert_array_equal(
            table1.embeddings["text"], table2.embeddings["text"]
        )

    def test_save_load_roundtrip(self, tmp_path):
        ds, model, labels = self.fixture()
        table = fit_semantic_table(
            ds, {"text": model}, {"text": labels},
            client=StubLlmClient(), embedder=HashingEmbedder(16), tasks=("theme",),
        )
        save_semantic_table(table, tmp_path / "sem.json")
        back = load_semantic_table(tmp_path / "sem.json")
        assert back.tasks == table.tasks
        assert back.descriptions == table.descriptions
        np.testing.assert_allclose(
            back.embeddings["text"], table.embeddings["text"], atol=1e-7
        )
