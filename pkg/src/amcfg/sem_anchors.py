"""Semantic anchors: cluster digests, LLM prompts, response embeddings.

Cluster-level descriptions are requested from an OpenAI-compatible chat
endpoint (or a deterministic in-process stub), embedded to fixed-width
vectors, and attached to every member post. Covers the text/video/audio
modalities only.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import requests

from .clustering import ClusterModel, LabelVector, _as_array
from .dataset_io import Dataset, EmbeddingMatrix, read_embedding_matrix, write_embedding_matrix

SEMANTIC_MODALITIES = ("text", "video", "audio")
TASKS = ("theme", "category", "audience", "mbti", "summary")
DEFAULT_TASKS = ("theme", "mbti", "summary")

CATEGORIES = (
    "Dance", "Comedy", "Lip Sync", "Tutorial", "Beauty & Fashion", "Fitness",
    "Food & Drink", "Pets & Animals", "Vlogging", "Challenges", "Memes",
    "Technology", "Travel", "Motivation & Inspiration", "Art & Creativity",
    "Sports", "Music", "Social Issues", "Unboxing", "Pranks", "Others",
)

MBTI_TYPES = (
    "ISTJ", "ISFJ", "INFJ", "INTJ", "ISTP", "ISFP", "INFP", "INTP",
    "ESTP", "ESFP", "ENFP", "ENTP", "ESTJ", "ESFJ", "ENFJ", "ENTJ",
)

API_KEY_ENV = "AMCFG_LLM_API_KEY"


class SemAnchorError(Exception):
    pass


class EmptyCluster(SemAnchorError):
    pass


class EmptyText(SemAnchorError):
    pass


class LlmError(SemAnchorError):
    def __init__(self, message: str, prompt_hash: str):
        super().__init__(f"{message} (prompt {prompt_hash})")
        self.prompt_hash = prompt_hash


class Timeout(LlmError):
    pass


class HttpError(LlmError):
    def __init__(self, status: int, prompt_hash: str):
        super().__init__(f"endpoint returned HTTP {status}", prompt_hash)
        self.status = status


class MalformedResponse(LlmError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    task: str
    header: str
    footer: str = ""


PROMPT_TEMPLATES: dict[str, PromptTemplate] = {
    "theme": PromptTemplate(
        "theme",
        "What is the primary theme of this cluster? Provide a short thematic "
        "description of the content below.",
    ),
    "category": PromptTemplate(
        "category",
        "Determine the category of this cluster's content from the following "
        "list: " + ", ".join(CATEGORIES[:-1]) + ", and " + CATEGORIES[-1] + ".",
    ),
    "audience": PromptTemplate(
        "audience",
        "Based on the content, style, and context of this cluster, identify "
        "the most likely target audience: age groups, relevant interests or "
        "hobbies, geographic or cultural background if identifiable, and the "
        "clues supporting your inference. Answer as brief bullet points.",
    ),
    "mbti": PromptTemplate(
        "mbti",
        "You are a professional MBTI personality analyst. Based on the "
        "following cluster content, internally analyze the authors' likely "
        "MBTI type by evaluating each of the four dimensions (Extraversion "
        "vs. Introversion, Sensing vs. Intuition, Thinking vs. Feeling, "
        "Judging vs. Perceiving).",
        footer="Output only the most likely MBTI type (e.g., INFP, ESTJ).",
    ),
    "summary": PromptTemplate(
        "summary",
        "Provide a concise summary of the defining characteristics of this "
        "cluster's content.",
    ),
}


@dataclass
class ClusterDigest:
    cluster_id: int
    modality: str | None
    exemplars: list[str]
    size: int


_TEXT_FIELDS = ("caption", "description", "content")


def _record_text(record) -> str:
    parts = [
        str(record.post_meta[k])
        for k in _TEXT_FIELDS
        if isinstance(record.post_meta.get(k), str) and record.post_meta[k].strip()
    ]
    if not parts:
        parts = [
            f"{k}={record.post_meta[k]}"
            for k in sorted(record.post_meta)
            if isinstance(record.post_meta[k], str) and record.post_meta[k].strip()
        ]
    return " ".join(parts) if parts else f"(post {record.post_id})"


def build_cluster_digest(
    dataset: Dataset,
    model: ClusterModel,
    labels: LabelVector,
    cluster: int,
    R: int = 8,
) -> ClusterDigest:
    """Collect the R cluster members nearest their centroid as prompt text.

    Distances are measured in the model's preprocessed space; ties resolve
    to the lower row index.
    """
    members = np.flatnonzero(labels.labels == cluster)
    if members.size == 0:
        raise EmptyCluster(f"cluster {cluster} has no members")
    data = _as_array(dataset.matrices[model.modality])
    if model.preprocessing is not None:
        data = model.preprocessing.apply(data)
    diff = data[members] - model.centroids[cluster]
    d2 = np.sum(diff * diff, axis=1)
    order = members[np.argsort(d2, kind="stable")][:R]
    exemplars = [_record_text(dataset.records[i]) for i in order]
    return ClusterDigest(
        cluster_id=cluster,
        modality=model.modality,
        exemplars=exemplars,
        size=int(members.size),
    )


def render_prompt(template: PromptTemplate, digest: ClusterDigest) -> str:
    lines = [template.header, ""]
    lines.append(
        f"Cluster of {digest.size} posts ({digest.modality or 'unknown'} modality), "
        f"representative samples:"
    )
    for i, exemplar in enumerate(digest.exemplars, start=1):
        lines.append(f"{i}. {exemplar}")
    if template.footer:
        lines.extend(["", template.footer])
    return "\n".join(lines)


def prompt_hash(model: str, temperature: float, prompt: str) -> str:
    """64-bit hex cache key over (model, temperature, prompt)."""
    h = hashlib.blake2b(digest_size=8)
    h.update(model.encode("utf-8"))
    h.update(struct_pack_temperature(temperature))
    h.update(prompt.encode("utf-8"))
    return h.hexdigest()


def struct_pack_temperature(temperature: float) -> bytes:
    return repr(float(temperature)).encode("ascii")


@dataclass
class LlmClientConfig:
    endpoint: str = "http://localhost:8080/v1/chat/completions"
    model: str = "gpt-4o"
    temperature: float = 0.0
    max_tokens: int = 256
    timeout: float = 30.0
    retries: int = 2
    cache_dir: str | Path | None = None

    def __post_init__(self):
        if self.temperature < 0:
            raise SemAnchorError("temperature must be >= 0")
        if self.retries < 0:
            raise SemAnchorError("retries must be >= 0")


_cache_lock = threading.Lock()


def _cache_path(cache_dir: str | Path, key: str) -> Path:
    return Path(cache_dir) / f"{key}.json"


def _cache_read(cache_dir: str | Path | None, key: str) -> str | None:
    if cache_dir is None:
        return None
    path = _cache_path(cache_dir, key)
    if not path.exists():
        return None
    obj = json.loads(path.read_text(encoding="utf-8"))
    return obj["response"]


def _cache_write(
    cache_dir: str | Path | None, key: str, prompt: str, response: str, model: str
) -> None:
    if cache_dir is None:
        return
    Path(cache_dir).mkdir(parents=True, exist_ok=True)
    path = _cache_path(cache_dir, key)
    payload = json.dumps(
        {"prompt": prompt, "response": response, "model": model, "timestamp": time.time()}
    )
    with _cache_lock:
        tmp = path.with_suffix(".tmp")
        tmp.write_text(payload, encoding="utf-8")
        tmp.replace(path)


def query_llm(config: LlmClientConfig, prompt: str, session=None) -> str:
    """POST an OpenAI-compatible chat completion, with on-disk caching.

    Cache hits bypass the network entirely. Failures retry up to
    config.retries times; the final error carries the prompt hash.
    """
    key = prompt_hash(config.model, config.temperature, prompt)
    cached = _cache_read(config.cache_dir, key)
    if cached is not None:
        return cached

    body = {
        "model": config.model,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": config.temperature,
        "max_tokens": config.max_tokens,
    }
    headers = {"Content-Type": "application/json"}
    api_key = os.environ.get(API_KEY_ENV)
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"

    post = (session or requests).post
    last_error: LlmError | None = None
    for _ in range(config.retries + 1):
        try:
            resp = post(
                config.endpoint, json=body, headers=headers, timeout=config.timeout
            )
        except requests.Timeout:
            last_error = Timeout("request timed out", key)
            continue
        except requests.RequestException as exc:
            last_error = Timeout(f"request failed: {exc}", key)
            continue
        if resp.status_code != 200:
            last_error = HttpError(resp.status_code, key)
            continue
        try:
            text = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError):
            raise MalformedResponse("missing choices[0].message.content", key)
        if not isinstance(text, str) or not text:
            raise MalformedResponse("empty response text", key)
        _cache_write(config.cache_dir, key, prompt, text, config.model)
        return text
    assert last_error is not None
    raise last_error


_EXEMPLAR_LINE = re.compile(r"^\d+\. (.*)$", re.MULTILINE)
_TOKEN = re.compile(r"[0-9a-z]+")


def _salient_tokens(prompt: str, limit: int = 6) -> list[str]:
    content = " ".join(_EXEMPLAR_LINE.findall(prompt)).lower()
    counts = Counter(t for t in _TOKEN.findall(content) if len(t) >= 3)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [t for t, _ in ranked[:limit]]


def stub_response(prompt: str) -> str:
    """Deterministic offline stand-in for the chat endpoint.

    Derives a stable answer from the prompt's exemplar content so cluster
    features remain informative without a network.
    """
    seed = int.from_bytes(
        hashlib.blake2b(prompt.encode("utf-8"), digest_size=8).digest(), "big"
    )
    tokens = _salient_tokens(prompt)
    topic = " ".join(tokens) if tokens else "general content"
    if "MBTI" in prompt:
        return MBTI_TYPES[seed % len(MBTI_TYPES)]
    if "category" in prompt and "following list" in prompt:
        return CATEGORIES[seed % len(CATEGORIES)]
    if "target audience" in prompt:
        return f"Audience interested in {topic}."
    if "summary" in prompt or "Summary" in prompt:
        return f"Summary: posts about {topic}."
    return f"Theme: {topic}."


class StubLlmClient:
    """In-process deterministic client; optionally overridden per prompt."""

    def __init__(self, mapping: dict[str, str] | None = None):
        self.mapping = dict(mapping or {})
        self.calls = 0

    def complete(self, prompt: str) -> str:
        self.calls += 1
        if prompt in self.mapping:
            return self.mapping[prompt]
        return stub_response(prompt)


class HttpLlmClient:
    """Chat-completions client with disk cache and optional stub fallback."""

    def __init__(self, config: LlmClientConfig, fallback=None):
        self.config = config
        self.fallback = fallback
        self.network_calls = 0
        self.cache_hits = 0

    def complete(self, prompt: str) -> str:
        key = prompt_hash(self.config.model, self.config.temperature, prompt)
        cached = _cache_read(self.config.cache_dir, key)
        if cached is not None:
            self.cache_hits += 1
            return cached
        self.network_calls += 1
        try:
            return query_llm(self.config, prompt)
        except LlmError:
            if self.fallback is None:
                raise
            return self.fallback.complete(prompt)


class HashingEmbedder:
    """Feature-hashing bag-of-tokens text embedder.

    Lowercases, splits on non-alphanumerics, hashes each token to one of
    ``dim`` buckets with a +/-1 sign hash, then L2-normalizes. Fully
    deterministic across runs and platforms.
    """

    def __init__(self, dim: int = 384):
        if dim < 1:
            raise SemAnchorError("embedder dim must be >= 1")
        self.dim = dim

    def embed(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise EmptyText("cannot embed empty text")
        tokens = _TOKEN.findall(text.lower())
        if not tokens:
            raise EmptyText("text has no alphanumeric tokens")
        v = np.zeros(self.dim, dtype=np.float64)
        for token in tokens:
            digest = hashlib.blake2b(token.encode("utf-8"), digest_size=9).digest()
            bucket = int.from_bytes(digest[:8], "big") % self.dim
            sign = 1.0 if digest[8] & 1 else -1.0
            v[bucket] += sign
        norm = float(np.linalg.norm(v))
        if norm == 0.0:
            v[0] = 1.0  # total sign cancellation; pin a unit fallback
            norm = 1.0
        return v / norm


class HttpEmbedder:
    """OpenAI-compatible /embeddings client for fidelity runs."""

    def __init__(self, endpoint: str, model: str, dim: int,
                 timeout: float = 30.0, cache_dir: str | Path | None = None):
        self.endpoint = endpoint
        self.model = model
        self.dim = dim
        self.timeout = timeout
        self.cache_dir = cache_dir

    def embed(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise EmptyText("cannot embed empty text")
        key = prompt_hash(self.model, 0.0, "embed:" + text)
        cached = _cache_read(self.cache_dir, key)
        if cached is not None:
            v = np.asarray(json.loads(cached), dtype=np.float64)
        else:
            resp = requests.post(
                self.endpoint,
                json={"model": self.model, "input": text},
                timeout=self.timeout,
            )
            if resp.status_code != 200:
                raise HttpError(resp.status_code, key)
            try:
                v = np.asarray(resp.json()["data"][0]["embedding"], dtype=np.float64)
            except (ValueError, KeyError, IndexError, TypeError):
                raise MalformedResponse("missing data[0].embedding", key)
            _cache_write(self.cache_dir, key, text, json.dumps(v.tolist()), self.model)
        if v.shape != (self.dim,):
            raise MalformedResponse(
                f"embedding width {v.shape} != expected ({self.dim},)", key
            )
        norm = float(np.linalg.norm(v))
        return v / norm if norm > 0 else v


def embed_text(embedder, text: str) -> np.ndarray:
    return embedder.embed(text)


@dataclass
class SemanticTable:
    """Per-cluster LLM descriptions and their embeddings, per modality."""

    embed_dim: int
    descriptions: dict[str, list[str]] = field(default_factory=dict)
    embeddings: dict[str, np.ndarray] = field(default_factory=dict)
    tasks: tuple[str, ...] = DEFAULT_TASKS


def fit_semantic_table(
    dataset: Dataset,
    models: dict[str, ClusterModel],
    labels_by_modality: dict[str, LabelVector],
    client,
    embedder,
    tasks=DEFAULT_TASKS,
    exemplars_per_cluster: int = 8,
) -> SemanticTable:
    """Describe every populated cluster through the LLM and embed the text.

    Task responses are concatenated in canonical task order to form one
    description per cluster; unpopulated clusters get the zero vector.
    """
    requested = [t for t in TASKS if t in set(tasks)]
    if not requested:
        raise SemAnchorError(f"no valid tasks among {tasks!r}")
    table = SemanticTable(embed_dim=embedder.dim, tasks=tuple(requested))
    for m in SEMANTIC_MODALITIES:
        if m not in models:
            continue
        model = models[m]
        labels = labels_by_modality[m]
        counts = np.bincount(labels.labels, minlength=model.k)
        descs: list[str] = []
        rows = np.zeros((model.k, embedder.dim), dtype=np.float64)
        for j in range(model.k):
            if counts[j] == 0:
                descs.append("")
                continue
            digest = build_cluster_digest(
                dataset, model, labels, j, R=exemplars_per_cluster
            )
            responses = [
                client.complete(render_prompt(PROMPT_TEMPLATES[t], digest))
                for t in requested
            ]
            description = "\n".join(responses)
            descs.append(description)
            rows[j] = embedder.embed(description)
        table.descriptions[m] = descs
        table.embeddings[m] = rows
    return table


@dataclass
class SemanticFeatureBlock:
    matrix: np.ndarray
    column_names: list[str] = field(default_factory=list)


def lookup_semantic_features(
    labels_by_modality: dict[str, LabelVector], table: SemanticTable
) -> SemanticFeatureBlock:
    """Row i = concat of its clusters' embeddings over text/video/audio."""
    present = [m for m in SEMANTIC_MODALITIES if m in labels_by_modality]
    if not present:
        raise SemAnchorError("no semantic-modality label vectors supplied")
    blocks = []
    names: list[str] = []
    for m in present:
        if m not in table.embeddings:
            raise SemAnchorError(f"modality {m!r} missing from semantic table")
        lab = labels_by_modality[m].labels
        blocks.append(table.embeddings[m][lab])
        names.extend(f"gen.{m}.{i}" for i in range(table.embed_dim))
    return SemanticFeatureBlock(matrix=np.hstack(blocks), column_names=names)


def save_semantic_table(table: SemanticTable, json_path: str | Path) -> None:
    json_path = Path(json_path)
    obj = {
        "embed_dim": table.embed_dim,
        "tasks": list(table.tasks),
        "descriptions": table.descriptions,
        "embedding_files": {},
    }
    for m, rows in table.embeddings.items():
        sidecar = json_path.with_suffix(f".{m}.amcf")
        write_embedding_matrix(EmbeddingMatrix(None, rows), sidecar)
        obj["embedding_files"][m] = sidecar.name
    json_path.write_text(json.dumps(obj, sort_keys=True), encoding="utf-8")


def load_semantic_table(json_path: str | Path) -> SemanticTable:
    json_path = Path(json_path)
    obj = json.loads(json_path.read_text(encoding="utf-8"))
    table = SemanticTable(embed_dim=int(obj["embed_dim"]), tasks=tuple(obj["tasks"]))
    table.descriptions = {m: list(d) for m, d in obj["descriptions"].items()}
    for m, name in obj["embedding_files"].items():
        table.embeddings[m] = np.asarray(
            read_embedding_matrix(json_path.parent / name).data, dtype=np.float64
        )
    return table
