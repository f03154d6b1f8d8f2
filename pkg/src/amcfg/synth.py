"""Synthetic drift-benchmark generator.

Posts are drawn from latent topics: every topic has a base popularity and
one embedding centroid per modality; every user has a quality offset. The
test split shifts topic base popularities and jitters topic centroids in
proportion to ``drift``, so surface statistics move while the cluster
structure stays recoverable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset_io import (
    Dataset,
    EmbeddingMatrix,
    Manifest,
    MetadataSchema,
    PostRecord,
    encode_metadata,
    save_manifest,
    write_embedding_matrix,
    write_metadata,
)


class SynthError(Exception):
    pass


DEFAULT_EMBED_DIMS = {"text": 16, "video": 16, "audio": 8}


@dataclass
class SynthSpec:
    n_users: int = 50
    posts_per_user: int = 20
    n_topics: int = 20
    embed_dims: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_EMBED_DIMS))
    pop_mean: float = 6.0
    topic_spread: float = 1.8
    user_spread: float = 0.5
    noise_scale: float = 0.2
    emb_noise: float = 0.25
    drift: float = 0.4
    drift_shift_scale: float = 0.5
    drift_jitter_scale: float = 1.5
    seed: int = 7

    def validate(self) -> None:
        if self.n_users < 1 or self.posts_per_user < 1:
            raise SynthError("n_users and posts_per_user must be >= 1")
        if self.n_topics < 1:
            raise SynthError("n_topics must be >= 1")
        if not 0.0 <= self.drift <= 1.0:
            raise SynthError(f"drift must be in [0, 1], got {self.drift}")
        if self.noise_scale < 0 or self.emb_noise < 0:
            raise SynthError("noise scales must be >= 0")
        for m, d in self.embed_dims.items():
            if m not in ("text", "video", "audio") or d < 1:
                raise SynthError(f"bad embed_dims entry {m!r}: {d}")


@dataclass
class SynthTruth:
    """Generator ground truth, for oracle tests and diagnostics."""

    topic_base: np.ndarray
    topic_base_test: np.ndarray
    user_offset: dict[str, float]
    centroids: dict[str, np.ndarray]
    centroids_test: dict[str, np.ndarray]
    topics_train: np.ndarray
    topics_test: np.ndarray


METADATA_SCHEMA = {
    "user": MetadataSchema(
        numeric=["follower_score", "account_age"], categorical=["region"]
    ),
    "post": MetadataSchema(numeric=["hour"], categorical=["device"]),
}

_REGIONS = ("na", "eu", "asia", "latam")
_DEVICES = ("phone", "tablet", "desktop")

_CAPTION_WORDS_PER_TOPIC = 6


def _topic_vocab(topic: int) -> list[str]:
    return [f"topic{topic}word{i}" for i in range(_CAPTION_WORDS_PER_TOPIC)]


def _make_split(
    spec: SynthSpec,
    rng: np.random.Generator,
    prefix: str,
    user_ids: list[str],
    user_offset: dict[str, float],
    topic_base: np.ndarray,
    centroids: dict[str, np.ndarray],
) -> tuple[Dataset, np.ndarray]:
    n = spec.n_users * spec.posts_per_user
    topics = rng.integers(0, spec.n_topics, size=n)
    records: list[PostRecord] = []
    matrices = {
        m: np.empty((n, d), dtype=np.float64) for m, d in spec.embed_dims.items()
    }
    y = (
        topic_base[topics]
        + np.array([user_offset[user_ids[i // spec.posts_per_user]] for i in range(n)])
        + spec.noise_scale * rng.standard_normal(n)
    )
    for m, dim in spec.embed_dims.items():
        matrices[m][:] = centroids[m][topics] + spec.emb_noise * rng.standard_normal(
            (n, dim)
        )
    for i in range(n):
        uid = user_ids[i // spec.posts_per_user]
        t = int(topics[i])
        vocab = _topic_vocab(t)
        words = [vocab[int(w)] for w in rng.integers(0, len(vocab), size=3)]
        records.append(
            PostRecord(
                post_id=f"{prefix}{i:06d}",
                user_id=uid,
                popularity=float(y[i]),
                user_meta={
                    "follower_score": round(user_offset[uid] * 3.0, 6),
                    "account_age": round(float(rng.uniform(0.5, 8.0)), 6),
                    "region": _REGIONS[int(rng.integers(len(_REGIONS)))],
                },
                post_meta={
                    "caption": " ".join(words) + " clip",
                    "hour": int(rng.integers(0, 24)),
                    "device": _DEVICES[int(rng.integers(len(_DEVICES)))],
                },
            )
        )
    emb = {
        m: EmbeddingMatrix(m, matrices[m].astype(np.float32))
        for m in spec.embed_dims
    }
    dataset = Dataset(records=records, matrices=emb, metadata_schema=dict(METADATA_SCHEMA))
    for side in ("user", "post"):
        dataset.matrices[side] = encode_metadata(records, side, METADATA_SCHEMA[side])
    return dataset, topics


def generate_synthetic(
    spec: SynthSpec, return_truth: bool = False
) -> tuple[Dataset, Dataset] | tuple[Dataset, Dataset, SynthTruth]:
    """Seeded train/test pair; the test split carries the drift."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)

    topic_base = spec.pop_mean + spec.topic_spread * rng.standard_normal(spec.n_topics)
    user_ids = [f"u{i:04d}" for i in range(spec.n_users)]
    user_offset = {
        u: float(spec.user_spread * rng.standard_normal()) for u in user_ids
    }
    centroids = {
        m: rng.standard_normal((spec.n_topics, d))
        for m, d in spec.embed_dims.items()
    }

    topic_base_test = topic_base + spec.drift * spec.drift_shift_scale * rng.standard_normal(
        spec.n_topics
    )
    centroids_test = {
        m: c + spec.drift * spec.drift_jitter_scale * rng.standard_normal(c.shape)
        for m, c in centroids.items()
    }

    train, topics_train = _make_split(
        spec, rng, "p", user_ids, user_offset, topic_base, centroids
    )
    test, topics_test = _make_split(
        spec, rng, "q", user_ids, user_offset, topic_base_test, centroids_test
    )
    if not return_truth:
        return train, test
    truth = SynthTruth(
        topic_base=topic_base,
        topic_base_test=topic_base_test,
        user_offset=user_offset,
        centroids=centroids,
        centroids_test=centroids_test,
        topics_train=topics_train,
        topics_test=topics_test,
    )
    return train, test, truth


def write_split(dataset: Dataset, directory: str | Path, target_field: str = "popularity") -> Path:
    """Write one split (metadata JSONL + AMCF matrices + manifest)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta_path = directory / "metadata.jsonl"
    write_metadata(dataset.records, meta_path, target_field)
    modalities = {}
    for m in ("text", "video", "audio"):
        if m in dataset.matrices:
            path = directory / f"{m}.amcf"
            write_embedding_matrix(dataset.matrices[m], path)
            modalities[m] = path
    manifest = Manifest(
        metadata_path=meta_path,
        target_field=target_field,
        modalities=modalities,
        metadata_schema=dataset.metadata_schema,
    )
    manifest_path = directory / "manifest.json"
    save_manifest(manifest, manifest_path)
    return manifest_path
