"""Extraction passes: text/video/audio matrices plus post-wise semantics.

All passes iterate posts in the same discovery order, so the emitted
matrices are row-aligned with the metadata JSONL.
"""

from __future__ import annotations

import json
import warnings
from pathlib import Path

import numpy as np

from .amcf import write_matrix
from .encoders import AudioEncoder, FrameEncoder, TextEncoder
from .job import ExtractionJob, RawPost, discover_posts
from .llm import HttpClient, StubClient, post_semantics

_TEXT_FIELDS = ("caption", "description", "content")
_LLM_FIELDS = ("llm_description", "llm_category", "llm_audience")


def post_text(post: RawPost) -> str:
    """caption + description + post content, including any LLM-written
    semantic fields already present in the sidecar."""
    parts = [
        str(post.sidecar[f])
        for f in _TEXT_FIELDS + _LLM_FIELDS
        if isinstance(post.sidecar.get(f), str) and post.sidecar[f].strip()
    ]
    return " ".join(parts)


def extract_text(job: ExtractionJob, posts: list[RawPost],
                 encoder: TextEncoder | None = None) -> np.ndarray:
    encoder = encoder or TextEncoder(seed=job.seed, pretrained=job.text_model)
    texts = []
    missing = 0
    for post in posts:
        text = post_text(post)
        if not text:
            missing += 1
            text = ""
        texts.append(text if text else "(no text)")
    if missing:
        warnings.warn(f"{missing} posts had no text fields; used empty fallback")
    return encoder.encode(texts, batch_size=job.batch_size)


def _read_frames(path: Path) -> list[np.ndarray]:
    import cv2

    cap = cv2.VideoCapture(str(path))
    frames = []
    while True:
        ok, frame = cap.read()
        if not ok:
            break
        rgb = cv2.cvtColor(frame, cv2.COLOR_BGR2RGB)
        frames.append(cv2.resize(rgb, (224, 224), interpolation=cv2.INTER_AREA))
    cap.release()
    return frames


def sample_frame_indices(total: int, count: int) -> np.ndarray:
    """Uniform sampling; videos shorter than ``count`` repeat cyclically."""
    if total >= count:
        return np.floor(np.linspace(0, total, count, endpoint=False)).astype(int)
    return np.arange(count) % total


def extract_video(job: ExtractionJob, posts: list[RawPost],
                  encoder: FrameEncoder | None = None) -> np.ndarray:
    encoder = encoder or FrameEncoder(seed=job.seed)
    out = np.empty((len(posts), encoder.width), dtype=np.float32)
    for i, post in enumerate(posts):
        if post.video_path is None:
            warnings.warn(f"post {post.post_id} has no video file; zero vector")
            out[i] = 0.0
            continue
        frames = _read_frames(post.video_path)
        if not frames:
            warnings.warn(f"post {post.post_id}: no decodable frames; zero vector")
            out[i] = 0.0
            continue
        if len(frames) < job.frame_count:
            warnings.warn(
                f"post {post.post_id}: {len(frames)} frames < T={job.frame_count}; "
                f"repeating cyclically"
            )
        idx = sample_frame_indices(len(frames), job.frame_count)
        batch = np.stack([frames[j] for j in idx])
        out[i] = encoder.encode(batch, batch_size=job.batch_size).mean(axis=0)
    return out


def _read_wav(path: Path) -> np.ndarray:
    from scipy.io import wavfile

    _, data = wavfile.read(path)
    if data.ndim == 2:
        data = data.mean(axis=1)
    if np.issubdtype(data.dtype, np.integer):
        data = data.astype(np.float64) / np.iinfo(data.dtype).max
    return np.asarray(data, dtype=np.float64)


def extract_audio(job: ExtractionJob, posts: list[RawPost],
                  encoder: AudioEncoder | None = None) -> np.ndarray:
    encoder = encoder or AudioEncoder(seed=job.seed)
    out = np.empty((len(posts), encoder.width), dtype=np.float32)
    silence = np.zeros(encoder._WINDOW)
    for i, post in enumerate(posts):
        if post.audio_path is None:
            warnings.warn(f"post {post.post_id} has no audio track; encoding silence")
            signal = silence
        else:
            signal = _read_wav(post.audio_path)
        out[i] = encoder.encode(signal)
    return out


def extract_post_semantics(job: ExtractionJob, posts: list[RawPost]) -> list[dict]:
    """Run the description/category/audience prompts for every post and
    return the llm_* field dicts, aligned with ``posts``."""
    if job.llm == "stub":
        client = StubClient()
    else:
        client = HttpClient(job.llm_endpoint, job.llm_model, job.cache_dir)
    fields = []
    for post in posts:
        context_parts = [
            str(post.sidecar[f]) for f in _TEXT_FIELDS
            if isinstance(post.sidecar.get(f), str)
        ]
        context = " ".join(context_parts) or post.post_id
        fields.append(post_semantics(client, context))
    return fields


def write_metadata_jsonl(job: ExtractionJob, posts: list[RawPost],
                         semantics: list[dict] | None, path: Path) -> None:
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for i, post in enumerate(posts):
            sidecar = post.sidecar
            target = sidecar.get(job.target_field)
            if not isinstance(target, (int, float)) or isinstance(target, bool):
                warnings.warn(
                    f"post {post.post_id} missing numeric {job.target_field}; using 0.0"
                )
                target = 0.0
            post_meta = {
                f: sidecar[f] for f in _TEXT_FIELDS if f in sidecar
            }
            post_meta.update(sidecar.get("post_meta", {}))
            if semantics is not None:
                post_meta.update(semantics[i])
            fh.write(json.dumps({
                "post_id": post.post_id,
                "user_id": str(sidecar.get("user_id", "unknown")),
                job.target_field: float(target),
                "user_meta": sidecar.get("user_meta", {}),
                "post_meta": post_meta,
            }, sort_keys=True) + "\n")
    tmp.replace(path)


def run_job(job: ExtractionJob, with_semantics: bool = False) -> Path:
    """Run every configured pass and emit a loadable dataset directory.

    Returns the manifest path. Row order is identical across the metadata
    file and every matrix.
    """
    posts = discover_posts(job.input_dir)
    job.output_dir.mkdir(parents=True, exist_ok=True)

    semantics = extract_post_semantics(job, posts) if with_semantics else None
    if semantics is not None:
        # fold the generated text into the sidecars so extract_text sees it
        for post, fields in zip(posts, semantics):
            post.sidecar.update(fields)

    modalities: dict[str, str] = {}
    if "text" in job.encoders:
        write_matrix(extract_text(job, posts), job.output_dir / "text.amcf")
        modalities["text"] = "text.amcf"
    if "video" in job.encoders:
        write_matrix(extract_video(job, posts), job.output_dir / "video.amcf")
        modalities["video"] = "video.amcf"
    if "audio" in job.encoders:
        write_matrix(extract_audio(job, posts), job.output_dir / "audio.amcf")
        modalities["audio"] = "audio.amcf"

    write_metadata_jsonl(job, posts, semantics, job.output_dir / "metadata.jsonl")
    manifest_path = job.output_dir / "manifest.json"
    tmp = manifest_path.with_suffix(".tmp")
    tmp.write_text(json.dumps({
        "metadata_path": "metadata.jsonl",
        "target_field": job.target_field,
        "modalities": modalities,
        "metadata_schema": {},
    }, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(manifest_path)
    return manifest_path
