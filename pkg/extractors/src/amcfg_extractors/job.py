"""Extraction job description and raw-post discovery."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

VIDEO_SUFFIXES = (".mp4", ".avi", ".mov", ".mkv", ".webm")


class JobError(Exception):
    pass


@dataclass
class RawPost:
    post_id: str
    sidecar: dict
    video_path: Path | None
    audio_path: Path | None


@dataclass
class ExtractionJob:
    input_dir: Path
    output_dir: Path
    encoders: tuple[str, ...] = ("text", "video", "audio")
    frame_count: int = 256
    batch_size: int = 16
    seed: int = 0
    target_field: str = "popularity"
    text_model: str | None = None  # local pretrained checkpoint, optional
    llm: str = "stub"  # stub | http
    llm_endpoint: str = "http://localhost:8080/v1/chat/completions"
    llm_model: str = "videollama3"
    cache_dir: Path | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_dir = Path(self.input_dir)
        self.output_dir = Path(self.output_dir)
        if self.frame_count < 1:
            raise JobError("frame_count must be >= 1")
        if self.input_dir.resolve() == self.output_dir.resolve():
            raise JobError("output directory must differ from input directory")
        bad = [e for e in self.encoders if e not in ("text", "video", "audio")]
        if bad:
            raise JobError(f"unknown encoders {bad}")


def discover_posts(input_dir: str | Path) -> list[RawPost]:
    """One post per JSON sidecar, ordered by filename.

    The video/audio files share the sidecar's stem (<stem>.mp4/.avi/...,
    <stem>.wav).
    """
    input_dir = Path(input_dir)
    posts = []
    for sidecar_path in sorted(input_dir.glob("*.json")):
        sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
        stem = sidecar_path.stem
        video = next(
            (p for s in VIDEO_SUFFIXES if (p := sidecar_path.with_suffix(s)).exists()),
            None,
        )
        audio = sidecar_path.with_suffix(".wav")
        posts.append(
            RawPost(
                post_id=str(sidecar.get("post_id", stem)),
                sidecar=sidecar,
                video_path=video,
                audio_path=audio if audio.exists() else None,
            )
        )
    if not posts:
        raise JobError(f"no JSON sidecars found in {input_dir}")
    return posts
