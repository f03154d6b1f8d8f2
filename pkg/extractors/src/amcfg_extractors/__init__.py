"""Encoder extraction scripts emitting AMCF matrices and metadata JSONL."""

__version__ = "0.1.0"

from .job import ExtractionJob, discover_posts  # noqa: F401
from .extract import (  # noqa: F401
    extract_audio,
    extract_post_semantics,
    extract_text,
    extract_video,
    run_job,
)
