"""Post-wise semantic prompts against an OpenAI-compatible endpoint.

Three prompts per post (description, category, audience); responses are
cached on disk by prompt hash, and category answers are coerced onto the
fixed 21-item list (off-list answers map to "Others" with a warning).
"""

from __future__ import annotations

import hashlib
import json
import os
import time
import warnings
from pathlib import Path

import requests

CATEGORIES = (
    "Dance", "Comedy", "Lip Sync", "Tutorial", "Beauty & Fashion", "Fitness",
    "Food & Drink", "Pets & Animals", "Vlogging", "Challenges", "Memes",
    "Technology", "Travel", "Motivation & Inspiration", "Art & Creativity",
    "Sports", "Music", "Social Issues", "Unboxing", "Pranks", "Others",
)

DESCRIPTION_PROMPT = "Provide a short description for this video."
CATEGORY_PROMPT = (
    "Based on the content of this TikTok video, determine its category from "
    "the following list: " + ", ".join(CATEGORIES[:-1]) + ", and "
    + CATEGORIES[-1] + "."
)
AUDIENCE_PROMPT = (
    "Based on the content, style, and context of the video, identify the "
    "most likely target audience by describing: age group(s) that would be "
    "interested; interests or hobbies relevant to the video; geographic or "
    "cultural background if identifiable; reasons or clues from the video "
    "that support your audience inference. Please provide your answer as "
    "brief bullet points."
)

API_KEY_ENV = "AMCFG_LLM_API_KEY"


class LlmError(Exception):
    pass


def _hash(model: str, prompt: str) -> str:
    h = hashlib.blake2b(digest_size=8)
    h.update(model.encode("utf-8"))
    h.update(prompt.encode("utf-8"))
    return h.hexdigest()


class StubClient:
    """Offline deterministic stand-in; derives answers from the prompt."""

    def __init__(self):
        self.calls = 0

    def complete(self, prompt: str) -> str:
        self.calls += 1
        seed = int.from_bytes(
            hashlib.blake2b(prompt.encode("utf-8"), digest_size=8).digest(), "big"
        )
        context = prompt.splitlines()[-1] if "\n" in prompt else prompt
        words = [w for w in context.lower().split() if w.isalnum()][:5]
        topic = " ".join(words) or "everyday moments"
        if "following list" in prompt:
            return f"This video is {CATEGORIES[seed % len(CATEGORIES)]}."
        if "target audience" in prompt:
            return f"- Viewers interested in {topic}."
        return f"A short clip about {topic}."


class HttpClient:
    """Chat-completions client with on-disk response cache."""

    def __init__(self, endpoint: str, model: str, cache_dir: str | Path | None,
                 timeout: float = 30.0, retries: int = 2):
        self.endpoint = endpoint
        self.model = model
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.timeout = timeout
        self.retries = retries
        self.calls = 0

    def _cache_path(self, key: str) -> Path | None:
        return self.cache_dir / f"{key}.json" if self.cache_dir else None

    def complete(self, prompt: str) -> str:
        key = _hash(self.model, prompt)
        path = self._cache_path(key)
        if path is not None and path.exists():
            return json.loads(path.read_text(encoding="utf-8"))["response"]
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(API_KEY_ENV)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0.0,
        }
        last = None
        for _ in range(self.retries + 1):
            self.calls += 1
            try:
                resp = requests.post(self.endpoint, json=body, headers=headers,
                                     timeout=self.timeout)
            except requests.RequestException as exc:
                last = LlmError(f"request failed: {exc} (prompt {key})")
                continue
            if resp.status_code != 200:
                last = LlmError(f"HTTP {resp.status_code} (prompt {key})")
                continue
            try:
                text = resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError):
                raise LlmError(f"malformed response (prompt {key})")
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                tmp = path.with_suffix(".tmp")
                tmp.write_text(json.dumps({
                    "prompt": prompt, "response": text,
                    "model": self.model, "timestamp": time.time(),
                }), encoding="utf-8")
                tmp.replace(path)
            return text
        raise last if last else LlmError(f"no attempts made (prompt {key})")


def coerce_category(response: str) -> tuple[str, bool]:
    """Map a free-text category answer onto the fixed list.

    Returns (category, off_list). Longest match wins so "Lip Sync" is not
    shadowed by substring hits.
    """
    lowered = response.lower()
    hits = [c for c in CATEGORIES if c.lower() in lowered]
    if hits:
        return max(hits, key=len), False
    return "Others", True


def post_semantics(client, context: str) -> dict[str, str]:
    """Run the three post-wise prompts; returns llm_* metadata fields."""
    def ask(prompt: str) -> str:
        return client.complete(prompt + "\n\nVideo context: " + context)

    description = ask(DESCRIPTION_PROMPT)
    category_raw = ask(CATEGORY_PROMPT)
    category, off_list = coerce_category(category_raw)
    if off_list:
        warnings.warn(f"off-list category answer {category_raw!r}; using 'Others'")
    audience = ask(AUDIENCE_PROMPT)
    return {
        "llm_description": description,
        "llm_category": category,
        "llm_audience": audience,
    }
