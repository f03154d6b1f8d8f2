"""Deterministic encoder backends for text, video frames, and audio.

Without network access to a model hub, the text and vision encoders are
architecture-faithful but randomly initialized from a fixed seed (widths
match the real checkpoints: 1024 for the masked-LM encoder, 768 for the
vision transformer, 128 for audio). Pass a local checkpoint directory to
use actual pretrained weights for the text path.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch

TEXT_WIDTH = 1024
VIDEO_WIDTH = 768
AUDIO_WIDTH = 128

_VOCAB_SIZE = 30522
_CLS_ID = 101
_SEP_ID = 102
_MAX_TOKENS = 128

_IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
_IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


def _hash_token_id(token: str) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return 999 + int.from_bytes(digest, "big") % (_VOCAB_SIZE - 1000)


class TextEncoder:
    """CLS-vector text encoder (masked-LM architecture, width 1024)."""

    def __init__(self, seed: int = 0, pretrained: str | None = None):
        from transformers import BertConfig, BertModel

        self.pretrained = pretrained
        if pretrained:
            from transformers import AutoModel, AutoTokenizer

            self.tokenizer = AutoTokenizer.from_pretrained(pretrained)
            self.model = AutoModel.from_pretrained(pretrained)
        else:
            torch.manual_seed(seed)
            config = BertConfig(
                vocab_size=_VOCAB_SIZE,
                hidden_size=TEXT_WIDTH,
                num_hidden_layers=2,
                num_attention_heads=16,
                intermediate_size=2048,
            )
            self.tokenizer = None
            self.model = BertModel(config)
        self.model.eval()

    @property
    def width(self) -> int:
        return int(self.model.config.hidden_size)

    def _encode_ids(self, text: str) -> list[int]:
        tokens = text.lower().split()
        ids = [_hash_token_id(t) for t in tokens[: _MAX_TOKENS - 2]]
        return [_CLS_ID] + ids + [_SEP_ID]

    def encode(self, texts: list[str], batch_size: int = 16) -> np.ndarray:
        out = np.empty((len(texts), self.width), dtype=np.float32)
        for start in range(0, len(texts), batch_size):
            chunk = texts[start : start + batch_size]
            if self.tokenizer is not None:
                enc = self.tokenizer(
                    chunk, padding=True, truncation=True,
                    max_length=_MAX_TOKENS, return_tensors="pt",
                )
                ids, mask = enc["input_ids"], enc["attention_mask"]
            else:
                id_lists = [self._encode_ids(t) for t in chunk]
                width = max(len(i) for i in id_lists)
                ids = torch.zeros((len(chunk), width), dtype=torch.long)
                mask = torch.zeros((len(chunk), width), dtype=torch.long)
                for r, id_list in enumerate(id_lists):
                    ids[r, : len(id_list)] = torch.tensor(id_list)
                    mask[r, : len(id_list)] = 1
            with torch.no_grad():
                hidden = self.model(input_ids=ids, attention_mask=mask).last_hidden_state
            out[start : start + len(chunk)] = hidden[:, 0, :].numpy()
        return out


class FrameEncoder:
    """Vision-transformer frame encoder (width 768), classification head
    removed."""

    def __init__(self, seed: int = 0):
        import torchvision

        torch.manual_seed(seed)
        self.model = torchvision.models.vit_b_16(weights=None)
        self.model.heads = torch.nn.Identity()
        self.model.eval()
        self.width = VIDEO_WIDTH

    def encode(self, frames: np.ndarray, batch_size: int = 16) -> np.ndarray:
        """frames: (T, 224, 224, 3) RGB uint8 -> (T, 768)."""
        scaled = frames.astype(np.float32) / 255.0
        normed = (scaled - _IMAGENET_MEAN) / _IMAGENET_STD
        tensor = torch.from_numpy(normed.transpose(0, 3, 1, 2))
        chunks = []
        with torch.no_grad():
            for start in range(0, len(tensor), batch_size):
                chunks.append(self.model(tensor[start : start + batch_size]).numpy())
        return np.concatenate(chunks, axis=0)


class AudioEncoder:
    """Spectrogram-CNN audio embedder, 128-dimensional, time-averaged."""

    _WINDOW = 512
    _HOP = 256
    _BANDS = 64

    def __init__(self, seed: int = 0):
        torch.manual_seed(seed)
        self.net = torch.nn.Sequential(
            torch.nn.Conv2d(1, 32, kernel_size=3, stride=2, padding=1),
            torch.nn.ReLU(),
            torch.nn.Conv2d(32, 64, kernel_size=3, stride=2, padding=1),
            torch.nn.ReLU(),
            torch.nn.Conv2d(64, AUDIO_WIDTH, kernel_size=3, stride=2, padding=1),
            torch.nn.ReLU(),
        )
        self.net.eval()
        self.width = AUDIO_WIDTH

    def _spectrogram(self, signal: np.ndarray) -> np.ndarray:
        if len(signal) < self._WINDOW:
            signal = np.pad(signal, (0, self._WINDOW - len(signal)))
        window = np.hanning(self._WINDOW)
        n_frames = 1 + (len(signal) - self._WINDOW) // self._HOP
        spec = np.empty((self._WINDOW // 2 + 1, n_frames), dtype=np.float64)
        for t in range(n_frames):
            chunk = signal[t * self._HOP : t * self._HOP + self._WINDOW] * window
            spec[:, t] = np.abs(np.fft.rfft(chunk)) ** 2
        # pool linear bins into coarse bands, then log-compress
        bins = spec.shape[0]
        edges = np.linspace(0, bins, self._BANDS + 1).astype(int)
        banded = np.stack(
            [spec[edges[b] : max(edges[b + 1], edges[b] + 1)].mean(axis=0)
             for b in range(self._BANDS)]
        )
        return np.log1p(banded)

    def encode(self, signal: np.ndarray) -> np.ndarray:
        """Mono float signal in [-1, 1] -> (128,) embedding."""
        spec = self._spectrogram(np.asarray(signal, dtype=np.float64))
        tensor = torch.from_numpy(spec.astype(np.float32))[None, None]
        with torch.no_grad():
            features = self.net(tensor)[0]  # (128, bands', time')
        return features.mean(dim=(1, 2)).numpy()
