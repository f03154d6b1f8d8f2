import json
import wave

import numpy as np
import pytest

from amcfg_extractors.amcf import AmcfError, read_matrix, write_matrix
from amcfg_extractors.encoders import AudioEncoder, FrameEncoder, TextEncoder
from amcfg_extractors.extract import (
    extract_audio,
    extract_text,
    extract_video,
    run_job,
    sample_frame_indices,
)
from amcfg_extractors.job import ExtractionJob, JobError, discover_posts
from amcfg_extractors.llm import CATEGORIES, StubClient, coerce_category, post_semantics


def write_video(path, n_frames=4, size=24, shade=None):
    import cv2

    writer = cv2.VideoWriter(
        str(path), cv2.VideoWriter_fourcc(*"MJPG"), 5, (size, size)
    )
    assert writer.isOpened()
    rng = np.random.default_rng(hash(path.name) % 2**32)
    for i in range(n_frames):
        if shade is not None:
            frame = np.full((size, size, 3), shade, np.uint8)
        else:
            frame = rng.integers(0, 255, (size, size, 3), dtype=np.uint8)
        writer.write(frame)
    writer.release()


def write_wav(path, seconds=0.3, freq=440.0, rate=8000):
    t = np.arange(int(seconds * rate)) / rate
    signal = (np.sin(2 * np.pi * freq * t) * 0.4 * 32767).astype(np.int16)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(rate)
        fh.writeframes(signal.tobytes())


@pytest.fixture(scope="module")
def fixture_dir(tmp_path_factory):
    """Three raw posts: video + wav + sidecar each."""
    root = tmp_path_factory.mktemp("raw")
    specs = [
        ("a_post", "u1", 5.5, "dancing in the rain", 440.0),
        ("b_post", "u2", 6.1, "cooking pasta tutorial", 880.0),
        ("c_post", "u1", 4.9, "funny cat compilation", 220.0),
    ]
    for stem, user, pop, caption, freq in specs:
        write_video(root / f"{stem}.avi")
        write_wav(root / f"{stem}.wav", freq=freq)
        (root / f"{stem}.json").write_text(json.dumps({
            "post_id": stem,
            "user_id": user,
            "popularity": pop,
            "caption": caption,
            "description": f"a clip by {user}",
            "user_meta": {"followers": 10},
            "post_meta": {"hour": 12},
        }))
    return root


@pytest.fixture(scope="module")
def encoders():
    return {
        "text": TextEncoder(seed=0),
        "video": FrameEncoder(seed=0),
        "audio": AudioEncoder(seed=0),
    }


def make_job(fixture_dir, tmp_path, **overrides):
    defaults = dict(input_dir=fixture_dir, output_dir=tmp_path / "out",
                    frame_count=4, batch_size=8, seed=0)
    defaults.update(overrides)
    return ExtractionJob(**defaults)


class TestAmcfFormat:
    def test_roundtrip(self, tmp_path):
        data = np.random.default_rng(0).standard_normal((3, 5)).astype(np.float32)
        write_matrix(data, tmp_path / "x.amcf")
        back = read_matrix(tmp_path / "x.amcf")
        assert back.tobytes() == data.tobytes()

    def test_header_layout(self, tmp_path):
        write_matrix(np.zeros((1, 1), np.float32), tmp_path / "x.amcf")
        raw = (tmp_path / "x.amcf").read_bytes()
        assert raw[:4] == b"AMCF" and len(raw) == 20

    def test_rejects_empty(self, tmp_path):
        with pytest.raises(AmcfError):
            write_matrix(np.zeros((0, 1), np.float32), tmp_path / "x.amcf")


class TestDiscovery:
    def test_posts_found_in_sorted_order(self, fixture_dir):
        posts = discover_posts(fixture_dir)
        assert [p.post_id for p in posts] == ["a_post", "b_post", "c_post"]
        assert all(p.video_path is not None for p in posts)
        assert all(p.audio_path is not None for p in posts)

    def test_empty_dir_raises(self, tmp_path):
        with pytest.raises(JobError):
            discover_posts(tmp_path)

    def test_output_must_differ_from_input(self, fixture_dir):
        with pytest.raises(JobError):
            ExtractionJob(input_dir=fixture_dir, output_dir=fixture_dir)


class TestTextExtraction:
    def test_width_is_1024(self, fixture_dir, tmp_path, encoders):
        job = make_job(fixture_dir, tmp_path)
        posts = discover_posts(fixture_dir)
        matrix = extract_text(job, posts, encoder=encoders["text"])
        assert matrix.shape == (3, 1024)

    def test_identical_text_identical_rows(self, fixture_dir, tmp_path, encoders):
        job = make_job(fixture_dir, tmp_path)
        posts = discover_posts(fixture_dir)
        posts[1].sidecar = dict(posts[0].sidecar)
        matrix = extract_text(job, posts, encoder=encoders["text"])
        np.testing.assert_array_equal(matrix[0], matrix[1])

    def test_missing_text_warns_and_continues(self, fixture_dir, tmp_path, encoders):
        job = make_job(fixture_dir, tmp_path)
        posts = discover_posts(fixture_dir)
        posts[2].sidecar = {"post_id": "c_post"}
        with pytest.warns(UserWarning, match="no text fields"):
            matrix = extract_text(job, posts, encoder=encoders["text"])
        assert np.isfinite(matrix).all()


class TestVideoExtraction:
    def test_frame_sampling_indices(self):
        np.testing.assert_array_equal(sample_frame_indices(8, 4), [0, 2, 4, 6])
        np.testing.assert_array_equal(sample_frame_indices(3, 6), [0, 1, 2, 0, 1, 2])

    def test_short_video_warns_cyclic(self, fixture_dir, tmp_path, encoders):
        job = make_job(fixture_dir, tmp_path, frame_count=8)
        posts = discover_posts(fixture_dir)[:1]
        with pytest.warns(UserWarning, match="repeating cyclically"):
            matrix = extract_video(job, posts, encoder=encoders["video"])
        assert matrix.shape == (1, 768)

    def test_constant_video_pool_equals_single_frame(self, tmp_path, encoders):
        raw = tmp_path / "raw"
        raw.mkdir()
        write_video(raw / "p.avi", n_frames=1, shade=128)
        write_video(raw / "q.avi", n_frames=4, shade=128)
        for stem in ("p", "q"):
            (raw / f"{stem}.json").write_text(json.dumps(
                {"post_id": stem, "user_id": "u", "popularity": 1.0, "caption": "x"}
            ))
        job = make_job(raw, tmp_path, frame_count=4)
        posts = discover_posts(raw)
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            matrix = extract_video(job, posts, encoder=encoders["video"])
        # mean over identical frames equals the single-frame embedding
        np.testing.assert_allclose(matrix[0], matrix[1], atol=1e-5)


class TestAudioExtraction:
    def test_width_is_128(self, fixture_dir, tmp_path, encoders):
        job = make_job(fixture_dir, tmp_path)
        posts = discover_posts(fixture_dir)
        matrix = extract_audio(job, posts, encoder=encoders["audio"])
        assert matrix.shape == (3, 128)

    def test_silent_clip_deterministic_and_finite(self, encoders):
        silence = np.zeros(4000)
        a = encoders["audio"].encode(silence)
        b = encoders["audio"].encode(silence)
        np.testing.assert_array_equal(a, b)
        assert np.isfinite(a).all()

    def test_missing_audio_falls_back_to_silence(self, fixture_dir, tmp_path, encoders):
        job = make_job(fixture_dir, tmp_path)
        posts = discover_posts(fixture_dir)
        posts[0].audio_path = None
        with pytest.warns(UserWarning, match="no audio track"):
            matrix = extract_audio(job, posts, encoder=encoders["audio"])
        assert np.isfinite(matrix[0]).all()


class TestPostSemantics:
    def test_category_coercion(self):
        assert coerce_category("This video is Beauty & Fashion.") == ("Beauty & Fashion", False)
        assert coerce_category("clearly lip sync content") == ("Lip Sync", False)
        assert coerce_category("some nonsense answer") == ("Others", True)

    def test_stub_fields_deterministic(self):
        fields_a = post_semantics(StubClient(), "cats and dogs")
        fields_b = post_semantics(StubClient(), "cats and dogs")
        assert fields_a == fields_b
        assert fields_a["llm_category"] in CATEGORIES
        assert fields_a["llm_description"]

    def test_http_cache_rerun_zero_calls(self, tmp_path):
        import threading
        from http.server import BaseHTTPRequestHandler, HTTPServer

        from amcfg_extractors.llm import HttpClient

        class Handler(BaseHTTPRequestHandler):
            hits = 0

            def do_POST(self):
                type(self).hits += 1
                length = int(self.headers.get("Content-Length", 0))
                self.rfile.read(length)
                payload = json.dumps(
                    {"choices": [{"message": {"content": "This video is Music."}}]}
                ).encode()
                self.send_response(200)
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

            def log_message(self, *args):
                pass

        server = HTTPServer(("127.0.0.1", 0), Handler)
        threading.Thread(target=server.serve_forever, daemon=True).start()
        url = f"http://127.0.0.1:{server.server_port}/v1/chat/completions"
        try:
            client = HttpClient(url, "m", cache_dir=tmp_path / "cache")
            post_semantics(client, "context one")
            assert Handler.hits == 3
            client2 = HttpClient(url, "m", cache_dir=tmp_path / "cache")
            post_semantics(client2, "context one")
            assert Handler.hits == 3  # served entirely from cache
        finally:
            server.shutdown()


@pytest.fixture(scope="module")
def emitted(fixture_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("emitted")
    job = ExtractionJob(input_dir=fixture_dir, output_dir=out,
                        frame_count=4, batch_size=8, seed=0)
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        manifest_path = run_job(job, with_semantics=True)
    return manifest_path


class TestEndToEnd:
    def test_outputs_pass_pipeline_validation(self, emitted):
        # loading through the pipeline's public loader is the validation
        from amcfg import Manifest, load_dataset

        dataset = load_dataset(Manifest.load(emitted))
        assert dataset.n == 3
        assert set(dataset.modality_names()) == {"text", "video", "audio"}

    def test_rows_aligned_across_modalities(self, emitted):
        from amcfg import Manifest, load_dataset

        dataset = load_dataset(Manifest.load(emitted))
        assert dataset.post_ids == ["a_post", "b_post", "c_post"]
        for m in ("text", "video", "audio"):
            assert dataset.matrices[m].n_rows == 3

    def test_audio_width_exactly_128(self, emitted):
        from amcfg import Manifest, load_dataset

        dataset = load_dataset(Manifest.load(emitted))
        assert dataset.matrices["audio"].n_cols == 128
        assert dataset.matrices["text"].n_cols == 1024
        assert dataset.matrices["video"].n_cols == 768

    def test_semantics_written_to_post_meta(self, emitted):
        from amcfg import Manifest, load_dataset

        dataset = load_dataset(Manifest.load(emitted))
        for rec in dataset.records:
            assert rec.post_meta["llm_category"] in CATEGORIES
            assert rec.post_meta["llm_description"]

    def test_cli_runs(self, fixture_dir, tmp_path):
        import warnings

        from amcfg_extractors.cli import main

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            code = main([
                "--input", str(fixture_dir), "--out", str(tmp_path / "cli_out"),
                "--frames", "2", "--encoders", "audio", "--seed", "1",
            ])
        assert code == 0
        matrix = read_matrix(tmp_path / "cli_out" / "audio.amcf")
        assert matrix.shape == (3, 128)
