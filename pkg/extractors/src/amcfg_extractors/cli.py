"""CLI for the extraction passes: amcfg-extract --input DIR --out DIR."""

from __future__ import annotations

import argparse
import sys

from .job import ExtractionJob, JobError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="amcfg-extract",
        description="Run pretrained encoders over raw posts and emit AMCF "
        "matrices plus metadata JSONL",
    )
    parser.add_argument("--input", required=True, help="directory of videos + JSON sidecars")
    parser.add_argument("--out", required=True, help="output dataset directory")
    parser.add_argument("--encoders", default="text,video,audio",
                        help="comma-separated subset of text,video,audio (default: all)")
    parser.add_argument("--frames", type=int, default=256,
                        help="frames sampled per video (default: 256)")
    parser.add_argument("--batch-size", type=int, default=16, help="default: 16")
    parser.add_argument("--seed", type=int, default=0, help="default: 0")
    parser.add_argument("--target-field", default="popularity", help="default: popularity")
    parser.add_argument("--text-model", default=None,
                        help="local pretrained checkpoint for the text encoder")
    parser.add_argument("--semantics", action="store_true",
                        help="also run the post-wise LLM prompts")
    parser.add_argument("--llm", choices=["stub", "http"], default="stub",
                        help="LLM client for --semantics (default: stub)")
    parser.add_argument("--llm-endpoint",
                        default="http://localhost:8080/v1/chat/completions")
    parser.add_argument("--llm-model", default="videollama3")
    parser.add_argument("--llm-cache", default=None, help="response cache directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        job = ExtractionJob(
            input_dir=args.input,
            output_dir=args.out,
            encoders=tuple(e.strip() for e in args.encoders.split(",") if e.strip()),
            frame_count=args.frames,
            batch_size=args.batch_size,
            seed=args.seed,
            target_field=args.target_field,
            text_model=args.text_model,
            llm=args.llm,
            llm_endpoint=args.llm_endpoint,
            llm_model=args.llm_model,
            cache_dir=args.llm_cache,
        )
    except JobError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    from .extract import run_job

    try:
        manifest = run_job(job, with_semantics=args.semantics)
    except Exception as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(manifest)
    return 0


def console_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
