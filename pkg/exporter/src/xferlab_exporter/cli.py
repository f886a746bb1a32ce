"""CLI: run an export job file."""

from __future__ import annotations

import argparse
import logging
import sys

from .export import ExportError, run_export
from .jobs import ExportJob


def main(argv: list[str] | None = None) -> None:
    parser = argparse.ArgumentParser(
        prog="xferlab-export",
        description="Extract per-block speech features and ASR text embeddings "
        "into the downstream feature-store format.",
    )
    parser.add_argument("job", help="export job JSON file")
    parser.add_argument("--device", default=None, help="override the job's device")
    parser.add_argument("--threads", type=int, default=None,
                        help="override the job's torch thread count")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        job = ExportJob.load(args.job)
        if args.device:
            job = job.model_copy(update={"device": args.device})
        if args.threads:
            job = job.model_copy(update={"torch_threads": args.threads})
        summary = run_export(job)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        raise SystemExit(4)
    except (ExportError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        raise SystemExit(2)
    print(
        f"exported {summary['num_files']} feature files for "
        f"{summary['num_dialogues']} dialogues"
    )
    print(f"manifest: {summary['manifest']}")


if __name__ == "__main__":
    main()
