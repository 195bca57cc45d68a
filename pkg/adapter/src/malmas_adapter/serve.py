"""Line-oriented serving loop and console entry point."""

from __future__ import annotations

import argparse
import json
import sys
from typing import IO

from .core import AdapterConfig, evaluate_request


def _reply(stream: IO[str], body: dict) -> None:
    stream.write(json.dumps(body, sort_keys=True) + "\n")
    stream.flush()


def serve(stdin: IO[str], stdout: IO[str], config: AdapterConfig | None = None) -> None:
    """Answer every request line with exactly one response line, in order.

    A malformed line gets ``{"id": null, "error": ...}``; a failing request
    gets ``{"id": ..., "error": ...}``.  The loop itself never raises, so one
    bad request cannot take the process down.
    """
    config = config or AdapterConfig()
    for raw in stdin:
        line = raw.strip()
        if not line:
            continue
        try:
            payload = json.loads(line)
        except json.JSONDecodeError as exc:
            _reply(stdout, {"id": None, "error": f"malformed request line: {exc}"})
            continue
        request_id = payload.get("id") if isinstance(payload, dict) else None
        if not isinstance(request_id, int) or isinstance(request_id, bool):
            request_id = None
        if not isinstance(payload, dict):
            _reply(stdout, {"id": None, "error": "request must be a JSON object"})
            continue
        try:
            value = evaluate_request(payload, config)
        except Exception as exc:
            _reply(stdout, {"id": request_id, "error": str(exc)})
            continue
        _reply(stdout, {"id": request_id, "value": value})


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="malmas-adapter",
        description="Score feature matrices with gradient-boosted trees over JSON lines.",
    )
    parser.add_argument("--trees", type=int, default=500, help="default tree count (default: 500)")
    parser.add_argument(
        "--learning-rate", type=float, default=0.02, help="default learning rate (default: 0.02)"
    )
    parser.add_argument("--folds", type=int, default=5, help="default CV fold count (default: 5)")
    args = parser.parse_args(argv)
    try:
        config = AdapterConfig(trees=args.trees, learning_rate=args.learning_rate, folds=args.folds)
    except ValueError as exc:
        parser.error(str(exc))
    serve(sys.stdin, sys.stdout, config)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
