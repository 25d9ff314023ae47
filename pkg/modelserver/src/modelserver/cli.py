"""Command-line launcher mirroring ServerConfig."""

from __future__ import annotations

import argparse

from .server import ServerConfig, serve


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="modelserver", description=__doc__)
    parser.add_argument("--checkpoint", required=True, help="HF id or local path")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--max-batch", type=int, default=64)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8900)
    parser.add_argument(
        "--lang-map",
        default=None,
        help="JSON file mapping language codes to token ids (for checkpoints without tokenizer assets)",
    )
    args = parser.parse_args(argv)
    if args.lang_map:
        config = ServerConfig.with_lang_map_file(
            args.checkpoint,
            args.lang_map,
            device=args.device,
            max_batch=args.max_batch,
            host=args.host,
            port=args.port,
        )
    else:
        config = ServerConfig(
            checkpoint=args.checkpoint,
            device=args.device,
            max_batch=args.max_batch,
            host=args.host,
            port=args.port,
        )
    serve(config)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
