"""Adapter command line.

    mupax-adapter --port 7341 --max-batch 32 --echo
    mupax-adapter --port 0 --module mypkg.scoring:model
    mupax-adapter --planted spec.json

``--port 0`` binds an ephemeral port; the bound address is printed as
"listening on HOST:PORT" so callers can parse it.
"""

from __future__ import annotations

import argparse
import sys

from .models import echo_model, load_entry_point, planted_from_spec
from .server import AdapterConfig, serve


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mupax-adapter")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=7341)
    parser.add_argument("--max-batch", dest="max_batch", type=int, default=32)
    parser.add_argument(
        "--strict-nonneg", dest="strict_nonneg",
        action=argparse.BooleanOptionalAction, default=True,
    )
    model = parser.add_mutually_exclusive_group(required=True)
    model.add_argument("--echo", action="store_true",
                       help="loss = sum of tensor values")
    model.add_argument("--module", help="user entry point, pkg.mod:attr")
    model.add_argument("--planted", help="planted-model spec JSON path")
    parser.add_argument("--model-arg", dest="model_arg",
                        help="argument handed to the --module factory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.echo:
        model = echo_model
    elif args.planted:
        model = planted_from_spec(args.planted)
    else:
        model = load_entry_point(args.module, args.model_arg)
    config = AdapterConfig(
        port=args.port,
        host=args.host,
        max_batch=args.max_batch,
        model=model,
        strict_nonneg=args.strict_nonneg,
    )

    def announce(port: int) -> None:
        print(f"listening on {args.host}:{port}", flush=True)

    try:
        serve(config, ready_callback=announce)
    except KeyboardInterrupt:
        pass
    return 0


if __name__ == "__main__":
    sys.exit(main())
