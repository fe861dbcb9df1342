"""Command-line client for the attribution service.

Every subcommand builds the same request model the HTTP endpoints accept
and either calls the local run handler directly (default) or posts it to
a running service (--service URL or MUPAX_SERVICE_URL).

Exit codes: 0 ok, 2 usage/IO, 3 budget exhausted (partial outputs),
4 config mismatch, 5 wire-protocol failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from pydantic import ValidationError

from . import __version__, runs
from .errors import MupaxError, NotFoundError
from .service import schemas

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_BUDGET = 3
EXIT_MISMATCH = 4
EXIT_PROTOCOL = 5

_STATUS_EXIT = {404: EXIT_USAGE, 400: EXIT_USAGE, 409: EXIT_MISMATCH,
                502: EXIT_PROTOCOL, 422: EXIT_BUDGET}


def _fail(payload: dict, exit_code: int) -> int:
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return exit_code


def _request(model_cls, args: argparse.Namespace, fields: dict):
    """Merge precedence: explicit flags > --config file > model defaults."""
    merged = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise NotFoundError(f"no such config file: {path}")
        merged.update(json.loads(path.read_text()))
    merged.update({k: v for k, v in fields.items() if v is not None})
    return model_cls(**merged)


def _dispatch(args, path: str, request, handler):
    service = getattr(args, "service", None) or os.environ.get("MUPAX_SERVICE_URL")
    if not service:
        return json.loads(handler(request).model_dump_json())
    import httpx

    resp = httpx.post(
        service.rstrip("/") + path,
        json=json.loads(request.model_dump_json()),
        timeout=None,
    )
    if resp.status_code >= 400:
        raise _RemoteError(resp.status_code, resp.json())
    return resp.json()


class _RemoteError(Exception):
    def __init__(self, status: int, payload: dict):
        super().__init__(payload.get("message", "remote error"))
        self.status = status
        self.payload = payload


def _parse_chunk(text: str) -> list[int]:
    try:
        return [int(x) for x in text.replace("x", ",").split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad chunk shape {text!r}") from None


def _common_flags(sub, *, out_required=True):
    sub.add_argument("--config", help="JSON file with request fields")
    sub.add_argument("--service", help="service URL (default: run locally)")
    sub.add_argument("--json", action="store_true", help="print the full response JSON")
    if out_required:
        sub.add_argument("--out", help="output path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mupax",
        description="Perturbation attribution engine with an exact "
        "enumeration oracle and a model bridge.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("attribute", help="explain one input tensor")
    _common_flags(p)
    p.add_argument("--input", help="MPXT input path")
    p.add_argument("--predictor", help="predictor spec (planted:..., bridge:..., echo:)")
    p.add_argument("--chunk", type=_parse_chunk, help="chunk extents, e.g. 8,8")
    p.add_argument("--samples", type=int, help="accepted samples wanted")
    p.add_argument("--calibration", type=int)
    p.add_argument("--percentile-w", dest="percentile_w", type=float)
    p.add_argument("--cap", type=int, help="evaluation budget")
    p.add_argument("--w", dest="explicit_w", type=float, help="explicit threshold")
    p.add_argument("--mask-percentile", dest="mask_percentile", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)

    p = commands.add_parser("oracle", help="exact enumeration for small grids")
    _common_flags(p)
    p.add_argument("--input")
    p.add_argument("--predictor")
    p.add_argument("--chunk", type=_parse_chunk)
    p.add_argument("--w", dest="explicit_w", type=float)
    p.add_argument("--calibration", type=int)
    p.add_argument("--percentile-w", dest="percentile_w", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)

    p = commands.add_parser("crosscheck", help="compare MPXS maps to the oracle")
    _common_flags(p, out_required=False)
    p.add_argument("--input")
    p.add_argument("--predictor")
    p.add_argument("--chunk", type=_parse_chunk)
    p.add_argument("--w", dest="w", type=float)
    p.add_argument("--se-factor", dest="se_factor", type=float)
    p.add_argument("maps", nargs="*", help="MPXS paths, ascending n")

    p = commands.add_parser("eval", help="synthetic-task evaluation protocol")
    _common_flags(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--instances", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--calibration", type=int)
    p.add_argument("--percentile-w", dest="percentile_w", type=float)
    p.add_argument("--mask-percentile", dest="mask_percentile", type=float)
    p.add_argument("--repeats", type=int)
    p.add_argument("--workers", type=int)

    p = commands.add_parser("sweep", help="hyperparameter sweep")
    _common_flags(p)
    p.add_argument("--input")
    p.add_argument("--predictor")
    p.add_argument("--chunks", help="semicolon-separated chunk shapes, e.g. 2,2;4,4")
    p.add_argument("--samples", help="comma-separated sample counts")
    p.add_argument("--percentiles-w", dest="percentiles_w",
                   help="comma-separated percentiles")
    p.add_argument("--calibration", type=int)
    p.add_argument("--mask-percentile", dest="mask_percentile", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)

    p = commands.add_parser("bridge-check", help="conformance-check a live endpoint")
    _common_flags(p, out_required=False)
    p.add_argument("--endpoint", help="host:port")
    p.add_argument("--expect-echo", dest="expect_echo", action="store_true",
                   default=None)

    p = commands.add_parser("rerun", help="re-execute a run manifest")
    p.add_argument("manifest")
    p.add_argument("--json", action="store_true")

    p = commands.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)

    return parser


def _cmd_attribute(args) -> int:
    req = _request(
        schemas.AttributeRequest, args,
        dict(input=args.input, predictor=args.predictor, chunk=args.chunk,
             out=args.out, samples=args.samples, calibration=args.calibration,
             percentile_w=args.percentile_w, cap=args.cap,
             explicit_w=args.explicit_w, mask_percentile=args.mask_percentile,
             seed=args.seed, workers=args.workers, batch_size=args.batch_size),
    )
    body = _dispatch(args, "/v1/attribute", req, runs.attribute_run)
    print(
        f"n={body['n']} W={body['w']:.6g} p_hat={body['p_hat']:.4f} "
        f"attempted={body['attempted']} wall={body['wall_time_s']:.3f}s "
        f"mask_retained={body['mask_retained']}"
    )
    if args.json:
        print(json.dumps(body, sort_keys=True, indent=2))
    if body["partial"]:
        return _fail(
            {"error": "BudgetExhausted", "message": "partial results written",
             "partial": True, "outputs": body["outputs"]},
            EXIT_BUDGET,
        )
    return EXIT_OK


def _cmd_oracle(args) -> int:
    req = _request(
        schemas.OracleRequest, args,
        dict(input=args.input, predictor=args.predictor, chunk=args.chunk,
             out=args.out, explicit_w=args.explicit_w,
             calibration=args.calibration, percentile_w=args.percentile_w,
             seed=args.seed, batch_size=args.batch_size),
    )
    body = _dispatch(args, "/v1/oracle", req, runs.oracle_run)
    print(
        f"masks={body['masks_evaluated']} accepted={body['masks_accepted']} "
        f"p_W={body['p_w']:.6g} W={body['w']:.6g} wall={body['wall_time_s']:.3f}s"
    )
    if args.json:
        print(json.dumps(body, sort_keys=True, indent=2))
    return EXIT_OK


def _cmd_crosscheck(args) -> int:
    req = _request(
        schemas.CrosscheckRequest, args,
        dict(input=args.input, predictor=args.predictor, chunk=args.chunk,
             w=args.w, maps=args.maps or None, se_factor=args.se_factor),
    )
    body = _dispatch(args, "/v1/crosscheck", req, runs.crosscheck_run)
    for entry in body["report"]["maps"]:
        print(
            f"n={entry['n']} rmse={entry['rmse']:.6g} "
            f"max_abs_err={entry['max_abs_err']:.6g} coverage={entry['coverage']:.4f}"
        )
    slope = body["report"].get("rmse_loglog_slope")
    if slope is not None:
        print(f"rmse_loglog_slope={slope:.4f}")
    if args.json:
        print(json.dumps(body, sort_keys=True, indent=2))
    return EXIT_OK


def _cmd_eval(args) -> int:
    req = _request(
        schemas.EvalRequest, args,
        dict(out=args.out, seed=args.seed, instances=args.instances,
             samples=args.samples, calibration=args.calibration,
             percentile_w=args.percentile_w, mask_percentile=args.mask_percentile,
             repeats=args.repeats, workers=args.workers),
    )
    body = _dispatch(args, "/v1/eval", req, runs.eval_run)
    conditions = body["report"]["conditions"]
    for name in ("full", "masked"):
        m = conditions[name]
        print(
            f"{name}: precision={m['precision']:.4f} recall={m['recall']:.4f} "
            f"macro_f1={m['macro_f1']:.4f} weighted_f1={m['weighted_f1']:.4f}"
        )
    rt = body["report"]["runtime_s"]
    print(f"runtime: {rt['mean']:.4f}s +/- {rt['sd']:.4f}s over {rt['repeats']} repeats")
    if args.json:
        print(json.dumps(body, sort_keys=True, indent=2))
    return EXIT_OK


def _split_list(text, cast):
    return [cast(x) for x in text.split(",") if x.strip()] if text else None


def _cmd_sweep(args) -> int:
    chunk_shapes = None
    if args.chunks:
        chunk_shapes = [_parse_chunk(part) for part in args.chunks.split(";") if part]
    req = _request(
        schemas.SweepRequest, args,
        dict(input=args.input, predictor=args.predictor, out=args.out,
             chunk_shapes=chunk_shapes,
             sample_counts=_split_list(args.samples, int),
             percentiles_w=_split_list(args.percentiles_w, float),
             calibration=args.calibration, mask_percentile=args.mask_percentile,
             seed=args.seed, workers=args.workers),
    )
    body = _dispatch(args, "/v1/sweep", req, runs.sweep_run)
    for row in body["rows"]:
        share = row["relevant_share"]
        share_txt = f"{share:.4f}" if share is not None else "-"
        print(
            f"chunk={row['chunk_shape']} n={row['n_target']} "
            f"pw={row['percentile_w']:g} W={row['w']:.6g} p_hat={row['p_hat']:.4f} "
            f"relevant_share={share_txt}"
        )
    if args.json:
        print(json.dumps(body, sort_keys=True, indent=2))
    return EXIT_OK


def _cmd_bridge_check(args) -> int:
    req = _request(
        schemas.BridgeCheckRequest, args,
        dict(endpoint=args.endpoint, expect_echo=args.expect_echo),
    )
    body = _dispatch(args, "/v1/bridge-check", req, runs.bridge_check_run)
    print("conformant" if body["conformant"] else "NOT conformant")
    if args.json:
        print(json.dumps(body, sort_keys=True, indent=2))
    return EXIT_OK


def _cmd_rerun(args) -> int:
    command, response = runs.rerun_manifest(args.manifest)
    body = json.loads(response.model_dump_json())
    print(f"reran {command}")
    if args.json:
        print(json.dumps(body, sort_keys=True, indent=2))
    if body.get("partial"):
        return EXIT_BUDGET
    return EXIT_OK


def _cmd_serve(args) -> int:
    import uvicorn

    uvicorn.run("mupax.service.app:app", host=args.host, port=args.port)
    return EXIT_OK


_HANDLERS = {
    "attribute": _cmd_attribute,
    "oracle": _cmd_oracle,
    "crosscheck": _cmd_crosscheck,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "bridge-check": _cmd_bridge_check,
    "rerun": _cmd_rerun,
    "serve": _cmd_serve,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except MupaxError as exc:
        return _fail(exc.to_json(), exc.exit_code if exc.exit_code != 1 else 1)
    except ValidationError as exc:
        return _fail(
            {"error": "Usage", "message": "invalid or missing request fields",
             "detail": json.loads(exc.json())},
            EXIT_USAGE,
        )
    except _RemoteError as exc:
        payload = exc.payload
        code = _STATUS_EXIT.get(exc.status, 1)
        return _fail(payload, code)
    except FileNotFoundError as exc:
        return _fail({"error": "NotFound", "message": str(exc)}, EXIT_USAGE)


if __name__ == "__main__":
    sys.exit(main())
