"""Command-line client for the experiment service.

Subcommands (validate, synth, train, probe, report) are thin wrappers over
the service API: by default the FastAPI app is driven in-process through
an ASGI test transport, so no server is needed; pass ``--server URL`` to
talk to a running instance instead (paths in requests are then resolved on
the server). ``serve`` starts the service under uvicorn.

Exit codes: 0 success, 2 validation failure, 3 training divergence,
4 IO error, 64 usage error. Logs go to stderr; stdout carries the final
summary only. All randomness comes from config seeds, never wall clock.
"""

from __future__ import annotations

import argparse
import json
import sys

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_DIVERGENCE = 3
EXIT_IO = 4
EXIT_USAGE = 64

_KIND_TO_EXIT = {
    "validation": EXIT_VALIDATION,
    "usage": EXIT_VALIDATION,
    "divergence": EXIT_DIVERGENCE,
    "io": EXIT_IO,
    "internal": EXIT_IO,
}


class _Parser(argparse.ArgumentParser):
    """argparse that exits with the conventional usage code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


class _ExitWith(Exception):
    def __init__(self, code: int):
        super().__init__(f"exit {code}")
        self.code = code


def _parse_int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated int list: {text!r}")


def build_parser() -> _Parser:
    parser = _Parser(prog="xferlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    parser.add_argument(
        "--server",
        default=None,
        help="base URL of a running service; default runs the app in-process",
    )

    p = sub.add_parser("validate", help="validate a corpus manifest against its files")
    p.add_argument("manifest")

    p = sub.add_parser("synth", help="generate a synthetic corpus pair")
    p.add_argument("spec", help="JSON file with generator settings")
    p.add_argument("outdir")

    p = sub.add_parser("train", help="train the downstream model")
    p.add_argument("config", help="pipeline config JSON")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--single", action="store_true", help="classification task only")
    group.add_argument("--joint", action="store_true", help="joint two-task training")
    p.add_argument("--out", default=None, help="output directory (overrides config)")
    p.add_argument("--seeds", type=_parse_int_list, default=None, metavar="0,1,2")
    p.add_argument("--lambda", dest="lambda_dep", type=float, default=None,
                   help="auxiliary-loss coefficient")

    p = sub.add_parser("probe", help="block-wise probing of frozen features")
    p.add_argument("config", help="pipeline config JSON")
    p.add_argument("--blocks", type=_parse_int_list, required=True, metavar="1,3,5")
    p.add_argument("--out", default=None)
    p.add_argument("--seeds", type=_parse_int_list, default=None, metavar="0,1,2")
    p.add_argument("--no-weighted", action="store_true",
                   help="skip the learned weighted-combination run")

    p = sub.add_parser("report", help="re-render report tables from a run directory")
    p.add_argument("rundir")
    p.add_argument("--out", default=None)

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8321)

    return parser


def _make_client(server: str | None):
    if server:
        import httpx

        return httpx.Client(base_url=server, timeout=None)
    import warnings

    with warnings.catch_warnings():
        # starlette's test client nags about a future httpx2 migration
        warnings.filterwarnings("ignore", message=".*httpx2.*")
        from fastapi.testclient import TestClient

    from .service import app

    return TestClient(app)


def _post(client, path: str, payload: dict) -> dict:
    response = client.post(path, json=payload)
    body = response.json()
    if response.status_code != 200:
        error = body.get("error", {})
        kind = error.get("kind", "internal")
        print(f"error ({kind}): {error.get('message', body)}", file=sys.stderr)
        for v in error.get("violations") or []:
            print(f"  [{v['kind']}] {v['dialogue_id']}: {v['detail']}", file=sys.stderr)
        raise _ExitWith(_KIND_TO_EXIT.get(kind, EXIT_IO))
    return body


def _cmd_validate(client, args) -> int:
    body = _post(client, "/validate", {"manifest_path": args.manifest})
    if body["valid"]:
        print(f"{body['corpus_id']}: OK ({body['num_dialogues']} dialogues, 0 violations)")
        return EXIT_OK
    for v in body["violations"]:
        print(f"[{v['kind']}] {v['dialogue_id']}: {v['detail']}")
    print(f"{body['corpus_id']}: {len(body['violations'])} violation(s)")
    return EXIT_VALIDATION


def _cmd_synth(client, args) -> int:
    try:
        spec = json.loads(open(args.spec, encoding="utf-8").read())
    except FileNotFoundError:
        print(f"error (io): spec file not found: {args.spec}", file=sys.stderr)
        return EXIT_IO
    except json.JSONDecodeError as exc:
        print(f"error (validation): bad spec JSON: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    body = _post(client, "/synth", {"spec": spec, "out_dir": args.outdir})
    print(
        f"wrote {body['num_ad_dialogues']} ad + {body['num_dep_dialogues']} depression "
        f"dialogues under {body['base_dir']}"
    )
    print(f"manifests: {body['ad_manifest']} {body['dep_manifest']}")
    return EXIT_OK


def _render_transfer_summary(aggregate: dict, mode: str) -> str:
    from .evalreport import TransferRow, render_transfer_txt

    row = TransferRow(
        uses_ad=True,
        uses_dep=mode == "joint",
        f1_avg=aggregate.get("f1_avg"),
        f1_max=aggregate.get("f1_max"),
        rmse_avg=aggregate.get("rmse_avg"),
        rmse_min=aggregate.get("rmse_min"),
    )
    return render_transfer_txt([row])


def _cmd_train(client, args) -> int:
    payload = {
        "config_path": args.config,
        "mode": "joint" if args.joint else "single",
        "out_dir": args.out,
        "seeds": args.seeds,
        "lambda_dep": args.lambda_dep,
    }
    body = _post(client, "/train", payload)
    sys.stdout.write(_render_transfer_summary(body["aggregate"], body["mode"]))
    print(f"run dir: {body['out_dir']}")
    return EXIT_OK


def _cmd_probe(client, args) -> int:
    from .evalreport import BlockProbeResult, render_blockwise_txt

    payload = {
        "config_path": args.config,
        "blocks": args.blocks,
        "out_dir": args.out,
        "seeds": args.seeds,
        "weighted": not args.no_weighted,
    }
    body = _post(client, "/probe", payload)
    rows = [BlockProbeResult(**r) for r in body["rows"]]
    sys.stdout.write(render_blockwise_txt(rows))
    print(f"best block: {body['argmax_block']}")
    print(f"run dir: {body['out_dir']}")
    return EXIT_OK


def _cmd_report(client, args) -> int:
    body = _post(client, "/report", {"run_dir": args.rundir, "out_dir": args.out})
    for kind, path in sorted(body["files"].items()):
        print(f"{kind}: {path}")
    return EXIT_OK


def run_cli(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE

    if args.command == "serve":
        import uvicorn

        from .service import app

        uvicorn.run(app, host=args.host, port=args.port, log_level="info")
        return EXIT_OK

    handler = {
        "validate": _cmd_validate,
        "synth": _cmd_synth,
        "train": _cmd_train,
        "probe": _cmd_probe,
        "report": _cmd_report,
    }[args.command]
    client = _make_client(args.server)
    try:
        return handler(client, args)
    except _ExitWith as exc:
        return exc.code
    finally:
        client.close()


def main() -> None:
    raise SystemExit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
