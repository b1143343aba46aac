"""Command-line front end.

Every subcommand loads one JSON config, applies the flag overrides
(--out/--seed/--threads), and posts the request to the service layer — in
process by default, or to a running server via --server.  Results come back
as typed responses and are printed as stable key=value lines; artifacts are
written by the service under the output directory.
"""

import argparse
import json
import sys


def _print_kv(payload, skip=()):
    for key in payload:
        if key in skip:
            continue
        value = payload[key]
        if isinstance(value, float):
            value = repr(value)
        print("%s=%s" % (key, value))


def _client(server):
    if server:
        import httpx
        return httpx.Client(base_url=server, timeout=3600.0)
    from fastapi.testclient import TestClient

    from .service import create_app
    return TestClient(create_app())


def _post(client, path, payload):
    resp = client.post(path, json=payload)
    if resp.status_code != 200:
        try:
            detail = resp.json().get("detail", resp.text)
        except ValueError:
            detail = resp.text
        print("error: %s" % detail, file=sys.stderr)
        raise SystemExit(1)
    return resp.json()


def _load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        print("error: cannot read config %s: %s" % (path, exc.strerror or exc),
              file=sys.stderr)
        raise SystemExit(1)
    except json.JSONDecodeError as exc:
        print("error: config %s is not valid JSON: %s" % (path, exc),
              file=sys.stderr)
        raise SystemExit(1)


def _apply_overrides(config, args):
    if args.out is not None:
        config["output"] = args.out
    if args.seed is not None:
        config["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        config["threads"] = args.threads
    return config


def _cmd_study(args, path="/study"):
    config = _apply_overrides(_load_config(args.config), args)
    if path == "/local-contract":
        config.setdefault("study", {})["kind"] = "local-contract"
    with _client(args.server) as client:
        result = _post(client, path, config)
    print("kind=%s" % result["kind"])
    print("csv=%s" % result["csv_path"])
    print("manifest=%s" % result["manifest_path"])
    print("csv_sha256=%s" % result["csv_sha256"])
    for row in result["rows"]:
        metrics = " ".join("%s=%r" % (k, v) for k, v in row["metrics"].items())
        print("row %s status=%s %s" % (row["point"], row["status"], metrics))
    return 0


def _cmd_local_contract(args):
    return _cmd_study(args, path="/local-contract")


def _cmd_solve_lod(args):
    config = _apply_overrides(_load_config(args.config), args)
    with _client(args.server) as client:
        result = _post(client, "/solve-lod", config)
    _print_kv(result)
    return 0


def _cmd_build_network(args):
    config = _apply_overrides(_load_config(args.config), args)
    with _client(args.server) as client:
        result = _post(client, "/build-network", config)
    _print_kv(result)
    return 0


def _cmd_compare(args):
    config = _apply_overrides(_load_config(args.config), args)
    with _client(args.server) as client:
        result = _post(client, "/compare", config)
    _print_kv(result, skip=("per_patch_errors",))
    errors = result.get("per_patch_errors")
    if errors:
        print("per_patch_errors=%s" % " ".join(repr(e) for e in errors))
    return 0


def _cmd_serve(args):
    import uvicorn

    from .service import create_app
    uvicorn.run(create_app(), host=args.host, port=args.port)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="lodnn",
        description="Coarse-scale surrogate solvers and certified network "
                    "emulation for rough-coefficient elliptic problems.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, threads=True):
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="RNG seed")
        if threads:
            p.add_argument("--threads", type=int, default=None,
                           help="worker threads")
        p.add_argument("--server", default=None,
                       help="base URL of a running service "
                            "(default: in process)")

    handlers = {
        "solve-lod": (_cmd_solve_lod,
                      "assemble and solve the coarse surrogate problem"),
        "build-network": (_cmd_build_network,
                          "construct and save a certified local network"),
        "local-contract": (_cmd_local_contract,
                           "check forward-pass accuracy against the "
                           "deterministic local matrices"),
        "compare": (_cmd_compare,
                    "solve with deterministic and network operators and "
                    "report the gaps"),
        "study": (_cmd_study, "run a parameter study to CSV + manifest"),
    }
    for name, (handler, help_text) in handlers.items():
        p = sub.add_parser(name, help=help_text)
        add_common(p, threads=(name != "build-network"))
        p.set_defaults(handler=handler)

    serve = sub.add_parser("serve", help="run the HTTP service")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    serve.set_defaults(handler=_cmd_serve)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.handler(args)


if __name__ == "__main__":
    sys.exit(main())
