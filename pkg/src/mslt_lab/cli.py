"""Command-line client for the training laboratory service.

The CLI never runs training logic itself: it builds requests against the
HTTP service and renders responses. By default it hosts the service
in-process (over an ASGI transport); `--server URL` targets a running
`mslt-lab serve` instance instead.

Exit codes: 0 success, 2 config error, 3 data error, 4 divergence,
5 gradcheck failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import sys

import httpx

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4
EXIT_GRADCHECK = 5

_KIND_TO_EXIT = {
    "config_error": EXIT_CONFIG,
    "data_error": EXIT_DATA,
    "checkpoint_error": EXIT_DATA,
    "divergence": EXIT_DIVERGENCE,
}

POLL_SECONDS = 0.25


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mslt-lab",
        description="Multi-stage layerwise training laboratory (thin service client).",
    )
    parser.add_argument("--server", metavar="URL", default=None,
                        help="base URL of a running service; default runs it in-process")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="print the stage schedule and analytic cost table")
    p.add_argument("--config", required=True)
    p.add_argument("--regime", choices=["mslt", "stacking", "scratch"], default=None)

    p = sub.add_parser("train", help="run a training job and wait for completion")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="override the config output directory")
    p.add_argument("--resume", action="store_true",
                   help="resume from the last stage-boundary checkpoint")

    p = sub.add_parser("analyze-attention",
                       help="attention drift between two checkpoints")
    p.add_argument("checkpoint_a")
    p.add_argument("checkpoint_b")
    p.add_argument("--probes", default=None, help="probe sentence file (default: packaged set)")
    p.add_argument("--vocab", default=None, help="vocab file (default: vocab.txt near checkpoint)")
    p.add_argument("--layers", default=None, metavar="A..B", help="restrict to a layer range")
    p.add_argument("--out", default=None)

    p = sub.add_parser("compare", help="speedup and loss comparison across run directories")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", default=None)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model gradient")
    p.add_argument("--config", default=None, help="tiny config (default: built-in check config)")
    p.add_argument("--mutate", action="store_true",
                   help="test hook: corrupt one backward rule, expect failure")
    p.add_argument("--eps", type=float, default=2e-3)
    p.add_argument("--max-coords", type=int, default=64,
                   help="coordinates sampled per parameter tensor (seeded)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8321)
    return parser


def _client(server):
    if server:
        return httpx.AsyncClient(base_url=server, timeout=None)
    from .service.app import create_app
    return httpx.AsyncClient(transport=httpx.ASGITransport(app=create_app()),
                             base_url="http://mslt-lab.local", timeout=None)


def _fail(payload, status_code):
    if isinstance(payload, dict) and "error_kind" in payload:
        kind = payload["error_kind"]
        print(f"error ({kind}): {payload.get('detail', '')}", file=sys.stderr)
        return _KIND_TO_EXIT.get(kind, EXIT_OTHER)
    print(f"error (HTTP {status_code}): {payload}", file=sys.stderr)
    return EXIT_OTHER


def _payload(response):
    try:
        return response.json()
    except json.JSONDecodeError:
        return response.text


async def _cmd_plan(client, args):
    r = await client.post("/plan", json={"config_path": args.config, "regime": args.regime})
    body = _payload(r)
    if r.status_code != 200:
        return _fail(body, r.status_code)
    print(body["table"])
    return EXIT_OK


async def _cmd_train(client, args):
    r = await client.post("/train", json={
        "config_path": args.config,
        "seed": args.seed,
        "out_dir": args.out,
        "resume": args.resume,
    })
    body = _payload(r)
    if r.status_code != 200:
        return _fail(body, r.status_code)
    job_id = body["job_id"]
    print(f"submitted {job_id}; waiting for completion")
    while True:
        r = await client.get(f"/jobs/{job_id}")
        status = _payload(r)
        if r.status_code != 200:
            return _fail(status, r.status_code)
        if status["state"] == "done":
            summary = status["summary"]
            print(f"run finished: {summary['regime']} seed {summary['seed']}, "
                  f"{summary['total_steps']} steps, "
                  f"{summary['total_wall_seconds']:.1f}s wall, "
                  f"final mlm loss {summary['final_mlm_loss']:.4f}")
            for stage in summary["stages"]:
                print(f"  {stage['name']}: depth {stage['depth']}, "
                      f"steps {stage['steps']}, "
                      f"mean step {(stage['mean_fwd_ms'] + stage['mean_bwd_ms']):.1f} ms")
            return EXIT_OK
        if status["state"] == "error":
            return _fail({"error_kind": status["error_kind"] or "internal_error",
                          "detail": status["detail"] or ""}, 500)
        await asyncio.sleep(POLL_SECONDS)


async def _cmd_analyze(client, args):
    r = await client.post("/analyze-attention", json={
        "checkpoint_a": args.checkpoint_a,
        "checkpoint_b": args.checkpoint_b,
        "probes_path": args.probes,
        "vocab_path": args.vocab,
        "layers": args.layers,
        "out_dir": args.out,
    })
    body = _payload(r)
    if r.status_code != 200:
        return _fail(body, r.status_code)
    print(body["table"])
    print("files written:")
    for f in body["files"]:
        print(f"  {f}")
    return EXIT_OK


async def _cmd_compare(client, args):
    r = await client.post("/compare", json={"run_dirs": args.run_dirs, "out_dir": args.out})
    body = _payload(r)
    if r.status_code != 200:
        return _fail(body, r.status_code)
    print(body["table"])
    print("files written:")
    for f in body["files"]:
        print(f"  {f}")
    return EXIT_OK


async def _cmd_gradcheck(client, args):
    r = await client.post("/gradcheck", json={
        "config_path": args.config,
        "mutate": args.mutate,
        "eps": args.eps,
        "max_coords_per_param": args.max_coords,
        "seed": args.seed,
    })
    body = _payload(r)
    if r.status_code != 200:
        return _fail(body, r.status_code)
    verdict = "PASS" if body["passed"] else "FAIL"
    print(f"gradcheck {verdict}: global max rel error "
          f"{body['global_max_rel_error']:.3e} (threshold {body['threshold']:.0e}, "
          f"{body['coords_checked']} coordinates)")
    print(f"worst parameter: {body['worst_parameter']}")
    return EXIT_OK if body["passed"] else EXIT_GRADCHECK


async def _dispatch(args):
    async with _client(args.server) as client:
        if args.command == "plan":
            return await _cmd_plan(client, args)
        if args.command == "train":
            return await _cmd_train(client, args)
        if args.command == "analyze-attention":
            return await _cmd_analyze(client, args)
        if args.command == "compare":
            return await _cmd_compare(client, args)
        if args.command == "gradcheck":
            return await _cmd_gradcheck(client, args)
        raise AssertionError(f"unhandled command {args.command}")


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "serve":
        import uvicorn
        from .service.app import create_app
        uvicorn.run(create_app(), host=args.host, port=args.port)
        return EXIT_OK
    try:
        return asyncio.run(_dispatch(args))
    except httpx.HTTPError as exc:
        print(f"error: cannot reach service: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
