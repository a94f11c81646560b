"""Thin command-line client for the run service.

By default the commands talk to an in-process instance of the service
(no network); point --url at a running `dsbb84 serve` to use a remote
one.  The client's only jobs are shipping the config/counts files up and
persisting the response: report.json (deterministic protocol record),
metrics.json (wall-clock telemetry), and per-basis key files.

Exit codes: 0 key produced, 2 protocol abort (a valid outcome), 1 error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import httpx

from .config import reference_config_text, reference_counts_text

EXIT_KEY = 0
EXIT_ERROR = 1
EXIT_ABORT = 2


def _client(url: str | None) -> httpx.Client:
    if url:
        return httpx.Client(base_url=url, timeout=600.0)
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        from starlette.testclient import TestClient

    from .service import app
    return TestClient(app)


def _read_config(path: str) -> str:
    if path == "reference":
        return reference_config_text()
    return Path(path).read_text()


def _read_counts(path: str) -> dict:
    if path == "reference":
        return json.loads(reference_counts_text())
    return json.loads(Path(path).read_text())


def _fail(resp: httpx.Response) -> int:
    try:
        detail = resp.json().get("detail", resp.text)
    except ValueError:
        detail = resp.text
    if isinstance(detail, dict) and "errors" in detail:
        print("configuration rejected:", file=sys.stderr)
        for err in detail["errors"]:
            print(f"  - {err}", file=sys.stderr)
    else:
        print(f"request failed ({resp.status_code}): {detail}", file=sys.stderr)
    return EXIT_ERROR


def _persist_run(payload: dict, out: str | None) -> int:
    if out:
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        report = payload["report"]
        (out_dir / "report.json").write_text(
            json.dumps(report, indent=1, sort_keys=True) + "\n")
        (out_dir / "metrics.json").write_text(
            json.dumps(payload["metrics"], indent=1, sort_keys=True) + "\n")
        for key in payload["keys"]:
            basis = key["basis"]
            raw = bytes.fromhex(key["key_hex"])
            (out_dir / f"key_{basis}.bin").write_bytes(raw)
            sidecar = {
                "basis": basis,
                "length_bits": key["length_bits"],
                "bit_order": key["bit_order"],
                "session_id": report["session_id"],
                "seed": report["seed"],
            }
            (out_dir / f"key_{basis}.json").write_text(
                json.dumps(sidecar, indent=1, sort_keys=True) + "\n")
    rep = payload["report"]
    print(f"status: {rep['status']}"
          + (f" ({rep.get('abort_reason')})" if rep["status"] == "abort" else ""))
    for basis, bits in sorted(rep.get("final_bits", {}).items()):
        print(f"  {basis}: {bits} bits")
    print(f"  key rate: {float(rep['key_rate_bps']):.1f} bps")
    return EXIT_KEY if rep["status"] == "key" else EXIT_ABORT


def _parse_range(text: str) -> list[str]:
    """Comma list of values, or start:stop:count for a linear range."""
    if ";" in text:
        return [v.strip() for v in text.split(";") if v.strip()]
    if "," in text or ":" not in text:
        return [v.strip() for v in text.split(",") if v.strip()]
    parts = text.split(":")
    if len(parts) == 3:
        start, stop, count = float(parts[0]), float(parts[1]), int(parts[2])
        if count < 1:
            return []
        if count == 1:
            return [repr(start)]
        step = (stop - start) / (count - 1)
        return [repr(start + i * step) for i in range(count)]
    return [text]


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="dsbb84",
        description="decoy-state BB84 post-processing toolkit")
    parser.add_argument("--url", default=None,
                        help="service URL (default: run in-process)")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="sample and process one session")
    p_sim.add_argument("--config", required=True,
                       help="config file path, or 'reference'")
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--out", default=None, help="output directory")

    p_rep = sub.add_parser("replay", help="process recorded session counts")
    p_rep.add_argument("--config", required=True)
    p_rep.add_argument("--counts", required=True,
                       help="counts JSON path, or 'reference'")
    p_rep.add_argument("--seed", type=int, default=0)
    p_rep.add_argument("--out", default=None)

    p_sw = sub.add_parser("sweep", help="rerun the pipeline over a parameter range")
    p_sw.add_argument("--config", required=True)
    p_sw.add_argument("--param", required=True,
                      choices=["time_slot_s", "max_final_key_bits",
                               "send_prob", "qber"])
    p_sw.add_argument("--range", required=True,
                      help="comma list, start:stop:count, or ';'-separated "
                           "profiles for send_prob")
    p_sw.add_argument("--seed", type=int, default=0)
    p_sw.add_argument("--jobs", type=int, default=1)
    p_sw.add_argument("--out", default=None, help="CSV output path")

    sub.add_parser("selftest", help="run the built-in check battery")

    p_srv = sub.add_parser("serve", help="start the HTTP service")
    p_srv.add_argument("--host", default="127.0.0.1")
    p_srv.add_argument("--port", type=int, default=8000)

    args = parser.parse_args(argv)

    if args.command == "serve":
        import uvicorn
        uvicorn.run("dsbb84.service:app", host=args.host, port=args.port)
        return EXIT_KEY

    with _client(args.url) as client:
        if args.command == "simulate":
            resp = client.post("/v1/simulate", json={
                "config_ini": _read_config(args.config), "seed": args.seed})
            if resp.status_code != 200:
                return _fail(resp)
            return _persist_run(resp.json(), args.out)

        if args.command == "replay":
            resp = client.post("/v1/replay", json={
                "config_ini": _read_config(args.config),
                "counts": _read_counts(args.counts), "seed": args.seed})
            if resp.status_code != 200:
                return _fail(resp)
            return _persist_run(resp.json(), args.out)

        if args.command == "sweep":
            values = _parse_range(args.range)
            resp = client.post("/v1/sweep", json={
                "config_ini": _read_config(args.config),
                "parameter": args.param, "values": values,
                "seed": args.seed, "jobs": args.jobs})
            if resp.status_code != 200:
                return _fail(resp)
            payload = resp.json()
            if args.out:
                Path(args.out).parent.mkdir(parents=True, exist_ok=True)
                Path(args.out).write_text(payload["csv"])
            else:
                sys.stdout.write(payload["csv"])
            any_key = any(not row["abort"] for row in payload["rows"])
            return EXIT_KEY if any_key else EXIT_ABORT

        if args.command == "selftest":
            resp = client.post("/v1/selftest", json={})
            if resp.status_code != 200:
                return _fail(resp)
            payload = resp.json()
            for check in payload["checks"]:
                mark = "PASS" if check["ok"] else "FAIL"
                print(f"{mark} {check['name']}: {check['detail']}")
            return EXIT_KEY if payload["passed"] else EXIT_ERROR

    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
