"""Run reports: deterministic protocol record plus operational metrics.

The protocol record (report.json) is byte-reproducible from (config,
seed); wall-clock timings are operational telemetry and live in a
separate metrics document so reproducibility checks can compare the
record verbatim.
"""

from __future__ import annotations

import hashlib
import json
from importlib import resources

__all__ = ["build_report", "session_id", "report_schema", "validate_report"]

REPORT_FORMAT = "dsbb84-report-v1"


def session_id(config_echo: dict, seed: int) -> str:
    blob = json.dumps({"config": config_echo, "seed": seed}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def build_report(mode: str, seed: int, config_echo: dict, audit: dict,
                 status: str, abort_reason: str | None = None) -> dict:
    time_slot = float(audit.get("counts", {}).get("time_slot_s", 0.0)) or None
    final_bits = audit.get("final_bits", {})
    total = int(sum(final_bits.values())) if final_bits else 0
    report = {
        "format": REPORT_FORMAT,
        "mode": mode,
        "seed": int(seed),
        "session_id": session_id(config_echo, seed),
        "status": status,
        "config": config_echo,
        "security_exponents": audit.get("security_exponents", []),
        "counts": audit.get("counts", {}),
        "basis": audit.get("basis", {}),
        "final_bits": final_bits,
        "total_final_bits": total,
        "key_rate_bps": (f"{total / time_slot:.17g}" if time_slot else "0"),
        "randomness_bits": audit.get("randomness_bits", {}),
    }
    if abort_reason is not None:
        report["abort_reason"] = abort_reason
    return report


def report_schema() -> dict:
    text = resources.files("dsbb84.data").joinpath(
        "report_schema.json").read_text()
    return json.loads(text)


def validate_report(report: dict) -> list:
    """Schema conformance problems (empty list when valid)."""
    try:
        import jsonschema
    except ImportError:  # minimal structural fallback
        problems = []
        schema = report_schema()
        for key in schema.get("required", []):
            if key not in report:
                problems.append(f"missing field {key}")
        return problems
    validator = jsonschema.Draft202012Validator(report_schema())
    return [f"{'/'.join(str(p) for p in e.path)}: {e.message}"
            for e in validator.iter_errors(report)]
