"""Run configuration: INI parsing and validation.

The file format is plain key-value sections (configparser); units are
spelled in the key names.  Validation collects every violated constraint
before failing so a bad file is reported in one pass.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .channel import ChannelModel
from .photon_source import IntensitySet
from .protocol import SessionConfig

__all__ = ["RunConfig", "ConfigError", "load_config", "reference_config_text",
           "reference_counts_text"]


class ConfigError(ValueError):
    """Carries the full list of violated constraints."""

    def __init__(self, problems):
        super().__init__("; ".join(problems))
        self.problems = list(problems)


@dataclass
class RunConfig:
    """Everything one run needs: protocol, channel, and echo of the source."""

    session: SessionConfig
    transmittance: float
    misalignment: dict          # basis -> optical error probability
    echo: dict = field(repr=False, default_factory=dict)

    @property
    def channel(self) -> ChannelModel:
        return ChannelModel(self.transmittance,
                            self.session.dark_count_prob,
                            max(self.misalignment.values()))


def _parse_pairs(text: str, what: str, problems: list) -> dict:
    out = {}
    for chunk in text.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        if ":" not in chunk:
            problems.append(f"{what}: expected colon-separated pair in {chunk!r}")
            continue
        a, b = chunk.split(":", 1)
        try:
            out[a.strip()] = float(b)
        except ValueError:
            problems.append(f"{what}: bad number in {chunk!r}")
    return out


def _get(cp, section, key, cast, default, problems, required=False):
    if not cp.has_option(section, key):
        if required:
            problems.append(f"missing [{section}] {key}")
        return default
    raw = cp.get(section, key)
    try:
        return cast(raw)
    except (TypeError, ValueError):
        problems.append(f"[{section}] {key}: cannot parse {raw!r}")
        return default


def load_config(text: str) -> RunConfig:
    """Parse and validate an INI document into a RunConfig."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"unparseable config: {exc}"]) from exc
    problems: list = []

    mu_text = _get(cp, "source", "mu", str, "", problems, required=True)
    try:
        mus = tuple(float(x) for x in mu_text.split(",") if x.strip())
    except ValueError:
        problems.append(f"[source] mu: cannot parse {mu_text!r}")
        mus = ()
    signal_index = _get(cp, "source", "signal_index", int, len(mus), problems)
    intensities = None
    if mus:
        try:
            intensities = IntensitySet((0.0, *mus), signal_index)
        except ValueError as exc:
            problems.append(f"[source]: {exc}")

    k = len(mus)
    send = np.zeros(2 * k + 1)
    vac = _get(cp, "send_prob", "vacuum", float, None, problems, required=True)
    if vac is not None:
        send[0] = vac
    for i in range(1, k + 1):
        v = _get(cp, "send_prob", f"mu_{i}", float, None, problems, required=True)
        if v is not None:
            send[i] = v
            send[i + k] = v

    rate_pairs = _parse_pairs(
        _get(cp, "reconciliation", "rate_table", str,
             "0.025:0.67, 0.045:0.60, 0.055:0.56, 0.075:0.50", problems),
        "rate_table", problems)
    rate_table = tuple(sorted((float(q), r) for q, r in rate_pairs.items()))
    profile_pairs = _parse_pairs(
        _get(cp, "reconciliation", "degree_profile", str,
             "2:0.40, 3:0.35, 6:0.25", problems),
        "degree_profile", problems)
    try:
        degree_profile = {int(d): f for d, f in profile_pairs.items()}
    except ValueError:
        problems.append("degree_profile: degrees must be integers")
        degree_profile = {2: 0.4, 3: 0.35, 6: 0.25}

    fields = dict(
        raw_key_bits=_get(cp, "session", "raw_key_bits", int, 0, problems, True),
        max_final_key_bits=_get(cp, "session", "max_final_key_bits", int, 0,
                                problems, True),
        security_exponent=_get(cp, "session", "security_exponent", int, 0,
                               problems, True),
        time_slot_s=_get(cp, "session", "time_slot_s", float, 0.0, problems, True),
        dark_count_prob=_get(cp, "channel", "dark_count_prob", float, -1.0,
                             problems, True),
        pulse_rate_hz=_get(cp, "source", "pulse_rate_hz", float, 1e6, problems),
        ldpc_block_bits=_get(cp, "reconciliation", "block_bits", int, 10_000,
                             problems),
        grid_points=_get(cp, "estimation", "grid_points", int, 64, problems),
        fock_cutoff=_get(cp, "source", "fock_cutoff", int, 40, problems),
    )
    transmittance = _get(cp, "channel", "transmittance", float, 0.0, problems)
    mis_plus = _get(cp, "channel", "misalignment_plus", float, None, problems)
    mis_times = _get(cp, "channel", "misalignment_times", float, None, problems)
    mis_common = _get(cp, "channel", "misalignment", float, 0.0, problems)
    misalignment = {"plus": mis_plus if mis_plus is not None else mis_common,
                    "times": mis_times if mis_times is not None else mis_common}
    for basis, v in misalignment.items():
        if not 0 <= v <= 1:
            problems.append(f"misalignment_{basis} must lie in [0, 1]")
    if not 0 <= transmittance <= 1:
        problems.append("transmittance must lie in [0, 1]")

    session = None
    if intensities is not None and not problems:
        try:
            session = SessionConfig(intensities=intensities, send_prob=send,
                                    rate_table=rate_table,
                                    degree_profile=degree_profile, **fields)
        except ValueError as exc:
            problems.extend(str(exc).split("; "))
    elif intensities is not None:
        # Collect session-level violations too before giving up.
        trial = SessionConfig.__new__(SessionConfig)
        trial.intensities = intensities
        trial.send_prob = send
        trial.rate_table = rate_table
        trial.degree_profile = degree_profile
        for name, value in fields.items():
            setattr(trial, name, value)
        problems.extend(trial.validate())

    if problems:
        raise ConfigError(problems)

    echo = {s: dict(cp.items(s)) for s in cp.sections()}
    return RunConfig(session=session, transmittance=transmittance,
                     misalignment=misalignment, echo=echo)


def reference_config_text() -> str:
    return resources.files("dsbb84.data").joinpath("reference.ini").read_text()


def reference_counts_text() -> str:
    return resources.files("dsbb84.data").joinpath(
        "reference_counts.json").read_text()
