"""Endpoint configuration shared by the facade producer and loader."""

from __future__ import annotations

import os

ENV_BROADCAST = "BATCHSOCKET_BROADCAST"
ENV_AGGREGATE = "BATCHSOCKET_AGGREGATE"


def endpoints_from_env(broadcast: str | None, aggregate: str | None) -> tuple[str, str]:
    broadcast = broadcast or os.environ.get(ENV_BROADCAST)
    aggregate = aggregate or os.environ.get(ENV_AGGREGATE)
    if not broadcast or not aggregate:
        raise ValueError(
            "endpoints required: pass broadcast=/aggregate= or set "
            f"{ENV_BROADCAST} and {ENV_AGGREGATE}"
        )
    return broadcast, aggregate


def parse_endpoint(spec: str) -> tuple[str, object]:
    spec = spec.strip()
    if spec.startswith("unix:"):
        return ("unix", spec[5:])
    if spec.startswith("tcp:"):
        host, _, port = spec[4:].rpartition(":")
        return ("tcp", (host, int(port)))
    if "/" in spec:
        return ("unix", spec)
    host, sep, port = spec.rpartition(":")
    if sep and port.isdigit():
        return ("tcp", (host, int(port)))
    raise ValueError(f"cannot parse endpoint {spec!r}")
