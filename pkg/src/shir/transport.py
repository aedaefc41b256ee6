"""Site-to-aggregator exchange: envelope files and a one-shot socket protocol.

The socket protocol is a single length-prefixed frame (u32 little-endian
length, then the envelope bytes) per connection, after which the server
closes the stream.  There is no further dialogue: the whole method needs
one transfer per site.
"""

from __future__ import annotations

import json
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

from .data import LocalSummary, check_summaries
from .envelope import decode_summary, encode_summary, sidecar_manifest
from .errors import ContractViolation, SiteError


def write_envelope(summary: LocalSummary, path) -> Path:
    """Write the binary envelope plus a human-readable sidecar manifest."""
    path = Path(path)
    path.write_bytes(encode_summary(summary))
    path.with_suffix(path.suffix + ".manifest.txt").write_text(
        sidecar_manifest(summary))
    return path


def read_envelope(path) -> LocalSummary:
    return decode_summary(Path(path).read_bytes())


def _recv_exact(sock, count):
    chunks = []
    while count > 0:
        chunk = sock.recv(count)
        if not chunk:
            raise ConnectionError("peer closed the stream mid-frame")
        chunks.append(chunk)
        count -= len(chunk)
    return b"".join(chunks)


def fetch_summary(host: str, port: int, timeout=10.0) -> LocalSummary:
    """Fetch one framed envelope from a serving site."""
    with socket.create_connection((host, port), timeout=timeout) as sock:
        (length,) = struct.unpack("<I", _recv_exact(sock, 4))
        payload = _recv_exact(sock, length)
    return decode_summary(payload)


class _EnvelopeHandler(socketserver.BaseRequestHandler):
    def handle(self):
        payload = self.server.envelope_bytes
        self.request.sendall(struct.pack("<I", len(payload)) + payload)


class SummaryServer(socketserver.ThreadingTCPServer):
    """Serves one summary, one frame per connection."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, summary: LocalSummary, host="127.0.0.1", port=0):
        super().__init__((host, port), _EnvelopeHandler)
        self.envelope_bytes = encode_summary(summary)

    @property
    def address(self):
        return self.server_address[:2]

    def start_background(self):
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return thread


def serve_site(summary: LocalSummary, host="127.0.0.1", port=0,
               background=False):
    """Serve a summary over the framed protocol.

    Blocking by default (for the command line); with background=True returns
    the running server whose .address gives the bound (host, port).
    """
    server = SummaryServer(summary, host=host, port=port)
    if background:
        server.start_background()
        return server
    try:
        server.serve_forever()
    finally:
        server.server_close()
    return server


@dataclass
class RunManifest:
    """Everything an aggregation run needs: sources, penalty plan, outputs."""

    sites: list[str] = field(default_factory=list)
    schedule: str = "bic"
    lambda_grid: list[float] | None = None
    lambda_g_grid: list[float] | None = None
    seed: int = 0
    out_dir: str | None = None

    @classmethod
    def from_json(cls, path) -> "RunManifest":
        raw = json.loads(Path(path).read_text())
        known = {k: raw[k] for k in
                 ("sites", "schedule", "lambda_grid", "lambda_g_grid",
                  "seed", "out_dir") if k in raw}
        return cls(**known)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.__dict__, indent=2) + "\n")


def _parse_source(source: str):
    if ":" in source and not Path(source).exists():
        host, _, port = source.rpartition(":")
        if port.isdigit():
            return ("socket", host, int(port))
    return ("file", source, None)


def collect(manifest: RunManifest, retries=1, timeout=10.0) -> list[LocalSummary]:
    """Fetch exactly one summary per configured site.

    A site that cannot be reached (after the configured retries) aborts the
    whole collection: partial aggregations are never formed.  Duplicate
    site ids are fatal.
    """
    if not manifest.sites:
        raise ContractViolation("manifest lists no sites")
    out = []
    for source in manifest.sites:
        kind, a, b = _parse_source(source)
        last_err = None
        for _ in range(retries + 1):
            try:
                if kind == "socket":
                    out.append(fetch_summary(a, b, timeout=timeout))
                else:
                    out.append(read_envelope(a))
                last_err = None
                break
            except (OSError, ConnectionError) as err:
                last_err = err
        if last_err is not None:
            raise SiteError(f"could not fetch summary from {source!r}: {last_err}",
                            site_id=source)
    return check_summaries(out)
