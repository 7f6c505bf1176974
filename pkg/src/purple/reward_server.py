"""Bundled mock scoring service implementing the /score wire contract.

Three scripted behaviours, checked in order:

* `table` — per-reference (or per prompt+reference) lists of token
  log-probabilities; the reference is split into whitespace-preserving pieces
  matching the list length.
* `reward_fn(prompt, reference) -> float` — the whole reference is one token
  carrying that value, so the client-side sum reproduces the function; used
  for wire-equivalence runs against an in-process oracle.
* neither — every reference token scores -1.0.

Failure injection for retry tests: `fail_first` requests return HTTP 500,
and `omit_logprobs` drops the token_logprobs field.
"""

from __future__ import annotations

import json
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Mapping


def split_preserving_whitespace(text: str) -> list[str]:
    """Pieces that concatenate back to exactly `text`, one per whitespace-run-delimited word."""
    return re.findall(r"\S+\s*|\s+", text)


class MockRewardServer:
    """Threaded HTTP server answering POST /score from a scripted policy."""

    def __init__(
        self,
        *,
        table: Mapping | None = None,
        reward_fn: Callable[[str, str], float] | None = None,
        fail_first: int = 0,
        omit_logprobs: bool = False,
        host: str = "127.0.0.1",
        port: int = 0,
    ):
        self.table = dict(table) if table else {}
        self.reward_fn = reward_fn
        self.omit_logprobs = omit_logprobs
        self._fail_remaining = fail_first
        self._lock = threading.Lock()
        self.request_count = 0
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self) -> None:  # noqa: N802 - http.server API
                if self.path != "/score":
                    self.send_error(404)
                    return
                length = int(self.headers.get("Content-Length", "0"))
                body = json.loads(self.rfile.read(length).decode("utf-8"))
                status, payload = outer._respond(body.get("prompt", ""), body.get("reference", ""))
                data = json.dumps(payload).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, fmt, *args) -> None:  # silence request logging
                pass

        self._server = ThreadingHTTPServer((host, port), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    def _respond(self, prompt: str, reference: str) -> tuple[int, dict]:
        with self._lock:
            self.request_count += 1
            if self._fail_remaining > 0:
                self._fail_remaining -= 1
                return 500, {"error": "injected failure"}

        prompt_tokens = [prompt] if prompt else []
        entry = self.table.get((prompt, reference), self.table.get(reference))
        if entry is not None:
            pieces = split_preserving_whitespace(reference)
            if len(pieces) != len(entry):
                return 400, {
                    "error": f"table entry has {len(entry)} logprobs but the reference "
                    f"splits into {len(pieces)} pieces"
                }
            ref_tokens, ref_logprobs = pieces, [float(v) for v in entry]
        elif self.reward_fn is not None:
            ref_tokens, ref_logprobs = [reference], [float(self.reward_fn(prompt, reference))]
        else:
            ref_tokens = split_preserving_whitespace(reference)
            ref_logprobs = [-1.0] * len(ref_tokens)

        payload = {
            "tokens": prompt_tokens + ref_tokens,
            "token_logprobs": [0.0] * len(prompt_tokens) + ref_logprobs,
            "reference_start": len(prompt_tokens),
        }
        if self.omit_logprobs:
            payload.pop("token_logprobs")
        return 200, payload

    @property
    def endpoint(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "MockRewardServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self) -> "MockRewardServer":
        return self.start()

    def __exit__(self, *exc_info) -> None:
        self.stop()
