"""Client for external scorer processes speaking the JSON-lines protocol.

A bridge endpoint is either a shell command to spawn (stdio transport) or a
``tcp://host:port`` address. One request is in flight per connection; every
request carries a correlation id that the response must echo.
"""

from __future__ import annotations

import json
import shlex
import socket
import subprocess
import threading
from typing import Sequence

import numpy as np

from .errors import ConslabError, InputError
from .scorer import ScoreError, ScoreRequest, ScoreResponse


class ProtocolError(ConslabError):
    """The bridge process broke the JSON-lines contract."""


class _StdioTransport:
    def __init__(self, command: str):
        self._proc = subprocess.Popen(
            shlex.split(command),
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            bufsize=1,
        )

    def send_line(self, line: str) -> None:
        if self._proc.poll() is not None:
            raise ProtocolError(f"bridge process exited with code {self._proc.returncode}")
        assert self._proc.stdin is not None
        self._proc.stdin.write(line + "\n")
        self._proc.stdin.flush()

    def recv_line(self) -> str:
        assert self._proc.stdout is not None
        line = self._proc.stdout.readline()
        if not line:
            raise ProtocolError("bridge process closed its stdout")
        return line

    def close(self) -> None:
        if self._proc.poll() is None:
            try:
                if self._proc.stdin is not None:
                    self._proc.stdin.close()
                self._proc.wait(timeout=5)
            except (OSError, subprocess.TimeoutExpired):
                self._proc.kill()


class _TcpTransport:
    def __init__(self, host: str, port: int):
        self._sock = socket.create_connection((host, port))
        self._reader = self._sock.makefile("r", encoding="utf-8")
        self._writer = self._sock.makefile("w", encoding="utf-8")

    def send_line(self, line: str) -> None:
        self._writer.write(line + "\n")
        self._writer.flush()

    def recv_line(self) -> str:
        line = self._reader.readline()
        if not line:
            raise ProtocolError("bridge connection closed")
        return line

    def close(self) -> None:
        for closer in (self._reader.close, self._writer.close, self._sock.close):
            try:
                closer()
            except OSError:
                pass


def _open_transport(endpoint: str):
    if endpoint.startswith("tcp://"):
        rest = endpoint[len("tcp://"):]
        host, _, port = rest.rpartition(":")
        if not host or not port.isdigit():
            raise InputError(f"bad tcp endpoint {endpoint!r}, expected tcp://host:port")
        try:
            return _TcpTransport(host, int(port))
        except OSError as exc:
            raise InputError(f"cannot connect to bridge at {endpoint}: {exc}") from exc
    try:
        return _StdioTransport(endpoint)
    except OSError as exc:
        raise InputError(f"cannot spawn bridge command {endpoint!r}: {exc}") from exc


class BridgeScorer:
    """Scorer backed by an external masked-LM process."""

    def __init__(self, endpoint: str):
        self._transport = _open_transport(endpoint)
        self._lock = threading.Lock()
        self._next_id = 0
        hello = self._call({"type": "hello"})
        for key in ("model_id", "mask_token", "vocab_size"):
            if key not in hello:
                raise ProtocolError(f"hello response missing {key!r}: {hello}")
        self.model_id = str(hello["model_id"])
        self.mask_token = str(hello["mask_token"])
        self.vocab_size = int(hello["vocab_size"])
        if not self.mask_token:
            raise ProtocolError("bridge declared an empty mask token")
        self.supports_hidden = True

    def _call(self, message: dict) -> dict:
        with self._lock:
            request_id = self._next_id
            self._next_id += 1
            message = dict(message, id=request_id)
            self._transport.send_line(json.dumps(message))
            line = self._transport.recv_line()
        try:
            response = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"bridge sent invalid JSON: {line!r}") from exc
        if response.get("id") != request_id:
            raise ProtocolError(
                f"response id {response.get('id')} does not match request id {request_id}"
            )
        if response.get("type") == "error":
            raise ScoreError(f"bridge error: {response.get('message', 'unknown')}")
        return response

    def score(self, request: ScoreRequest) -> ScoreResponse:
        response = self._call(
            {
                "type": "score",
                "text": request.text,
                "candidates": list(request.candidates),
                "want_hidden": request.want_hidden,
            }
        )
        log_probs = response.get("log_probs")
        if not isinstance(log_probs, list) or len(log_probs) != len(request.candidates):
            raise ProtocolError("score response log_probs do not match candidates")
        bad = [c for c, lp in zip(request.candidates, log_probs) if lp is None]
        if bad:
            raise ScoreError(f"bridge marked candidates as multi-token: {bad}")
        hidden = None
        if request.want_hidden:
            if "hidden" not in response:
                raise ScoreError(f"bridge {self.model_id!r} returned no hidden state")
            hidden = np.asarray(response["hidden"], dtype=np.float64)
        return ScoreResponse(
            log_scores=np.asarray(log_probs, dtype=np.float64),
            model_id=self.model_id,
            hidden=hidden,
        )

    def tokenize_check(self, words: Sequence[str]) -> list[bool]:
        response = self._call({"type": "tokenize_check", "words": list(words)})
        single = response.get("single")
        if not isinstance(single, list) or len(single) != len(words):
            raise ProtocolError("tokenize_check response does not align with words")
        return [bool(v) for v in single]

    def close(self) -> None:
        self._transport.close()

    def __enter__(self) -> "BridgeScorer":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()
