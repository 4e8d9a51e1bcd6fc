"""Masked-LM scorer bridge speaking newline-delimited JSON.

Wraps any Hugging Face masked LM behind the scorer protocol:

  {"type": "hello", "id": 0}
      -> {"type": "hello", "id": 0, "model_id": ..., "mask_token": ...,
          "vocab_size": ..., "space_sensitive": ...}
  {"type": "tokenize_check", "id": n, "words": [...]}
      -> {"id": n, "single": [bool, ...]}
  {"type": "score", "id": n, "text": ..., "candidates": [...],
   "want_hidden": bool}
      -> {"id": n, "log_probs": [...], "hidden": [...]?}

Transport is stdio by default; ``--tcp PORT`` serves the same protocol over
TCP with one in-flight request per connection.
"""

from __future__ import annotations

import argparse
import json
import socketserver
import sys
import threading
from typing import Sequence

import torch
from transformers import AutoModelForMaskedLM, AutoTokenizer


class MaskedLMBridge:
    def __init__(self, model_name: str, device: str = "cpu"):
        self.model_id = model_name
        self.tokenizer = AutoTokenizer.from_pretrained(model_name)
        self.model = AutoModelForMaskedLM.from_pretrained(model_name)
        self.model.to(device)
        self.model.eval()
        self.device = device
        self._lock = threading.Lock()
        if self.tokenizer.mask_token is None or self.tokenizer.mask_token_id is None:
            raise ValueError(f"{model_name} has no mask token; not a masked LM")
        # Does the tokenizer distinguish a word at sentence start from the
        # same word after a space (byte-BPE style)? Declared in the handshake
        # because the in-sentence convention decides single-token verdicts.
        probe = "house"
        self.space_sensitive = self.tokenizer.encode(
            probe, add_special_tokens=False
        ) != self.tokenizer.encode(" " + probe, add_special_tokens=False)

    def hello(self, ident) -> dict:
        return {
            "type": "hello",
            "id": ident,
            "model_id": self.model_id,
            "mask_token": self.tokenizer.mask_token,
            "vocab_size": len(self.tokenizer),
            "space_sensitive": self.space_sensitive,
        }

    def single_token_id(self, word: str) -> int | None:
        """Vocabulary id if the word is one token in-sentence, else None."""
        if not word:
            return None
        text = " " + word if self.space_sensitive else word
        ids = self.tokenizer.encode(text, add_special_tokens=False)
        if len(ids) != 1 or ids[0] == self.tokenizer.unk_token_id and word != self.tokenizer.unk_token:
            return None
        return ids[0]

    def handle_tokenize_check(self, ident, words: Sequence[str]) -> dict:
        return {"id": ident, "single": [self.single_token_id(w) is not None for w in words]}

    def handle_score(self, ident, message: dict) -> dict:
        text = message.get("text", "")
        candidates = message.get("candidates", [])
        if not isinstance(candidates, list) or not candidates:
            return _error(ident, "score request needs a nonempty candidate list")
        encoding = self.tokenizer(text, return_tensors="pt").to(self.device)
        mask_positions = (
            (encoding["input_ids"][0] == self.tokenizer.mask_token_id).nonzero().flatten()
        )
        if mask_positions.numel() != 1:
            return _error(
                ident, f"expected exactly one {self.tokenizer.mask_token}, "
                f"found {mask_positions.numel()}"
            )
        position = int(mask_positions[0])
        want_hidden = bool(message.get("want_hidden", False))
        with self._lock, torch.no_grad():
            output = self.model(**encoding, output_hidden_states=want_hidden)
        log_probs = torch.log_softmax(output.logits[0, position].double(), dim=-1)
        response: dict = {"id": ident, "log_probs": []}
        for candidate in candidates:
            tid = self.single_token_id(str(candidate))
            response["log_probs"].append(None if tid is None else float(log_probs[tid]))
        if want_hidden:
            hidden = output.hidden_states[-1][0, position]
            response["hidden"] = [float(v) for v in hidden]
        if message.get("want_norm"):
            response["norm"] = float(torch.exp(log_probs).sum())
        return response

    def handle_line(self, line: str) -> str:
        try:
            message = json.loads(line)
        except json.JSONDecodeError:
            return json.dumps(_error(None, "invalid JSON"))
        if not isinstance(message, dict):
            return json.dumps(_error(None, "message must be a JSON object"))
        ident = message.get("id")
        kind = message.get("type")
        try:
            if kind == "hello":
                return json.dumps(self.hello(ident))
            if kind == "tokenize_check":
                words = message.get("words", [])
                if not isinstance(words, list):
                    return json.dumps(_error(ident, "'words' must be a list"))
                return json.dumps(self.handle_tokenize_check(ident, [str(w) for w in words]))
            if kind == "score":
                return json.dumps(self.handle_score(ident, message))
            return json.dumps(_error(ident, f"unknown message type {kind!r}"))
        except Exception as exc:  # keep the loop alive on any request failure
            return json.dumps(_error(ident, f"{type(exc).__name__}: {exc}"))


def _error(ident, message: str) -> dict:
    return {"type": "error", "id": ident, "message": message}


def serve_stdio(bridge: MaskedLMBridge) -> None:
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        print(bridge.handle_line(line), flush=True)


def serve_tcp(bridge: MaskedLMBridge, port: int) -> None:
    class Handler(socketserver.StreamRequestHandler):
        def handle(self) -> None:
            for raw in self.rfile:
                line = raw.decode("utf-8").strip()
                if not line:
                    continue
                self.wfile.write((bridge.handle_line(line) + "\n").encode("utf-8"))
                self.wfile.flush()

    class Server(socketserver.ThreadingTCPServer):
        allow_reuse_address = True
        daemon_threads = True

    with Server(("127.0.0.1", port), Handler) as server:
        print(f"listening on tcp://127.0.0.1:{server.server_address[1]}", file=sys.stderr)
        server.serve_forever()


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="conslab-bridge",
        description="Serve a pretrained masked LM over the JSON-lines scorer protocol.",
    )
    parser.add_argument("--model", required=True, help="Hugging Face model name or local path")
    parser.add_argument("--tcp", type=int, help="listen on this TCP port instead of stdio")
    parser.add_argument("--device", default="cpu")
    args = parser.parse_args(argv)
    try:
        bridge = MaskedLMBridge(args.model, device=args.device)
    except Exception as exc:
        print(f"error: cannot load model {args.model!r}: {exc}", file=sys.stderr)
        return 1
    if args.tcp is not None:
        serve_tcp(bridge, args.tcp)
    else:
        serve_stdio(bridge)
    return 0


if __name__ == "__main__":
    sys.exit(main())
