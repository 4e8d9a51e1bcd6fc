"""End-to-end checks: TCP transport and the probing harness driving the bridge.

The harness is consumed strictly through its command line; these tests skip
when it is not installed.
"""

import importlib.util
import json
import socket
import subprocess
import sys
import time
from pathlib import Path

import pytest


def _free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


class TestTcpTransport:
    def test_same_protocol_over_tcp(self, tiny_model_dir):
        port = _free_port()
        proc = subprocess.Popen(
            [sys.executable, "-m", "conslab_bridge", "--model", tiny_model_dir,
             "--tcp", str(port)],
            stdout=subprocess.PIPE, stderr=subprocess.PIPE,
        )
        try:
            deadline = time.time() + 30
            conn = None
            while time.time() < deadline:
                try:
                    conn = socket.create_connection(("127.0.0.1", port), timeout=1)
                    break
                except OSError:
                    time.sleep(0.2)
            assert conn is not None, "bridge never opened the TCP port"
            with conn:
                reader = conn.makefile("r", encoding="utf-8")
                writer = conn.makefile("w", encoding="utf-8")
                writer.write(json.dumps({"type": "hello", "id": 0}) + "\n")
                writer.flush()
                hello = json.loads(reader.readline())
                assert hello["mask_token"] == "[MASK]"
                writer.write(json.dumps({
                    "type": "score", "id": 1,
                    "text": "the capital of wales is [MASK]",
                    "candidates": ["cardiff", "paris"],
                }) + "\n")
                writer.flush()
                response = json.loads(reader.readline())
                assert response["id"] == 1 and len(response["log_probs"]) == 2
        finally:
            proc.kill()


HARNESS_AVAILABLE = importlib.util.find_spec("conslab") is not None


@pytest.mark.skipif(not HARNESS_AVAILABLE, reason="probing harness not installed")
class TestHarnessIntegration:
    def _write_kb(self, root: Path) -> None:
        (root / "relations").mkdir(parents=True)
        relation = {
            "relation_id": "CAP",
            "name": "capital",
            "cardinality": "N1",
            "patterns": [
                {"template": "the capital of [X] is [Y]", "is_base": True,
                 "lex_group": 0, "syn_group": 0, "para_type": None},
                {"template": "[Y] is the capital of [X]", "is_base": False,
                 "lex_group": 0, "syn_group": 1, "para_type": None},
            ],
        }
        (root / "relations" / "CAP.json").write_text(json.dumps(relation))
        tuples = [
            {"relation_id": "CAP", "subject": "wales", "object": "cardiff"},
            {"relation_id": "CAP", "subject": "france", "object": "paris"},
            {"relation_id": "CAP", "subject": "japan", "object": "tokyo"},
            # filtered out: object is two tokens
            {"relation_id": "CAP", "subject": "ent00", "object": "luxembourg city"},
        ]
        (root / "tuples.jsonl").write_text(
            "\n".join(json.dumps(t) for t in tuples) + "\n"
        )

    def test_probe_through_bridge(self, tiny_model_dir, tmp_path):
        self._write_kb(tmp_path)
        endpoint = f"{sys.executable} -m conslab_bridge --model {tiny_model_dir}"
        out = tmp_path / "report.json"
        result = subprocess.run(
            [sys.executable, "-m", "conslab.cli", "probe",
             "--resource", str(tmp_path / "relations"),
             "--tuples", str(tmp_path / "tuples.jsonl"),
             "--scorer", f"bridge:{endpoint}",
             "--out", str(out)],
            capture_output=True, text=True, timeout=300,
        )
        assert result.returncode == 0, result.stderr
        report = json.loads(out.read_text())
        relation = report["relations"][0]
        assert relation["relation_id"] == "CAP"
        assert relation["tuple_count"] == 3  # multi-token object filtered
        assert relation["pair_count"] == 3
        assert 0.0 <= relation["consistency"] <= 1.0
        assert report["config"]["single_token_removed"] == 1
