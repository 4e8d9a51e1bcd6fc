import json
import subprocess
import sys

import pytest
import torch

WORDS = [
    "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]",
    "the", "capital", "of", "wales", "is", "cardiff", "london", "paris",
    "france", "tokyo", "japan", "born", "in", "city", "plays", "for",
    "obj00", "obj01", "obj02", "ent00", "ent01", "ent02", "ent03",
]


def build_tiny_model(directory) -> str:
    """Deterministic random-weight BERT over a closed word-level vocabulary."""
    from tokenizers import Tokenizer, models, normalizers, pre_tokenizers, processors
    from transformers import BertConfig, BertForMaskedLM, PreTrainedTokenizerFast

    vocab = {w: i for i, w in enumerate(WORDS)}
    core = Tokenizer(models.WordPiece(vocab, unk_token="[UNK]"))
    core.normalizer = normalizers.BertNormalizer(lowercase=True)
    core.pre_tokenizer = pre_tokenizers.BertPreTokenizer()
    core.post_processor = processors.BertProcessing(
        sep=("[SEP]", vocab["[SEP]"]), cls=("[CLS]", vocab["[CLS]"])
    )
    tokenizer = PreTrainedTokenizerFast(
        tokenizer_object=core,
        unk_token="[UNK]", pad_token="[PAD]", cls_token="[CLS]",
        sep_token="[SEP]", mask_token="[MASK]",
    )
    torch.manual_seed(7)
    config = BertConfig(
        vocab_size=len(WORDS), hidden_size=32, num_hidden_layers=2,
        num_attention_heads=2, intermediate_size=64, max_position_embeddings=64,
    )
    model = BertForMaskedLM(config)
    model.save_pretrained(directory)
    tokenizer.save_pretrained(directory)
    return str(directory)


@pytest.fixture(scope="session")
def tiny_model_dir(tmp_path_factory):
    return build_tiny_model(tmp_path_factory.mktemp("tiny_bert"))


class BridgeProcess:
    """Raw JSON-lines conversation with a served bridge subprocess."""

    def __init__(self, model_dir: str):
        self.proc = subprocess.Popen(
            [sys.executable, "-m", "conslab_bridge", "--model", model_dir],
            stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1,
        )
        self._next_id = 0

    def send_raw(self, line: str) -> dict:
        self.proc.stdin.write(line + "\n")
        self.proc.stdin.flush()
        out = self.proc.stdout.readline()
        assert out, "bridge closed its stdout"
        return json.loads(out)

    def request(self, message: dict) -> dict:
        message = dict(message, id=self._next_id)
        self._next_id += 1
        response = self.send_raw(json.dumps(message))
        assert response.get("id") == message["id"], (message, response)
        return response

    def alive(self) -> bool:
        return self.proc.poll() is None

    def close(self) -> None:
        if self.proc.poll() is None:
            self.proc.stdin.close()
            try:
                self.proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self.proc.kill()


@pytest.fixture(scope="module")
def bridge(tiny_model_dir):
    proc = BridgeProcess(tiny_model_dir)
    hello = proc.request({"type": "hello"})
    assert hello["type"] == "hello"
    yield proc
    proc.close()
