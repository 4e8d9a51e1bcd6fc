"""Uniform scoring interface over masked LMs, plus the built-in toy model.

The toy model is a one-head, one-block transformer with residual connections
and an untied output projection, small enough that its backward pass (in the
trainer module) can be checked against finite differences.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol, Sequence, runtime_checkable

import numpy as np

from .errors import ConslabError, InputError
from .resource import KBTuple, Relation, modal_object

MASK_TOKEN = "[MASK]"
UNK_TOKEN = "<unk>"


class ScoreError(ConslabError):
    """A score request cannot be served (bad mask count, OOV candidate, ...)."""


@dataclass(frozen=True)
class ScoreRequest:
    """One populated cloze plus the candidate strings to score.

    ``relation_id`` is an optional hint consumed by baseline scorers that
    key their behavior on the relation rather than on the input text.
    """

    text: str
    candidates: tuple[str, ...]
    want_hidden: bool = False
    relation_id: str | None = None

    def __post_init__(self) -> None:
        if not self.candidates:
            raise ScoreError("candidates must be nonempty")


@dataclass(frozen=True)
class ScoreResponse:
    log_scores: np.ndarray  # one natural-log score per candidate
    model_id: str
    hidden: np.ndarray | None = None


def predicted_index(response: ScoreResponse) -> int:
    """Argmax over candidates; ties break toward the earlier candidate."""
    scores = np.asarray(response.log_scores)
    if scores.size == 0 or not np.all(np.isfinite(scores)):
        raise ScoreError("log scores must be finite and nonempty")
    return int(np.argmax(scores))


@runtime_checkable
class Scorer(Protocol):
    model_id: str
    mask_token: str
    supports_hidden: bool

    def score(self, request: ScoreRequest) -> ScoreResponse: ...

    def tokenize_check(self, words: Sequence[str]) -> list[bool]: ...


def tokenize_check(scorer: Scorer, words: Sequence[str]) -> list[bool]:
    """Per-word single-token verdicts, in input order."""
    return scorer.tokenize_check(words)


# ---------------------------------------------------------------------------
# Toy tokenizer: whitespace split, punctuation stripped, case preserved
# ---------------------------------------------------------------------------

def tokenize(text: str, mask_token: str = MASK_TOKEN) -> list[str]:
    tokens: list[str] = []
    for piece in text.split():
        if piece == mask_token:
            tokens.append(mask_token)
            continue
        if mask_token in piece:
            # e.g. "[MASK]." from a template with a trailing period
            rest = piece.replace(mask_token, "", 1)
            if all(ch in string.punctuation for ch in rest):
                tokens.append(mask_token)
                continue
        word = piece.strip(string.punctuation)
        if word:
            tokens.append(word)
    return tokens


# ---------------------------------------------------------------------------
# Toy masked LM
# ---------------------------------------------------------------------------

PARAM_NAMES = (
    "tok_emb", "pos_emb",
    "w_q", "w_k", "w_v", "w_o",
    "w_ff1", "b_ff1", "w_ff2", "b_ff2",
    "w_out", "b_out",
)

CHECKPOINT_FORMAT = "conslab-toymlm"
CHECKPOINT_VERSION = 1


class ToyMLM:
    """One attention head + one tanh feed-forward block, residual wired.

    All parameters are float64 numpy arrays; the forward pass is a pure
    function of (parameters, input ids).
    """

    def __init__(self, vocab: Sequence[str], params: Mapping[str, np.ndarray]):
        if MASK_TOKEN not in vocab:
            raise InputError(f"vocabulary must contain the mask token {MASK_TOKEN!r}")
        if UNK_TOKEN not in vocab:
            raise InputError(f"vocabulary must contain {UNK_TOKEN!r}")
        if len(set(vocab)) != len(vocab):
            raise InputError("vocabulary contains duplicate tokens")
        self.vocab = tuple(vocab)
        self.params = {name: np.asarray(params[name], dtype=np.float64) for name in PARAM_NAMES}
        self._index = {tok: i for i, tok in enumerate(self.vocab)}
        self._check_shapes()

    def _check_shapes(self) -> None:
        v, d = self.params["tok_emb"].shape
        if v != len(self.vocab):
            raise InputError("token embedding rows must match vocabulary size")
        h = self.params["w_ff1"].shape[1]
        expected = {
            "pos_emb": (self.max_len, d),
            "w_q": (d, d), "w_k": (d, d), "w_v": (d, d), "w_o": (d, d),
            "w_ff1": (d, h), "b_ff1": (h,), "w_ff2": (h, d), "b_ff2": (d,),
            "w_out": (d, v), "b_out": (v,),
        }
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise InputError(
                    f"parameter {name} has shape {self.params[name].shape}, expected {shape}"
                )
        for name, arr in self.params.items():
            if not np.all(np.isfinite(arr)):
                raise InputError(f"parameter {name} contains non-finite values")

    @property
    def dim(self) -> int:
        return self.params["tok_emb"].shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.params["w_ff1"].shape[1]

    @property
    def max_len(self) -> int:
        return self.params["pos_emb"].shape[0]

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def mask_id(self) -> int:
        return self._index[MASK_TOKEN]

    @classmethod
    def init(
        cls,
        vocab: Sequence[str],
        dim: int = 32,
        hidden_dim: int = 64,
        max_len: int = 16,
        seed: int = 0,
        emb_scale: float = 0.5,
    ) -> "ToyMLM":
        rng = np.random.default_rng(seed)
        v = len(vocab)
        d, h = dim, hidden_dim
        params = {
            "tok_emb": rng.normal(0.0, emb_scale, (v, d)),
            "pos_emb": rng.normal(0.0, emb_scale, (max_len, d)),
            "w_q": rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)),
            "w_k": rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)),
            "w_v": rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)),
            "w_o": rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)),
            "w_ff1": rng.normal(0.0, 1.0 / np.sqrt(d), (d, h)),
            "b_ff1": np.zeros(h),
            "w_ff2": rng.normal(0.0, 1.0 / np.sqrt(h), (h, d)),
            "b_ff2": np.zeros(d),
            "w_out": rng.normal(0.0, 1.0 / np.sqrt(d), (d, v)),
            "b_out": np.zeros(v),
        }
        return cls(vocab, params)

    def copy(self) -> "ToyMLM":
        return ToyMLM(self.vocab, {k: v.copy() for k, v in self.params.items()})

    def token_id(self, token: str) -> int:
        return self._index.get(token, self._index[UNK_TOKEN])

    def encode(self, text: str) -> list[int]:
        return [self.token_id(tok) for tok in tokenize(text)]

    def forward_all(self, token_ids: Sequence[int]) -> dict[str, np.ndarray]:
        """Full forward pass over a sequence, keeping every intermediate.

        The cache is what the trainer's backward pass consumes.
        """
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise ScoreError("token ids must be a nonempty 1-D sequence")
        if ids.size > self.max_len:
            raise ScoreError(
                f"sequence of length {ids.size} exceeds positional table ({self.max_len})"
            )
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise ScoreError("token id out of vocabulary range")
        p = self.params
        x = p["tok_emb"][ids] + p["pos_emb"][: ids.size]
        q = x @ p["w_q"]
        k = x @ p["w_k"]
        v = x @ p["w_v"]
        scores = (q @ k.T) / np.sqrt(self.dim)
        scores -= scores.max(axis=1, keepdims=True)
        attn = np.exp(scores)
        attn /= attn.sum(axis=1, keepdims=True)
        ctx = attn @ v
        attn_out = ctx @ p["w_o"]
        h1 = x + attn_out
        z1 = h1 @ p["w_ff1"] + p["b_ff1"]
        f1 = np.tanh(z1)
        z2 = f1 @ p["w_ff2"] + p["b_ff2"]
        h2 = h1 + z2
        logits = h2 @ p["w_out"] + p["b_out"]
        return {
            "ids": ids, "x": x, "q": q, "k": k, "v": v, "attn": attn,
            "ctx": ctx, "h1": h1, "f1": f1, "h2": h2, "logits": logits,
        }


def toy_forward(
    model: ToyMLM, token_ids: Sequence[int], mask_position: int
) -> tuple[np.ndarray, np.ndarray]:
    """Vocabulary logits and last-layer hidden state at the mask position."""
    cache = model.forward_all(token_ids)
    n = cache["ids"].size
    if not 0 <= mask_position < n:
        raise ScoreError(f"mask position {mask_position} out of range for length {n}")
    return cache["logits"][mask_position].copy(), cache["h2"][mask_position].copy()


class ToyScorer:
    """Adapts a ToyMLM to the scorer interface."""

    def __init__(self, model: ToyMLM, model_id: str = "toy-mlm"):
        self.model = model
        self.model_id = model_id
        self.mask_token = MASK_TOKEN
        self.supports_hidden = True

    def _mask_position(self, tokens: Sequence[str]) -> int:
        positions = [i for i, t in enumerate(tokens) if t == MASK_TOKEN]
        if len(positions) != 1:
            raise ScoreError(
                f"expected exactly one {MASK_TOKEN!r}, found {len(positions)}"
            )
        return positions[0]

    def candidate_id(self, candidate: str) -> int:
        toks = tokenize(candidate)
        if len(toks) != 1 or toks[0] not in self.model._index or toks[0] == UNK_TOKEN:
            raise ScoreError(f"candidate {candidate!r} is not a single vocabulary token")
        return self.model._index[toks[0]]

    def score(self, request: ScoreRequest) -> ScoreResponse:
        tokens = tokenize(request.text)
        mask_pos = self._mask_position(tokens)
        cand_ids = [self.candidate_id(c) for c in request.candidates]
        ids = [self.model.token_id(t) for t in tokens]
        logits, hidden = toy_forward(self.model, ids, mask_pos)
        return ScoreResponse(
            log_scores=logits[cand_ids],
            model_id=self.model_id,
            hidden=hidden if request.want_hidden else None,
        )

    def tokenize_check(self, words: Sequence[str]) -> list[bool]:
        out = []
        for w in words:
            toks = tokenize(w)
            out.append(
                len(toks) == 1 and toks[0] in self.model._index and toks[0] != UNK_TOKEN
            )
        return out


class MajorityScorer:
    """Baseline that always scores a relation's most common object highest.

    Perfectly consistent by construction. Relations are resolved through the
    request's relation id when present, otherwise through the exact candidate
    tuple.
    """

    def __init__(self, modal_by_relation: Mapping[str, str], modal_by_candidates: Mapping[tuple[str, ...], str | None]):
        self._by_relation = dict(modal_by_relation)
        self._by_candidates = dict(modal_by_candidates)
        self.model_id = "majority"
        self.mask_token = MASK_TOKEN
        self.supports_hidden = False

    def _modal(self, request: ScoreRequest) -> str:
        if request.relation_id is not None:
            modal = self._by_relation.get(request.relation_id)
            if modal is None:
                raise ScoreError(f"unknown relation {request.relation_id!r}")
            return modal
        modal = self._by_candidates.get(request.candidates)
        if modal is None:
            raise ScoreError(
                "cannot resolve the relation from the candidate set alone; "
                "pass relation_id in the request"
            )
        return modal

    def score(self, request: ScoreRequest) -> ScoreResponse:
        modal = self._modal(request)
        scores = np.array([1.0 if c == modal else 0.0 for c in request.candidates])
        if request.want_hidden:
            raise ScoreError("majority scorer does not export hidden states")
        return ScoreResponse(log_scores=scores, model_id=self.model_id)

    def tokenize_check(self, words: Sequence[str]) -> list[bool]:
        return [True for _ in words]


def majority_scorer(
    relations: Sequence[Relation], tuples: Sequence[KBTuple]
) -> MajorityScorer:
    grouped: dict[str, list[KBTuple]] = {}
    for t in tuples:
        grouped.setdefault(t.relation_id, []).append(t)
    by_relation: dict[str, str] = {}
    by_candidates: dict[tuple[str, ...], str | None] = {}
    for r in relations:
        rel_tuples = grouped.get(r.relation_id, [])
        if not rel_tuples:
            continue
        modal = modal_object(rel_tuples, r.candidates)
        by_relation[r.relation_id] = modal
        key = tuple(r.candidates)
        if key in by_candidates and by_candidates[key] != modal:
            by_candidates[key] = None  # ambiguous; request must carry relation_id
        else:
            by_candidates[key] = modal
    return MajorityScorer(by_relation, by_candidates)


def build_vocabulary(
    relations: Sequence[Relation], tuples: Sequence[KBTuple]
) -> tuple[str, ...]:
    """Derive a toy vocabulary covering all templates, subjects, and objects."""
    words: set[str] = set()
    for r in relations:
        for p in r.patterns:
            stripped = p.template.replace("[X]", " ").replace("[Y]", " ")
            words.update(tokenize(stripped))
    for t in tuples:
        words.update(tokenize(t.subject))
        words.add(t.object)
    words.discard(MASK_TOKEN)
    words.discard(UNK_TOKEN)
    return (MASK_TOKEN, UNK_TOKEN) + tuple(sorted(words))


# ---------------------------------------------------------------------------
# Checkpoint format: one JSON header line, then raw little-endian float64
# ---------------------------------------------------------------------------

def save_checkpoint(model: ToyMLM, path: str | Path) -> None:
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dims": {
            "dim": model.dim,
            "hidden_dim": model.hidden_dim,
            "max_len": model.max_len,
            "vocab_size": model.vocab_size,
        },
        "vocab": list(model.vocab),
        "arrays": [[name, list(model.params[name].shape)] for name in PARAM_NAMES],
    }
    with Path(path).open("wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for name in PARAM_NAMES:
            fh.write(np.ascontiguousarray(model.params[name], dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> ToyMLM:
    file = Path(path)
    if not file.is_file():
        raise InputError(f"checkpoint not found: {file}")
    with file.open("rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise InputError(f"{file}: invalid checkpoint header: {exc}") from exc
        if header.get("format") != CHECKPOINT_FORMAT:
            raise InputError(f"{file}: not a {CHECKPOINT_FORMAT} checkpoint")
        if header.get("version") != CHECKPOINT_VERSION:
            raise InputError(f"{file}: unsupported checkpoint version {header.get('version')}")
        blob = fh.read()
    params: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(blob):
            raise InputError(f"{file}: checkpoint truncated at array {name!r}")
        params[name] = np.frombuffer(
            blob, dtype="<f8", count=count, offset=offset
        ).reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise InputError(f"{file}: trailing bytes after parameter arrays")
    return ToyMLM(header["vocab"], params)
