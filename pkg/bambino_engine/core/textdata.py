"""
textdata.py
===========
Corpus ingestion, the shared character tokenizer, synthetic bilingual text
and deterministic batching.

Both languages are character-level sources, so one vocabulary serves the
baby and the parent. Synthetic languages are order-k Markov chains over an
alphabet; their exact entropy rate is computable from the transition table
and the stationary distribution, which gives an analytic floor for model
cross-entropy.

Source: entropy rate of a stationary Markov source, H = Σ_s π(s) H(P(·|s)).
"""

import json
import logging
import math
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import EmptyVocabError, GrammarValidationError, IngestionError
from .kvtext import atomic_write_text, dump_pairs, parse_pairs

logger = logging.getLogger(__name__)

# ── Specials ───────────────────────────────────────────────────

BOS, EOS, PAD, UNK = 0, 1, 2, 3
SPECIAL_NAMES = ["<bos>", "<eos>", "<pad>", "<unk>"]
# decode() renders specials as private-use code points so encode() can read them back
SPECIAL_GLYPHS = ["\ue000", "\ue001", "\ue002", "\ue003"]
TOKENIZER_HEADER = "charvocab v1"

LENGTH_DISTRIBUTIONS = ("fixed", "poisson", "geometric")


def normalize_text(text: str) -> str:
    """NFC, whitespace runs collapsed to one space, ends stripped."""
    text = unicodedata.normalize("NFC", text)
    return " ".join(text.split())


# ── Tokenizer ──────────────────────────────────────────────────

@dataclass
class CharTokenizer:
    chars: List[str]
    _index: Dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.chars)) != len(self.chars):
            raise EmptyVocabError("tokenizer characters must be unique")
        self._index = {c: i + len(SPECIAL_NAMES) for i, c in enumerate(self.chars)}
        for i, glyph in enumerate(SPECIAL_GLYPHS):
            self._index.setdefault(glyph, i)

    @property
    def vocab(self) -> List[str]:
        return SPECIAL_NAMES + self.chars

    @property
    def vocab_size(self) -> int:
        return len(SPECIAL_NAMES) + len(self.chars)

    def encode(self, text: str) -> List[int]:
        return [self._index.get(c, UNK) for c in text]

    def encode_document(self, text: str) -> List[int]:
        return [BOS] + self.encode(text) + [EOS]

    def decode(self, ids: Sequence[int], skip_specials: bool = False) -> str:
        out = []
        offset = len(SPECIAL_NAMES)
        for i in ids:
            i = int(i)
            if i < offset:
                if not skip_specials:
                    out.append(SPECIAL_GLYPHS[i])
            else:
                out.append(self.chars[i - offset])
        return "".join(out)

    def save(self, path) -> None:
        lines = [TOKENIZER_HEADER] + SPECIAL_NAMES + [_escape(c) for c in self.chars]
        atomic_write_text(path, "\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "CharTokenizer":
        try:
            lines = Path(path).read_text(encoding="utf-8").split("\n")
        except (OSError, UnicodeDecodeError) as e:
            raise IngestionError(f"cannot read tokenizer {path}: {e}") from e
        if not lines or lines[0] != TOKENIZER_HEADER:
            raise IngestionError(f"{path}: missing '{TOKENIZER_HEADER}' header")
        entries = [ln for ln in lines[1:] if ln != ""]
        if entries[:len(SPECIAL_NAMES)] != SPECIAL_NAMES:
            raise IngestionError(f"{path}: specials must come first in id order")
        return cls([_unescape(e) for e in entries[len(SPECIAL_NAMES):]])


def _escape(ch: str) -> str:
    if ch.isspace() or not ch.isprintable():
        return f"U+{ord(ch):04X}"
    return ch


def _unescape(entry: str) -> str:
    if len(entry) == 1:
        return entry
    if entry.startswith("U+"):
        return chr(int(entry[2:], 16))
    raise IngestionError(f"bad tokenizer entry {entry!r}")


def _read_lines(path) -> List[Tuple[int, str]]:
    """(line number, normalized text) for every line of a UTF-8 file."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise IngestionError(f"cannot read {path}: {e}") from e
    out = []
    for lineno, chunk in enumerate(raw.split(b"\n"), start=1):
        try:
            text = chunk.decode("utf-8")
        except UnicodeDecodeError as e:
            raise IngestionError(f"{path}: invalid UTF-8 on line {lineno}: {e.reason}") from e
        out.append((lineno, normalize_text(text)))
    return out


def build_tokenizer(corpus_files: Sequence) -> CharTokenizer:
    """Specials, then every distinct character in first-appearance order across files."""
    if not corpus_files:
        raise EmptyVocabError("no corpus files given")
    seen: Dict[str, None] = {}
    for path in corpus_files:
        for _, text in _read_lines(path):
            for c in text:
                seen.setdefault(c, None)
    if not seen:
        raise EmptyVocabError("corpus files contain no characters")
    return CharTokenizer(list(seen))


# ── Corpus ─────────────────────────────────────────────────────

@dataclass
class Corpus:
    documents: List[List[int]]
    language_tag: str
    source_manifest: List[Tuple[str, int]] = field(default_factory=list)

    @classmethod
    def from_texts(cls, texts: Sequence[str], tokenizer: CharTokenizer,
                   language_tag: str, source: str = "memory") -> "Corpus":
        docs = [tokenizer.encode_document(t) for t in (normalize_text(t) for t in texts) if t]
        return cls(docs, language_tag, [(source, len(docs))])

    def __len__(self) -> int:
        return len(self.documents)

    @property
    def num_tokens(self) -> int:
        return sum(len(d) for d in self.documents)

    @property
    def num_predicted_tokens(self) -> int:
        return sum(len(d) - 1 for d in self.documents)

    def to_bytes(self) -> bytes:
        """Canonical serialization: tag, manifest, then length-prefixed int32 documents."""
        head = json.dumps({"tag": self.language_tag, "manifest": self.source_manifest})
        parts = [head.encode("utf-8"), b"\n"]
        for d in self.documents:
            parts.append(np.asarray([len(d)] + list(d), dtype="<i4").tobytes())
        return b"".join(parts)


def load_corpus(path, tokenizer: CharTokenizer, language_tag: str) -> Corpus:
    """One document per non-empty line: BOS + text + EOS; unknown characters become UNK."""
    docs = [tokenizer.encode_document(text) for _, text in _read_lines(path) if text]
    logger.debug("loaded %d %s documents from %s", len(docs), language_tag, path)
    return Corpus(docs, language_tag, [(Path(path).name, len(docs))])


def write_documents(path, texts: Sequence[str]) -> None:
    atomic_write_text(path, "".join(normalize_text(t) + "\n" for t in texts))


# ── Synthetic grammars ─────────────────────────────────────────

@dataclass
class SyntheticGrammar:
    order: int
    alphabet: List[str]
    transitions: np.ndarray          # [len(alphabet) ** order, len(alphabet)]
    mean_len: float = 64.0
    len_dist: str = "poisson"
    seed: int = 0

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=np.float64)

    @property
    def n_states(self) -> int:
        return len(self.alphabet) ** self.order

    def validate(self) -> None:
        a = len(self.alphabet)
        if self.order < 1:
            raise GrammarValidationError(f"order must be >= 1, got {self.order}")
        if a < 1 or len(set(self.alphabet)) != a or any(len(c) != 1 for c in self.alphabet):
            raise GrammarValidationError("alphabet must be distinct single characters")
        if self.transitions.shape != (self.n_states, a):
            raise GrammarValidationError(
                f"transition table has shape {self.transitions.shape}, "
                f"expected {(self.n_states, a)}")
        if not np.all(np.isfinite(self.transitions)) or np.any(self.transitions < 0):
            raise GrammarValidationError("transition probabilities must be finite and >= 0")
        row_sums = self.transitions.sum(axis=1)
        bad = np.flatnonzero(np.abs(row_sums - 1.0) > 1e-9)
        if bad.size:
            raise GrammarValidationError(
                f"transition row {int(bad[0])} sums to {row_sums[bad[0]]!r}, not 1")
        if self.len_dist not in LENGTH_DISTRIBUTIONS:
            raise GrammarValidationError(f"unknown length distribution {self.len_dist!r}")
        if self.mean_len < 1:
            raise GrammarValidationError("mean_len must be >= 1")

    def next_state(self, state: int, symbol: int) -> int:
        return (state * len(self.alphabet)) % self.n_states + symbol

    def state_symbols(self, state: int) -> List[int]:
        a = len(self.alphabet)
        out = []
        for _ in range(self.order):
            out.append(state % a)
            state //= a
        return out[::-1]

    def stationary_distribution(self) -> np.ndarray:
        s = self.n_states
        chain = np.zeros((s, s))
        for state in range(s):
            for symbol, p in enumerate(self.transitions[state]):
                chain[state, self.next_state(state, symbol)] += p
        system = np.vstack([chain.T - np.eye(s), np.ones((1, s))])
        rhs = np.zeros(s + 1)
        rhs[-1] = 1.0
        pi, *_ = np.linalg.lstsq(system, rhs, rcond=None)
        pi = np.clip(pi, 0.0, None)
        return pi / pi.sum()

    def entropy_rate(self) -> float:
        """Exact per-character entropy of the stationary chain, in nats."""
        p = self.transitions
        with np.errstate(divide="ignore", invalid="ignore"):
            row_h = -np.where(p > 0, p * np.log(p), 0.0).sum(axis=1)
        return float(self.stationary_distribution() @ row_h)

    def save(self, path) -> None:
        fields = {
            "order": self.order,
            "alphabet": self.alphabet,
            "transitions": self.transitions.ravel().tolist(),
            "mean_len": self.mean_len,
            "len_dist": self.len_dist,
            "seed": self.seed,
        }
        atomic_write_text(path, dump_pairs(fields.items()))

    @classmethod
    def load(cls, path) -> "SyntheticGrammar":
        text = Path(path).read_text(encoding="utf-8")
        fields = {key: value for key, value, _ in parse_pairs(text, str(path), GrammarValidationError)}
        missing = {"order", "alphabet", "transitions"} - fields.keys()
        if missing:
            raise GrammarValidationError(f"{path}: missing keys {sorted(missing)}")
        alphabet = list(fields["alphabet"])
        rows = len(alphabet) ** int(fields["order"])
        grammar = cls(
            order=int(fields["order"]),
            alphabet=alphabet,
            transitions=np.asarray(fields["transitions"], dtype=np.float64).reshape(rows, len(alphabet)),
            mean_len=float(fields.get("mean_len", 64.0)),
            len_dist=fields.get("len_dist", "poisson"),
            seed=int(fields.get("seed", 0)),
        )
        grammar.validate()
        return grammar


def random_grammar(alphabet: Sequence[str], order: int = 2, concentration: float = 0.5,
                   mean_len: float = 64.0, len_dist: str = "poisson", seed: int = 0,
                   no_double_space: bool = True) -> SyntheticGrammar:
    """Dirichlet-sampled transition rows; optionally forbids a space after a space."""
    alphabet = list(alphabet)
    rng = np.random.default_rng(seed)
    a = len(alphabet)
    rows = rng.dirichlet(np.full(a, concentration), size=a ** order)
    grammar = SyntheticGrammar(order, alphabet, rows, mean_len, len_dist, seed)
    if no_double_space and " " in alphabet and a > 1:
        space = alphabet.index(" ")
        for state in range(grammar.n_states):
            if grammar.state_symbols(state)[-1] == space:
                rows[state, space] = 0.0
                rows[state] /= rows[state].sum()
        grammar.transitions = rows
    grammar.validate()
    return grammar


def default_grammars() -> Tuple[SyntheticGrammar, SyntheticGrammar]:
    """
    The shipped L1/L2 pair: order 2, mean length 64, alphabets a–j and g–p
    plus space, so g, h, i, j and space are shared (5 of 17 symbols).
    """
    l1 = random_grammar(list("abcdefghij") + [" "], order=2, seed=101)
    l2 = random_grammar(list("ghijklmnop") + [" "], order=2, seed=202)
    return l1, l2


def _draw_length(grammar: SyntheticGrammar, rng: np.random.Generator) -> int:
    if grammar.len_dist == "fixed":
        return max(1, int(round(grammar.mean_len)))
    if grammar.len_dist == "geometric":
        return int(rng.geometric(1.0 / grammar.mean_len))
    return max(1, int(rng.poisson(grammar.mean_len)))


def generate_synthetic(grammar: SyntheticGrammar, n_docs: int, seed: int) -> List[str]:
    """Sample n_docs strings; the first `order` characters come from the stationary distribution."""
    grammar.validate()
    if n_docs < 1:
        raise GrammarValidationError(f"n_docs must be >= 1, got {n_docs}")
    rng = np.random.default_rng(seed)
    cumulative = np.cumsum(grammar.transitions, axis=1)
    start = np.cumsum(grammar.stationary_distribution())
    last = len(grammar.alphabet) - 1
    docs = []
    for _ in range(n_docs):
        length = _draw_length(grammar, rng)
        state = min(int(np.searchsorted(start, rng.random(), side="right")), grammar.n_states - 1)
        symbols = grammar.state_symbols(state)[:length]
        while len(symbols) < length:
            symbol = min(int(np.searchsorted(cumulative[state], rng.random(), side="right")), last)
            symbols.append(symbol)
            state = grammar.next_state(state, symbol)
        docs.append("".join(grammar.alphabet[s] for s in symbols))
    return docs


# ── Batching ───────────────────────────────────────────────────

@dataclass
class Batch:
    tokens: np.ndarray       # [B, T+1] token ids, PAD filled
    mask: np.ndarray         # [B, T] True where the target counts toward the loss
    doc_start: np.ndarray    # [B] True when the row opens a document

    @property
    def inputs(self) -> np.ndarray:
        return self.tokens[:, :-1]

    @property
    def targets(self) -> np.ndarray:
        return np.where(self.mask, self.tokens[:, 1:], PAD)

    @property
    def num_targets(self) -> int:
        return int(self.mask.sum())


class BatchIterator:
    """
    Windows of T+1 tokens cut from each document with a one-token overlap,
    so every non-BOS token is a target exactly once per epoch. Window order is
    shuffled per epoch from (seed, epoch); the last batch is topped up with
    all-PAD rows.
    """

    def __init__(self, corpus: Corpus, batch_size: int, context_length: int,
                 seed: int = 0, shuffle: bool = True):
        if batch_size < 1 or context_length < 1:
            raise IngestionError("batch_size and context_length must be >= 1")
        self.corpus = corpus
        self.batch_size = batch_size
        self.context_length = context_length
        self.seed = seed
        self.shuffle = shuffle
        self.epoch = 0
        self.cursor = 0
        self._windows = [
            (d, s)
            for d, doc in enumerate(corpus.documents)
            for s in range(0, max(len(doc) - 1, 1), context_length)
            if len(doc) - s >= 2
        ]
        self._order = self._epoch_order()

    def _epoch_order(self) -> np.ndarray:
        if not self.shuffle:
            return np.arange(len(self._windows))
        return np.random.default_rng([self.seed, self.epoch]).permutation(len(self._windows))

    @property
    def batches_per_epoch(self) -> int:
        return math.ceil(len(self._windows) / self.batch_size)

    def next_batch(self) -> Optional[Batch]:
        """The next batch, or None once the epoch is exhausted."""
        if self.cursor >= len(self._windows):
            return None
        picks = self._order[self.cursor:self.cursor + self.batch_size]
        self.cursor += len(picks)
        width = self.context_length + 1
        tokens = np.full((self.batch_size, width), PAD, dtype=np.int64)
        mask = np.zeros((self.batch_size, self.context_length), dtype=bool)
        doc_start = np.zeros(self.batch_size, dtype=bool)
        for row, w in enumerate(picks):
            d, s = self._windows[w]
            window = self.corpus.documents[d][s:s + width]
            tokens[row, :len(window)] = window
            mask[row, :len(window) - 1] = True
            doc_start[row] = s == 0
        return Batch(tokens, mask, doc_start)

    def new_epoch(self) -> None:
        self.epoch += 1
        self.cursor = 0
        self._order = self._epoch_order()

    def __iter__(self) -> Iterator[Batch]:
        while (batch := self.next_batch()) is not None:
            yield batch

    def state_dict(self) -> dict:
        return {"epoch": self.epoch, "cursor": self.cursor, "seed": self.seed}

    def load_state_dict(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self.epoch = int(state["epoch"])
        self.cursor = int(state["cursor"])
        self._order = self._epoch_order()
