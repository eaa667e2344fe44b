"""Corpus ingestion, vocabulary, and MLM+NSP instance/batch generation.

Tokenization is word-level (lowercased words and single punctuation marks),
a deliberate simplification relative to subword vocabularies: tokenizer
quality is orthogonal to what this lab measures, and word-level keeps the
tests exact.

Corpus format: UTF-8 plain text, one sentence per line, blank line between
documents. Vocab file format: one token per line, line number == id.

Determinism: every random choice flows from one root seed through named
`numpy` PCG64 streams (`SeedSequence.spawn`), so (corpus, seed, config)
fully determines the byte-exact batch stream.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = [PAD, UNK, CLS, SEP, MASK]
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
IGNORE_INDEX = -1

MASK_RATE = 0.15  # fraction of maskable positions selected for prediction
# of the selected positions: 80% -> [MASK], 10% -> random token, 10% unchanged
MASK_TOKEN_FRAC = 0.8
RANDOM_TOKEN_FRAC = 0.1

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text):
    """Lowercased word and punctuation tokens."""
    return _TOKEN_RE.findall(text.lower())


class Vocab:
    """Bijective token<->id map with the five special tokens at ids 0..4."""

    def __init__(self, tokens):
        self.id_to_token = list(SPECIAL_TOKENS) + list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise DataError("vocab contains duplicate tokens")

    def __len__(self):
        return len(self.id_to_token)

    @property
    def size(self):
        return len(self.id_to_token)

    def id(self, token):
        return self.token_to_id.get(token, UNK_ID)

    def encode(self, tokens):
        return [self.id(t) for t in tokens]

    def save(self, path):
        Path(path).write_text("\n".join(self.id_to_token) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if lines[:5] != SPECIAL_TOKENS:
            raise DataError(f"vocab file {path} does not start with the special tokens")
        return cls(lines[5:])


def build_vocab(lines, cap):
    """Most frequent (cap - 5) word tokens; frequency ties break lexicographically."""
    if cap <= 5:
        raise DataError(f"vocab cap must exceed 5 specials, got {cap}")
    counts = {}
    for line in lines:
        for tok in tokenize(line):
            counts[tok] = counts.get(tok, 0) + 1
    if not counts:
        raise DataError("empty corpus: no tokens found")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocab([t for t, _ in ranked[: cap - 5]])


def read_documents(paths):
    """Parse corpus files into documents of tokenized sentences."""
    documents = []
    current = []
    for path in paths:
        text = Path(path).read_text(encoding="utf-8")
        for line in text.splitlines():
            if line.strip():
                tokens = tokenize(line)
                if tokens:
                    current.append(tokens)
            elif current:
                documents.append(current)
                current = []
        if current:
            documents.append(current)
            current = []
    if not documents:
        raise DataError(f"no documents found in corpus files {list(paths)}")
    return documents


def corpus_lines(paths):
    for path in paths:
        with open(path, encoding="utf-8") as fh:
            yield from fh


@dataclass
class Batch:
    """One training batch; arrays are [B, S] except nsp_labels [B]."""

    token_ids: np.ndarray
    segment_ids: np.ndarray
    attention_mask: np.ndarray
    mlm_labels: np.ndarray
    nsp_labels: np.ndarray


def _truncate_pair(a, b, max_tokens):
    """Trim the longer side (from its end) until len(a)+len(b) <= max_tokens."""
    while len(a) + len(b) > max_tokens:
        longer = a if len(a) >= len(b) else b
        longer.pop()
    return a, b


def make_instances(documents, vocab, seq_len, rng):
    """One epoch of (token_ids, segment_ids, nsp_label) instances.

    Each consecutive sentence pair (A, B) of a document is emitted once:
    with probability 0.5, B is the true next sentence (label 1); otherwise B
    is a sentence sampled from a different document (label 0). The pair is
    truncated longest-first to fit [CLS] A [SEP] B [SEP] into seq_len.
    """
    if len(documents) < 2:
        raise DataError(
            "NSP pairing needs at least 2 documents to sample negatives from"
        )
    instances = []
    budget = seq_len - 3
    for di, doc in enumerate(documents):
        for si in range(len(doc) - 1):
            a = vocab.encode(doc[si])
            if rng.random() < 0.5:
                b = vocab.encode(doc[si + 1])
                label = 1
            else:
                dj = int(rng.integers(len(documents) - 1))
                if dj >= di:
                    dj += 1
                other = documents[dj]
                b = vocab.encode(other[int(rng.integers(len(other)))])
                label = 0
            a, b = _truncate_pair(list(a), list(b), budget)
            if not a or not b:
                continue
            tokens = [CLS_ID] + a + [SEP_ID] + b + [SEP_ID]
            segments = [0] * (len(a) + 2) + [1] * (len(b) + 1)
            instances.append((tokens, segments, label))
    return instances


def apply_mlm_mask(tokens, vocab, rng):
    """Select ~15% of maskable positions; 80/10/10 mask/random/keep replacement.

    [CLS], [SEP] and [PAD] are never maskable. If the Bernoulli draw selects
    nothing and maskable positions exist, one is forced; a sequence with no
    maskable positions returns an empty selection (callers skip such
    instances upstream).
    """
    tokens = list(tokens)
    labels = [IGNORE_INDEX] * len(tokens)
    maskable = [i for i, t in enumerate(tokens) if t not in (PAD_ID, CLS_ID, SEP_ID)]
    if not maskable:
        return tokens, labels
    picks = rng.random(len(maskable))
    selected = [i for i, u in zip(maskable, picks) if u < MASK_RATE]
    if not selected:
        selected = [maskable[int(rng.integers(len(maskable)))]]
    for i in selected:
        labels[i] = tokens[i]
        r = rng.random()
        if r < MASK_TOKEN_FRAC:
            tokens[i] = MASK_ID
        elif r < MASK_TOKEN_FRAC + RANDOM_TOKEN_FRAC:
            tokens[i] = int(rng.integers(5, vocab.size))
        # else: keep the original token
    return tokens, labels


def batches(instances, vocab, batch_size, seq_len, rng):
    """Shuffle one epoch of instances, apply MLM masks, pad, and batch.

    Pads carry attention_mask 0 and are never masked. A trailing partial
    batch is dropped so every batch is exactly [batch_size, seq_len].
    """
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    order = rng.permutation(len(instances))
    for start in range(0, len(order) - batch_size + 1, batch_size):
        rows = [instances[i] for i in order[start: start + batch_size]]
        token_ids = np.zeros((batch_size, seq_len), dtype=np.int64)
        segment_ids = np.zeros((batch_size, seq_len), dtype=np.int64)
        attention_mask = np.zeros((batch_size, seq_len), dtype=np.int64)
        mlm_labels = np.full((batch_size, seq_len), IGNORE_INDEX, dtype=np.int64)
        nsp_labels = np.zeros(batch_size, dtype=np.int64)
        for r, (tokens, segments, nsp) in enumerate(rows):
            masked, labels = apply_mlm_mask(tokens, vocab, rng)
            n = len(masked)
            token_ids[r, :n] = masked
            segment_ids[r, :n] = segments
            attention_mask[r, :n] = 1
            mlm_labels[r, :n] = labels
            nsp_labels[r] = nsp
        yield Batch(token_ids, segment_ids, attention_mask, mlm_labels, nsp_labels)


class BatchStream:
    """Endless deterministic batch iterator over a corpus.

    Epoch e draws its instances, masks, and shuffle order from the e-th
    child of the root SeedSequence, so the stream is reproducible from
    (documents, vocab, batch_size, seq_len, seed) alone and batches keep
    flowing across stage boundaries without an epoch reset.
    """

    def __init__(self, documents, vocab, batch_size, seq_len, seed):
        self.documents = documents
        self.vocab = vocab
        self.batch_size = batch_size
        self.seq_len = seq_len
        self._root = np.random.SeedSequence(seed)
        self._epoch = 0
        self._iter = None

    def _next_epoch(self):
        child = self._root.spawn(1)[0]
        rng = np.random.default_rng(child)
        self._epoch += 1
        instances = make_instances(self.documents, self.vocab, self.seq_len, rng)
        if len(instances) < self.batch_size:
            raise DataError(
                f"corpus yields {len(instances)} instances per epoch, "
                f"fewer than batch_size {self.batch_size}"
            )
        return batches(instances, self.vocab, self.batch_size, self.seq_len, rng)

    def __iter__(self):
        return self

    def __next__(self):
        if self._iter is None:
            self._iter = self._next_epoch()
        try:
            return next(self._iter)
        except StopIteration:
            self._iter = self._next_epoch()
            return next(self._iter)

    def skip(self, n_batches):
        """Fast-forward by consuming batches (used by --resume)."""
        for _ in range(n_batches):
            next(self)
        return self
