"""Character-base tokenizer with learned pair merges that never cross words."""

import re
from collections import Counter

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>")

_FILE_HEADER = "arithlab-bpe v1"

# A word is a run of non-space characters plus its leading space, so common
# words can fuse into single tokens while merges still never bridge two words.
# Attaching the leading rather than trailing space keeps a prompt that stops
# at a word boundary tokenized exactly as the same characters were during
# training; the continuation then starts on the next word's space.
_WORD_RE = re.compile(r" ?[^ ]+| ")


class TokenizerError(ValueError):
    """Unencodable input or an unusable tokenizer file."""


def _split_words(text):
    return _WORD_RE.findall(text)


def _escape(token):
    return (
        token.replace("\\", "\\\\")
        .replace(" ", "\\s")
        .replace("\n", "\\n")
        .replace("\t", "\\t")
        .replace("\r", "\\r")
    )


def _unescape(text):
    out = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "\\":
            if i + 1 >= len(text):
                raise TokenizerError(f"dangling escape in {text!r}")
            nxt = text[i + 1]
            try:
                out.append({"\\": "\\", "s": " ", "n": "\n", "t": "\t", "r": "\r"}[nxt])
            except KeyError:
                raise TokenizerError(f"bad escape \\{nxt} in {text!r}") from None
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def _apply_merge(tokens, pair, merged):
    """Replace every adjacent occurrence of pair, scanning left to right."""
    out = []
    i = 0
    while i < len(tokens):
        if i + 1 < len(tokens) and (tokens[i], tokens[i + 1]) == pair:
            out.append(merged)
            i += 2
        else:
            out.append(tokens[i])
            i += 1
    return out


class TokenizerModel:
    """Immutable trained tokenizer: base characters plus ordered merges.

    Merges apply within words (a non-space run plus its leading space) and
    never bridge two words, so a spaced digit string keeps its digits in
    separate tokens while the same digits written solid may fuse into
    multi-digit tokens.
    """

    def __init__(self, base_vocab, merges):
        self.base_vocab = frozenset(base_vocab)
        self.merges = tuple((str(a), str(b)) for a, b in merges)
        self.id_to_token = list(SPECIAL_TOKENS)
        self.id_to_token.extend(sorted(self.base_vocab))
        self.id_to_token.extend(a + b for a, b in self.merges)
        self.token_to_id = {}
        for i, token in enumerate(self.id_to_token):
            if token in self.token_to_id:
                raise TokenizerError(f"duplicate token {token!r} in vocabulary")
            self.token_to_id[token] = i
        self._rank = {pair: i for i, pair in enumerate(self.merges)}
        self._cache = {}

    @property
    def vocab_size(self):
        return len(self.id_to_token)

    @property
    def pad_id(self):
        return PAD_ID

    @property
    def bos_id(self):
        return BOS_ID

    @property
    def eos_id(self):
        return EOS_ID

    def __eq__(self, other):
        if not isinstance(other, TokenizerModel):
            return NotImplemented
        return self.base_vocab == other.base_vocab and self.merges == other.merges

    def _encode_chunk(self, chunk):
        ids = self._cache.get(chunk)
        if ids is not None:
            return ids
        for ch in chunk:
            if ch not in self.base_vocab:
                raise TokenizerError(f"character {ch!r} is not in the vocabulary")
        tokens = list(chunk)
        while len(tokens) >= 2:
            best = min(set(zip(tokens, tokens[1:])), key=lambda p: self._rank.get(p, len(self._rank)))
            if best not in self._rank:
                break
            tokens = _apply_merge(tokens, best, best[0] + best[1])
        ids = [self.token_to_id[t] for t in tokens]
        self._cache[chunk] = ids
        return ids

    def encode(self, text):
        """Token ids for text; merges apply within one word at a time."""
        ids = []
        for chunk in _split_words(text):
            ids.extend(self._encode_chunk(chunk))
        return ids

    def decode(self, ids):
        """Text for token ids; the PAD/BOS/EOS markers decode to nothing."""
        out = []
        for i in ids:
            if not 0 <= i < len(self.id_to_token):
                raise TokenizerError(f"unknown token id {i}")
            if i not in (PAD_ID, BOS_ID, EOS_ID):
                out.append(self.id_to_token[i])
        return "".join(out)

    def save(self, path):
        lines = [_FILE_HEADER, f"base {len(self.base_vocab)}"]
        lines.extend(_escape(ch) for ch in sorted(self.base_vocab))
        lines.append(f"merges {len(self.merges)}")
        lines.extend(f"{_escape(a)} {_escape(b)}" for a, b in self.merges)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(lines) + "\n")
        return path

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
        if not lines or lines[0] != _FILE_HEADER:
            raise TokenizerError(f"{path}: not a tokenizer file (bad header)")
        try:
            if not lines[1].startswith("base "):
                raise TokenizerError(f"{path}: missing base vocabulary count")
            n_base = int(lines[1].split(" ", 1)[1])
            base = [_unescape(line) for line in lines[2 : 2 + n_base]]
            merge_header = lines[2 + n_base]
            if not merge_header.startswith("merges "):
                raise TokenizerError(f"{path}: missing merge count")
            n_merges = int(merge_header.split(" ", 1)[1])
            merge_lines = lines[3 + n_base : 3 + n_base + n_merges]
            if len(base) != n_base or len(merge_lines) != n_merges:
                raise TokenizerError(f"{path}: truncated tokenizer file")
            merges = []
            for line in merge_lines:
                left, right = line.split(" ")
                merges.append((_unescape(left), _unescape(right)))
        except (IndexError, ValueError) as exc:
            raise TokenizerError(f"{path}: malformed tokenizer file: {exc}") from exc
        if any(len(ch) != 1 for ch in base):
            raise TokenizerError(f"{path}: base vocabulary entries must be single characters")
        return cls(base, merges)


def train_tokenizer(corpus, target_vocab):
    """Learn pair merges greedily until target_vocab tokens or no pair repeats.

    Ties on pair frequency break to the lexicographically smallest pair, so
    training is deterministic. Merges are learned word by word, never across
    a word boundary.
    """
    chunk_counts = Counter()
    base = set()
    for text in corpus:
        base.update(text)
        for chunk in _split_words(text):
            chunk_counts[chunk] += 1
    if not base:
        raise TokenizerError("empty corpus")
    floor = len(SPECIAL_TOKENS) + len(base)
    if target_vocab < floor:
        raise TokenizerError(
            f"target_vocab {target_vocab} is below base size + specials ({floor})"
        )

    words = [[list(chunk), count] for chunk, count in sorted(chunk_counts.items())]
    pair_counts = Counter()
    occurrences = {}
    for wid, (tokens, count) in enumerate(words):
        for pair in zip(tokens, tokens[1:]):
            pair_counts[pair] += count
            occurrences.setdefault(pair, set()).add(wid)

    taken = set(SPECIAL_TOKENS) | base
    merges = []
    while floor + len(merges) < target_vocab and pair_counts:
        pair = min(pair_counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        if pair_counts[pair] < 2:
            break
        merged = pair[0] + pair[1]
        if merged in taken:
            # a duplicate token string would break the id bijection
            occurrences.pop(pair, None)
            del pair_counts[pair]
            continue
        merges.append(pair)
        taken.add(merged)
        for wid in sorted(occurrences.get(pair, ())):
            tokens, count = words[wid]
            for p in zip(tokens, tokens[1:]):
                pair_counts[p] -= count
                if pair_counts[p] <= 0:
                    del pair_counts[p]
                group = occurrences.get(p)
                if group is not None:
                    group.discard(wid)
            tokens = _apply_merge(tokens, pair, merged)
            words[wid][0] = tokens
            for p in zip(tokens, tokens[1:]):
                pair_counts[p] += count
                occurrences.setdefault(p, set()).add(wid)
    return TokenizerModel(base, merges)
