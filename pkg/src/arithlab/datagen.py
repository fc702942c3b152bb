"""Pair sampling, train/test disjointness, dataset files, test-set ingestion."""

import json
import logging
import re
from dataclasses import dataclass

import numpy as np

from .formats import (
    Approach,
    Operation,
    extract_answer,
    operation_by_word,
    render_observation,
)

log = logging.getLogger(__name__)

DEFAULT_ADDSUB_BANDS = ((2, 3000), (3, 3000), (4, 3000), (5, 3000))
DEFAULT_MUL_BANDS = ((2, 3000),)

# What is 34 minus 53? style question used by external JSONL test sets.
_QUESTION_RE = re.compile(r"What is (-?\d+) (plus|minus|times) (-?\d+)\s*\?")


class DatagenError(ValueError):
    """Invalid sampling spec or unusable dataset/test-set content."""


class SamplingError(DatagenError):
    """Resampling could not restore band counts within the retry budget."""


class TestSetError(DatagenError):
    """A test-set file could not be parsed."""

    __test__ = False  # keep pytest from collecting this as a test class


class DatasetIOError(DatagenError):
    """A dataset file could not be read or written."""


def band_range(n_digits):
    """Inclusive (lo, hi) operand range for an N-digit band.

    The 2-digit band starts at 0 so one-digit numbers are included; higher
    bands cover exactly the N-digit integers.
    """
    if not 2 <= n_digits <= 6:
        raise DatagenError(f"band digit count must be in [2, 6], got {n_digits}")
    if n_digits == 2:
        return 0, 99
    return 10 ** (n_digits - 1), 10**n_digits - 1


@dataclass(frozen=True)
class SamplingSpec:
    """How many operand pairs to draw per digit band for one operation."""

    op: Operation
    bands: tuple = DEFAULT_ADDSUB_BANDS
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "bands", tuple((int(n), int(c)) for n, c in self.bands))
        for n_digits, count in self.bands:
            band_range(n_digits)
            if count < 0:
                raise DatagenError(f"band count must be >= 0, got {count}")
        if not 0 <= self.seed < 2**64:
            raise DatagenError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    @property
    def total(self):
        return sum(count for _, count in self.bands)


def default_spec(op, seed=0):
    """Default sampling spec: 3000 pairs per band, bands 2..5 (ADD/SUB) or 2 (MUL)."""
    bands = DEFAULT_MUL_BANDS if op.kind == "mul" else DEFAULT_ADDSUB_BANDS
    return SamplingSpec(op=op, bands=bands, seed=seed)


@dataclass(frozen=True)
class TestCase:
    """One held-out problem with its exact expected answer."""

    __test__ = False  # keep pytest from collecting this as a test class

    n1: int
    n2: int
    op: Operation
    expected: int
    source_line: str = ""

    def __post_init__(self):
        if self.expected != self.op.apply(self.n1, self.n2):
            raise DatagenError(
                f"expected {self.expected} != {self.n1} {self.op.word} {self.n2}"
            )


def sample_pairs(spec):
    """Draw operand pairs band by band, uniformly and with replacement."""
    rng = np.random.default_rng(spec.seed)
    pairs = []
    for n_digits, count in spec.bands:
        lo, hi = band_range(n_digits)
        draws = rng.integers(lo, hi + 1, size=(count, 2))
        pairs.extend((int(a), int(b)) for a, b in draws)
    return pairs


def exclude_test_pairs(pairs, test_cases, spec, retry_budget=10000):
    """Replace any sampled pair that collides with a test pair.

    Replacements are drawn from the colliding pair's own band, so band counts
    are preserved. Collisions match ordered pairs: (a, b) and (b, a) are
    distinct because subtraction is order-sensitive.
    """
    banned = {(t.n1, t.n2) for t in test_cases if t.op.kind == spec.op.kind}
    if not banned:
        return list(pairs)
    if len(pairs) != spec.total:
        raise DatagenError(f"got {len(pairs)} pairs for a spec of {spec.total}")
    out = []
    offset = 0
    for band_index, (n_digits, count) in enumerate(spec.bands):
        lo, hi = band_range(n_digits)
        rng = np.random.default_rng([spec.seed, band_index + 1])
        for pair in pairs[offset : offset + count]:
            tries = 0
            while pair in banned:
                if tries >= retry_budget:
                    raise SamplingError(
                        f"could not resample a free pair in band {n_digits} "
                        f"after {retry_budget} tries"
                    )
                pair = tuple(int(v) for v in rng.integers(lo, hi + 1, size=2))
                tries += 1
            out.append(pair)
        offset += count
    return out


def write_dataset(pairs, spec, approach, path):
    """Write one rendered observation per line, plus a key = value sidecar."""
    approach = Approach(approach)
    lines = [render_observation(a, b, spec.op, approach).text for a, b in pairs]
    bands = ",".join(f"{n}:{c}" for n, c in spec.bands)
    meta = [
        f"op = {spec.op.word}",
        f"approach = {approach.value}",
        f"seed = {spec.seed}",
        f"bands = {bands}",
        f"count = {len(lines)}",
    ]
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(lines) + "\n")
        with open(f"{path}.meta", "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(meta) + "\n")
    except OSError as exc:
        raise DatasetIOError(f"cannot write dataset {path}: {exc}") from exc
    return path


def build_test_cases(pairs, op):
    """Turn sampled pairs into test cases with oracle answers."""
    return [TestCase(a, b, op, op.apply(a, b)) for a, b in pairs]


def write_test_set(cases, path):
    """Write test cases in the native TSV format: n1, op word, n2, expected."""
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for case in cases:
                f.write(f"{case.n1}\t{case.op.word}\t{case.n2}\t{case.expected}\n")
    except OSError as exc:
        raise DatasetIOError(f"cannot write test set {path}: {exc}") from exc
    return path


def _parse_native_line(line, lineno):
    parts = line.split("\t")
    if len(parts) != 4:
        raise TestSetError(f"line {lineno}: expected 4 tab-separated fields, got {len(parts)}")
    try:
        n1, n2, expected = int(parts[0]), int(parts[2]), int(parts[3])
        op = operation_by_word(parts[1])
    except ValueError as exc:
        raise TestSetError(f"line {lineno}: {exc}") from exc
    return n1, n2, op, expected


def _parse_gpt3_line(line, lineno):
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise TestSetError(f"line {lineno}: invalid JSON: {exc}") from exc
    if not isinstance(record, dict):
        raise TestSetError(f"line {lineno}: expected a JSON object")
    context = record.get("context", "")
    match = _QUESTION_RE.search(str(context))
    if match is None:
        raise TestSetError(f"line {lineno}: no 'What is A op B?' question in context")
    expected = extract_answer(str(record.get("completion", "")))
    if expected is None:
        raise TestSetError(f"line {lineno}: no integer answer in completion")
    n1, n2 = int(match.group(1)), int(match.group(3))
    return n1, n2, operation_by_word(match.group(2)), expected


def load_test_set(path, fmt="native"):
    """Load test cases, cross-checking every answer against the oracle.

    Lines whose stated answer disagrees with the oracle are flagged with a
    warning and excluded, so every returned case satisfies the exactness
    invariant. Unparseable lines raise with their line number.
    """
    if fmt not in ("native", "gpt3-jsonl"):
        raise TestSetError(f"unknown test-set format: {fmt!r}")
    parse = _parse_native_line if fmt == "native" else _parse_gpt3_line
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = f.read().splitlines()
    except OSError as exc:
        raise DatasetIOError(f"cannot read test set {path}: {exc}") from exc
    cases = []
    for lineno, line in enumerate(raw, start=1):
        if not line.strip():
            continue
        n1, n2, op, expected = parse(line, lineno)
        oracle = op.apply(n1, n2)
        if expected != oracle:
            log.warning(
                "%s line %d: stated answer %d != %d %s %d = %d; line flagged and skipped",
                path, lineno, expected, n1, op.word, n2, oracle,
            )
            continue
        cases.append(TestCase(n1, n2, op, expected, source_line=line))
    return cases


def load_dataset_lines(path):
    """Read a dataset file back as a list of observation lines."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            return [line for line in f.read().splitlines() if line]
    except OSError as exc:
        raise DatasetIOError(f"cannot read dataset {path}: {exc}") from exc
