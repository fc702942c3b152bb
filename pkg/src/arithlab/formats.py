"""Rendering and parsing of arithmetic training strings.

Three observation formats for the same computation:

* decomposition -- the number is spelled out digit-by-digit with place-value
  labels ("868" -> "8 units, 6 tens, 8 hundreds") and the computation is a
  four-step worked pipeline (decompose both operands, combine them place by
  place, reconstruct the result).
* baseline -- operands and final result only, no manipulation.
* spaced -- digits separated by blanks ("868" -> "8 6 8") so a subword
  tokenizer is forced to see one digit per token.

Everything here is a pure function of its inputs; all randomness and I/O live
elsewhere.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum

PLACE_LABELS = (
    "units",
    "tens",
    "hundreds",
    "thousands",
    "tens of thousands",
    "hundreds of thousands",
)

# Largest supported magnitude, exclusive: six place labels cover 0..999999.
MAX_MAGNITUDE = 10**6

_LABEL_TO_PLACE = {label: i for i, label in enumerate(PLACE_LABELS)}


class FormatError(ValueError):
    """A number or observation string violates the expected grammar."""


class RangeError(FormatError):
    """Magnitude too large for the supported place labels."""


def _check_range(n: int) -> None:
    if abs(n) >= MAX_MAGNITUDE:
        raise RangeError(f"magnitude of {n} is >= {MAX_MAGNITUDE}; unsupported")


@dataclass(frozen=True)
class Operation:
    """An arithmetic operation with its three surface forms.

    ``word`` appears between operands ("28 plus 39"), ``symbol`` joins the
    decomposed operands in the worked step, ``verb`` opens that step.
    """

    kind: str
    word: str
    symbol: str
    verb: str

    def apply(self, n1: int, n2: int) -> int:
        if self.kind == "add":
            return n1 + n2
        if self.kind == "sub":
            return n1 - n2
        return n1 * n2


ADD = Operation("add", "plus", "+", "Sum")
SUB = Operation("sub", "minus", "-", "Subtract")
MUL = Operation("mul", "times", "*", "Multiply")

OPERATIONS = {op.kind: op for op in (ADD, SUB, MUL)}
_WORD_TO_OP = {op.word: op for op in (ADD, SUB, MUL)}


def operation_by_kind(kind: str) -> Operation:
    try:
        return OPERATIONS[kind]
    except KeyError:
        raise FormatError(f"unknown operation kind {kind!r}") from None


def operation_by_word(word: str) -> Operation:
    try:
        return _WORD_TO_OP[word]
    except KeyError:
        raise FormatError(f"unknown operation word {word!r}") from None


class Approach(str, Enum):
    DECOMPOSITION = "decomposition"
    BASELINE = "baseline"
    SPACED = "spaced"


@dataclass(frozen=True)
class DecomposedNumber:
    """Sign plus digits indexed by place (``digits[0]`` is the units digit).

    The highest place holds a nonzero digit except for the number 0, which is
    the single entry "0 units".
    """

    negative: bool
    digits: tuple[int, ...]

    @classmethod
    def from_int(cls, n: int) -> "DecomposedNumber":
        _check_range(n)
        mag = abs(n)
        digits = [int(c) for c in reversed(str(mag))]
        return cls(negative=n < 0, digits=tuple(digits))

    @property
    def value(self) -> int:
        mag = sum(d * 10**i for i, d in enumerate(self.digits))
        return -mag if self.negative else mag

    def render(self, order: str = "ascending") -> str:
        if order not in ("ascending", "descending"):
            raise FormatError(f"unknown digit order {order!r}")
        pairs = list(enumerate(self.digits))
        if order == "descending":
            pairs.reverse()
        body = ", ".join(f"{d} {PLACE_LABELS[i]}" for i, d in pairs)
        return f"minus {body}" if self.negative else body


def decompose(n: int, order: str = "ascending") -> str:
    """Render ``n`` as comma-separated "digit place-label" terms."""
    return DecomposedNumber.from_int(n).render(order)


def recompose(s: str) -> int:
    """Parse a decomposition string back to its integer value.

    Accepts either digit order and an optional leading "minus ". Malformed
    terms, unknown place labels, duplicated or gapped places are errors that
    name the first offending term.
    """
    text = s.strip()
    negative = False
    if text.startswith("minus "):
        negative = True
        text = text[len("minus "):]
    if not text:
        raise FormatError(f"empty decomposition string {s!r}")
    entries: list[tuple[int, int]] = []
    for pos, term in enumerate(text.split(", ")):
        m = re.fullmatch(r"(\d) ([a-z ]+)", term)
        if m is None:
            raise FormatError(f"malformed term {term!r} at position {pos}")
        digit, label = int(m.group(1)), m.group(2)
        place = _LABEL_TO_PLACE.get(label)
        if place is None:
            raise FormatError(f"unknown place label {label!r} at position {pos}")
        if any(place == p for p, _ in entries):
            raise FormatError(f"duplicate place {label!r} at position {pos}")
        entries.append((place, digit))
    places = [p for p, _ in entries]
    if sorted(places) != list(range(len(places))):
        raise FormatError(f"places {places} are not consecutive from units in {s!r}")
    if places != sorted(places) and places != sorted(places, reverse=True):
        raise FormatError(f"mixed digit order in {s!r}")
    mag = sum(d * 10**p for p, d in entries)
    return -mag if negative else mag


def space_digits(n: int) -> str:
    """Write ``n`` with a single blank between digits, most significant first."""
    _check_range(n)
    mag = str(abs(n))
    spaced = " ".join(mag)
    return f"-{spaced}" if n < 0 else spaced


def unspace_digits(s: str) -> int:
    """Inverse of :func:`space_digits`."""
    m = re.fullmatch(r"(-?)((?:\d )*\d)", s)
    if m is None:
        raise FormatError(f"not a spaced digit string: {s!r}")
    return int(m.group(1) + m.group(2).replace(" ", ""))


@dataclass(frozen=True)
class ArithObservation:
    """One training/eval record: operands, operation, result and its string."""

    n1: int
    n2: int
    op: Operation
    result: int
    approach: Approach
    text: str
    prompt_prefix: str


def prompt_prefix(n1: int, n2: int, op: Operation, approach: Approach) -> str:
    """The inference-time input: the leading sentence of the observation."""
    if approach is Approach.DECOMPOSITION:
        return f"Compute with pipeline {n1} {op.word} {n2}."
    return f"Compute {n1} {op.word} {n2}."


def render_observation(
    n1: int, n2: int, op: Operation, approach: Approach
) -> ArithObservation:
    """Build the full observation string for one computation.

    The result always comes from exact integer arithmetic here, never from a
    model. Negative results render as "-" plus digits in baseline/spaced text
    and as "minus " plus the magnitude's decomposition inside pipelines.
    """
    _check_range(n1)
    _check_range(n2)
    result = op.apply(n1, n2)
    prefix = prompt_prefix(n1, n2, op, approach)
    if approach is Approach.BASELINE:
        text = f"{prefix} Final result = {result}"
    elif approach is Approach.SPACED:
        text = (
            f"{prefix} {space_digits(n1)} {op.word} {space_digits(n2)}"
            f" = {space_digits(result)}. Final result = {result}"
        )
    else:
        d1, d2, dr = decompose(n1), decompose(n2), decompose(result)
        text = (
            f"{prefix}"
            f" Translate from number to decomposition: {n1} = {d1}."
            f" Translate from number to decomposition: {n2} = {d2}."
            f" {op.verb} {d1} {op.symbol} {d2} = {dr}."
            f" Translate from decomposition to number: {dr} = {result}"
        )
    return ArithObservation(n1, n2, op, result, approach, text, prefix)


_BASELINE_RE = re.compile(
    r"Compute (-?\d+) (plus|minus|times) (-?\d+)\. Final result = (-?\d+)"
)
_SPACED_RE = re.compile(
    r"Compute (-?\d+) (plus|minus|times) (-?\d+)\. "
    r"(-?[\d ]+) (?:plus|minus|times) (-?[\d ]+) = (-?[\d ]+)\. "
    r"Final result = (-?\d+)"
)
_DECOMP_RE = re.compile(
    r"Compute with pipeline (-?\d+) (plus|minus|times) (-?\d+)\. "
    r"Translate from number to decomposition: \1 = (.+?)\. "
    r"Translate from number to decomposition: \3 = (.+?)\. "
    r"(?:Sum|Subtract|Multiply) \4 [+*-] \5 = (.+?)\. "
    r"Translate from decomposition to number: \6 = (-?\d+)"
)


def parse_observation(text: str) -> ArithObservation:
    """Parse a rendered observation back to its record; strict inverse of
    :func:`render_observation` for all three approaches."""
    if text.startswith("Compute with pipeline "):
        m = _DECOMP_RE.fullmatch(text)
        if m is None:
            raise FormatError(f"not a valid pipeline observation: {text!r}")
        n1, op, n2 = int(m.group(1)), operation_by_word(m.group(2)), int(m.group(3))
        if recompose(m.group(4)) != n1 or recompose(m.group(5)) != n2:
            raise FormatError(f"operand decomposition mismatch in {text!r}")
        result = int(m.group(7))
        if recompose(m.group(6)) != result:
            raise FormatError(f"result decomposition mismatch in {text!r}")
        approach = Approach.DECOMPOSITION
    else:
        m = _SPACED_RE.fullmatch(text)
        if m is not None:
            n1, op, n2 = int(m.group(1)), operation_by_word(m.group(2)), int(m.group(3))
            result = int(m.group(7))
            spaced_ok = (
                unspace_digits(m.group(4)) == n1
                and unspace_digits(m.group(5)) == n2
                and unspace_digits(m.group(6)) == result
            )
            if not spaced_ok:
                raise FormatError(f"spaced digits mismatch in {text!r}")
            approach = Approach.SPACED
        else:
            m = _BASELINE_RE.fullmatch(text)
            if m is None:
                raise FormatError(f"unrecognized observation: {text!r}")
            n1, op, n2 = int(m.group(1)), operation_by_word(m.group(2)), int(m.group(3))
            result = int(m.group(4))
            approach = Approach.BASELINE
    return ArithObservation(
        n1, n2, op, result, approach, text, prompt_prefix(n1, n2, op, approach)
    )


_TRAILING_JUNK = " \t\r\n.,;:!?"
_TRAILING_INT_RE = re.compile(r"-?\d+$")


def extract_answer(generated: str) -> int | None:
    """Pull the trailing integer out of a generated string.

    Trailing whitespace and sentence punctuation are ignored; the match is
    maximal (an immediately preceding minus sign is part of the number).
    Returns None when the string does not end in a number; never raises.
    """
    s = generated.rstrip(_TRAILING_JUNK)
    m = _TRAILING_INT_RE.search(s)
    return int(m.group()) if m is not None else None


# The four worked computations shown before the final query in a few-shot
# prompt, in their printed order.
FEWSHOT_EXAMPLE_PAIRS = ((28, 39), (804, 121), (1201, 1302), (97734, 86328))

_FEWSHOT_HEADER = (
    "This application makes an arithmetic operation decomposing the input numbers."
)


def _fewshot_example(n1: int, n2: int, op: Operation) -> str:
    # The worked examples are addition examples; other operations substitute
    # the operator words only, keeping the printed numbers.
    total = n1 + n2
    d1a, d2a, dra = decompose(n1), decompose(n2), decompose(total)
    d1d = decompose(n1, "descending")
    d2d = decompose(n2, "descending")
    drd = decompose(total, "descending")
    return (
        f"Compute with pipeline {n1} {op.word} {n2}. "
        f"Translate from number to decomposition: {n1} = {d1d}. "
        f"Translate from number to decomposition: {n2} = {d2d}. "
        f"{op.verb} {d1a} {op.symbol} {d2a} = {dra}. "
        f"Translate from decomposition to number: {drd} = {total}"
    )


def build_fewshot_prompt(n1: int, n2: int, op: Operation = ADD) -> str:
    """Few-shot priming prompt: header, four worked examples separated by
    "###" lines, then the query with the operands substituted.

    Per-step digit orders follow the printed prompt: the translation and
    reconstruction steps list digits high-to-low, the combination step lists
    them low-to-high.
    """
    _check_range(n1)
    _check_range(n2)
    parts = [_FEWSHOT_HEADER]
    parts.extend(_fewshot_example(a, b, op) for a, b in FEWSHOT_EXAMPLE_PAIRS)
    parts.append(f"Compute with pipeline {n1} {op.word} {n2}.")
    return "\n###\n".join(parts)
