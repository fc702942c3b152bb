"""Greedy decoding, exact-match scoring, accuracy reports, saliency reports."""

import csv
import html as html_mod
import json
from dataclasses import dataclass

import numpy as np

from .bpe import BOS_ID, EOS_ID, PAD_ID
from .formats import extract_answer, prompt_prefix
from .model import DecodeSession, saliency_scores

COLUMNS = ("2D+", "3D+", "4D+", "5D+", "2D-", "3D-", "4D-", "5D-", "2Dx")
_OP_SYMBOL = {"add": "+", "sub": "-", "mul": "x"}
DEFAULT_MAX_NEW_TOKENS = 192


class EvalError(ValueError):
    """Invalid report content or an unusable report file."""


def task_label(n_digits, op):
    """Column label for a digit band and operation, e.g. (5, ADD) -> '5D+'."""
    return f"{n_digits}D{_OP_SYMBOL[op.kind]}"


@dataclass(frozen=True)
class GreedyResult:
    """Full decoded text (prompt + continuation) and a truncation flag."""

    text: str
    truncated: bool
    prompt: str = ""

    @property
    def continuation(self):
        return self.text[len(self.prompt) :]


@dataclass(frozen=True)
class TaskResult:
    """Exact-match tally for one task; accuracy is percent over evaluated."""

    task: str
    correct: int
    total: int
    skipped: int = 0

    @property
    def accuracy(self):
        return 100.0 * self.correct / self.total if self.total else 0.0


def _greedy_ids(ckpt, tokenizer, encoded_prompts, max_new_tokens, batch_size):
    """Generated id lists and truncation flags for pre-encoded prompts.

    Prompts are bucketed by token length so each batch shares one sequence
    length; argmax ties resolve to the lowest token id.
    """
    n = len(encoded_prompts)
    gen_out = [None] * n
    trunc_out = [False] * n
    order = sorted(range(n), key=lambda i: len(encoded_prompts[i]))
    max_seq = ckpt.config.max_seq_len
    start = 0
    while start < n:
        length = len(encoded_prompts[order[start]])
        stop = start
        while (
            stop < n
            and len(encoded_prompts[order[stop]]) == length
            and stop - start < batch_size
        ):
            stop += 1
        group = order[start:stop]
        start = stop
        ids = np.array([encoded_prompts[i] for i in group], dtype=np.int64)
        session = DecodeSession(ckpt, ids)
        logits = session.last_logits
        gen = [[] for _ in group]
        done = np.zeros(len(group), dtype=bool)
        truncated = np.zeros(len(group), dtype=bool)
        for _ in range(max_new_tokens):
            nxt = logits.argmax(axis=-1)
            for j in np.nonzero(~done)[0]:
                if nxt[j] == EOS_ID:
                    done[j] = True
                else:
                    gen[j].append(int(nxt[j]))
            if done.all():
                break
            if session.t >= max_seq:
                truncated[~done] = True
                break
            logits = session.step(np.where(done, PAD_ID, nxt))
        else:
            truncated[~done] = True
        for j, i in enumerate(group):
            gen_out[i] = gen[j]
            trunc_out[i] = bool(truncated[j])
    return gen_out, trunc_out


def batch_greedy_decode(
    ckpt, tokenizer, prompts, max_new_tokens=DEFAULT_MAX_NEW_TOKENS, batch_size=64
):
    """Greedy continuations for many prompts; deterministic and order-stable."""
    encoded = [[BOS_ID] + tokenizer.encode(p) for p in prompts]
    gen, trunc = _greedy_ids(ckpt, tokenizer, encoded, max_new_tokens, batch_size)
    return [
        GreedyResult(text=p + tokenizer.decode(g), truncated=t, prompt=p)
        for p, g, t in zip(prompts, gen, trunc)
    ]


def greedy_decode(ckpt, tokenizer, prompt, max_new_tokens=DEFAULT_MAX_NEW_TOKENS):
    """Greedy continuation for one prompt; stops at the end-of-line marker."""
    return batch_greedy_decode(ckpt, tokenizer, [prompt], max_new_tokens)[0]


def evaluate_with(generate, cases, approach, task):
    """Score a generation callable on test cases with the trailing-number rule.

    generate maps a list of prompt strings to a list of generated strings;
    echoed prompts are stripped before extracting the answer, so an empty
    continuation can never be scored correct. Returns (TaskResult, failures).
    """
    prompts = [prompt_prefix(c.n1, c.n2, c.op, approach) for c in cases]
    texts = generate(prompts)
    if len(texts) != len(cases):
        raise EvalError(f"generator returned {len(texts)} outputs for {len(cases)} cases")
    correct = 0
    failures = []
    for case, prompt, text in zip(cases, prompts, texts):
        continuation = text[len(prompt) :] if text.startswith(prompt) else text
        extracted = extract_answer(continuation)
        if extracted == case.expected:
            correct += 1
        else:
            failures.append(
                {
                    "prompt": prompt,
                    "generation": continuation,
                    "expected": case.expected,
                    "extracted": extracted,
                }
            )
    return TaskResult(task=task, correct=correct, total=len(cases)), failures


def evaluate(
    ckpt,
    tokenizer,
    cases,
    approach,
    task,
    max_new_tokens=DEFAULT_MAX_NEW_TOKENS,
    batch_size=64,
):
    """Greedy-decode every case's prompt and score exact matches."""

    def generate(prompts):
        results = batch_greedy_decode(ckpt, tokenizer, prompts, max_new_tokens, batch_size)
        return [r.text for r in results]

    return evaluate_with(generate, cases, approach, task)


class EvalReport:
    """Accuracy grid with fixed task columns.

    Equality and the CSV round-trip cover the printed content: row labels and
    accuracies at two decimals. Raw counts and failure samples ride along as
    metadata.
    """

    def __init__(self):
        self.rows = {}
        self.counts = {}
        self.failure_samples = {}

    def set_cell(self, row, column, result, failures=None):
        if column not in COLUMNS:
            raise EvalError(f"unknown task column {column!r}")
        self.rows.setdefault(row, {})[column] = round(result.accuracy, 2)
        self.counts[(row, column)] = (result.correct, result.total, result.skipped)
        if failures:
            self.failure_samples[(row, column)] = failures[:20]

    def accuracy(self, row, column):
        return self.rows.get(row, {}).get(column)

    def __eq__(self, other):
        if not isinstance(other, EvalReport):
            return NotImplemented
        return self.rows == other.rows

    def to_csv_text(self):
        lines = ["Approach," + ",".join(COLUMNS)]
        for row, cells in self.rows.items():
            rendered = [
                f"{cells[c]:.2f}" if c in cells else "" for c in COLUMNS
            ]
            lines.append(",".join([row] + rendered))
        return "\n".join(lines) + "\n"

    def to_text(self):
        width = max([len("Approach")] + [len(r) for r in self.rows])
        header = "Approach".ljust(width) + "".join(f"{c:>9}" for c in COLUMNS)
        lines = [header, "-" * len(header)]
        for row, cells in self.rows.items():
            rendered = "".join(
                f"{cells[c]:>9.2f}" if c in cells else f"{'-':>9}" for c in COLUMNS
            )
            lines.append(row.ljust(width) + rendered)
        return "\n".join(lines) + "\n"

    def to_html(self):
        head = "".join(f"<th>{html_mod.escape(c)}</th>" for c in ("Approach",) + COLUMNS)
        body = []
        for row, cells in self.rows.items():
            tds = "".join(
                f"<td>{cells[c]:.2f}</td>" if c in cells else "<td>-</td>"
                for c in COLUMNS
            )
            body.append(f"<tr><td>{html_mod.escape(row)}</td>{tds}</tr>")
        return (
            "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">"
            "<title>accuracy report</title>"
            "<style>table{border-collapse:collapse}td,th{border:1px solid #999;"
            "padding:4px 8px;text-align:right}th:first-child,td:first-child"
            "{text-align:left}</style></head><body>\n"
            f"<table><thead><tr>{head}</tr></thead>"
            f"<tbody>{''.join(body)}</tbody></table>\n</body></html>\n"
        )


def emit_report(report, fmt, path):
    """Write the report as text, csv, or a static html page."""
    renderers = {
        "text": report.to_text,
        "csv": report.to_csv_text,
        "html": report.to_html,
    }
    if fmt not in renderers:
        raise EvalError(f"unknown report format {fmt!r}")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(renderers[fmt]())
    return path


def parse_report_csv(path):
    report = EvalReport()
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise EvalError(f"{path}: empty report file") from None
        if header != ["Approach", *COLUMNS]:
            raise EvalError(f"{path}: unexpected report header {header!r}")
        for rownum, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 1 + len(COLUMNS):
                raise EvalError(f"{path} line {rownum}: wrong cell count")
            cells = {}
            for col, cell in zip(COLUMNS, row[1:]):
                if cell:
                    try:
                        cells[col] = round(float(cell), 2)
                    except ValueError as exc:
                        raise EvalError(f"{path} line {rownum}: {exc}") from exc
            report.rows[row[0]] = cells
    return report


def compare_reports(a, b):
    """Aligned text table of per-cell accuracy deltas (a minus b)."""
    labels = list(a.rows)
    labels.extend(r for r in b.rows if r not in a.rows)
    width = max([len("Approach")] + [len(r) for r in labels])
    header = "Approach".ljust(width) + "".join(f"{c:>9}" for c in COLUMNS)
    lines = [header, "-" * len(header)]
    for row in labels:
        cells = []
        for col in COLUMNS:
            va = a.accuracy(row, col)
            vb = b.accuracy(row, col)
            cells.append(f"{va - vb:>+9.2f}" if va is not None and vb is not None else f"{'-':>9}")
        lines.append(row.ljust(width) + "".join(cells))
    return "\n".join(lines) + "\n"


def dump_failures(failures, path):
    """One JSON object per line: prompt, generation, expected, extracted."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for failure in failures:
            f.write(json.dumps(failure, sort_keys=True) + "\n")
    return path


def token_spans(tokenizer, ids):
    """Character span of each token within decode(ids); specials are empty."""
    spans = []
    pos = 0
    for i in ids:
        token = "" if i in (PAD_ID, BOS_ID, EOS_ID) else tokenizer.id_to_token[i]
        spans.append((pos, pos + len(token)))
        pos += len(token)
    return spans


def token_index_at(spans, char_index):
    """Index of the token whose span covers a character position."""
    for idx, (start, end) in enumerate(spans):
        if start <= char_index < end:
            return idx
    raise EvalError(f"no token covers character {char_index}")


def rank_digit_tokens(tokenizer, ids, scores):
    """Digit tokens among the scored prefix, sorted by descending score.

    A digit token is one that is all digits once any attached space is
    ignored. Returns (sequence index, digit string, score) triples.
    """
    ranked = []
    for idx in range(len(scores)):
        i = ids[idx]
        if i in (PAD_ID, BOS_ID, EOS_ID):
            continue
        token = tokenizer.id_to_token[i].strip(" ")
        if token.isdigit():
            ranked.append((idx, token, float(scores[idx])))
    ranked.sort(key=lambda r: (-r[2], r[0]))
    return ranked


@dataclass(frozen=True)
class SaliencyPanel:
    """Scores over every token preceding one generated target token."""

    target_index: int
    target_token: str
    tokens: tuple  # (token string, score) pairs for positions 0..target_index-1


def saliency_panels(
    ckpt, tokenizer, prompt, positions, max_new_tokens=DEFAULT_MAX_NEW_TOKENS
):
    """Generate greedily from the prompt, then score the requested targets.

    positions index tokens of the generated continuation, 0-based.
    """
    prompt_ids = [BOS_ID] + tokenizer.encode(prompt)
    gen, _ = _greedy_ids(ckpt, tokenizer, [prompt_ids], max_new_tokens, batch_size=1)
    full = prompt_ids + gen[0]
    panels = []
    for pos in positions:
        target = len(prompt_ids) + pos
        if not 0 <= pos < len(gen[0]):
            raise EvalError(
                f"position {pos} outside the generated continuation "
                f"(0..{len(gen[0]) - 1})"
            )
        scores = saliency_scores(ckpt, np.array(full), target)
        tokens = tuple(
            (tokenizer.id_to_token[full[i]], float(scores[i]))
            for i in range(target)
        )
        panels.append(
            SaliencyPanel(
                target_index=target,
                target_token=tokenizer.id_to_token[full[target]],
                tokens=tokens,
            )
        )
    return panels


def render_saliency_text(panels):
    lines = []
    for panel in panels:
        lines.append(
            f"target token {panel.target_token!r} at sequence index {panel.target_index}"
        )
        peak = max((s for _, s in panel.tokens), default=1.0) or 1.0
        for idx, (token, score) in enumerate(panel.tokens):
            bar = "#" * int(round(40 * score / peak))
            lines.append(f"{idx:5d}  {token!r:>14}  {score:.6f}  {bar}")
        lines.append("")
    return "\n".join(lines)


def render_saliency_html(panels):
    chunks = [
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">"
        "<title>saliency report</title><style>body{font-family:monospace}"
        ".tok{padding:1px 2px}.target{font-weight:bold;text-decoration:underline}"
        "</style></head><body>"
    ]
    for panel in panels:
        chunks.append(
            f"<h3>target token {html_mod.escape(repr(panel.target_token))} "
            f"at index {panel.target_index}</h3><p>"
        )
        peak = max((s for _, s in panel.tokens), default=1.0) or 1.0
        for token, score in panel.tokens:
            shown = html_mod.escape(token).replace(" ", "&nbsp;")
            chunks.append(
                f'<span class="tok" title="{score:.6f}" '
                f'style="background:rgba(255,80,0,{score / peak:.3f})">{shown}</span>'
            )
        chunks.append(
            f'<span class="tok target">{html_mod.escape(panel.target_token)}</span></p>'
        )
    chunks.append("</body></html>\n")
    return "".join(chunks)


def saliency_report(
    ckpt,
    tokenizer,
    prompt,
    positions,
    text_path=None,
    html_path=None,
    max_new_tokens=DEFAULT_MAX_NEW_TOKENS,
):
    """Emit aligned-text and static-HTML saliency panels; returns the panels."""
    panels = saliency_panels(ckpt, tokenizer, prompt, positions, max_new_tokens)
    if text_path is not None:
        with open(text_path, "w", encoding="utf-8", newline="\n") as f:
            f.write(render_saliency_text(panels))
    if html_path is not None:
        with open(html_path, "w", encoding="utf-8", newline="\n") as f:
            f.write(render_saliency_html(panels))
    return panels
