"""Client for rerunning the few-shot experiment against a completion endpoint."""

import json
import logging
import os
import time
from dataclasses import asdict, dataclass

import requests

from .evaluation import EvalReport, TaskResult
from .formats import build_fewshot_prompt, extract_answer

log = logging.getLogger(__name__)

PROMPT_STYLES = ("plain-fewshot", "decomposition-fewshot")


class RemoteError(ValueError):
    """Bad remote configuration, missing auth, or an unusable transcript."""


@dataclass(frozen=True)
class RemoteConfig:
    """Endpoint, sampling, and budget settings for remote evaluation."""

    endpoint: str
    auth_env: str = ""
    temperature: float = 0.7
    max_cases: int = 100
    timeout: float = 30.0
    retries: int = 2
    prompt_style: str = "decomposition-fewshot"
    response_field: str = "choices.0.text"
    max_tokens: int = 256
    min_delay: float = 0.0

    def __post_init__(self):
        if not self.endpoint:
            raise RemoteError("endpoint URL is required")
        if self.temperature < 0:
            raise RemoteError(f"temperature must be >= 0, got {self.temperature}")
        if self.max_cases < 1:
            raise RemoteError(f"max_cases must be >= 1, got {self.max_cases}")
        if self.timeout <= 0:
            raise RemoteError(f"timeout must be positive, got {self.timeout}")
        if self.retries < 0:
            raise RemoteError(f"retries must be >= 0, got {self.retries}")
        if self.prompt_style not in PROMPT_STYLES:
            raise RemoteError(f"prompt_style must be one of {PROMPT_STYLES}")
        if self.min_delay < 0:
            raise RemoteError(f"min_delay must be >= 0, got {self.min_delay}")


def build_plain_prompt(n1, n2, op):
    """Question/answer few-shot prompt with the same worked operand pairs.

    Unlike the decomposition prompt, the worked answers here are the true
    results for the requested operation.
    """
    from .formats import FEWSHOT_EXAMPLE_PAIRS

    parts = []
    for a, b in FEWSHOT_EXAMPLE_PAIRS:
        parts.append(f"Q: What is {a} {op.word} {b}?\nA: {op.apply(a, b)}")
    parts.append(f"Q: What is {n1} {op.word} {n2}?\nA:")
    return "\n\n".join(parts)


def build_prompt(style, case):
    if style == "decomposition-fewshot":
        return build_fewshot_prompt(case.n1, case.n2, case.op)
    return build_plain_prompt(case.n1, case.n2, case.op)


def extract_field(payload, path):
    """Walk a dotted field path; numeric parts index into lists."""
    node = payload
    for part in path.split("."):
        try:
            if isinstance(node, list):
                node = node[int(part)]
            elif isinstance(node, dict):
                node = node[part]
            else:
                raise KeyError(part)
        except (KeyError, IndexError, ValueError, TypeError):
            raise RemoteError(
                f"response field path {path!r} failed at {part!r}"
            ) from None
    return node


def _resolve_token(config):
    if not config.auth_env:
        return None
    token = os.environ.get(config.auth_env)
    if not token:
        raise RemoteError(f"auth environment variable {config.auth_env} is not set")
    return token


def _score(prompt, text, expected):
    continuation = text[len(prompt) :] if text.startswith(prompt) else text
    extracted = extract_answer(continuation)
    return extracted, extracted == expected


def run_remote_eval(config, tasks, transcript_path, session=None):
    """Evaluate the first max_cases of each task against the endpoint.

    tasks is a list of (task label, test cases). Each request/response pair is
    appended verbatim to the JSON-lines transcript after a config header line.
    Cases that never get an answer within the retry budget are skipped: logged
    loudly, recorded in the transcript, and excluded from the denominator.
    Returns (EvalReport, transcript_path).
    """
    if session is None:
        session = requests.Session()
    token = _resolve_token(config)
    headers = {"Content-Type": "application/json"}
    if token:
        headers["Authorization"] = f"Bearer {token}"
    report = EvalReport()
    last_request = [0.0]

    def throttle():
        if config.min_delay > 0:
            wait = config.min_delay - (time.monotonic() - last_request[0])
            if wait > 0:
                time.sleep(wait)
        last_request[0] = time.monotonic()

    with open(transcript_path, "w", encoding="utf-8", newline="\n") as transcript:
        header = {"type": "config"}
        header.update(asdict(config))
        transcript.write(json.dumps(header, sort_keys=True) + "\n")
        for task, cases in tasks:
            capped = cases[: config.max_cases]
            correct = 0
            skipped = 0
            for index, case in enumerate(capped):
                prompt = build_prompt(config.prompt_style, case)
                payload = None
                text = None
                failure = None
                for _ in range(config.retries + 1):
                    throttle()
                    try:
                        response = session.post(
                            config.endpoint,
                            json={
                                "prompt": prompt,
                                "temperature": config.temperature,
                                "max_tokens": config.max_tokens,
                            },
                            headers=headers,
                            timeout=config.timeout,
                        )
                        response.raise_for_status()
                        candidate = response.json()
                        value = extract_field(candidate, config.response_field)
                        if not isinstance(value, str):
                            raise RemoteError(
                                f"response field {config.response_field!r} is not text"
                            )
                        payload, text = candidate, value
                        break
                    except (requests.RequestException, ValueError) as exc:
                        failure = exc
                        payload = text = None
                if text is None:
                    skipped += 1
                    extracted = None
                    verdict = "skipped"
                    log.warning(
                        "task %s case %d (%d %s %d) skipped after %d attempts: %s",
                        task, index, case.n1, case.op.word, case.n2,
                        config.retries + 1, failure,
                    )
                else:
                    extracted, ok = _score(prompt, text, case.expected)
                    verdict = "correct" if ok else "incorrect"
                    correct += int(ok)
                transcript.write(
                    json.dumps(
                        {
                            "type": "case",
                            "index": index,
                            "task": task,
                            "n1": case.n1,
                            "n2": case.n2,
                            "op": case.op.word,
                            "expected": case.expected,
                            "prompt": prompt,
                            "response": payload,
                            "extracted": extracted,
                            "verdict": verdict,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
            answered = len(capped) - skipped
            report.set_cell(
                config.prompt_style,
                task,
                TaskResult(task=task, correct=correct, total=answered, skipped=skipped),
            )
    return report, transcript_path


def replay_transcript(path):
    """Rebuild the EvalReport from a transcript, re-deriving every verdict.

    Scores are recomputed from the stored raw responses, so a replay agrees
    with the live run without any network access.
    """
    with open(path, "r", encoding="utf-8") as f:
        lines = [json.loads(line) for line in f if line.strip()]
    if not lines or lines[0].get("type") != "config":
        raise RemoteError(f"{path}: transcript must start with a config line")
    header = lines[0]
    style = header["prompt_style"]
    field = header["response_field"]
    tallies = {}
    for record in lines[1:]:
        if record.get("type") != "case":
            raise RemoteError(f"{path}: unexpected transcript record {record.get('type')!r}")
        task = record["task"]
        correct, answered, skipped = tallies.get(task, (0, 0, 0))
        if record["response"] is None:
            skipped += 1
        else:
            text = extract_field(record["response"], field)
            _, ok = _score(record["prompt"], text, record["expected"])
            answered += 1
            correct += int(ok)
        tallies[task] = (correct, answered, skipped)
    report = EvalReport()
    for task, (correct, answered, skipped) in tallies.items():
        report.set_cell(
            style, task,
            TaskResult(task=task, correct=correct, total=answered, skipped=skipped),
        )
    return report
