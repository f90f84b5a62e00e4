"""Program proposers: an HTTP chat-completions client and a scripted mock.

Both enforce a hard sample budget that is checked and reserved before any
request goes out, and both turn raw completions into FeatureProgram values
through the same totalized parser.
"""

from __future__ import annotations

import ast
import json
import logging
import os
import re
import textwrap
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path

import requests

from .sandbox import FUNCTION_STEM, FeatureProgram

logger = logging.getLogger(__name__)

API_KEY_ENV = "LLMFE_API_KEY"

HTTP_CHAT = "http_chat"
SCRIPTED_MOCK = "scripted_mock"

REQUEST_BATCHED = "batched"
REQUEST_PER_SAMPLE = "per_sample"

PARSE_EMPTY = "empty"
PARSE_NO_CODE_BLOCK = "no_code_block"
PARSE_WRONG_FUNCTION_NAME = "wrong_function_name"


class BackendError(RuntimeError):
    pass


class BackendUnreachable(BackendError):
    """Every request in a sample() call failed at the transport level."""


class BudgetExceeded(BackendError):
    """Serving the call would take the completion count past the budget."""


@dataclass(frozen=True)
class BackendConfig:
    kind: str = SCRIPTED_MOCK
    model: str = "local-model"
    temperature: float = 0.8
    max_completion_tokens: int = 2048
    endpoint: str = ""
    script_path: str = ""
    sample_budget: int = 20
    request_mode: str = REQUEST_BATCHED
    timeout_s: float = 60.0

    def __post_init__(self):
        if self.kind not in (HTTP_CHAT, SCRIPTED_MOCK):
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.sample_budget < 1:
            raise ValueError(f"sample_budget must be >= 1, got {self.sample_budget}")
        if self.request_mode not in (REQUEST_BATCHED, REQUEST_PER_SAMPLE):
            raise ValueError(f"unknown request mode {self.request_mode!r}")


class SampleBudget:
    """Thread-safe completion counter with a hard ceiling."""

    def __init__(self, limit: int):
        self.limit = limit
        self._used = 0
        self._lock = threading.Lock()

    @property
    def used(self) -> int:
        return self._used

    @property
    def remaining(self) -> int:
        return self.limit - self._used

    def reserve(self, n: int) -> None:
        """Claim n completions or raise; nothing is issued on failure."""
        with self._lock:
            if self._used + n > self.limit:
                raise BudgetExceeded(
                    f"requested {n} completions with {self.limit - self._used} "
                    f"of {self.limit} left"
                )
            self._used += n


@dataclass(frozen=True)
class ParseFailure:
    reason: str  # PARSE_EMPTY | PARSE_NO_CODE_BLOCK | PARSE_WRONG_FUNCTION_NAME


_FENCE = re.compile(r"```(?:python|py)?[ \t]*\n(.*?)```", re.DOTALL)
_CODE_START = re.compile(r"^(?:import\s|from\s|def\s|@|#)")


def _trim_to_parse(text: str) -> str | None:
    """Drop trailing lines until the text parses as Python; None if hopeless."""
    lines = text.splitlines()
    while lines:
        candidate = "\n".join(lines)
        try:
            ast.parse(candidate)
            return candidate
        except SyntaxError as exc:
            cut = (exc.lineno or len(lines)) - 1
            # drop from the offending line on, always at least one line
            del lines[min(cut, len(lines) - 1):]
    return None


def _function_names(source: str) -> list[str]:
    try:
        tree = ast.parse(source)
    except SyntaxError:
        return []
    return [node.name for node in ast.walk(tree) if isinstance(node, ast.FunctionDef)]


def parse_program(completion: str, expected_version: int) -> FeatureProgram | ParseFailure:
    """Extract the expected function from a completion; never raises.

    Looks inside fenced code blocks first, falling back to the first
    code-looking region of the raw text. The completion must define
    modify_features_v{expected_version}; helper functions around it are
    kept as part of the program source.
    """
    if not completion or not completion.strip():
        return ParseFailure(PARSE_EMPTY)
    expected = f"{FUNCTION_STEM}{expected_version}"

    candidates = [textwrap.dedent(block) for block in _FENCE.findall(completion)]
    fenced = bool(candidates)
    if not fenced:
        lines = completion.splitlines()
        start = next((i for i, ln in enumerate(lines) if _CODE_START.match(ln.strip())), None)
        if start is not None:
            candidates = [textwrap.dedent("\n".join(lines[start:]))]

    saw_function = False
    for candidate in candidates:
        source = _trim_to_parse(candidate)
        if source is None:
            continue
        names = _function_names(source)
        saw_function = saw_function or bool(names)
        if expected in names:
            return FeatureProgram(
                source=source.strip() + "\n",
                function_name=expected,
                version=expected_version,
            )
    if saw_function:
        return ParseFailure(PARSE_WRONG_FUNCTION_NAME)
    return ParseFailure(PARSE_NO_CODE_BLOCK)


class ScriptedBackend:
    """Deterministic mock: one response group consumed per sample() call.

    A group is either a plain list of completion strings, or a conditional
    {"if_contains": marker, "then": [...], "else": [...]} resolved against
    the prompt, which lets a script react to what the search shows it.
    Exhausted scripts yield empty completions.
    """

    kind = SCRIPTED_MOCK

    def __init__(self, script: list, sample_budget: int = 20):
        self._script = list(script)
        self.budget = SampleBudget(sample_budget)
        self._cursor = 0

    @classmethod
    def from_config(cls, config: BackendConfig) -> "ScriptedBackend":
        script = json.loads(Path(config.script_path).read_text())
        if not isinstance(script, list):
            raise BackendError(f"{config.script_path}: script must be a JSON list")
        return cls(script, sample_budget=config.sample_budget)

    def fresh(self) -> "ScriptedBackend":
        return ScriptedBackend(self._script, sample_budget=self.budget.limit)

    def _resolve_group(self, group, prompt: str) -> list[str]:
        if isinstance(group, dict):
            branch = "then" if group.get("if_contains", "") in prompt else "else"
            return list(group.get(branch, []))
        return list(group)

    def sample(self, prompt: str, b: int) -> list[str]:
        self.budget.reserve(b)
        if self._cursor < len(self._script):
            group = self._resolve_group(self._script[self._cursor], prompt)
            self._cursor += 1
        else:
            group = []
        group = group[:b] + [""] * max(0, b - len(group))
        return group


class HttpChatBackend:
    """Chat-completions client speaking the common JSON wire protocol.

    One POST with n=b by default, or b independent requests in per_sample
    mode. Each request is retried once; a failed request degrades to empty
    completions unless every request in the call failed, which raises
    BackendUnreachable.
    """

    kind = HTTP_CHAT

    def __init__(self, config: BackendConfig):
        if not config.endpoint:
            raise BackendError("http_chat backend needs an endpoint")
        self.config = config
        self.budget = SampleBudget(config.sample_budget)

    def fresh(self) -> "HttpChatBackend":
        return HttpChatBackend(self.config)

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(API_KEY_ENV, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _post(self, prompt: str, n: int) -> list[str] | None:
        body = {
            "model": self.config.model,
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_completion_tokens,
            "n": n,
            "messages": [{"role": "user", "content": prompt}],
        }
        for attempt in (1, 2):
            try:
                resp = requests.post(
                    self.config.endpoint,
                    json=body,
                    headers=self._headers(),
                    timeout=self.config.timeout_s,
                )
                resp.raise_for_status()
                choices = resp.json().get("choices", [])
                texts = [c.get("message", {}).get("content", "") or "" for c in choices]
                return texts
            except (requests.RequestException, ValueError) as exc:
                logger.warning("chat request attempt %d failed: %s", attempt, exc)
        return None

    def sample(self, prompt: str, b: int) -> list[str]:
        self.budget.reserve(b)
        if self.config.request_mode == REQUEST_BATCHED:
            texts = self._post(prompt, b)
            if texts is None:
                raise BackendUnreachable(f"no response from {self.config.endpoint}")
            return texts[:b] + [""] * max(0, b - len(texts))
        results, failures = [], 0
        for _ in range(b):
            texts = self._post(prompt, 1)
            if texts is None:
                failures += 1
                results.append("")
            else:
                results.append(texts[0] if texts else "")
        if failures == b and b > 0:
            raise BackendUnreachable(f"all {b} requests to {self.config.endpoint} failed")
        return results


def make_backend(config: BackendConfig):
    if config.kind == SCRIPTED_MOCK:
        return ScriptedBackend.from_config(config)
    return HttpChatBackend(config)
