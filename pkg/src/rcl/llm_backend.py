"""Prompt templates, tool-call parsing and chat-completion backends for the LLM-driven policy."""

from __future__ import annotations

import json
import logging
import os
import re
import string
import urllib.error
import urllib.request
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol, Union

from .errors import (
    BudgetExceededError,
    LLMTransportError,
    MalformedToolCallError,
    PromptRenderError,
)

logger = logging.getLogger(__name__)

AGENTS = ("trace", "metric", "format")
AGENT_NAMES = {"trace": "Trace Agent", "metric": "Metrics Agent", "format": "Format Agent"}
AGENT_HELP = {
    "trace": 'Trace Agent: {"agent": "trace", "arguments": {"span_id": "<span id>"}} '
    "returns the child spans of a span with timestamp, service, operation, duration and status code.",
    "metric": 'Metrics Agent: {"agent": "metric", "arguments": {"components": ["<pod|service|node>", ...]}} '
    "returns metrics of those components that deviate beyond n sigma around the request time.",
    "format": 'Format Agent: {"agent": "format", "arguments": {"root_cause": "<component>", "reason": "<text>"}} '
    "records the final root cause and reason.",
}

DEFAULT_MAX_STEPS = 20

SYSTEM_PROMPT = (
    "You are a software operations engineer. Your task is to systematically diagnose "
    "and identify the root cause of software failures."
)

_TEMPLATES = {
    "initial": (
        "Please read the following root trace and identify the corresponding root cause service.\n"
        "A possible approach is to recursively search for the traces you suspect have issues.\n"
        "{entry_trace}\n"
        "You have the following agents to call: {agents}"
    ),
    "reflection_step1": (
        "We think it's better to inspect more deeper into the trace tree. So, even you have already "
        "define the root cause, you must use the following tool to inspect more deeper to confirm "
        "that there are no deeper root cause.\n"
        "You have the following agents to call: {agents}"
    ),
    "reflection_later": (
        "Please continue to further identify the root cause service. You may inspect deeper by "
        "Trace Agent or combine with Metrics Agent to confirm the root cause.\n"
        "If you use the Trace Agent, we often find that the root cause originates from a specific "
        "downstream trace. If you have already define the root cause service, just call the "
        "Format Agent.\n"
        "You have the following agents to call: {agents}"
    ),
    "final_review": (
        "Please rethink the above think process and return the correct root cause and reason "
        "by the Format Agent.\n"
        "Input:\n"
        "{think_process}"
    ),
}

PHASE_AGENTS = {
    "initial": ("trace", "format"),
    "reflection_step1": ("trace", "metric"),
    "reflection_later": ("trace", "metric", "format"),
    "final_review": ("format",),
}

# The initial phase keeps the metric agent out of sight, its help text included.
_HIDDEN_IN_INITIAL = ("Metrics Agent", "Metric Agent", '"agent": "metric"')


@dataclass(frozen=True)
class PromptTemplate:
    phase: str
    body: str

    @property
    def allowed_agents(self) -> tuple[str, ...]:
        return PHASE_AGENTS[self.phase]

    @property
    def placeholders(self) -> set[str]:
        return {f for _, f, _, _ in string.Formatter().parse(self.body) if f}


TEMPLATES = {phase: PromptTemplate(phase, body) for phase, body in _TEMPLATES.items()}


def agent_listing(agents: Iterable[str]) -> str:
    return "\n" + "\n".join(f"- {AGENT_HELP[a]}" for a in agents)


def render_prompt(template: PromptTemplate | str, state: Mapping[str, Any]) -> str:
    """Fill a phase template. ``agents`` defaults to the phase's allowed agent set."""
    if isinstance(template, str):
        template = TEMPLATES[template]
    values = dict(state)
    values.setdefault("agents", agent_listing(template.allowed_agents))
    missing = template.placeholders - values.keys()
    if missing:
        raise PromptRenderError(f"{template.phase} prompt missing {sorted(missing)}")
    text = template.body.format(**{k: values[k] for k in template.placeholders})
    if template.phase == "initial" and any(h in text for h in _HIDDEN_IN_INITIAL):
        raise PromptRenderError("initial prompt must not mention the metrics agent")
    return text


# --------------------------------------------------------------------------- actions


@dataclass(frozen=True)
class ToolCall:
    agent: str
    arguments: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class FinalAnswer:
    text: str


AgentAction = Union[ToolCall, FinalAnswer]

_AGENT_ALIASES = {
    "trace": "trace",
    "trace_agent": "trace",
    "traceagent": "trace",
    "metric": "metric",
    "metrics": "metric",
    "metric_agent": "metric",
    "metrics_agent": "metric",
    "metricsagent": "metric",
    "format": "format",
    "format_agent": "format",
    "formatagent": "format",
}


def _normalize_agent(name: str) -> str:
    key = re.sub(r"[\s\-]+", "_", name.strip().lower())
    return _AGENT_ALIASES.get(key, key)


def _json_objects(text: str) -> Iterable[dict]:
    dec = json.JSONDecoder()
    i = text.find("{")
    while i != -1:
        try:
            obj, end = dec.raw_decode(text, i)
        except json.JSONDecodeError:
            i = text.find("{", i + 1)
            continue
        if isinstance(obj, dict):
            yield obj
        i = text.find("{", end)


def parse_action(message: Mapping[str, Any]) -> AgentAction:
    """Read one assistant message as a tool call or a final answer.

    Native ``tool_calls`` take precedence; otherwise the first JSON object with
    an ``agent`` key in the content is used. Plain text is a final answer.
    """
    calls = message.get("tool_calls") or []
    if calls:
        fn = calls[0].get("function", calls[0])
        args = fn.get("arguments") or {}
        if isinstance(args, str):
            try:
                args = json.loads(args) if args.strip() else {}
            except json.JSONDecodeError as exc:
                raise MalformedToolCallError(f"tool arguments are not JSON: {exc}") from None
        if not isinstance(args, dict):
            raise MalformedToolCallError("tool arguments must be an object")
        return ToolCall(_normalize_agent(str(fn.get("name", ""))), args)
    content = message.get("content") or ""
    for obj in _json_objects(content):
        if "agent" in obj:
            args = obj.get("arguments") or {}
            if not isinstance(args, dict):
                raise MalformedToolCallError("tool arguments must be an object")
            return ToolCall(_normalize_agent(str(obj["agent"])), args)
    if not content.strip():
        raise MalformedToolCallError("empty assistant message")
    return FinalAnswer(content)


# --------------------------------------------------------------------------- backends


class ChatBackend(Protocol):
    def complete(self, messages: Sequence[Mapping[str, Any]]) -> dict[str, Any]: ...


class HTTPChatBackend:
    """Minimal client for an OpenAI-style ``/chat/completions`` endpoint."""

    def __init__(self, endpoint: str, model: str, api_key: str | None = None, *, timeout: float = 60.0,
                 temperature: float = 0.0):
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key
        self.timeout = timeout
        self.temperature = temperature

    @classmethod
    def from_env(cls, **kwargs: Any) -> HTTPChatBackend:
        endpoint = os.environ.get("RCL_LLM_ENDPOINT")
        model = os.environ.get("RCL_LLM_MODEL")
        if not endpoint or not model:
            raise LLMTransportError("RCL_LLM_ENDPOINT and RCL_LLM_MODEL must be set")
        return cls(endpoint, model, os.environ.get("RCL_LLM_API_KEY"), **kwargs)

    def complete(self, messages: Sequence[Mapping[str, Any]]) -> dict[str, Any]:
        body = json.dumps(
            {"model": self.model, "messages": list(messages), "temperature": self.temperature}
        ).encode()
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        req = urllib.request.Request(self.endpoint, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode())
        except (urllib.error.URLError, TimeoutError, OSError) as exc:
            raise LLMTransportError(f"chat request failed: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise LLMTransportError(f"chat response is not JSON: {exc}") from exc
        try:
            return dict(payload["choices"][0]["message"])
        except (KeyError, IndexError, TypeError) as exc:
            raise LLMTransportError(f"unexpected chat response shape: {exc}") from exc


class RecordedBackend:
    """Plays back canned assistant messages in order; keeps the requests it saw."""

    def __init__(self, responses: Iterable[str | Mapping[str, Any]]):
        self._responses = [
            {"role": "assistant", "content": r} if isinstance(r, str) else dict(r) for r in responses
        ]
        self._pos = 0
        self.requests: list[list[dict[str, Any]]] = []

    @classmethod
    def from_file(cls, path: str | Path) -> RecordedBackend:
        data = json.loads(Path(path).read_text())
        if isinstance(data, dict):
            data = data.get("responses", [])
        return cls(data)

    @property
    def remaining(self) -> int:
        return len(self._responses) - self._pos

    def complete(self, messages: Sequence[Mapping[str, Any]]) -> dict[str, Any]:
        self.requests.append([dict(m) for m in messages])
        if self._pos >= len(self._responses):
            raise LLMTransportError("recorded transcript exhausted")
        msg = self._responses[self._pos]
        self._pos += 1
        return dict(msg)


# --------------------------------------------------------------------------- conversation


@dataclass
class Conversation:
    messages: list[dict[str, Any]] = field(default_factory=list)
    max_steps: int = DEFAULT_MAX_STEPS
    steps: int = 0

    @classmethod
    def start(cls, user_prompt: str, *, max_steps: int = DEFAULT_MAX_STEPS) -> Conversation:
        return cls(
            [{"role": "system", "content": SYSTEM_PROMPT}, {"role": "user", "content": user_prompt}],
            max_steps=max_steps,
        )

    def add_user(self, text: str) -> None:
        self.messages.append({"role": "user", "content": text})

    def transcript(self) -> str:
        return "\n".join(f"[{m['role']}] {m.get('content') or ''}" for m in self.messages[1:])


def step(
    conversation: Conversation,
    allowed_agents: Iterable[str],
    backend: ChatBackend,
) -> AgentAction:
    """Ask the model for its next action.

    A malformed reply or a call to an agent outside ``allowed_agents`` gets one
    corrective retry before :class:`MalformedToolCallError` is raised.
    """
    allowed = set(allowed_agents)
    if conversation.steps >= conversation.max_steps:
        raise BudgetExceededError(f"step budget of {conversation.max_steps} exhausted")
    conversation.steps += 1
    problem = ""
    for attempt in range(2):
        reply = backend.complete(conversation.messages)
        conversation.messages.append(
            {"role": "assistant", "content": reply.get("content") or ""}
            | ({"tool_calls": reply["tool_calls"]} if reply.get("tool_calls") else {})
        )
        try:
            action = parse_action(reply)
        except MalformedToolCallError as exc:
            problem = str(exc)
        else:
            if isinstance(action, FinalAnswer) or action.agent in allowed:
                return action
            problem = f"agent {action.agent!r} is not available here"
        if attempt == 0:
            logger.debug("retrying malformed model output: %s", problem)
            conversation.add_user(
                f"Your last reply could not be used ({problem}). Reply with a single JSON object "
                f'{{"agent": ..., "arguments": {{...}}}} using one of: {", ".join(sorted(allowed))}.'
            )
    raise MalformedToolCallError(problem)
