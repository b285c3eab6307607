"""LLM-backed caption cleaning, weak-caption summarisation and class descriptions.

All requests go through a :class:`CompletionClient`; :class:`MockCompletionClient`
replays a fixed response table so tests and offline runs are deterministic.
Failures never abort a batch: the original text comes back flagged.
"""

from __future__ import annotations

import json
import logging
import os
import re
import string
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Union

import httpx

from .dataset import AnnotatedClip, Region

logger = logging.getLogger(__name__)

_INPUT_BLOCK = re.compile(r"<input>\n?(.*?)\n?</input>", re.DOTALL)


class CompletionError(RuntimeError):
    pass


class CompletionClient(Protocol):
    def complete(self, messages: List[dict]) -> str:
        ...


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    version: int
    system: str
    user: str

    @property
    def slots(self) -> set:
        return {f for _, f, _, _ in string.Formatter().parse(self.user) if f}

    def render(self, **values) -> List[dict]:
        missing = self.slots - set(values)
        if missing:
            raise KeyError(f"template {self.name!r} missing values for {sorted(missing)}")
        extra = set(values) - self.slots
        if extra:
            raise KeyError(f"template {self.name!r} has no slots {sorted(extra)}")
        return [{"role": "system", "content": self.system},
                {"role": "user", "content": self.user.format(**values)}]


def load_template(name_or_path: Union[str, Path]) -> PromptTemplate:
    """Load a shipped template by name (``clean_caption`` ...) or a JSON file path."""
    path = Path(name_or_path)
    if path.suffix == ".json" and path.exists():
        text = path.read_text(encoding="utf-8")
    else:
        text = resources.files("framealign.prompts").joinpath(f"{name_or_path}.json").read_text(
            encoding="utf-8")
    data = json.loads(text)
    return PromptTemplate(data["name"], int(data.get("version", 1)), data["system"], data["user"])


# --------------------------------------------------------------------------
# Clients
# --------------------------------------------------------------------------


class RateLimiter:
    """Spaces calls at least ``1 / rate`` seconds apart (thread-safe)."""

    def __init__(self, rate: float, clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.interval = 1.0 / rate
        self.clock = clock
        self.sleep = sleep
        self._next = None
        self._lock = threading.Lock()

    def acquire(self) -> None:
        with self._lock:
            now = self.clock()
            if self._next is not None and now < self._next:
                self.sleep(self._next - now)
                now = self._next
            self._next = now + self.interval


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    backoff: float = 1.0
    factor: float = 2.0

    def delays(self):
        delay = self.backoff
        for _ in range(self.max_attempts - 1):
            yield delay
            delay *= self.factor


class HTTPCompletionClient:
    """Chat-completion client (``model``/``messages``/``temperature`` POST body)."""

    def __init__(self, endpoint: str, model: str, timeout: float = 30.0,
                 retry: RetryPolicy = RetryPolicy(), api_key_env: str = "OPENAI_API_KEY",
                 temperature: float = 0.0, rate_limiter: Optional[RateLimiter] = None,
                 transport: Optional[httpx.BaseTransport] = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.endpoint = endpoint
        self.model = model
        self.temperature = temperature
        self.retry = retry
        self.rate_limiter = rate_limiter
        self.sleep = sleep
        headers = {}
        key = os.environ.get(api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._http = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    def _post(self, body: dict) -> str:
        if self.rate_limiter is not None:
            self.rate_limiter.acquire()
        response = self._http.post(self.endpoint, json=body)
        response.raise_for_status()
        return response.json()["choices"][0]["message"]["content"]

    def complete(self, messages: List[dict]) -> str:
        body = {"model": self.model, "messages": messages, "temperature": self.temperature}
        delays = list(self.retry.delays())
        for attempt in range(self.retry.max_attempts):
            try:
                return self._post(body)
            except (httpx.HTTPError, KeyError, IndexError, ValueError) as exc:
                logger.warning("completion attempt %d failed: %s", attempt + 1, exc)
                if attempt < len(delays):
                    self.sleep(delays[attempt])
                last = exc
        raise CompletionError(f"completion failed after {self.retry.max_attempts} attempts: {last}")

    def close(self) -> None:
        self._http.close()


def prompt_payload(messages: List[dict]) -> str:
    """Text inside the last ``<input>`` block of the user message (or the whole message)."""
    user = [m["content"] for m in messages if m.get("role") == "user"]
    content = user[-1] if user else ""
    blocks = _INPUT_BLOCK.findall(content)
    return blocks[-1] if blocks else content


class MockCompletionClient:
    """Deterministic client answering from a table keyed by prompt payload.

    Unknown payloads are echoed back when ``echo`` is true, otherwise they
    raise :class:`CompletionError`. ``calls`` records every payload seen.
    """

    def __init__(self, table: Optional[Dict[str, str]] = None, echo: bool = True,
                 rate_limiter: Optional[RateLimiter] = None):
        self.table = dict(table or {})
        self.echo = echo
        self.rate_limiter = rate_limiter
        self.calls: List[str] = []
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "MockCompletionClient":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if "responses" in data:
            return cls(data["responses"], echo=data.get("echo", True))
        return cls(data)

    def complete(self, messages: List[dict]) -> str:
        if self.rate_limiter is not None:
            self.rate_limiter.acquire()
        payload = prompt_payload(messages)
        with self._lock:
            self.calls.append(payload)
        if payload in self.table:
            return self.table[payload]
        if self.echo:
            return payload
        raise CompletionError(f"no mock response for {payload!r}")


# --------------------------------------------------------------------------
# Operations
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CaptionResult:
    text: str
    cleaned: bool = True
    error: Optional[str] = None


def single_sentence(response: str) -> str:
    text = " ".join(response.split())
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        text = text[1:-1].strip()
    return text


def _ask(client: CompletionClient, messages: List[dict], fallback: str) -> CaptionResult:
    logger.debug("request: %s", messages[-1]["content"])
    try:
        answer = single_sentence(client.complete(messages))
    except Exception as exc:  # transport, parsing or client errors all degrade the same way
        logger.warning("caption request failed, keeping original: %s", exc)
        return CaptionResult(fallback, cleaned=False, error=str(exc))
    logger.debug("response: %s", answer)
    if not answer:
        return CaptionResult(fallback, cleaned=False, error="empty response")
    return CaptionResult(answer)


def clean_caption(client: CompletionClient, template: PromptTemplate, caption: str) -> CaptionResult:
    if not caption.strip():
        raise ValueError("caption must be non-empty")
    return _ask(client, template.render(caption=caption.strip()), caption)


def summarize_weak(client: CompletionClient, template: PromptTemplate,
                   regions: Sequence[Region]) -> CaptionResult:
    """One-sentence clip caption from strong captions, presented in onset order."""
    if not regions:
        raise ValueError("need at least one region to summarise")
    ordered = sorted(regions, key=lambda r: (r.onset, r.offset))
    timeline = "\n".join(f"{r.onset:.3f}-{r.offset:.3f}: {r.text}" for r in ordered)
    captions = "\n".join(r.text for r in ordered)
    return _ask(client, template.render(timeline=timeline, captions=captions),
                " ".join(r.text for r in ordered))


def class_description(client: CompletionClient, template: PromptTemplate,
                      class_name: str) -> CaptionResult:
    if not class_name.strip():
        raise ValueError("class name must be non-empty")
    return _ask(client, template.render(class_name=class_name.strip()), class_name)


def _parallel(fn, items, parallelism: int) -> list:
    if parallelism <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(fn, items))  # map preserves input order


def clean_captions(client: CompletionClient, template: PromptTemplate,
                   captions: Sequence[str], parallelism: int = 1) -> List[CaptionResult]:
    return _parallel(lambda c: clean_caption(client, template, c), captions, parallelism)


def class_descriptions(client: CompletionClient, template: PromptTemplate,
                       class_names: Sequence[str], parallelism: int = 1) -> List[CaptionResult]:
    return _parallel(lambda n: class_description(client, template, n), class_names, parallelism)


@dataclass
class CleaningReport:
    clips: List[AnnotatedClip]
    flagged: List[dict]


def clean_manifest(clips: Sequence[AnnotatedClip], client: CompletionClient,
                   clean_template: PromptTemplate,
                   summary_template: Optional[PromptTemplate] = None,
                   parallelism: int = 1) -> CleaningReport:
    """Clean every region caption (and optionally regenerate weak captions).

    Captions whose request failed keep their original text and are listed
    in ``CleaningReport.flagged``.
    """
    flat = [(i, j, r) for i, c in enumerate(clips) for j, r in enumerate(c.regions)]
    results = clean_captions(client, clean_template, [r.text for _, _, r in flat], parallelism)
    new_regions: Dict[int, list] = {i: list(c.regions) for i, c in enumerate(clips)}
    flagged = []
    for (i, j, region), res in zip(flat, results):
        new_regions[i][j] = replace(region, text=res.text)
        if not res.cleaned:
            flagged.append({"clip_id": clips[i].clip_id, "region": j, "kind": "caption",
                            "error": res.error})
    out = []
    for i, clip in enumerate(clips):
        weak = clip.weak_caption
        if summary_template is not None and new_regions[i]:
            res = summarize_weak(client, summary_template, new_regions[i])
            weak = res.text
            if not res.cleaned:
                flagged.append({"clip_id": clip.clip_id, "region": None, "kind": "weak_caption",
                                "error": res.error})
        out.append(replace(clip, regions=tuple(new_regions[i]), weak_caption=weak))
    return CleaningReport(out, flagged)
