"""Stage one: query a multimodal LLM and parse its region proposal."""
from __future__ import annotations

import base64
import json
import logging
import os
import re
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, List, Optional, Protocol, Tuple

import httpx

from .errors import (
    BackendUnavailableError,
    ConfigurationError,
    InvalidInputError,
    ProposalParseError,
    TransientBackendError,
)
from .geometry import GridSpec
from .visual_prompt import PromptBundle, encode_png

log = logging.getLogger(__name__)

REQUIRED_KEYS = ("object", "rationale")
DEFAULT_RETRIES = 3
DEFAULT_BACKOFF = (1.0, 2.0, 4.0)


@dataclass
class RegionProposal:
    object_name: str
    attributes: List[str]
    rationale: str
    ids_v: List[int]
    ids_h: List[int]
    absent: bool = False

    def __post_init__(self) -> None:
        self.absent = not self.ids_v and not self.ids_h

    @property
    def target_text(self) -> str:
        """Object name plus attributes, as sent to the segmentation backend."""
        words = [a for a in self.attributes if a] + ([self.object_name] if self.object_name else [])
        return " ".join(words)

    def to_json(self) -> dict:
        return {
            "object": self.object_name,
            "attributes": list(self.attributes),
            "ids_v": list(self.ids_v),
            "ids_h": list(self.ids_h),
            "rationale": self.rationale,
        }


def format_proposal(p: RegionProposal, preamble: str = "") -> str:
    """Render a proposal the way a compliant model would answer."""
    block = json.dumps(p.to_json(), ensure_ascii=False)
    return f"{preamble}```json\n{block}\n```\n"


@dataclass
class MllmTranscript:
    sample_id: str
    request_digest: str
    raw_response: str
    parsed: Optional[dict]
    parse_error: Optional[str]
    warnings: List[str]
    latency: float
    backend_id: str
    temperature: float
    attempts: int = 1

    def to_json(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------- parsing

_FENCE = re.compile(r"```[ \t]*(?:json|JSON)?[ \t]*\r?\n?(.*?)```", re.DOTALL)


def _balanced_objects(text: str):
    """Yield every top-level ``{...}`` substring, honouring JSON string escapes."""
    depth = 0
    start = -1
    in_str = False
    escape = False
    for i, ch in enumerate(text):
        if in_str:
            if escape:
                escape = False
            elif ch == "\\":
                escape = True
            elif ch == '"':
                in_str = False
            continue
        if ch == '"' and depth > 0:
            in_str = True
        elif ch == "{":
            if depth == 0:
                start = i
            depth += 1
        elif ch == "}" and depth > 0:
            depth -= 1
            if depth == 0:
                yield text[start:i + 1]


def _candidates(text: str):
    for m in _FENCE.finditer(text):
        body = m.group(1).strip()
        yield body
        yield from _balanced_objects(body)
    yield from _balanced_objects(text)


def _coerce_id(value: Any) -> int:
    if isinstance(value, bool):
        raise ValueError(f"boolean region id {value!r}")
    if isinstance(value, int):
        return value
    if isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(value, str) and re.fullmatch(r"\s*[+-]?\d+\s*", value):
        return int(value)
    raise ValueError(f"region id {value!r} is not an integer")


def _coerce_ids(value: Any, key: str) -> List[int]:
    if value is None:
        return []
    if isinstance(value, (int, float, str)) and not isinstance(value, bool):
        value = [value]
    if not isinstance(value, list):
        raise ValueError(f"{key} must be a list, got {type(value).__name__}")
    return [_coerce_id(v) for v in value]


def _clamp(ids: List[int], upper: int, key: str, warnings: List[str]) -> List[int]:
    out = []
    for i in ids:
        c = min(max(i, 1), upper)
        if c != i:
            warnings.append(f"{key}: id {i} out of range [1, {upper}], clamped to {c}")
        out.append(c)
    return out


def _from_object(obj: dict, grid: GridSpec) -> Tuple[RegionProposal, List[str]]:
    missing = [k for k in REQUIRED_KEYS if k not in obj]
    has_axes = "ids_v" in obj and "ids_h" in obj
    if not has_axes and "cells" not in obj:
        missing.append("ids_v/ids_h")
    if missing:
        raise ValueError(f"missing keys: {', '.join(missing)}")
    warnings: List[str] = []
    if has_axes:
        ids_v = _coerce_ids(obj["ids_v"], "ids_v")
        ids_h = _coerce_ids(obj["ids_h"], "ids_h")
    else:
        cells = _coerce_ids(obj["cells"], "cells")
        cells = _clamp(cells, grid.rows * grid.cols, "cells", warnings)
        ids_v = sorted({(c - 1) // grid.cols + 1 for c in cells})
        ids_h = sorted({(c - 1) % grid.cols + 1 for c in cells})
    ids_v = _clamp(ids_v, grid.rows, "ids_v", warnings)
    ids_h = _clamp(ids_h, grid.cols, "ids_h", warnings)

    attrs = obj.get("attributes") or []
    if isinstance(attrs, str):
        attrs = [a.strip() for a in attrs.split(",") if a.strip()]
    if not isinstance(attrs, list):
        raise ValueError("attributes must be a list or a string")
    name = obj["object"]
    rationale = obj["rationale"]
    proposal = RegionProposal(
        object_name="" if name is None else str(name),
        attributes=[str(a) for a in attrs],
        rationale="" if rationale is None else str(rationale),
        ids_v=ids_v,
        ids_h=ids_h,
    )
    if proposal.absent and not proposal.rationale.strip():
        raise ValueError("absent proposal carries no rationale")
    if bool(ids_v) != bool(ids_h):
        warnings.append("only one axis has region ids; proposal cannot be localized")
    return proposal, warnings


def parse_proposal(raw: str | bytes, grid: GridSpec) -> Tuple[RegionProposal, List[str]]:
    """Recover the structured block from a free-form response.

    Fenced ```json blocks are tried first, then any balanced ``{...}`` object
    in the text. The first candidate that decodes to an object with the
    required keys wins. Raises :class:`ProposalParseError` otherwise; no other
    exception escapes.
    """
    if isinstance(raw, (bytes, bytearray)):
        raw = bytes(raw).decode("utf-8", errors="replace")
    if not isinstance(raw, str):
        raise ProposalParseError(f"response is {type(raw).__name__}, not text")
    last_error = "no JSON object found"
    for cand in _candidates(raw):
        try:
            obj = json.loads(cand)
        except (ValueError, RecursionError) as exc:
            last_error = f"invalid JSON: {exc}"
            continue
        if not isinstance(obj, dict):
            continue
        try:
            return _from_object(obj, grid)
        except (ValueError, TypeError, OverflowError) as exc:
            last_error = str(exc)
    raise ProposalParseError(last_error)


# --------------------------------------------------------------------------- backends


class MllmBackend(Protocol):
    backend_id: str
    max_parallel: int

    def complete(self, bundle: PromptBundle, temperature: float) -> str: ...


class ScriptedBackend:
    """Replays canned responses from ``{directory}/{sample_id}.txt``."""

    max_parallel = 64

    def __init__(self, directory: str | os.PathLike, backend_id: str = "scripted"):
        self.directory = Path(directory)
        self.backend_id = backend_id

    def complete(self, bundle: PromptBundle, temperature: float) -> str:
        path = self.directory / f"{bundle.sample_id}.txt"
        try:
            # newline="" keeps the bytes exactly as written
            with open(path, encoding="utf-8", newline="") as fh:
                return fh.read()
        except FileNotFoundError as exc:
            raise ConfigurationError(f"no scripted response for sample {bundle.sample_id!r}") from exc


class CallableBackend:
    """Wraps a plain function; handy for tests and notebooks."""

    def __init__(self, fn: Callable[[PromptBundle, float], str], backend_id: str = "callable", max_parallel: int = 1):
        self.fn = fn
        self.backend_id = backend_id
        self.max_parallel = max_parallel

    def complete(self, bundle: PromptBundle, temperature: float) -> str:
        return self.fn(bundle, temperature)


def data_uri(raster) -> str:
    return "data:image/png;base64," + base64.b64encode(encode_png(raster)).decode("ascii")


def chat_request_body(bundle: PromptBundle, model: str, temperature: float) -> dict:
    """OpenAI-style vision chat-completions payload."""
    content: List[dict] = [{"type": "text", "text": bundle.user_text}]
    for img in bundle.images:
        content.append({"type": "image_url", "image_url": {"url": data_uri(img)}})
    return {
        "model": model,
        "temperature": temperature,
        "messages": [
            {"role": "system", "content": bundle.system_text},
            {"role": "user", "content": content},
        ],
    }


def _message_text(payload: Any) -> str:
    try:
        content = payload["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise TransientBackendError(f"unexpected chat response shape: {exc!r}") from exc
    if isinstance(content, list):
        return "".join(p.get("text", "") for p in content if isinstance(p, dict))
    if not isinstance(content, str):
        raise TransientBackendError("chat response content is not text")
    return content


class HttpChatBackend:
    """Vision chat-completions endpoint (``POST {base_url}/chat/completions``)."""

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key_env: str = "OPENAI_API_KEY",
        timeout: float = 120.0,
        max_parallel: int = 4,
        backend_id: Optional[str] = None,
        transport: Optional[httpx.BaseTransport] = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self.max_parallel = max_parallel
        self.backend_id = backend_id or f"http:{model}"
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def complete(self, bundle: PromptBundle, temperature: float) -> str:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        body = chat_request_body(bundle, self.model, temperature)
        try:
            resp = self._client.post(f"{self.base_url}/chat/completions", json=body, headers=headers)
        except httpx.TransportError as exc:
            raise TransientBackendError(f"transport failure: {exc}") from exc
        if resp.status_code in (401, 403):
            raise ConfigurationError(f"authentication rejected ({resp.status_code}); check ${self.api_key_env}")
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientBackendError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise ConfigurationError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            payload = resp.json()
        except ValueError as exc:
            raise TransientBackendError("chat response is not JSON") from exc
        return _message_text(payload)

    def close(self) -> None:
        self._client.close()


@dataclass
class Completion:
    text: str
    latency: float
    attempts: int


def query_backend(
    backend: MllmBackend,
    bundle: PromptBundle,
    temperature: float = 0.0,
    retries: int = DEFAULT_RETRIES,
    backoff: Tuple[float, ...] = DEFAULT_BACKOFF,
    sleep: Callable[[float], None] = time.sleep,
) -> Completion:
    """Call ``backend`` with retry on transient failures.

    ``retries`` counts the extra attempts after the first; waits between
    attempts follow ``backoff`` (the last value repeats).
    """
    if not 0.0 <= temperature <= 2.0:
        raise InvalidInputError(f"temperature must be in [0, 2], got {temperature}")
    attempts = 0
    start = time.perf_counter()
    while True:
        attempts += 1
        try:
            text = backend.complete(bundle, temperature)
            # perf_counter can tie on very fast scripted calls; keep latency positive
            latency = max(time.perf_counter() - start, 1e-9)
            return Completion(text=text, latency=latency, attempts=attempts)
        except TransientBackendError as exc:
            if attempts > retries:
                raise BackendUnavailableError(
                    f"{backend.backend_id}: giving up after {attempts} attempts: {exc}"
                ) from exc
            wait = backoff[min(attempts - 1, len(backoff) - 1)] if backoff else 0.0
            log.warning("%s attempt %d failed (%s); retrying in %.1fs", backend.backend_id, attempts, exc, wait)
            sleep(wait)


class TranscriptWriter:
    """Appends transcripts as JSON lines; safe to share between threads."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self._lock = threading.Lock()

    def write(self, transcript: MllmTranscript) -> None:
        line = json.dumps(transcript.to_json(), ensure_ascii=False, sort_keys=True)
        with self._lock, open(self.path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")


def backend_from_descriptor(desc: dict) -> MllmBackend:
    kind = desc.get("kind", "scripted")
    if kind == "scripted":
        return ScriptedBackend(desc["path"], backend_id=desc.get("id", "scripted"))
    if kind == "http":
        return HttpChatBackend(
            base_url=desc["url"],
            model=desc["model"],
            api_key_env=desc.get("api_key_env", "OPENAI_API_KEY"),
            timeout=float(desc.get("timeout", 120.0)),
            max_parallel=int(desc.get("max_parallel", 4)),
            backend_id=desc.get("id"),
        )
    raise ConfigurationError(f"unknown MLLM backend kind {kind!r}")
