"""Optional prompt expansion through a chat-completion style HTTP endpoint.

Expansion only ever decorates a run: failures fall back to the original
prompt (when configured) and never reach the samplers.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Optional

import httpx

from .config import ExpansionSection
from .errors import ProtocolError, RetriableError

log = logging.getLogger(__name__)

TEMPLATE = "Original caption: {prompt}. Can you provide a more comprehensive description of the image?"


def build_request(prompt: str, cfg: ExpansionSection) -> dict:
    return {
        "model": cfg.model,
        "messages": [{"role": "user", "content": TEMPLATE.format(prompt=prompt)}],
    }


def _headers(cfg: ExpansionSection) -> dict:
    headers = {"Content-Type": "application/json"}
    token = os.environ.get(cfg.token_env)
    if token:
        headers["Authorization"] = f"Bearer {token}"
    return headers


def parse_response(payload) -> str:
    try:
        text = payload["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        raise ProtocolError(f"unexpected response shape: {str(payload)[:200]}") from None
    if not isinstance(text, str) or not text.strip():
        raise ProtocolError("response carries no text")
    return text.strip()


def _post_once(client: httpx.Client, prompt: str, cfg: ExpansionSection) -> str:
    try:
        resp = client.post(cfg.endpoint, json=build_request(prompt, cfg), headers=_headers(cfg), timeout=cfg.timeout)
    except (httpx.TimeoutException, httpx.TransportError) as exc:
        raise RetriableError(f"request failed: {exc}") from exc
    if resp.status_code == 429 or resp.status_code >= 500:
        raise RetriableError(f"endpoint answered {resp.status_code}")
    if resp.status_code != 200:
        raise ProtocolError(f"endpoint answered {resp.status_code}: {resp.text[:200]}")
    try:
        payload = resp.json()
    except ValueError:
        raise ProtocolError("response is not JSON") from None
    return parse_response(payload)


def expand_prompt(prompt: str, cfg: ExpansionSection, client: Optional[httpx.Client] = None, sleep: Callable = time.sleep) -> str:
    """Return the expanded prompt, or ``prompt`` itself without an endpoint.

    Network errors, timeouts, 429 and 5xx answers are retried with
    exponential backoff. Once retries are exhausted, or on a malformed
    answer, the prompt is returned unchanged when ``cfg.fallback`` is set and
    the error is raised otherwise.
    """
    if not cfg.endpoint:
        return prompt
    own = client is None
    client = httpx.Client() if own else client
    try:
        for attempt in range(cfg.retries + 1):
            try:
                return _post_once(client, prompt, cfg)
            except RetriableError as exc:
                if attempt == cfg.retries:
                    if cfg.fallback:
                        log.warning("prompt expansion gave up after %d attempts: %s", attempt + 1, exc)
                        return prompt
                    raise
                sleep(cfg.backoff * 2**attempt)
            except ProtocolError as exc:
                if cfg.fallback:
                    log.warning("prompt expansion failed: %s", exc)
                    return prompt
                raise
    finally:
        if own:
            client.close()


def expand_prompts(prompts, cfg: ExpansionSection, client: Optional[httpx.Client] = None, sleep: Callable = time.sleep) -> list:
    """Expand several prompts with at most ``cfg.max_concurrency`` requests in flight."""
    if not cfg.endpoint:
        return list(prompts)
    own = client is None
    client = httpx.Client() if own else client
    try:
        with ThreadPoolExecutor(max_workers=max(1, cfg.max_concurrency)) as pool:
            return list(pool.map(lambda p: expand_prompt(p, cfg, client, sleep), prompts))
    finally:
        if own:
            client.close()
