"""HTTP adapter for external LLM advisors.

Speaks a provider-neutral chat-completion shape and expects replies to carry
the same HTML-comment machine blocks the memory store uses:

    <!--rf:idea
    description=...
    mutations=SetToggle:temporal_embeddings=true
    rationale=...
    -->

A malformed reply earns exactly one reprompt carrying the parse error; a
second failure, a timeout, or an auth problem surfaces as AdvisoryFailure so
the loop can pause for the expert instead of crashing.
"""

from __future__ import annotations

import configparser
import json
import os
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field

from .advisory import AdvisoryFailure, AdvisoryContext, Idea, Vote, VoteDecision
from .memstore import parse_blocks

DEFAULT_REPLY_PATH = "choices.0.message.content"


@dataclass(frozen=True)
class AdvisorHandle:
    id: str
    kind: str  # "scripted" | "external"
    endpoint: str = ""
    model: str = ""
    credential_env: str = ""
    timeout_s: float = 30.0
    reply_path: str = DEFAULT_REPLY_PATH
    headers: tuple = ()  # extra (name, value) pairs

    def __post_init__(self):
        if self.kind not in ("scripted", "external"):
            raise ValueError(f"advisor kind must be scripted|external, got {self.kind!r}")
        if self.kind == "external" and not self.endpoint:
            raise ValueError(f"external advisor {self.id!r} needs an endpoint")


def load_advisor_config(path: str) -> list:
    """Advisor config file: one section per advisor, key=value entries."""
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keep header-name case
    read = parser.read(path)
    if not read:
        raise FileNotFoundError(f"advisor config not found: {path}")
    handles = []
    for section in parser.sections():
        kv = dict(parser.items(section))
        headers = tuple((k[len("header."):], v) for k, v in kv.items()
                        if k.startswith("header."))
        handles.append(AdvisorHandle(
            id=section, kind=kv.get("kind", "scripted"),
            endpoint=kv.get("endpoint", ""), model=kv.get("model", ""),
            credential_env=kv.get("credential_env", ""),
            timeout_s=float(kv.get("timeout_s", "30")),
            reply_path=kv.get("reply_path", DEFAULT_REPLY_PATH),
            headers=headers))
    if not handles:
        raise ValueError(f"advisor config {path} defines no advisors")
    return handles


def _dig(payload, dotted: str):
    node = payload
    for part in dotted.split("."):
        if isinstance(node, list):
            node = node[int(part)]
        elif isinstance(node, dict):
            node = node[part]
        else:
            raise KeyError(part)
    return node


class ReplyGrammarError(ValueError):
    pass


def parse_idea_reply(text: str) -> Idea:
    blocks = [kv for kind, kv, _ in parse_blocks(text, "<advisor-reply>") if kind == "idea"]
    if not blocks:
        raise ReplyGrammarError("reply carries no rf:idea machine block")
    kv = blocks[0]
    for required in ("description", "mutations"):
        if not kv.get(required):
            raise ReplyGrammarError(f"idea block missing required field {required!r}")
    return Idea.from_kv(kv)


def parse_vote_reply(text: str, advisor_id: str) -> Vote:
    blocks = [kv for kind, kv, _ in parse_blocks(text, "<advisor-reply>") if kind == "vote"]
    if not blocks:
        raise ReplyGrammarError("reply carries no rf:vote machine block")
    kv = blocks[0]
    if kv.get("decision") not in ("Fix", "Revert"):
        raise ReplyGrammarError(f"vote decision must be Fix|Revert, got {kv.get('decision')!r}")
    try:
        confidence = float(kv.get("confidence", ""))
    except ValueError:
        raise ReplyGrammarError("vote confidence is not a number") from None
    if not (0.0 <= confidence <= 1.0):
        raise ReplyGrammarError("vote confidence outside [0, 1]")
    return Vote(advisor_id=advisor_id, decision=VoteDecision(kv["decision"]),
                confidence=confidence, note=kv.get("note", ""))


def call_external_advisor(handle: AdvisorHandle, messages: list,
                          log_dir: str | None = None,
                          opener=None) -> str:
    """One chat-completion round trip; returns the reply text."""
    if handle.kind != "external":
        raise ValueError("call_external_advisor needs an external handle")
    headers = {"Content-Type": "application/json"}
    if handle.credential_env:
        token = os.environ.get(handle.credential_env)
        if not token:
            raise AdvisoryFailure(
                f"advisor {handle.id}: credential env var {handle.credential_env} not set")
        headers["Authorization"] = f"Bearer {token}"
    headers.update(dict(handle.headers))
    body = json.dumps({"model": handle.model, "messages": messages}).encode("utf-8")
    request = urllib.request.Request(handle.endpoint, data=body, headers=headers,
                                     method="POST")
    started = time.monotonic()
    try:
        open_fn = opener or urllib.request.urlopen
        with open_fn(request, timeout=handle.timeout_s) as response:
            raw = response.read().decode("utf-8")
    except Exception as exc:  # network, timeout, auth — all advisor-failures
        elapsed = time.monotonic() - started
        _log_exchange(log_dir, handle, messages, f"<error after {elapsed:.2f}s: {exc}>")
        raise AdvisoryFailure(
            f"advisor {handle.id}: request failed after {elapsed:.2f}s: {exc}") from exc
    _log_exchange(log_dir, handle, messages, raw)
    try:
        return str(_dig(json.loads(raw), handle.reply_path))
    except (json.JSONDecodeError, KeyError, IndexError, ValueError) as exc:
        raise AdvisoryFailure(
            f"advisor {handle.id}: reply missing {handle.reply_path}: {exc}") from exc


def _log_exchange(log_dir, handle, messages, reply_text):
    if not log_dir:
        return
    os.makedirs(log_dir, exist_ok=True)
    entry = {"advisor": handle.id, "endpoint": handle.endpoint,
             "model": handle.model, "messages": messages, "reply": reply_text,
             "authorization": "<redacted>" if handle.credential_env else None}
    path = os.path.join(log_dir, f"{handle.id}.jsonl")
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(entry, ensure_ascii=False) + "\n")


GRAMMAR_HINT = (
    "Reply with exactly one machine block. For ideas:\n"
    "<!--rf:idea\ndescription=...\nmutations=SetToggle:temporal_embeddings=true"
    " SetScheduleKind:schedule_kind=HalfDataFifth\nrationale=...\n-->\n"
    "For votes:\n<!--rf:vote\ndecision=Fix\nconfidence=0.8\nnote=...\n-->")


class ExternalAdvisor:
    """Advisor backed by a chat-completion endpoint; one reprompt on bad grammar."""

    def __init__(self, handle: AdvisorHandle, log_dir: str | None = None, opener=None):
        self.id = handle.id
        self.handle = handle
        self.log_dir = log_dir
        self.opener = opener

    def _exchange(self, prompt: str, parse):
        messages = [{"role": "system", "content": GRAMMAR_HINT},
                    {"role": "user", "content": prompt}]
        text = call_external_advisor(self.handle, messages, self.log_dir, self.opener)
        try:
            return parse(text)
        except ReplyGrammarError as first_error:
            messages.append({"role": "assistant", "content": text})
            messages.append({"role": "user",
                             "content": f"Malformed reply ({first_error}). {GRAMMAR_HINT}"})
            retry = call_external_advisor(self.handle, messages, self.log_dir, self.opener)
            try:
                return parse(retry)
            except ReplyGrammarError as second_error:
                raise AdvisoryFailure(
                    f"advisor {self.id}: malformed reply after reprompt: {second_error}"
                ) from second_error

    def propose(self, ctx: AdvisoryContext, k: int) -> list:
        prompt = _proposal_prompt(ctx, k)
        idea = self._exchange(prompt, parse_idea_reply)
        idea = Idea(id=f"ext-{self.id}-{idea.id}"[:64], description=idea.description,
                    mutations=idea.mutations, rationale=idea.rationale,
                    proposed_by=(self.id,))
        idea.apply(ctx.config, ctx.schedule)  # pre-validate against current state
        return [idea]

    def vote(self, ctx: AdvisoryContext, threshold: float) -> Vote:
        return self._exchange(_vote_prompt(ctx, threshold),
                              lambda text: parse_vote_reply(text, self.id))


def _proposal_prompt(ctx: AdvisoryContext, k: int) -> str:
    tried = ", ".join(sorted(ctx.index.tried_idea_ids())) or "none"
    return (f"Current variant config:\n"
            + "\n".join(f"{k2}={v}" for k2, v in ctx.config.to_kv().items())
            + f"\nschedule={ctx.schedule.kind.value} base_lr={ctx.schedule.base_lr}"
            + f"\nideas already tried: {tried}"
            + f"\nPropose your single best next mutation set (top {k} welcome).")


def _vote_prompt(ctx: AdvisoryContext, threshold: float) -> str:
    return (f"Run outcome: delta={ctx.metric_delta} fault={ctx.fault} "
            f"instability={ctx.instability:.3f} threshold={threshold}.\n"
            f"Should we Fix the current branch or Revert to the previous best?")
