"""Completion-endpoint client plus a deterministic scriptable mock server.

The wire protocol is OpenAI-style text completions over HTTP:

    POST /v1/completions
    {"prompt": ..., "max_tokens": ..., "temperature": ..., "stop": [...],
     "logprobs": K, "echo": false, "seed": ...}

The response carries the full token stream with top-K logprob maps in
``choices[0].logprobs``. Two extension fields pin down the finish semantics
the sampler needs: ``stop_sequence`` names the matched stop text (reported
but never included in the tokens) and finish_reason "stop" with a null
stop_sequence means end-of-stream.

The mock serves scripted scenarios: ordered rules mapping a prefix regex to
token streams with full per-token distributions. Everything is a pure
function of (scenario, seed, request), which is what makes branch resumes
and byte-reproducible runs testable. Rule matching supports exact
continuation: when the prompt already contains a prefix of a rule's chosen
emission, generation resumes mid-emission, reproducing the remainder
verbatim under an unchanged seed.
"""

from __future__ import annotations

import hashlib
import json
import random
import re
import socket
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Iterable, Sequence

import requests

from .errors import (EndpointUnavailable, GatewayTimeout, PortInUse, PrefixMismatch,
                     ProtocolError, ScenarioParseError, ValidationError)
from .types import TokenEvent, ingest_token_event

DIST_TOLERANCE = 1e-9


@dataclass(frozen=True)
class GenerationRequest:
    prefix_text: str
    stop_sequences: tuple[str, ...] = ()
    max_new_tokens: int = 1024
    temperature: float = 1.0
    top_logprobs: int = 20
    seed: int | None = None

    def __post_init__(self):
        if self.max_new_tokens < 1:
            raise ValidationError("max_new_tokens must be >= 1")
        if self.temperature <= 0:
            raise ValidationError("temperature must be > 0")
        if self.top_logprobs < 1:
            raise ValidationError("top_logprobs must be >= 1")


@dataclass(frozen=True)
class FinishReason:
    kind: str  # stop | length | eos
    stop_sequence: str | None = None


EOS = FinishReason(kind="eos")
LENGTH = FinishReason(kind="length")


def stopped(seq: str) -> FinishReason:
    return FinishReason(kind="stop", stop_sequence=seq)


# --- scenario model ---

@dataclass(frozen=True)
class ScenarioToken:
    """One scripted token: emitted text plus its full distribution."""

    text: str
    dist: tuple[tuple[str, float], ...]

    def __post_init__(self):
        total = sum(p for _, p in self.dist)
        if abs(total - 1.0) > DIST_TOLERANCE:
            raise ScenarioParseError(f"distribution sums to {total}, not 1")
        if all(t != self.text for t, _ in self.dist):
            raise ScenarioParseError(f"emitted token {self.text!r} missing from dist")


def certain_token(text: str) -> ScenarioToken:
    return ScenarioToken(text=text, dist=((text, 1.0),))


@dataclass(frozen=True)
class Emission:
    tokens: tuple[ScenarioToken, ...]
    weight: float = 1.0
    eos: bool = False

    @property
    def text(self) -> str:
        return "".join(t.text for t in self.tokens)


@dataclass(frozen=True)
class Rule:
    match: str  # regex searched against prompt + generated-so-far
    emissions: tuple[Emission, ...]


@dataclass(frozen=True)
class MockScenario:
    scenario_id: str
    rules: tuple[Rule, ...]
    seed: int = 0
    alphabet: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"scenario_id": self.scenario_id, "seed": self.seed,
                "alphabet": list(self.alphabet),
                "rules": [{"match": r.match,
                           "emissions": [{"weight": e.weight, "eos": e.eos,
                                          "tokens": [{"text": t.text,
                                                      "dist": [[a, p] for a, p in t.dist]}
                                                     for t in e.tokens]}
                                         for e in r.emissions]}
                          for r in self.rules]}

    @classmethod
    def from_dict(cls, d: dict) -> "MockScenario":
        try:
            rules = tuple(
                Rule(match=rd["match"],
                     emissions=tuple(
                         Emission(weight=ed.get("weight", 1.0), eos=ed.get("eos", False),
                                  tokens=tuple(
                                      ScenarioToken(text=td["text"],
                                                    dist=tuple((a, p) for a, p in td["dist"]))
                                      for td in ed["tokens"]))
                         for ed in rd["emissions"]))
                for rd in d["rules"])
            return cls(scenario_id=d["scenario_id"], seed=d.get("seed", 0),
                       alphabet=tuple(d.get("alphabet", ())), rules=rules)
        except (KeyError, TypeError) as exc:
            raise ScenarioParseError(f"bad scenario structure: {exc}") from exc

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=1)

    @classmethod
    def load(cls, path) -> "MockScenario":
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_dict(json.load(fh))
        except json.JSONDecodeError as exc:
            raise ScenarioParseError(f"scenario file does not parse: {exc}") from exc


# --- scenario evaluation engine ---

def _stable_rng(*parts) -> random.Random:
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def _choose_emission(rule: Rule, rule_index: int, span: tuple[int, int],
                     seed: int) -> Emission:
    if len(rule.emissions) == 1:
        return rule.emissions[0]
    rng = _stable_rng(seed, rule_index, span[0], span[1])
    weights = [e.weight for e in rule.emissions]
    return rng.choices(rule.emissions, weights=weights, k=1)[0]


def _find_continuation(scenario: MockScenario, context: str, seed: int):
    """First rule whose chosen emission extends the context; None if none.

    Returns (emission, char offset into the emission text). The residual
    text after the regex match must be a prefix of the emission, so resuming
    from a cut of a previous stream replays the remainder verbatim.
    """
    for ri, rule in enumerate(scenario.rules):
        m = re.search(rule.match, context, flags=re.DOTALL)
        if m is None:
            continue
        emission = _choose_emission(rule, ri, (m.start(), m.end()), seed)
        residual = context[m.end():]
        etext = emission.text
        if etext.startswith(residual) and (len(etext) > len(residual) or emission.eos):
            return emission, len(residual)
    return None


def _emission_tokens_from(emission: Emission, offset: int) -> list[ScenarioToken]:
    """Slice an emission's token stream at a character offset (mid-token ok)."""
    out: list[ScenarioToken] = []
    pos = 0
    for tok in emission.tokens:
        end = pos + len(tok.text)
        if end <= offset:
            pos = end
            continue
        if pos < offset:
            out.append(ScenarioToken(text=tok.text[offset - pos:], dist=tok.dist))
        else:
            out.append(tok)
        pos = end
    return out


def evaluate_scenario(scenario: MockScenario, prompt: str, *,
                      max_new_tokens: int, stop_sequences: Sequence[str] = (),
                      seed: int | None = None
                      ) -> tuple[list[ScenarioToken], FinishReason]:
    """Deterministically generate from a scenario. Pure in all arguments."""
    seed = scenario.seed if seed is None else seed
    emitted: list[ScenarioToken] = []
    gen_text = ""

    def stop_hit() -> str | None:
        best = None
        best_idx = len(gen_text) + 1
        for s in sorted(stop_sequences):
            idx = gen_text.find(s)
            if idx != -1 and idx < best_idx:
                best, best_idx = s, idx
        return best

    while True:
        if len(emitted) >= max_new_tokens:
            return emitted, LENGTH
        context = prompt + gen_text
        cont = _find_continuation(scenario, context, seed)
        if cont is None:
            if not scenario.alphabet:
                return emitted, EOS
            rng = _stable_rng(seed, "fallback", context)
            n = len(scenario.alphabet)
            dist = tuple((a, 1.0 / n) for a in scenario.alphabet)
            pending: list[ScenarioToken] = [
                ScenarioToken(text=rng.choice(scenario.alphabet), dist=dist)]
            at_eos = False
        else:
            emission, offset = cont
            pending = _emission_tokens_from(emission, offset)
            at_eos = emission.eos
            if not pending and not at_eos:
                return emitted, EOS  # no forward progress possible
        for tok in pending:
            emitted.append(tok)
            gen_text += tok.text
            s = stop_hit()
            if s is not None:
                cut = gen_text.find(s)
                emitted = _truncate_tokens(emitted, cut)
                return emitted, stopped(s)
            if len(emitted) >= max_new_tokens:
                return emitted, LENGTH
        if at_eos:
            return emitted, EOS


def _truncate_tokens(tokens: list[ScenarioToken], char_cut: int) -> list[ScenarioToken]:
    out: list[ScenarioToken] = []
    pos = 0
    for tok in tokens:
        end = pos + len(tok.text)
        if end <= char_cut:
            out.append(tok)
        elif pos < char_cut:
            out.append(ScenarioToken(text=tok.text[:char_cut - pos], dist=tok.dist))
        pos = end
    return out


def _scenario_tokens_to_events(tokens: Iterable[ScenarioToken], k_top: int
                               ) -> list[TokenEvent]:
    import math
    events = []
    for i, tok in enumerate(tokens):
        ranked = sorted(tok.dist, key=lambda e: (-e[1], e[0]))
        top = ranked[:k_top]
        chosen_lp = None
        for t, p in ranked:
            if t == tok.text:
                chosen_lp = math.log(p) if p > 0 else -745.0
                break
        alts = [(t, math.log(p) if p > 0 else -745.0) for t, p in top]
        events.append(ingest_token_event(i, tok.text, chosen_lp, alts))
    return events


# --- clients ---

class CompletionClient:
    """HTTP client for logprob-emitting completion endpoints.

    Shareable across threads; each call is an independent request. Transient
    connection failures are retried with capped exponential backoff before
    EndpointUnavailable is raised.
    """

    BACKOFFS = (0.5, 2.0, 8.0)

    def __init__(self, base_url: str, timeout: float = 60.0, retries: int = 3,
                 backoffs: Sequence[float] | None = None, sleep=time.sleep):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.backoffs = tuple(backoffs) if backoffs is not None else self.BACKOFFS
        self._sleep = sleep

    def generate(self, req: GenerationRequest) -> tuple[list[TokenEvent], FinishReason]:
        body = {"prompt": req.prefix_text, "max_tokens": req.max_new_tokens,
                "temperature": req.temperature, "stop": list(req.stop_sequences),
                "logprobs": req.top_logprobs, "echo": False}
        if req.seed is not None:
            body["seed"] = req.seed
        payload = self._post(body)
        return self._parse_choice(payload)

    def continue_from(self, base_prompt: str, prefix_tokens: Sequence[TokenEvent],
                      cut_index: int, req: GenerationRequest
                      ) -> tuple[list[TokenEvent], FinishReason]:
        """Resume generation after the first cut_index tokens of a stream.

        The detokenized prefix is appended byte-identically to the base
        prompt; resuming past the end of the recorded stream is refused.
        """
        if not 0 <= cut_index <= len(prefix_tokens):
            raise PrefixMismatch(
                f"cut {cut_index} outside recorded stream of {len(prefix_tokens)} tokens")
        prefix_text = "".join(t.token_text for t in prefix_tokens[:cut_index])
        resumed = GenerationRequest(
            prefix_text=base_prompt + prefix_text,
            stop_sequences=req.stop_sequences, max_new_tokens=req.max_new_tokens,
            temperature=req.temperature, top_logprobs=req.top_logprobs, seed=req.seed)
        return self.generate(resumed)

    def _post(self, body: dict) -> dict:
        last_exc = None
        for attempt in range(self.retries):
            try:
                resp = requests.post(f"{self.base_url}/v1/completions",
                                     json=body, timeout=self.timeout)
            except requests.Timeout as exc:
                raise GatewayTimeout(str(exc)) from exc
            except requests.ConnectionError as exc:
                last_exc = exc
                if attempt + 1 < self.retries:
                    self._sleep(self.backoffs[min(attempt, len(self.backoffs) - 1)])
                continue
            if resp.status_code >= 500:
                last_exc = ProtocolError(f"server error {resp.status_code}")
                if attempt + 1 < self.retries:
                    self._sleep(self.backoffs[min(attempt, len(self.backoffs) - 1)])
                continue
            if resp.status_code != 200:
                raise ProtocolError(f"endpoint returned {resp.status_code}: {resp.text[:200]}")
            return resp.json()
        raise EndpointUnavailable(f"{self.base_url}: {last_exc}")

    @staticmethod
    def _parse_choice(payload: dict) -> tuple[list[TokenEvent], FinishReason]:
        try:
            choice = payload["choices"][0]
            logprobs = choice["logprobs"]
            tokens = logprobs["tokens"]
            token_lps = logprobs["token_logprobs"]
            top_lps = logprobs["top_logprobs"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"response missing logprobs: {exc}") from exc
        events = []
        for i, (text, lp, top) in enumerate(zip(tokens, token_lps, top_lps)):
            try:
                events.append(ingest_token_event(i, text, lp, list(top.items())))
            except ValidationError as exc:
                raise ProtocolError(f"bad token event at {i}: {exc}") from exc
        if choice.get("finish_reason") == "length":
            finish = LENGTH
        elif choice.get("stop_sequence"):
            finish = stopped(choice["stop_sequence"])
        else:
            finish = EOS
        return events, finish


class InProcessClient:
    """Client-compatible facade evaluating a scenario without HTTP.

    Serves as the independent oracle for the mock server's wire round trip
    and keeps unit tests fast.
    """

    def __init__(self, scenario: MockScenario):
        self.scenario = scenario

    def generate(self, req: GenerationRequest) -> tuple[list[TokenEvent], FinishReason]:
        tokens, finish = evaluate_scenario(
            self.scenario, req.prefix_text, max_new_tokens=req.max_new_tokens,
            stop_sequences=req.stop_sequences, seed=req.seed)
        return _scenario_tokens_to_events(tokens, req.top_logprobs), finish

    def continue_from(self, base_prompt, prefix_tokens, cut_index, req):
        return CompletionClient.continue_from(self, base_prompt, prefix_tokens,
                                              cut_index, req)


# --- mock server ---

class _MockHandler(BaseHTTPRequestHandler):
    scenario: MockScenario = None  # set per server class

    def log_message(self, *args):  # quiet
        pass

    def do_GET(self):
        if self.path == "/health":
            self._send(200, {"status": "ok", "scenario": self.scenario.scenario_id})
        else:
            self._send(404, {"error": "not found"})

    def do_POST(self):
        if self.path != "/v1/completions":
            self._send(404, {"error": "not found"})
            return
        length = int(self.headers.get("Content-Length", 0))
        try:
            body = json.loads(self.rfile.read(length) or b"{}")
            prompt = body["prompt"]
            max_tokens = int(body.get("max_tokens", 256))
            stop = body.get("stop", [])
            k = int(body.get("logprobs", 20))
            seed = body.get("seed")
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            self._send(400, {"error": f"bad request: {exc}"})
            return
        tokens, finish = evaluate_scenario(self.scenario, prompt,
                                           max_new_tokens=max_tokens,
                                           stop_sequences=stop, seed=seed)
        events = _scenario_tokens_to_events(tokens, k)
        choice = {
            "text": "".join(e.token_text for e in events),
            "index": 0,
            "finish_reason": "length" if finish.kind == "length" else "stop",
            "stop_sequence": finish.stop_sequence,
            "logprobs": {
                "tokens": [e.token_text for e in events],
                "token_logprobs": [e.chosen_logprob for e in events],
                "top_logprobs": [dict(e.alternatives) for e in events],
            },
        }
        self._send(200, {"id": "mock", "object": "text_completion", "choices": [choice]})

    def _send(self, code: int, payload: dict):
        data = json.dumps(payload).encode()
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)


class MockServerHandle:
    def __init__(self, server: ThreadingHTTPServer, thread: threading.Thread):
        self._server = server
        self.thread = thread
        self.port = server.server_address[1]
        self.url = f"http://127.0.0.1:{self.port}"

    def close(self):
        self._server.shutdown()
        self._server.server_close()
        self.thread.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def mock_serve(scenario: MockScenario | str, port: int = 0) -> MockServerHandle:
    """Start the mock completion server; port 0 picks a free port."""
    if not isinstance(scenario, MockScenario):
        scenario = MockScenario.load(scenario)
    handler = type("Handler", (_MockHandler,), {"scenario": scenario})
    try:
        server = ThreadingHTTPServer(("127.0.0.1", port), handler)
    except OSError as exc:
        raise PortInUse(f"port {port}: {exc}") from exc
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return MockServerHandle(server, thread)
