"""Tool execution: sandboxed code interpreter and lexical/remote search.

The code tool runs an external interpreter process inside a scratch
directory with hard resource limits; when the pipeline runs as root the
child additionally drops to an unprivileged uid so it cannot read
root-owned pipeline files. Timeouts come back as ordinary error results,
not pipeline faults.

The search tool scores a local JSONL corpus with BM25 (k1=1.2, b=0.75) or
forwards to a remote HTTP endpoint. Local search is a pure function of
(corpus, query, k).
"""

from __future__ import annotations

import json
import math
import os
import re
import shutil
import signal
import subprocess
import sys
import tempfile
from collections import Counter
from dataclasses import dataclass, field

import requests

from .errors import (BudgetExhausted, EmptyCorpus, RemoteSearchError,
                     SandboxUnavailable, ValidationError)
from .types import (BUDGET_EXCEEDED_TEXT, CODE, SEARCH, Segment, TOOL_CALL,
                    TOOL_RESULT)

NOBODY_UID = 65534
EMPTY_OUTPUT_MARKER = "(no output)"
DEFAULT_SNIPPET_CHARS = 512


@dataclass
class ToolBudget:
    """Per-episode tool accounting; never shared across episodes."""

    per_tool_limit: int = 4
    used: dict[str, int] = field(default_factory=dict)

    def remaining(self, tool: str) -> int:
        return self.per_tool_limit - self.used.get(tool, 0)

    def charge(self, tool: str) -> None:
        if self.remaining(tool) <= 0:
            raise BudgetExhausted(tool)
        self.used[tool] = self.used.get(tool, 0) + 1


def run_code(source: str, timeout_ms: int = 5000, *, interpreter: str | None = None,
             scratch_dir: str | None = None, memory_mb: int = 512) -> dict:
    """Execute code in an isolated process; return {"stdout"} or {"error_message"}.

    The child gets its own session, CPU/memory/file-size rlimits, and (when
    running as root) the nobody uid, with the scratch directory as cwd.
    """
    if not source:
        raise ValidationError("empty code source")
    interpreter = interpreter or sys.executable
    if shutil.which(interpreter) is None and not os.path.exists(interpreter):
        raise SandboxUnavailable(f"interpreter {interpreter!r} not found")

    own_scratch = scratch_dir is None
    scratch = scratch_dir or tempfile.mkdtemp(prefix="tirkit-sandbox-")
    try:
        os.chmod(scratch, 0o777)
        script = os.path.join(scratch, "snippet.py")
        with open(script, "w", encoding="utf-8") as fh:
            fh.write(source)
        os.chmod(script, 0o644)

        def limit_child():
            import resource
            os.setsid()
            cpu_s = max(1, int(math.ceil(timeout_ms / 1000)) * 2)
            resource.setrlimit(resource.RLIMIT_CPU, (cpu_s, cpu_s))
            mem = memory_mb * 1024 * 1024
            resource.setrlimit(resource.RLIMIT_AS, (mem, mem))
            resource.setrlimit(resource.RLIMIT_FSIZE, (16 * 1024 * 1024,) * 2)
            if os.geteuid() == 0:
                os.setgid(NOBODY_UID)
                os.setuid(NOBODY_UID)

        try:
            proc = subprocess.Popen(
                [interpreter, script], cwd=scratch,
                stdout=subprocess.PIPE, stderr=subprocess.PIPE,
                preexec_fn=limit_child, text=True,
                env={"PATH": os.environ.get("PATH", "/usr/bin:/bin"),
                     "HOME": scratch, "TMPDIR": scratch})
        except OSError as exc:
            raise SandboxUnavailable(f"cannot launch sandbox: {exc}") from exc
        try:
            stdout, stderr = proc.communicate(timeout=timeout_ms / 1000)
        except subprocess.TimeoutExpired:
            try:
                os.killpg(proc.pid, signal.SIGKILL)
            except ProcessLookupError:
                pass
            proc.wait()
            return {"error_message": f"timeout after {timeout_ms}ms"}
        if proc.returncode != 0:
            return {"error_message": stderr.strip() or
                    f"interpreter exited with code {proc.returncode}"}
        return {"stdout": stdout}
    finally:
        if own_scratch:
            shutil.rmtree(scratch, ignore_errors=True)


# --- lexical search ---

_TOKEN_RE = re.compile(r"\w+")


def _terms(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class LocalSearchIndex:
    """BM25 index over an in-memory corpus of (doc_id, title, text) rows."""

    def __init__(self, docs: list[tuple[str, str, str]], k1: float = 1.2,
                 b: float = 0.75, snippet_chars: int = DEFAULT_SNIPPET_CHARS):
        if not docs:
            raise EmptyCorpus("corpus has no documents")
        self.k1 = k1
        self.b = b
        self.snippet_chars = snippet_chars
        self.docs = list(docs)
        self._doc_terms = [Counter(_terms(f"{title} {text}")) for _, title, text in docs]
        self._doc_lens = [sum(c.values()) for c in self._doc_terms]
        self._avg_len = sum(self._doc_lens) / len(docs)
        self._df: Counter = Counter()
        for counts in self._doc_terms:
            self._df.update(counts.keys())

    @classmethod
    def from_jsonl(cls, path, **kwargs) -> "LocalSearchIndex":
        docs = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    row = json.loads(line)
                    docs.append((row["doc_id"], row.get("title", ""), row["text"]))
        return cls(docs, **kwargs)

    def _idf(self, term: str) -> float:
        n, df = len(self.docs), self._df.get(term, 0)
        return math.log((n - df + 0.5) / (df + 0.5) + 1.0)

    def search(self, query: str, k: int = 3) -> list[tuple[str, str, float]]:
        """Top-k (doc_id, snippet, score); only term-overlapping docs rank."""
        if k < 1:
            raise ValidationError("k must be >= 1")
        q_terms = _terms(query)
        scored = []
        for i, (doc_id, title, text) in enumerate(self.docs):
            counts, dl = self._doc_terms[i], self._doc_lens[i]
            score = 0.0
            for term in q_terms:
                tf = counts.get(term, 0)
                if tf == 0:
                    continue
                denom = tf + self.k1 * (1 - self.b + self.b * dl / self._avg_len)
                score += self._idf(term) * tf * (self.k1 + 1) / denom
            if score > 0:
                snippet = (f"{title}: {text}" if title else text)[:self.snippet_chars]
                scored.append((doc_id, snippet, score))
        scored.sort(key=lambda e: (-e[2], e[0]))
        return scored[:k]


class RemoteSearch:
    """Forwards queries to an HTTP endpoint returning a ranked JSON list."""

    def __init__(self, url: str, timeout: float = 30.0):
        self.url = url
        self.timeout = timeout

    def search(self, query: str, k: int = 3) -> list[tuple[str, str, float]]:
        try:
            resp = requests.get(self.url, params={"q": query, "k": k},
                                timeout=self.timeout)
            resp.raise_for_status()
            rows = resp.json()
        except (requests.RequestException, ValueError) as exc:
            raise RemoteSearchError(f"remote search failed: {exc}") from exc
        return [(r["doc_id"], r["snippet"], float(r.get("score", 0.0))) for r in rows]


def format_search_results(hits: list[tuple[str, str, float]]) -> str:
    if not hits:
        return "no results found"
    return "\n".join(f"({i + 1}) {snippet}" for i, (_, snippet, _) in enumerate(hits))


@dataclass
class ToolRunner:
    """Dispatches tool_call segments to the concrete tool backends."""

    search_backend: LocalSearchIndex | RemoteSearch | None = None
    code_interpreter: str | None = None
    code_timeout_ms: int = 5000
    search_k: int = 3

    def execute(self, seg: Segment, budget: ToolBudget) -> Segment:
        """Run one tool call under the budget; return the result segment.

        Raises BudgetExhausted without executing when the tool's budget is
        spent; the sampler turns that into a budget-marker injection.
        """
        if seg.kind != TOOL_CALL:
            raise ValidationError(f"cannot execute segment of kind {seg.kind}")
        budget.charge(seg.tool)
        if seg.tool == CODE:
            outcome = run_code(seg.text, self.code_timeout_ms,
                               interpreter=self.code_interpreter)
            if "stdout" in outcome:
                text = outcome["stdout"] or EMPTY_OUTPUT_MARKER
            else:
                text = outcome["error_message"]
        else:
            if self.search_backend is None:
                raise EmptyCorpus("no search backend configured")
            text = format_search_results(self.search_backend.search(seg.text.strip(),
                                                                    self.search_k))
        return Segment(kind=TOOL_RESULT, text=text, tool=seg.tool)


def budget_exceeded_result(tool: str) -> Segment:
    return Segment(kind=TOOL_RESULT, text=BUDGET_EXCEEDED_TEXT, tool=tool)
