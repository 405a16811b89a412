"""Pair judges: decide whether two items really stand in a given relation.

A judge is any callable ``judge(a, b, relation) -> bool``. Exceptions raised
by a judge are treated as "no answer" by the caller.
"""

from __future__ import annotations

import json
import subprocess
import threading

from .errors import ConfigError, DataFormatError
from .graph import Relation


class OracleJudge:
    """Answers from a known ground truth."""

    def __init__(self, truth):
        self.truth = truth

    def __call__(self, a, b, relation):
        return self.truth.is_true(a, b, relation)


class AlwaysJudge:
    def __init__(self, verdict):
        self.verdict = bool(verdict)

    def __call__(self, a, b, relation):
        return self.verdict


class ExternalJudge:
    """Talks line-delimited JSON to a child process over its standard streams.

    Each request is ``{"id", "relation", "text_a", "text_b"}`` on one line and
    the process must answer with one line ``{"id", "verdict"}`` where verdict
    is ``"yes"`` or ``"no"``.
    """

    def __init__(self, command, texts=None, timeout=30.0):
        if isinstance(command, str):
            command = command.split()
        if not command:
            raise ConfigError("external judge needs a command")
        self.command = list(command)
        self.texts = texts
        self.timeout = timeout
        self._proc = None
        self._next = 0
        self._lock = threading.Lock()

    def _text(self, item):
        if self.texts is not None:
            return self.texts[int(item)]
        return f"item {int(item)}"

    def _start(self):
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(
                self.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        return self._proc

    def __call__(self, a, b, relation):
        rel = Relation(relation)
        with self._lock:
            proc = self._start()
            rid = self._next
            self._next += 1
            req = {
                "id": rid,
                "relation": "substitutable" if rel is Relation.SUB else "complementary",
                "text_a": self._text(a),
                "text_b": self._text(b),
            }
            proc.stdin.write(json.dumps(req) + "\n")
            proc.stdin.flush()
            line = proc.stdout.readline()
        if not line:
            raise DataFormatError("external judge closed its output")
        try:
            resp = json.loads(line)
        except json.JSONDecodeError:
            raise DataFormatError(f"external judge sent invalid JSON: {line.strip()!r}") from None
        if resp.get("id") != rid:
            raise DataFormatError(f"external judge answered id {resp.get('id')}, expected {rid}")
        verdict = str(resp.get("verdict", "")).strip().lower()
        if verdict not in ("yes", "no"):
            raise DataFormatError(f"external judge verdict must be yes or no, got {verdict!r}")
        return verdict == "yes"

    def close(self):
        if self._proc is not None:
            if self._proc.stdin:
                self._proc.stdin.close()
            self._proc.wait(timeout=self.timeout)
            self._proc = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False
