"""Client for external evaluator subprocesses.

The adapter is spawned once and kept alive for the whole run. Requests are
JSON objects written one per line to its stdin; responses come back one per
line on its stdout and are matched by id, so requests may be pipelined. A
background thread reads responses; callers block on a condition variable until
their id resolves or the per-request timeout expires, at which point the
subprocess is killed and an error raised.
"""

from __future__ import annotations

import json
import shlex
import subprocess
import threading

from ..errors import AdapterError


class ExternalEvaluator:
    def __init__(self, cmd: str, timeout: float = 300.0):
        self.cmd = cmd
        self.timeout = timeout
        try:
            self._proc = subprocess.Popen(
                shlex.split(cmd),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise AdapterError(f"could not spawn adapter {cmd!r}: {exc}") from exc
        self._lock = threading.Lock()
        self._ready = threading.Condition(self._lock)
        self._results: dict[int, dict] = {}
        self._issued: set[int] = set()
        self._next_id = 0
        self._broken: str | None = None
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def _read_loop(self):
        for line in self._proc.stdout:
            line = line.strip()
            if not line:
                continue
            try:
                payload = json.loads(line)
                request_id = int(payload["id"])
            except (ValueError, KeyError, TypeError):
                self._fail(f"adapter wrote a malformed line: {line[:200]}")
                return
            with self._ready:
                if request_id not in self._issued:
                    self._broken = f"adapter answered unknown id {request_id}"
                    self._ready.notify_all()
                    return
                self._results[request_id] = payload
                self._ready.notify_all()
        self._fail("adapter closed its stdout")

    def _fail(self, message: str):
        with self._ready:
            if self._broken is None:
                self._broken = message
            self._ready.notify_all()

    def evaluate(self, payload: dict) -> float:
        with self._ready:
            if self._broken:
                raise AdapterError(self._broken)
            request_id = self._next_id
            self._next_id += 1
            self._issued.add(request_id)
        line = json.dumps({**payload, "id": request_id}, sort_keys=True)
        try:
            self._proc.stdin.write(line + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, ValueError) as exc:
            raise AdapterError(f"adapter stdin closed: {exc}") from exc
        with self._ready:
            resolved = self._ready.wait_for(
                lambda: request_id in self._results or self._broken is not None,
                timeout=self.timeout,
            )
            if request_id in self._results:
                response = self._results.pop(request_id)
                self._issued.discard(request_id)
            elif self._broken is not None:
                raise AdapterError(self._broken)
            else:
                assert not resolved
                self._proc.kill()
                raise AdapterError(
                    f"adapter did not answer id {request_id} within {self.timeout}s"
                )
        if "error" in response:
            raise AdapterError(f"adapter error: {response['error']}")
        if "value" not in response:
            raise AdapterError(f"adapter response missing value: {response}")
        return float(response["value"])

    def close(self):
        try:
            if self._proc.stdin:
                self._proc.stdin.close()
        except OSError:
            pass
        try:
            self._proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            self._proc.kill()
            self._proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()
