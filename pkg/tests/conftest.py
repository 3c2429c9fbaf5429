import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from promptforge.critique import RuleCritic
from promptforge.envs import make_keyword_task, make_ordered_task
from promptforge.policy import PolicyParams


def zero_params(V, d_e=3, d_h=4) -> PolicyParams:
    return PolicyParams(np.zeros((V, d_e)), np.zeros((d_h, d_h)), np.zeros((d_h, d_e)), np.zeros(d_h),
                        np.zeros((V, d_h)), np.zeros(V))


@pytest.fixture
def keyword_env():
    env = make_keyword_task(3, n_required=3, n_forbidden=1)
    worker = env.make_worker()
    return env, worker, RuleCritic(worker, env.vocab)


@pytest.fixture
def ordered_env():
    env = make_ordered_task(1)
    worker = env.make_worker()
    return env, worker, RuleCritic(worker, env.vocab)


class MockChat:
    """Scripted chat-completions endpoint. ``script`` is a list of (status, body)
    consumed in order; once exhausted the server echoes the user message."""

    def __init__(self):
        self.requests = []
        self.script = []
        self.lock = threading.Lock()

    def next_reply(self, payload):
        with self.lock:
            if self.script:
                return self.script.pop(0)
        user = next(m["content"] for m in payload["messages"] if m["role"] == "user")
        body = {"choices": [{"message": {"role": "assistant", "content": user}}],
                "usage": {"prompt_tokens": 3, "completion_tokens": 1}}
        return 200, json.dumps(body)


@pytest.fixture
def mock_chat():
    state = MockChat()

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            raw = self.rfile.read(int(self.headers.get("Content-Length", 0)))
            payload = json.loads(raw)
            state.requests.append({"path": self.path, "headers": dict(self.headers), "payload": payload})
            status, body = state.next_reply(payload)
            data = body.encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def log_message(self, *args):
            pass

    server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    state.url = f"http://127.0.0.1:{server.server_address[1]}/v1"
    yield state
    server.shutdown()
    server.server_close()


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion, printed in the terminal summary."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number:>2}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
