from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from fixture_suite import FIXTURE_ROOT
from tums.datastore import load_data_dir
from tums.gateway import Gateway, ScriptedBackend
from tums.prompting import PromptCatalog


@pytest.fixture(scope="session")
def catalog() -> PromptCatalog:
    return PromptCatalog.load()


@pytest.fixture(scope="session")
def stores():
    return load_data_dir(FIXTURE_ROOT)


@pytest.fixture
def scripted():
    """Factory for a gateway over a scripted backend."""

    def make(*responses) -> Gateway:
        return Gateway(ScriptedBackend(list(responses)))

    return make


class _Stub:
    def __init__(self, replies):
        self.replies = list(replies)
        self.requests = []


@pytest.fixture
def stub_server():
    """Start local chat-completion stubs answering from a list of (status, body)."""
    servers = []

    def start(replies):
        stub = _Stub(replies)

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):  # noqa: N802
                length = int(self.headers.get("Content-Length", 0))
                stub.requests.append(
                    {"path": self.path, "headers": dict(self.headers), "body": json.loads(self.rfile.read(length))}
                )
                status, body = stub.replies.pop(0)
                data = body.encode() if isinstance(body, str) else json.dumps(body).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        threading.Thread(target=server.serve_forever, daemon=True).start()
        servers.append(server)
        return f"http://127.0.0.1:{server.server_port}/v1", stub

    yield start
    for s in servers:
        s.shutdown()
        s.server_close()


# --- acceptance summary -----------------------------------------------------

_CRITERIA: dict[int, dict[str, object]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    m = item.get_closest_marker("criterion")
    if m is not None:
        outcome.get_result().criterion = (m.args[0], m.args[1])


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    # a skip is reported at setup, everything else at call
    if marker is None or not (report.when == "call" or report.skipped or report.failed):
        return
    number, title = marker
    entry = _CRITERIA.setdefault(number, {"title": title, "outcomes": [], "duration": 0.0})
    entry["outcomes"].append(report.outcome)
    entry["duration"] += report.duration


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        outcomes = entry["outcomes"]
        if "failed" in outcomes:
            status = "FAIL"
        elif all(o == "skipped" for o in outcomes):
            status = "SKIP"
        else:
            status = "PASS"
        terminalreporter.write_line(
            f"criterion {number} [PRIMARY] {entry['title']}: {status} ({entry['duration']:.2f}s)"
        )
