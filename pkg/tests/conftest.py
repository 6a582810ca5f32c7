import os
import sys
from functools import lru_cache

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# desk-scale recipe: three synthetic cities plus 200 distinct Other scenes
DESK_SEED = 7
DESK_OTHERS = 200
DESK_VARIANTS = 100
DESK_SPLIT = 0.8


@lru_cache(maxsize=1)
def _desk_dataset():
    from nightatlas.augment import AugmentConfig, build_sra_dataset
    from nightatlas.dataio import synth_dataset
    from nightatlas.imgproc import DESK_GEOMETRY

    data = synth_dataset(3, 1, seed=DESK_SEED, other_count=DESK_OTHERS)
    refs = {label: img for img, label in data if label != "Other"}
    others = [img for img, label in data if label == "Other"]
    ds = build_sra_dataset(
        refs, others,
        AugmentConfig(variants_per_image=DESK_VARIANTS, master_seed=1),
        AugmentConfig(variants_per_image=1, master_seed=2),
        DESK_SPLIT, 3, geometry=DESK_GEOMETRY,
    )
    ds.arrays(ds.items)  # render once; items stay cached on the dataset
    return ds


@pytest.fixture(scope="session")
def desk_dataset():
    return _desk_dataset()


@pytest.fixture
def stub_server():
    """Local HTTP server for ``/img/<id>.png`` out of ``state["files"]``; unknown ids get 404."""
    import threading
    from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

    state = {"files": {}, "requests": []}

    class Handler(BaseHTTPRequestHandler):
        def do_GET(self):
            state["requests"].append(self.path)
            name = self.path.rsplit("/", 1)[-1].split(".")[0]
            body = state["files"].get(name)
            if body is None:
                self.send_response(404)
                self.end_headers()
                return
            self.send_response(200)
            self.send_header("Content-Type", "image/png")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def log_message(self, *args):
            pass

    server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    state["url"] = f"http://127.0.0.1:{server.server_address[1]}/img/{{id}}.png"
    yield state
    server.shutdown()
    server.server_close()


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
