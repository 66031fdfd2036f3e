import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from mor1e.intuition import EmbedderSpec, EmbeddingCache, EmbeddingServiceError, embed


class _Handler(BaseHTTPRequestHandler):
    def do_POST(self):
        srv = self.server
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        with srv.lock:
            srv.requests.append((body, self.headers.get("Authorization")))
            fail = srv.fail_next > 0
            if fail:
                srv.fail_next -= 1
        if fail or srv.always_fail:
            self.send_response(503)
            self.end_headers()
            return
        dim = srv.dim
        vecs = [[float(len(t)) + 1.0] + [float(ord(c)) for c in (t + " " * dim)[: dim - 1]] for t in body["input"]]
        if srv.shape == "data":
            # reversed on purpose: the client must reorder by index
            rows = [{"embedding": v, "index": i} for i, v in enumerate(vecs)][::-1]
            payload = {"data": rows, "model": body["model"]}
        else:
            payload = {"embeddings": vecs}
        out = json.dumps(payload).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(out)))
        self.end_headers()
        self.wfile.write(out)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    srv = ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
    srv.lock = threading.Lock()
    srv.requests = []
    srv.fail_next = 0
    srv.always_fail = False
    srv.dim = 4
    srv.shape = "data"
    th = threading.Thread(target=srv.serve_forever, daemon=True)
    th.start()
    yield srv
    srv.shutdown()
    srv.server_close()


def _spec(server, **kw):
    kw.setdefault("retries", 2)
    kw.setdefault("backoff", 0.0)
    return EmbedderSpec(kind="service", dim=4, endpoint=f"http://127.0.0.1:{server.server_port}/v1/embeddings",
                        model="toy-embed", timeout=5.0, **kw)


def _expected(t):
    return np.array([len(t) + 1.0] + [float(ord(c)) for c in (t + "    ")[:3]])


@pytest.mark.parametrize("shape", ["data", "embeddings"])
def test_service_round_trip_preserves_order(server, shape, monkeypatch):
    monkeypatch.setenv("EMBED_API_KEY", "sekret")
    server.shape = shape
    texts = [f"t{i}" for i in range(10)]
    out = embed(_spec(server, batch_size=3), texts)
    assert all(np.array_equal(e.vector, _expected(t)) for e, t in zip(out, texts))
    assert len(server.requests) == 4
    body, auth = server.requests[0]
    assert body["model"] == "toy-embed" and auth == "Bearer sekret"


def test_retries_then_succeeds(server):
    server.fail_next = 2
    out = embed(_spec(server), ["abc"])
    assert np.array_equal(out[0].vector, _expected("abc"))
    assert len(server.requests) == 3


def test_failure_after_retries_names_batch(server):
    server.always_fail = True
    with pytest.raises(EmbeddingServiceError) as info:
        embed(_spec(server, batch_size=2, retries=1), ["a", "b", "c"])
    assert info.value.batch_indices in ([0, 1], [2])
    assert "2 attempts" in str(info.value)


def test_dimension_drift_rejected(server):
    server.dim = 5
    with pytest.raises(EmbeddingServiceError, match="expected dim 4"):
        embed(_spec(server), ["a"])


def test_cache_serves_repeats_locally(server, tmp_path):
    path = str(tmp_path / "cache.txt")
    spec = _spec(server, cache_path=path)
    first = embed(spec, ["x", "y", "x"])
    assert len(server.requests) == 1 and server.requests[0][0]["input"] == ["x", "y"]
    second = embed(spec, ["y", "x"])
    assert len(server.requests) == 1
    assert np.array_equal(second[1].vector, first[0].vector)
    lines = open(path).read().splitlines()
    assert lines[0] == "4 toy-embed" and len(lines) == 3
    assert len(lines[1].split()) == 5
    assert len(EmbeddingCache(path, 4, "toy-embed")) == 2
    with pytest.raises(ValueError, match="expected dim=8"):
        EmbeddingCache(path, 8, "toy-embed")


def test_cache_skips_torn_record(tmp_path):
    path = tmp_path / "c.txt"
    cache = EmbeddingCache(str(path), 2, "m")
    cache.put_many([("a", np.array([0.1, 0.2]))])
    with open(path, "a") as fh:
        fh.write("deadbeef 0.5")
    again = EmbeddingCache(str(path), 2, "m")
    assert len(again) == 1
    assert np.array_equal(again.get("a"), [0.1, 0.2])


def test_cache_is_safe_under_concurrent_writers(tmp_path):
    cache = EmbeddingCache(str(tmp_path / "c.txt"), 3, "m")
    rng = np.random.default_rng(0)
    items = [(f"t{i}", rng.standard_normal(3)) for i in range(200)]

    def work(chunk):
        cache.put_many(chunk)

    threads = [threading.Thread(target=work, args=(items[i::4],)) for i in range(4)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    reloaded = EmbeddingCache(str(tmp_path / "c.txt"), 3, "m")
    assert len(reloaded) == 200
    assert all(np.array_equal(reloaded.get(t), v) for t, v in items)
