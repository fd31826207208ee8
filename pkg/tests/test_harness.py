import json
import socket
import threading

import numpy as np
import pytest

from ripbench.attack import AttackConfig, run_attack
from ripbench.core import RngStream
from ripbench.data import make_benchmark
from ripbench.harness import (TcpVictim, WireMessage, build_tta_config,
                              decode_message, encode_message, main,
                              make_victim, serve_victim)

SMALL_DOMAIN = dict(n_source=400, n_attack=400, n_probe=120)


def start_server(domain, cfg, seed, allow_reset=False, max_batch=2048):
    """Serve on an ephemeral port; returns the port once it is listening."""
    srv = socket.create_server(("127.0.0.1", 0))
    port = srv.getsockname()[1]
    srv.close()
    ready = threading.Event()

    class _Ready:
        def write(self, _):
            ready.set()
            return 0

        def flush(self):
            pass

    thread = threading.Thread(
        target=serve_victim,
        args=(domain, cfg, seed, port),
        kwargs=dict(allow_reset=allow_reset, max_batch=max_batch,
                    ready_fh=_Ready()),
        daemon=True)
    thread.start()
    assert ready.wait(5.0)
    return port


# --- wire codec --------------------------------------------------------------

def test_encode_predict_empty_batch():
    msg = WireMessage("predict", 1, [])
    assert encode_message(msg) == b'{"op":"predict","id":1,"batch":[]}\n'


def test_round_trip_random_messages():
    rng = np.random.default_rng(0)
    for _ in range(50):
        batch = [[float(v) for v in rng.normal(size=3)]
                 for _ in range(rng.integers(0, 4))]
        m = WireMessage("predict", int(rng.integers(0, 1000)), batch)
        out = decode_message(encode_message(m).strip())
        assert out == m


def test_floats_round_trip_exactly():
    value = 0.1 + 0.2  # not representable exactly in decimal
    m = WireMessage("predict", 5, [[value]])
    out = decode_message(encode_message(m).strip())
    assert out.payload[0][0] == value


def test_labels_reply_structure():
    m = WireMessage("labels", 3, [0, 1, 2])
    line = encode_message(m)
    assert json.loads(line)["labels"] == [0, 1, 2]
    assert decode_message(line.strip()).payload == [0, 1, 2]


# --- server behaviour ---------------------------------------------------------

@pytest.fixture(scope="module")
def domain():
    return make_benchmark(0, **SMALL_DOMAIN)


def test_server_predict_and_reset_forbidden(domain):
    cfg = build_tta_config(domain)
    port = start_server(domain, cfg, seed=0, allow_reset=False)
    sock = socket.create_connection(("127.0.0.1", port))
    fh = sock.makefile("rwb")

    batch = [[float(v) for v in row] for row in domain.probe.features[:3]]
    fh.write(encode_message(WireMessage("predict", 1, batch)))
    fh.flush()
    reply = decode_message(fh.readline().strip())
    assert reply.op == "labels" and reply.id == 1 and len(reply.payload) == 3

    fh.write(encode_message(WireMessage("reset", 2)))
    fh.flush()
    reply = decode_message(fh.readline().strip())
    assert reply.op == "error" and "reset forbidden" in reply.payload
    sock.close()


def test_server_reset_with_admin_flag(domain):
    cfg = build_tta_config(domain)
    port = start_server(domain, cfg, seed=0, allow_reset=True)
    sock = socket.create_connection(("127.0.0.1", port))
    fh = sock.makefile("rwb")
    fh.write(encode_message(WireMessage("reset", 1)))
    fh.flush()
    reply = decode_message(fh.readline().strip())
    assert reply.op == "ack" and reply.id == 1
    sock.close()


def test_server_malformed_line_keeps_connection(domain):
    cfg = build_tta_config(domain)
    port = start_server(domain, cfg, seed=0)
    sock = socket.create_connection(("127.0.0.1", port))
    fh = sock.makefile("rwb")
    fh.write(b"this is not json\n")
    fh.flush()
    reply = decode_message(fh.readline().strip())
    assert reply.op == "error"
    # connection still usable
    batch = [[float(v) for v in domain.probe.features[0]]]
    fh.write(encode_message(WireMessage("predict", 2, batch)))
    fh.flush()
    assert decode_message(fh.readline().strip()).op == "labels"
    sock.close()


def test_server_oversized_batch(domain):
    cfg = build_tta_config(domain)
    port = start_server(domain, cfg, seed=0, max_batch=4)
    sock = socket.create_connection(("127.0.0.1", port))
    fh = sock.makefile("rwb")
    batch = [[0.0] * 16 for _ in range(5)]
    fh.write(encode_message(WireMessage("predict", 1, batch)))
    fh.flush()
    reply = decode_message(fh.readline().strip())
    assert reply.op == "error" and "large" in reply.payload
    sock.close()


def test_tcp_equivalence_200_queries(domain):
    """The same query stream in-process and over TCP yields identical labels."""
    cfg = build_tta_config(domain)
    queries = [domain.attack_pool.features[(7 * i) % 300:(7 * i) % 300 + 5]
               for i in range(200)]

    local, _ = make_victim(domain, cfg, seed=0)
    local_stream = [local.submit(q).tolist() for q in queries]

    port = start_server(domain, cfg, seed=0)
    remote = TcpVictim("127.0.0.1", port)
    remote_stream = [remote.submit(q).tolist() for q in queries]
    remote.close()

    assert local_stream == remote_stream


def test_tcp_attack_csv_equivalence(domain, tmp_path):
    """run_attack against the TCP victim reproduces the in-process CSV."""
    cfg = build_tta_config(domain)
    acfg = AttackConfig(T_a=40, B=16, eval_every=10, oracle_eval=False)

    local, _ = make_victim(domain, cfg, seed=0)
    rec_local = run_attack(local, acfg, domain.attack_pool, domain.probe,
                           RngStream(0, 1000), y_a=2)
    p1 = tmp_path / "local.csv"
    rec_local.to_csv(str(p1))

    port = start_server(domain, cfg, seed=0)
    remote = TcpVictim("127.0.0.1", port)
    rec_remote = run_attack(remote, acfg, domain.attack_pool, domain.probe,
                            RngStream(0, 1000), y_a=2)
    remote.close()
    p2 = tmp_path / "remote.csv"
    rec_remote.to_csv(str(p2))

    assert p1.read_bytes() == p2.read_bytes()


# --- CLI ----------------------------------------------------------------------

def test_cli_gmmc_sim_deterministic(tmp_path, capsys):
    out1, out2 = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["gmmc-sim", "--seed", "3", "--out", str(out1)]) == 0
    assert main(["gmmc-sim", "--seed", "3", "--out", str(out2)]) == 0
    assert out1.read_bytes() == out2.read_bytes()


def test_cli_gmmc_flags(tmp_path):
    out = tmp_path / "g.csv"
    assert main(["gmmc-sim", "--seed", "1", "--steps", "30", "--no-ips",
                 "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[1].startswith("step,marginal_class0")


def test_cli_seed_env_fallback(tmp_path, monkeypatch):
    out1, out2 = tmp_path / "a.csv", tmp_path / "b.csv"
    monkeypatch.setenv("RIPBENCH_SEED", "11")
    assert main(["gmmc-sim", "--out", str(out1)]) == 0
    assert main(["gmmc-sim", "--seed", "11", "--out", str(out2)]) == 0
    assert out1.read_bytes() == out2.read_bytes()


def test_cli_config_file(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"seed": 5, "steps": 25}))
    out1, out2 = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["--config", str(cfg_path), "gmmc-sim", "--out", str(out1)]) == 0
    assert main(["gmmc-sim", "--seed", "5", "--steps", "25",
                 "--out", str(out2)]) == 0
    assert out1.read_bytes() == out2.read_bytes()


def test_cli_invalid_input_exit_code(tmp_path, capsys):
    rc = main(["gmmc-sim", "--alpha", "3.0", "--out", str(tmp_path / "x.csv")])
    assert rc != 0
    assert "error:" in capsys.readouterr().err
