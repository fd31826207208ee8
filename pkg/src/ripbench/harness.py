"""CLI entry points, experiment configuration, sweeps, and the TCP protocol.

The victim can be driven in-process or behind a newline-delimited-JSON TCP
server; the protocol only ever carries feature batches one way and predicted
labels the other, which makes the black-box constraint a process boundary
instead of a convention.
"""

from __future__ import annotations

import argparse
import json
import os
import socket
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .attack import AttackConfig, run_attack, run_no_attack, run_trials
from .augment import AugConfig, level_to_sigma
from .losses import AUGMENTING_FREE, LossKind
from .core import RngStream
from .data import BenchmarkDomain, make_benchmark
from .gmmc import GmmcSimConfig, gmmc_record_to_csv, gmmc_simulate
from .metrics import RunRecord
from .tta import SrcReplayConfig, TtaConfig, TtaModel

DEFAULT_MAX_BATCH = 2048


# ---------------------------------------------------------------------------
# configuration


def master_seed(args_seed: int | None) -> int:
    """CLI seed, falling back to the RIPBENCH_SEED environment variable."""
    if args_seed is not None:
        return args_seed
    env = os.environ.get("RIPBENCH_SEED")
    return int(env) if env else 0


def build_tta_config(domain: BenchmarkDomain, loss: str = "CE",
                     aug_level: int = 5, alpha: float = 0.99,
                     predictor: str = "teacher", scheme: str = "mean_teacher",
                     lam: float = 0.0, lr: float = 1e-3,
                     defense: str = "none") -> TtaConfig:
    # Entropy-style objectives are augmenting-free: they train on the clean
    # batch, so the augmented branch is disabled for them.
    augmenting = LossKind(loss) not in AUGMENTING_FREE
    aug = AugConfig(sigma=level_to_sigma(aug_level), enabled=augmenting)
    replay = None
    if defense == "src_replay":
        replay = SrcReplayConfig(domain.source_train.features,
                                 domain.source_train.labels, m=32)
    elif defense == "src_ensemble":
        scheme = "source_ensemble"
    elif defense != "none":
        raise ValueError(f"unknown defense: {defense}")
    return TtaConfig(loss=loss, predictor=predictor, aug=aug, alpha=alpha,
                     update_scheme=scheme, lam=lam, lr=lr, src_replay=replay)


class TtaVictim:
    """In-process victim exposing only the submit-batch capability."""

    def __init__(self, model: TtaModel):
        self._model = model

    def submit(self, batch: np.ndarray) -> np.ndarray:
        return self._model.adapt(batch)


def make_victim(domain: BenchmarkDomain, cfg: TtaConfig, seed: int,
                trial: int = 0):
    """Fresh victim plus its out-of-band evaluation oracle."""
    model = TtaModel(domain.source_model, cfg, RngStream(seed, 500 + trial))
    return TtaVictim(model), model.predict


# ---------------------------------------------------------------------------
# wire protocol


@dataclass
class WireMessage:
    op: str  # predict | labels | reset | ack | error
    id: int
    payload: list | str | None = None

    PAYLOAD_KEY = {"predict": "batch", "labels": "labels", "error": "text"}


def encode_message(msg: WireMessage) -> bytes:
    """One JSON line; key order is op, id, then the op's payload field."""
    obj: dict = {"op": msg.op, "id": msg.id}
    key = WireMessage.PAYLOAD_KEY.get(msg.op)
    if key is not None:
        obj[key] = msg.payload
    return (json.dumps(obj, separators=(",", ":")) + "\n").encode()


def decode_message(line: bytes) -> WireMessage:
    obj = json.loads(line.decode())
    op = obj["op"]
    key = WireMessage.PAYLOAD_KEY.get(op)
    return WireMessage(op=op, id=int(obj["id"]),
                       payload=obj.get(key) if key else None)


def serve_victim(domain: BenchmarkDomain, cfg: TtaConfig, seed: int,
                 port: int, allow_reset: bool = False, host: str = "127.0.0.1",
                 max_batch: int = DEFAULT_MAX_BATCH, ready_fh=None) -> None:
    """Serve one victim over one TCP connection until the client disconnects.

    `predict` adapts on the batch and answers with the pre-update labels;
    `reset` restores the source model but only when the server was started
    with the admin flag.  Parameters, probabilities, and losses never cross
    the wire.
    """
    model = TtaModel(domain.source_model, cfg, RngStream(seed, 500))
    srv = socket.create_server((host, port))
    if ready_fh is not None:
        actual_port = srv.getsockname()[1]
        print(f"listening {actual_port}", file=ready_fh, flush=True)
    conn, _ = srv.accept()
    try:
        buf = b""
        while True:
            chunk = conn.recv(65536)
            if not chunk:
                break
            buf += chunk
            while b"\n" in buf:
                line, buf = buf.split(b"\n", 1)
                conn.sendall(_handle_line(line, model, allow_reset, max_batch))
    finally:
        conn.close()
        srv.close()


def _handle_line(line: bytes, model: TtaModel, allow_reset: bool,
                 max_batch: int) -> bytes:
    try:
        msg = decode_message(line)
    except (ValueError, KeyError, json.JSONDecodeError):
        return encode_message(WireMessage("error", -1, "malformed message"))
    if msg.op == "predict":
        batch = np.asarray(msg.payload, dtype=float)
        if batch.ndim != 2 or batch.size == 0:
            return encode_message(WireMessage("error", msg.id, "bad batch"))
        if len(batch) > max_batch:
            return encode_message(WireMessage("error", msg.id, "batch too large"))
        labels = model.adapt(batch)
        return encode_message(WireMessage("labels", msg.id,
                                          [int(v) for v in labels]))
    if msg.op == "reset":
        if not allow_reset:
            return encode_message(WireMessage("error", msg.id, "reset forbidden"))
        model.reset()
        return encode_message(WireMessage("ack", msg.id))
    return encode_message(WireMessage("error", msg.id, f"unknown op {msg.op!r}"))


class TcpVictim:
    """Client-side victim handle speaking the wire protocol."""

    def __init__(self, host: str, port: int):
        self._sock = socket.create_connection((host, port))
        self._buf = b""
        self._next_id = 0

    def submit(self, batch: np.ndarray) -> np.ndarray:
        self._next_id += 1
        payload = [[float(v) for v in row] for row in np.atleast_2d(batch)]
        self._sock.sendall(encode_message(
            WireMessage("predict", self._next_id, payload)))
        reply = decode_message(self._read_line())
        if reply.op == "error":
            raise RuntimeError(f"victim error: {reply.payload}")
        if reply.id != self._next_id or len(reply.payload) != len(payload):
            raise RuntimeError("protocol violation in labels reply")
        return np.array(reply.payload, dtype=int)

    def _read_line(self) -> bytes:
        while b"\n" not in self._buf:
            chunk = self._sock.recv(65536)
            if not chunk:
                raise ConnectionError("victim closed the connection")
            self._buf += chunk
        line, self._buf = self._buf.split(b"\n", 1)
        return line

    def close(self) -> None:
        self._sock.close()


# ---------------------------------------------------------------------------
# experiment drivers


def attack_record_csv(record: RunRecord, path: str) -> None:
    record.to_csv(path)


def cmd_gmmc_sim(args) -> int:
    seed = master_seed(args.seed)
    cfg = GmmcSimConfig(steps=args.steps, alpha=args.alpha,
                        aug=AugConfig(sigma=args.sigma,
                                      enabled=not args.no_aug),
                        ips_enabled=not args.no_ips,
                        eval_every=args.eval_every)
    record = gmmc_simulate(cfg, RngStream(seed, 1))
    record.metadata["seed"] = seed
    gmmc_record_to_csv(record, args.out)
    final = record.checkpoints[-1]
    print(f"final victim-class marginal: {final.victim_mass:.4f}")
    return 0


def _parse_tta_args(domain: BenchmarkDomain, args) -> TtaConfig:
    return build_tta_config(domain, loss=args.loss, aug_level=args.aug_level,
                            alpha=args.alpha, predictor=args.predictor,
                            lam=args.lam, defense=args.defense)


def cmd_tta_run(args) -> int:
    """Benign adaptation over i.i.d. shifted batches (no attacker)."""
    seed = master_seed(args.seed)
    domain = make_benchmark(seed)
    cfg = _parse_tta_args(domain, args)
    acfg = AttackConfig(T_a=args.rounds, B=args.batch, trials=1,
                        eval_every=args.eval_every, oracle_eval=True)
    victim, oracle = make_victim(domain, cfg, seed)
    record = run_no_attack(victim, acfg, domain.attack_pool, domain.probe,
                           RngStream(seed, 1000), oracle=oracle)
    record.metadata["seed"] = seed
    record.to_csv(args.out)
    print(f"final avg class-wise error: {record.final_avg_error():.4f}")
    return 0


def cmd_attack(args) -> int:
    seed = master_seed(args.seed)
    domain = make_benchmark(seed)
    cfg = _parse_tta_args(domain, args)
    acfg = AttackConfig(T_a=args.rounds, B=args.batch, trials=args.trials,
                        eval_every=args.eval_every, oracle_eval=True)
    record = run_trials(lambda trial: make_victim(domain, cfg, seed, trial),
                        acfg, domain.attack_pool, domain.probe, seed,
                        attack=not args.no_attack)
    record.to_csv(args.out)
    print(f"mean final avg class-wise error over {acfg.trials} trials: "
          f"{record.mean_final_error():.4f}")
    return 0


SWEEP_GRIDS = {
    "loss": [("loss", v) for v in ["Ent", "CE", "RMT", "SLR"]],
    "aug": [("aug_level", v) for v in [1, 2, 3, 4, 5]],
    "predictor": [("predictor", v) for v in ["teacher", "student"]],
    "alpha": [("alpha", v) for v in [0.0, 0.5, 0.9, 0.95, 0.99, 1.0]],
    "defense": [("defense", v) for v in ["none", "src_replay", "src_ensemble"]],
}


def sweep_cell(seed: int, axis_key: str, value, trials: int, rounds: int,
               eval_every: int = 25) -> RunRecord:
    domain = make_benchmark(seed)
    cfg = build_tta_config(domain, **{axis_key: value})
    acfg = AttackConfig(T_a=rounds, B=64, trials=trials,
                        eval_every=eval_every, oracle_eval=True)
    return run_trials(lambda trial: make_victim(domain, cfg, seed, trial),
                      acfg, domain.attack_pool, domain.probe, seed)


def run_sweep(seed: int, axes: list[str], trials: int, rounds: int,
              workers: int = 4) -> list[tuple[str, object, RunRecord]]:
    """One attacked run per grid cell, executed across worker threads."""
    cells = [(axis, key, value)
             for axis in axes for key, value in SWEEP_GRIDS[axis]]
    results: dict[tuple, RunRecord] = {}
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {pool.submit(sweep_cell, seed, key, value, trials, rounds):
                   (axis, value) for axis, key, value in cells}
        for fut, cell in futures.items():
            results[cell] = fut.result()
    return [(axis, value, results[(axis, value)])
            for axis, _, value in cells]


def cmd_sweep(args) -> int:
    seed = master_seed(args.seed)
    axes = list(SWEEP_GRIDS) if args.axis == "all" else [args.axis]
    rows = run_sweep(seed, axes, args.trials, args.rounds, args.workers)
    with open(args.out, "w", newline="") as fh:
        fh.write(f"# seed={seed} trials={args.trials} rounds={args.rounds}\n")
        fh.write("axis,value,final_error,mean_error\n")
        for axis, value, record in rows:
            fh.write(f"{axis},{value},{repr(record.mean_final_error())},"
                     f"{repr(record.mean_mean_error())}\n")
            print(f"{axis}={value}: final={record.mean_final_error():.4f} "
                  f"mean={record.mean_mean_error():.4f}")
    return 0


def cmd_serve_victim(args) -> int:
    seed = master_seed(args.seed)
    domain = make_benchmark(seed)
    cfg = _parse_tta_args(domain, args)
    serve_victim(domain, cfg, seed, args.port, allow_reset=args.allow_reset,
                 host=args.host, ready_fh=sys.stdout)
    return 0


def cmd_attack_client(args) -> int:
    seed = master_seed(args.seed)
    domain = make_benchmark(seed)
    acfg = AttackConfig(T_a=args.rounds, B=args.batch, trials=1,
                        eval_every=args.eval_every, oracle_eval=False)
    victim = TcpVictim(args.host, args.port)
    try:
        record = run_attack(victim, acfg, domain.attack_pool, domain.probe,
                            RngStream(seed, 1000), y_a=args.victim_class)
    finally:
        victim.close()
    record.metadata["seed"] = seed
    record.to_csv(args.out)
    print(f"final avg class-wise error: {record.final_avg_error():.4f}")
    return 0


# ---------------------------------------------------------------------------
# CLI


def _add_tta_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--loss", default="CE",
                   choices=["Ent", "CE", "SCE", "SLR", "RMT"])
    p.add_argument("--aug-level", type=int, default=5, dest="aug_level")
    p.add_argument("--alpha", type=float, default=0.99)
    p.add_argument("--predictor", default="teacher",
                   choices=["teacher", "student"])
    p.add_argument("--lam", type=float, default=0.0)
    p.add_argument("--defense", default="none",
                   choices=["none", "src_replay", "src_ensemble"])


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="out.csv")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ripbench")
    parser.add_argument("--config", default=None,
                        help="JSON file whose values seed the flag defaults")
    sub = parser.add_subparsers(dest="mode", required=True)

    p = sub.add_parser("gmmc-sim", help="mixture-model collapse simulation")
    _add_common(p)
    p.add_argument("--steps", type=int, default=120)
    p.add_argument("--alpha", type=float, default=0.9)
    p.add_argument("--sigma", type=float, default=0.2)
    p.add_argument("--no-ips", action="store_true")
    p.add_argument("--no-aug", action="store_true")
    p.add_argument("--eval-every", type=int, default=1, dest="eval_every")
    p.set_defaults(func=cmd_gmmc_sim)

    p = sub.add_parser("tta-run", help="benign continual adaptation run")
    _add_common(p)
    _add_tta_flags(p)
    p.add_argument("--rounds", type=int, default=500)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--eval-every", type=int, default=25, dest="eval_every")
    p.set_defaults(func=cmd_tta_run)

    p = sub.add_parser("attack", help="multi-trial black-box attack")
    _add_common(p)
    _add_tta_flags(p)
    p.add_argument("--rounds", type=int, default=500)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--eval-every", type=int, default=25, dest="eval_every")
    p.add_argument("--no-attack", action="store_true",
                   help="benign control with the same query budget")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("sweep", help="ablation sweeps")
    _add_common(p)
    p.add_argument("--axis", default="all",
                   choices=["all", *SWEEP_GRIDS.keys()])
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--rounds", type=int, default=500)
    p.add_argument("--workers", type=int, default=4)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("serve-victim", help="serve one victim over TCP")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, required=True)
    p.add_argument("--allow-reset", action="store_true", dest="allow_reset")
    _add_tta_flags(p)
    p.set_defaults(func=cmd_serve_victim)

    p = sub.add_parser("attack-client", help="attack a served victim")
    _add_common(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, required=True)
    p.add_argument("--rounds", type=int, default=500)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--eval-every", type=int, default=25, dest="eval_every")
    p.add_argument("--victim-class", type=int, default=0, dest="victim_class")
    p.set_defaults(func=cmd_attack_client)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        # Config values fill in flags the user left at their defaults;
        # explicit CLI flags win over the file.
        with open(args.config) as fh:
            overrides = json.load(fh)
        passed = set(argv if argv is not None else sys.argv[1:])
        for key, value in overrides.items():
            flag = "--" + key.replace("_", "-")
            if hasattr(args, key) and flag not in passed:
                setattr(args, key, value)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
