"""Networked federation: controller and learner nodes over newline-delimited JSON.

Every message is one UTF-8 JSON object on one line with the fields
``kind``, ``round``, ``learner_id`` and ``payload`` in that order. Floats are
sent as ``float.hex`` strings so model parameters survive the trip bit-exactly.

Payloads by kind::

    TrainRequest   {"model": MODEL}
    TrainResponse  {"model": MODEL, "num_examples": int}
    EvalRequest    {"model": MODEL}
    EvalResponse   {"confusion": [[int, ...], ...]}
    Shutdown       null

    MODEL = {"arch": {"input_dim": int, "hidden": [int], "num_classes": int},
             "values": ["0x1.0p+0", ...]}

For ``EvalRequest``/``EvalResponse`` the ``learner_id`` is the owner of the
model being evaluated; the evaluator is implied by the connection.
"""

from __future__ import annotations

import json
import logging
import socket
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from dvwfed.data import LabeledDataset, LearnerShard
from dvwfed.errors import ConfigError, FedError, ProtocolError, TransportError
from dvwfed.federation import FederationConfig, RoundRecord, client_opt, federate, learner_seed
from dvwfed.metrics import ConfusionMatrix, evaluate
from dvwfed.nn import Architecture, ModelParams

log = logging.getLogger(__name__)

KINDS = ("TrainRequest", "TrainResponse", "EvalRequest", "EvalResponse", "Shutdown")
DEFAULT_TIMEOUT = 60.0
_PAYLOAD_KEYS = {
    "TrainRequest": ("model",),
    "TrainResponse": ("model", "num_examples"),
    "EvalRequest": ("model",),
    "EvalResponse": ("confusion",),
}


@dataclass(frozen=True, eq=False)
class Message:
    kind: str
    round: int
    learner_id: int
    model: ModelParams | None = None
    num_examples: int | None = None
    confusion: ConfusionMatrix | None = None

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Message):
            return NotImplemented
        return encode(self) == encode(other)


def _model_to_json(model: ModelParams) -> dict:
    return {"arch": model.arch.to_dict(), "values": [float(v).hex() for v in model.values]}


def encode(msg: Message) -> bytes:
    if msg.kind not in KINDS:
        raise ProtocolError(f"unknown message kind {msg.kind!r}")
    if msg.kind == "Shutdown":
        payload = None
    elif msg.kind == "EvalResponse":
        if msg.confusion is None:
            raise ProtocolError("EvalResponse needs a confusion matrix")
        payload = {"confusion": msg.confusion.counts.tolist()}
    else:
        if msg.model is None:
            raise ProtocolError(f"{msg.kind} needs a model")
        payload = {"model": _model_to_json(msg.model)}
        if msg.kind == "TrainResponse":
            if msg.num_examples is None:
                raise ProtocolError("TrainResponse needs num_examples")
            payload["num_examples"] = int(msg.num_examples)
    obj = {"kind": msg.kind, "round": int(msg.round), "learner_id": int(msg.learner_id), "payload": payload}
    return (json.dumps(obj, separators=(",", ":"), allow_nan=False) + "\n").encode("utf-8")


def _expect_int(value: object, what: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ProtocolError(f"{what} must be an integer, got {value!r}")
    return value


def _expect_keys(obj: object, keys: Sequence[str], what: str) -> dict:
    if not isinstance(obj, dict):
        raise ProtocolError(f"{what} must be an object")
    if set(obj) != set(keys):
        raise ProtocolError(f"{what} must have keys {sorted(keys)}, got {sorted(obj)}")
    return obj


def _model_from_json(obj: object) -> ModelParams:
    obj = _expect_keys(obj, ("arch", "values"), "model")
    arch = _expect_keys(obj["arch"], ("input_dim", "hidden", "num_classes"), "arch")
    hidden = arch["hidden"]
    if not isinstance(hidden, list):
        raise ProtocolError("arch.hidden must be a list")
    values = obj["values"]
    if not isinstance(values, list) or not all(isinstance(v, str) for v in values):
        raise ProtocolError("model values must be a list of hex-float strings")
    try:
        parsed = np.array([float.fromhex(v) for v in values], dtype=np.float64)
        architecture = Architecture(
            _expect_int(arch["input_dim"], "arch.input_dim"),
            tuple(_expect_int(h, "arch.hidden") for h in hidden),
            _expect_int(arch["num_classes"], "arch.num_classes"),
        )
        return ModelParams(parsed, architecture)
    except ProtocolError:
        raise
    except (ValueError, FedError) as exc:
        raise ProtocolError(f"invalid model payload: {exc}") from exc


def decode(line: bytes) -> Message:
    if not line.endswith(b"\n"):
        raise ProtocolError("message is not newline-terminated (truncated?)")
    try:
        obj = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"malformed JSON: {exc}") from exc
    obj = _expect_keys(obj, ("kind", "round", "learner_id", "payload"), "message")
    kind = obj["kind"]
    if kind not in KINDS:
        raise ProtocolError(f"unknown message kind {kind!r}")
    round_no = _expect_int(obj["round"], "round")
    learner_id = _expect_int(obj["learner_id"], "learner_id")
    payload = obj["payload"]
    if kind == "Shutdown":
        if payload is not None:
            raise ProtocolError("Shutdown carries no payload")
        return Message(kind, round_no, learner_id)
    payload = _expect_keys(payload, _PAYLOAD_KEYS[kind], f"{kind} payload")
    if kind == "EvalResponse":
        counts = payload["confusion"]
        try:
            arr = np.array(counts)
            if arr.ndim != 2 or arr.size == 0 or not np.issubdtype(arr.dtype, np.integer):
                raise ValueError("confusion must be a square integer matrix")
            cm = ConfusionMatrix(arr)
        except (ValueError, FedError) as exc:
            raise ProtocolError(f"invalid confusion payload: {exc}") from exc
        return Message(kind, round_no, learner_id, confusion=cm)
    model = _model_from_json(payload["model"])
    if kind == "TrainResponse":
        n = _expect_int(payload["num_examples"], "num_examples")
        return Message(kind, round_no, learner_id, model=model, num_examples=n)
    return Message(kind, round_no, learner_id, model=model)


def parse_address(address: str) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep or not port.isdigit():
        raise ConfigError(f"address must look like host:port, got {address!r}")
    return host or "127.0.0.1", int(port)


class LearnerNode:
    """Answers training and evaluation requests for one learner's shard."""

    def __init__(self, shard: LearnerShard, config: FederationConfig) -> None:
        self.shard = shard
        self.config = config

    def handle(self, msg: Message) -> Message | None:
        cfg = self.config
        if msg.kind == "TrainRequest":
            if msg.learner_id != self.shard.learner_id:
                raise ProtocolError(
                    f"TrainRequest for learner {msg.learner_id} sent to learner {self.shard.learner_id}"
                )
            seed = learner_seed(cfg.master_seed, self.shard.learner_id, msg.round)
            local = client_opt(msg.model, self.shard, cfg.local_epochs, cfg.batch_size, cfg.learning_rate, seed)
            return Message("TrainResponse", msg.round, msg.learner_id, model=local, num_examples=len(self.shard.train))
        if msg.kind == "EvalRequest":
            cm = evaluate(msg.model, self.shard.validation)
            return Message("EvalResponse", msg.round, msg.learner_id, confusion=cm)
        if msg.kind == "Shutdown":
            return None
        raise ProtocolError(f"learner cannot handle {msg.kind}")


def serve_learner(
    listen: str,
    node: LearnerNode,
    ready: Callable[[tuple[str, int]], None] | None = None,
) -> None:
    """Serve one controller connection at a time until a Shutdown arrives.

    ``ready`` receives the bound address, which matters when port 0 is used.
    """
    host, port = parse_address(listen)
    with socket.create_server((host, port)) as server:
        bound = server.getsockname()[:2]
        log.info("learner %d listening on %s:%d", node.shard.learner_id, *bound)
        if ready is not None:
            ready(bound)
        while True:
            conn, _ = server.accept()
            with conn, conn.makefile("rb") as reader:
                for line in reader:
                    try:
                        msg = decode(line)
                        reply = node.handle(msg)
                    except FedError as exc:
                        log.error("learner %d dropping connection: %s", node.shard.learner_id, exc)
                        break
                    if reply is None:
                        return
                    conn.sendall(encode(reply))


class _Connection:
    def __init__(self, learner_id: int, endpoint: str, timeout: float) -> None:
        self.learner_id = learner_id
        self.endpoint = endpoint
        try:
            self.sock = socket.create_connection(parse_address(endpoint), timeout=timeout)
        except OSError as exc:
            raise TransportError(f"cannot reach learner {learner_id} at {endpoint}: {exc}") from exc
        self.reader = self.sock.makefile("rb")

    def send(self, msg: Message) -> None:
        try:
            self.sock.sendall(encode(msg))
        except OSError as exc:
            raise TransportError(f"lost connection to {self.endpoint}: {exc}") from exc

    def receive(self, kind: str, round_no: int, learner_id: int) -> Message:
        try:
            line = self.reader.readline()
        except OSError as exc:
            raise TransportError(f"no response from {self.endpoint}: {exc}") from exc
        if not line:
            raise TransportError(f"{self.endpoint} closed the connection")
        msg = decode(line)
        if (msg.kind, msg.round, msg.learner_id) != (kind, round_no, learner_id):
            raise ProtocolError(
                f"{self.endpoint} answered {msg.kind}(round={msg.round}, learner={msg.learner_id}), "
                f"expected {kind}(round={round_no}, learner={learner_id})"
            )
        return msg

    def close(self) -> None:
        self.reader.close()
        self.sock.close()


class RemoteBackend:
    """Drives learner nodes over TCP; plugs into :func:`federate`."""

    def __init__(self, endpoints: dict[int, str], timeout: float = DEFAULT_TIMEOUT) -> None:
        self.learner_ids = sorted(endpoints)
        self.connections: list[_Connection] = []
        try:
            for k in self.learner_ids:
                self.connections.append(_Connection(k, endpoints[k], timeout))
        except TransportError:
            self.close()
            raise

    def train(self, round_no: int, model: ModelParams) -> list[tuple[ModelParams, int]]:
        for conn in self.connections:
            conn.send(Message("TrainRequest", round_no, conn.learner_id, model=model))
        out = []
        for conn in self.connections:
            reply = conn.receive("TrainResponse", round_no, conn.learner_id)
            out.append((reply.model, reply.num_examples))
        return out

    def evaluate(self, round_no: int, models: Sequence[ModelParams]) -> list[list[ConfusionMatrix]]:
        owners = self.learner_ids
        for conn in self.connections:
            for owner, model in zip(owners, models):
                conn.send(Message("EvalRequest", round_no, owner, model=model))
        per_evaluator = []
        for conn in self.connections:
            per_evaluator.append([conn.receive("EvalResponse", round_no, owner).confusion for owner in owners])
        return [[per_evaluator[j][k] for j in range(len(owners))] for k in range(len(owners))]

    def shutdown(self, round_no: int) -> None:
        for conn in self.connections:
            conn.send(Message("Shutdown", round_no, conn.learner_id))

    def close(self) -> None:
        for conn in self.connections:
            conn.close()


def run_distributed(
    config: FederationConfig,
    learner_endpoints: Sequence[str] | dict[int, str],
    test_set: LabeledDataset,
    timeout: float = DEFAULT_TIMEOUT,
) -> list[RoundRecord]:
    """Run the federation against learner nodes and shut them down afterwards.

    A list of endpoints is indexed by learner id. Excluded learners are never
    contacted.
    """
    if not isinstance(learner_endpoints, dict):
        learner_endpoints = dict(enumerate(learner_endpoints))
    if len(learner_endpoints) != config.n_learners:
        raise ConfigError(f"config expects {config.n_learners} learners, got {len(learner_endpoints)} endpoints")
    active = {k: v for k, v in learner_endpoints.items() if k not in config.exclusion_ids}
    if not active:
        raise ConfigError("every learner is excluded")
    backend = RemoteBackend(active, timeout)
    try:
        records = federate(config, backend, test_set)
        backend.shutdown(config.rounds)
    finally:
        backend.close()
    return records
