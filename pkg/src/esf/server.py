"""The example-server service: pipelines streaming batches to consumers under
credit-based flow control.

Each connection takes one pipeline slot. A producer thread fills a bounded
queue (capacity = the consumer's max_credits, so server-side buffering can
never exceed it); the sender drains the queue only while the consumer has
granted credits. CREDIT and STATS frames arrive on a per-connection reader
thread. A server owns a shard subset (index mod server_count) and splits it
again across its pipeline slots, so concurrent consumers receive disjoint
record sets.
"""

from __future__ import annotations

import json
import queue
import socket
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass, replace

from .acoustic import SimulatorConfig
from .errors import EsfError, LaunchError
from .pipeline import PipelineConfig, build_pipeline
from .util import hash64
from .vtlp import WarpSpec
from .wire import FrameReader, MsgType, encode_batch_frame, encode_frame


@dataclass
class ServerConfig:
    pipeline: PipelineConfig
    warp_spec: WarpSpec | None = None
    sim_config: SimulatorConfig | None = None
    host: str = "127.0.0.1"
    port: int = 0
    num_pipelines: int = 1
    epochs: int = 1
    server_index: int = 0
    server_count: int = 1

    def __post_init__(self):
        if self.num_pipelines < 1:
            raise ValueError("num_pipelines must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not (0 <= self.server_index < self.server_count):
            raise ValueError("server_index must lie in [0, server_count)")


def _owned_shards(paths: list[str], index: int, count: int) -> list[str]:
    return [p for i, p in enumerate(paths) if i % count == index]


class _Connection:
    def __init__(self, server: "ExampleServer", sock: socket.socket, slot: int):
        self.server = server
        self.sock = sock
        self.slot = slot
        self.write_lock = threading.Lock()
        self.credits = 0
        self.credit_cv = threading.Condition()
        self.batches_sent = 0
        self.epoch = 0
        self.queue: queue.Queue = None  # sized after HELLO
        self.alive = True

    def send_frame(self, data: bytes) -> None:
        with self.write_lock:
            self.sock.sendall(data)

    def stats_payload(self) -> bytes:
        return json.dumps({
            "batches_sent": self.batches_sent,
            "buffered": self.queue.qsize() if self.queue is not None else 0,
            "epoch": self.epoch,
        }).encode("utf-8")

    def reader_loop(self, reader: FrameReader) -> None:
        try:
            while self.alive:
                frame = reader.read_frame()
                if frame is None:
                    break
                msg_type, payload = frame
                if msg_type == MsgType.CREDIT:
                    grant = int.from_bytes(payload[:4], "little")
                    with self.credit_cv:
                        self.credits += grant
                        self.credit_cv.notify_all()
                elif msg_type == MsgType.STATS:
                    self.send_frame(encode_frame(MsgType.STATS, self.stats_payload()))
                # other client-to-server types are ignored
        except EsfError:
            # corrupt or malformed traffic: reset the connection
            try:
                self.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        except OSError:
            pass
        finally:
            # whichever way the read side ends, the consumer is gone (or the
            # stream is complete); release the sender so the slot can finish
            self.alive = False
            with self.credit_cv:
                self.credit_cv.notify_all()

    def _put(self, item) -> bool:
        while self.alive:
            try:
                self.queue.put(item, timeout=0.2)  # blocks at max_credits: backpressure
                return True
            except queue.Full:
                continue
        return False

    def producer_loop(self, cfg: ServerConfig, slot_cfg: PipelineConfig) -> None:
        try:
            for epoch in range(cfg.epochs):
                self.epoch = epoch
                for batch in build_pipeline(slot_cfg, cfg.warp_spec, cfg.sim_config,
                                            epoch=epoch):
                    if not self._put(batch):
                        return
            self._put(None)  # end of stream
        except Exception as exc:  # pipeline failure: tell the consumer
            self._put(exc)

    def sender_loop(self) -> None:
        ordinal = 0
        while self.alive:
            with self.credit_cv:
                while self.credits <= 0 and self.alive:
                    self.credit_cv.wait(timeout=0.5)
                if not self.alive:
                    return
            try:
                item = self.queue.get(timeout=0.2)
            except queue.Empty:
                continue
            if item is None:
                self.send_frame(encode_frame(MsgType.END, b""))
                return
            if isinstance(item, Exception):
                msg = json.dumps({"message": str(item)}).encode("utf-8")
                self.send_frame(encode_frame(MsgType.ERROR, msg))
                return
            with self.credit_cv:
                self.credits -= 1
            # count before the write: the write lock orders the frame ahead
            # of any STATS reply that reports it
            self.batches_sent += 1
            self.send_frame(encode_batch_frame(ordinal, item))
            ordinal += 1


class ExampleServer:
    """Serves batches from num_pipelines independent pipeline slots."""

    def __init__(self, cfg: ServerConfig):
        self.cfg = cfg
        self._listener: socket.socket | None = None
        self._next_slot = 0
        self._slot_lock = threading.Lock()
        self._done = threading.Event()
        self._slots_finished = 0
        self._threads: list[threading.Thread] = []
        owned = _owned_shards(cfg.pipeline.shard_paths, cfg.server_index,
                              cfg.server_count)
        self._slot_configs = []
        for slot in range(cfg.num_pipelines):
            shard_subset = _owned_shards(owned, slot, cfg.num_pipelines)
            self._slot_configs.append(replace(
                cfg.pipeline, shard_paths=shard_subset,
                seed=hash64(cfg.pipeline.seed, slot)))

    @property
    def endpoint(self) -> tuple[str, int]:
        host, port = self._listener.getsockname()[:2]
        return host, port

    def start(self) -> tuple[str, int]:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((self.cfg.host, self.cfg.port))
        sock.listen(16)
        sock.settimeout(0.2)
        self._listener = sock
        return self.endpoint

    def _handle(self, sock: socket.socket) -> None:
        conn = None
        try:
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            reader = FrameReader(sock.recv)
            frame = reader.read_frame()
            if frame is None:
                return
            msg_type, payload = frame
            if msg_type != MsgType.HELLO:
                sock.sendall(encode_frame(MsgType.ERROR, b'{"message": "expected HELLO"}'))
                return
            hello = json.loads(payload.decode("utf-8"))
            if hello.get("version") != 1:
                sock.sendall(encode_frame(
                    MsgType.ERROR,
                    json.dumps({"message": f"version mismatch: {hello.get('version')}"
                                }).encode("utf-8")))
                return
            max_credits = int(hello.get("max_credits", 4))
            if max_credits < 1:
                sock.sendall(encode_frame(MsgType.ERROR, b'{"message": "max_credits < 1"}'))
                return
            with self._slot_lock:
                if self._next_slot >= self.cfg.num_pipelines:
                    sock.sendall(encode_frame(
                        MsgType.ERROR, b'{"message": "no pipeline slots left"}'))
                    return
                slot = self._next_slot
                self._next_slot += 1
            conn = _Connection(self, sock, slot)
            conn.queue = queue.Queue(maxsize=max_credits)
            reply = json.dumps({"version": 1, "slot": slot,
                                "num_slots": self.cfg.num_pipelines,
                                "epochs": self.cfg.epochs}).encode("utf-8")
            conn.send_frame(encode_frame(MsgType.HELLO, reply))
            producer = threading.Thread(
                target=conn.producer_loop, args=(self.cfg, self._slot_configs[slot]),
                daemon=True, name=f"esf-producer-{slot}")
            reader_thread = threading.Thread(
                target=conn.reader_loop, args=(reader,), daemon=True,
                name=f"esf-reader-{slot}")
            producer.start()
            reader_thread.start()
            try:
                conn.sender_loop()
            finally:
                conn.alive = False
                with self._slot_lock:
                    self._slots_finished += 1
                    if self._slots_finished >= self.cfg.num_pipelines:
                        self._done.set()
        except (EsfError, OSError):
            pass
        finally:
            if conn is not None:
                conn.alive = False
            # linger briefly so the peer can drain END before the reset
            time.sleep(0.05)
            try:
                sock.close()
            except OSError:
                pass

    def run(self, stop: threading.Event | None = None) -> None:
        """Accept consumers until every pipeline slot has completed its epochs."""
        if self._listener is None:
            self.start()
        try:
            while not self._done.is_set() and not (stop and stop.is_set()):
                try:
                    sock, _ = self._listener.accept()
                except socket.timeout:
                    continue
                t = threading.Thread(target=self._handle, args=(sock,), daemon=True)
                t.start()
                self._threads.append(t)
            for t in self._threads:
                t.join(timeout=5.0)
        finally:
            self._listener.close()


def serve(cfg: ServerConfig, *, ready=None, stop: threading.Event | None = None) -> None:
    """Run a server until its configured epochs complete on every slot."""
    server = ExampleServer(cfg)
    endpoint = server.start()
    if ready is not None:
        ready(endpoint)
    server.run(stop)


def _readline_timeout(proc: subprocess.Popen, timeout: float) -> str:
    box: list[str] = []

    def read():
        box.append(proc.stdout.readline())

    t = threading.Thread(target=read, daemon=True)
    t.start()
    t.join(timeout)
    return box[0] if box else ""


@dataclass
class ServerProcess:
    index: int
    process: subprocess.Popen
    host: str
    port: int
    config_path: str = ""

    @property
    def endpoint(self) -> tuple[str, int]:
        return self.host, self.port

    def terminate(self) -> None:
        if self.process.poll() is None:
            self.process.terminate()

    def kill(self) -> None:
        if self.process.poll() is None:
            self.process.kill()

    def wait(self, timeout: float | None = None) -> int | None:
        try:
            return self.process.wait(timeout=timeout)
        except subprocess.TimeoutExpired:
            return None


def launch_servers(n: int, config: dict, *, pipelines_per_server=1,
                   epochs: int = 1, seed_base: int = 0,
                   startup_timeout: float = 60.0) -> list[ServerProcess]:
    """Spawn n server processes over disjoint shard subsets.

    config is a GlobalConfig-style dict (see esf.config). Server j gets shards
    {i : i mod n == j}, seed seed_base + j, and an OS-assigned port announced
    on its stdout as "LISTENING host:port".
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if isinstance(pipelines_per_server, int):
        pipelines = [pipelines_per_server] * n
    else:
        pipelines = list(pipelines_per_server)
        if len(pipelines) != n:
            raise ValueError("pipelines_per_server list must have one entry per server")
    procs: list[ServerProcess] = []
    try:
        for j in range(n):
            cfg = json.loads(json.dumps(config))  # deep copy
            server_cfg = cfg.setdefault("server", {})
            server_cfg.update({
                "host": "127.0.0.1", "port": 0,
                "num_pipelines": pipelines[j],
                "epochs": epochs,
                "server_index": j, "server_count": n,
            })
            cfg.setdefault("pipeline", {})["seed"] = seed_base + j
            with tempfile.NamedTemporaryFile(
                    "w", suffix=f".server{j}.json", delete=False) as fh:
                json.dump(cfg, fh)
                config_path = fh.name
            proc = subprocess.Popen(
                [sys.executable, "-m", "esf", "serve", "--config", config_path],
                stdout=subprocess.PIPE, stderr=subprocess.DEVNULL, text=True)
            line = _readline_timeout(proc, startup_timeout)
            if not line.startswith("LISTENING "):
                proc.kill()
                raise LaunchError(f"server {j} failed to announce its endpoint "
                                  f"(got {line!r})", index=j)
            host, port = line.split()[1].rsplit(":", 1)
            procs.append(ServerProcess(j, proc, host, int(port), config_path))
    except Exception:
        for p in procs:
            p.kill()
        raise
    return procs
