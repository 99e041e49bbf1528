"""
wire.py

The TCP transport. Every process runs one asyncio event loop on a background thread; all endpoint
handlers run on that loop, so a process handles one message at a time.

Endpoints are addressed as `host:port`, optionally followed by `/name` for several endpoints behind
one listener (the benchmark's clients). Frames are a 4-byte big-endian length and an encoded
Envelope. One-way messages go through a per-destination writer task that reconnects and resends the
frame it was holding when a connection breaks; receivers drop anything whose sequence number they
have already seen on that link, so a resend is never delivered twice.

Requests (reads, status queries, configuration fetches) use a short-lived connection of their own and
carry sequence number 0; the receiver answers on the same connection.
"""

import asyncio
import logging
import socket
import threading
import time
from collections import Counter
from collections.abc import Callable
from pathlib import Path

from src import codec
from src.applylog import ApplyLog, FsyncPolicy
from src.coordinator import Coordinator, CoordinatorEndpoint, FileBackend
from src.core import TokenStrategy
from src.mapping import Configuration
from src.messages import ConfigResponse, Endpoint, Envelope, GetConfig, Message, Register, ReportFail
from src.server import DEFAULT_RETRANSMIT_US, DEFAULT_RETRY_BUDGET, StorageServer
from src.transport import Callback, DestinationCrashedError, Handler, Link, Transport

logger = logging.getLogger(__name__)

REQUEST_SEQ = 0
RECONNECT_DELAY_S = 0.1
DEFAULT_REQUEST_TIMEOUT_S = 5.0
FAILURE_THRESHOLD = 20


class BindFailureError(Exception):
    """Raised when the transport cannot listen on its address."""

    ...


def split_address(endpoint: Endpoint) -> tuple[str, int]:
    """`host:port/name` -> (host, port)."""

    address = endpoint.split("/", 1)[0]
    host, sep, port = address.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"Endpoint {endpoint!r} is not of the form host:port[/name]")
    return host or "127.0.0.1", int(port)


def _recv_exactly(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("Connection closed mid-frame")
        buf += chunk
    return bytes(buf)


class WireTransport(Transport):
    """
    `listen` is this process's `host:port`. When `coordinator` is given, a server endpoint that stays
    unreachable for FAILURE_THRESHOLD reconnect attempts is reported to it as failed.
    """

    def __init__(
        self,
        listen: Endpoint,
        coordinator: Endpoint | None = None,
        request_timeout_s: float = DEFAULT_REQUEST_TIMEOUT_S,
    ) -> None:
        super().__init__()
        self.listen = listen
        self.coordinator = coordinator
        self.request_timeout_s = request_timeout_s
        self.loop = asyncio.new_event_loop()

        self._thread: threading.Thread | None = None
        self._server: asyncio.Server | None = None
        self._queues: dict[str, asyncio.Queue[bytes]] = {}
        # Sequence numbers start at the wall clock so a restarted sender's frames are not taken for resends.
        self._seq_base = time.time_ns() // 1000
        self._seq: Counter[Link] = Counter()
        self._delivered: dict[Link, int] = {}
        self._started = time.monotonic_ns()

    # Lifecycle

    def start(self) -> None:
        """Bind the listener and run the event loop on a daemon thread."""

        ready = threading.Event()
        errors: list[BaseException] = []

        def run() -> None:
            asyncio.set_event_loop(self.loop)
            try:
                host, port = split_address(self.listen)
                self._server = self.loop.run_until_complete(asyncio.start_server(self._on_connection, host, port))
            except OSError as e:
                errors.append(e)
                ready.set()
                return
            ready.set()
            self.loop.run_forever()

        self._thread = threading.Thread(target=run, name=f"wire-{self.listen}", daemon=True)
        self._thread.start()
        ready.wait()
        if errors:
            raise BindFailureError(f"Cannot listen on {self.listen}: {errors[0]}") from errors[0]
        logger.info(f"Listening on {self.listen}")

    def stop(self) -> None:
        if self._server is not None:
            self.loop.call_soon_threadsafe(self._server.close)
        self.loop.call_soon_threadsafe(self.loop.stop)
        if self._thread is not None:
            self._thread.join(timeout=5)

    def run_on_loop[T](self, fn: Callable[[], T]) -> T:
        """Run `fn` on the event loop thread and wait for its result."""

        if self._on_loop():
            return fn()

        async def call() -> T:
            return fn()

        return asyncio.run_coroutine_threadsafe(call(), self.loop).result()

    def _on_loop(self) -> bool:
        return threading.current_thread() is self._thread

    # Transport interface

    def now_us(self) -> int:
        return (time.monotonic_ns() - self._started) // 1000

    def call_later(self, owner: Endpoint, delay_us: int, callback: Callback) -> None:
        def fire() -> None:
            if self.is_alive(owner):
                callback()

        self.loop.call_soon_threadsafe(self.loop.call_later, delay_us / 1e6, fire)

    def send(self, src: Endpoint, dst: Endpoint, msg: Message) -> None:
        self.loop.call_soon_threadsafe(self._enqueue, src, dst, msg)

    def request(self, src: Endpoint, dst: Endpoint, msg: Message) -> Message:
        if dst in self.endpoints:
            handler = self.endpoints[dst]
            return self.run_on_loop(lambda: handler.serve(msg))

        env = Envelope(src, dst, REQUEST_SEQ, msg)
        try:
            with socket.create_connection(split_address(dst), timeout=self.request_timeout_s) as sock:
                sock.sendall(codec.frame(codec.encode_envelope(env)))
                (length,) = codec.FRAME_HEADER.unpack(_recv_exactly(sock, codec.FRAME_HEADER.size))
                reply = codec.decode_envelope(_recv_exactly(sock, length))
        except (OSError, codec.CodecError) as e:
            raise DestinationCrashedError(f"{dst} is not reachable from {src}: {e}") from e
        return reply.body

    # Outbound

    def _enqueue(self, src: Endpoint, dst: Endpoint, msg: Message) -> None:
        link = (src, dst)
        self._seq[link] += 1
        env = Envelope(src, dst, self._seq_base + self._seq[link], msg)
        for observer in self.send_observers:
            observer(env)

        if dst in self.endpoints:
            self.loop.call_soon(self._deliver, env)
            return

        address = dst.split("/", 1)[0]
        queue = self._queues.get(address)
        if queue is None:
            queue = self._queues[address] = asyncio.Queue[bytes]()
            self.loop.create_task(self._writer(address, queue))
        queue.put_nowait(codec.frame(codec.encode_envelope(env)))

    async def _writer(self, address: str, queue: asyncio.Queue[bytes]) -> None:
        writer: asyncio.StreamWriter | None = None
        held: bytes | None = None
        failures = 0
        while True:
            if held is None:
                held = await queue.get()
            try:
                if writer is None:
                    _, writer = await asyncio.open_connection(*split_address(address))
                    failures = 0
                writer.write(held)
                await writer.drain()
                held = None
            except OSError as e:
                failures += 1
                if writer is not None:
                    writer.close()
                writer = None
                logger.debug(f"Link to {address} broken ({e}), retrying")
                if failures == FAILURE_THRESHOLD:
                    self._suspect(address)
                await asyncio.sleep(RECONNECT_DELAY_S)

    def _suspect(self, address: str) -> None:
        if self.coordinator is None or address == self.coordinator:
            return
        logger.warning(f"{address} unreachable after {FAILURE_THRESHOLD} attempts, reporting it")
        self.send(self.listen, self.coordinator, ReportFail(address))

    # Inbound

    async def _on_connection(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            while True:
                (length,) = codec.FRAME_HEADER.unpack(await reader.readexactly(codec.FRAME_HEADER.size))
                env = codec.decode_envelope(await reader.readexactly(length))
                if env.seq == REQUEST_SEQ:
                    reply = self._serve(env)
                    writer.write(codec.frame(codec.encode_envelope(reply)))
                    await writer.drain()
                else:
                    self._deliver(env)
        except asyncio.IncompleteReadError:
            pass
        except (OSError, ValueError, codec.CodecError, DestinationCrashedError) as e:
            logger.warning(f"Dropping connection: {e}")
        finally:
            writer.close()

    def _serve(self, env: Envelope) -> Envelope:
        handler = self._handler(env.dst)
        if handler is None:
            raise DestinationCrashedError(f"No endpoint {env.dst} here")
        return Envelope(env.dst, env.src, REQUEST_SEQ, handler.serve(env.body))

    def _deliver(self, env: Envelope) -> None:
        link = (env.src, env.dst)
        if env.seq <= self._delivered.get(link, 0):
            return
        self._delivered[link] = env.seq

        handler = self._handler(env.dst)
        if handler is None:
            logger.warning(f"No endpoint {env.dst} here, dropping {type(env.body).__name__}")
            return
        handler.handle(env)

    def _handler(self, name: Endpoint) -> Handler | None:
        if not self.is_alive(name):
            return None
        return self.endpoints.get(name)


# Hosts


def serve_coordinator(
    listen: Endpoint, initial: Configuration, data_dir: Path | None = None
) -> tuple[WireTransport, Coordinator]:
    """Start a coordinator listening on `listen`; its configuration history lives in `data_dir`."""

    backend = FileBackend(data_dir / "coordinator.log") if data_dir is not None else None
    coordinator = Coordinator(initial, backend)
    transport = WireTransport(listen)
    transport.register(listen, CoordinatorEndpoint(coordinator, transport, listen))
    transport.start()
    return transport, coordinator


def serve_storage(
    listen: Endpoint,
    coordinator: Endpoint,
    data_dir: Path | None = None,
    fsync: FsyncPolicy = FsyncPolicy.batched,
    retry_budget: int = DEFAULT_RETRY_BUDGET,
    token_strategy: TokenStrategy = TokenStrategy.counter,
    retransmit_us: int = DEFAULT_RETRANSMIT_US,
) -> tuple[WireTransport, StorageServer]:
    """
    Start a storage server: fetch the current configuration, listen, then register with the
    coordinator, which answers with the configuration the server should install.
    """

    transport = WireTransport(listen, coordinator)
    reply = transport.request(listen, coordinator, GetConfig())
    if not isinstance(reply, ConfigResponse):
        raise DestinationCrashedError(f"Coordinator {coordinator} answered {type(reply).__name__}")

    log = ApplyLog(data_dir / "apply.log", fsync) if data_dir is not None else ApplyLog()
    server = StorageServer(
        listen,
        transport,
        reply.config,
        log,
        retry_budget=retry_budget,
        token_strategy=token_strategy,
        retransmit_us=retransmit_us,
    )
    transport.register(listen, server)
    transport.start()
    transport.send(listen, coordinator, Register(listen, listen))
    logger.info(f"Server {listen} registered with {coordinator} at configuration {reply.config.version}")
    return transport, server
