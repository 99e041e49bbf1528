"""
coordinator.py

The coordinator is the single logical process that owns the configuration. It serializes membership
events, bumps the version by exactly one per event, remembers every configuration it has issued, and
tells anyone who subscribed. It is not on the data path: servers and clients only talk to it when a
configuration changes.

Persisting the history is delegated to a backend so the coordinator itself can be made fault-tolerant
by swapping the storage underneath it.
"""

import logging
import threading
from abc import ABC, abstractmethod
from collections.abc import Callable
from pathlib import Path

from src import codec
from src.mapping import (
    Configuration,
    DuplicateServerError,
    MembershipEvent,
    NoReplacementAvailableError,
    ServerFail,
    ServerId,
    ServerJoin,
    UnknownServerError,
    apply_membership_event,
)
from src.messages import ConfigResponse, Endpoint, Envelope, GetConfig, Message, Register, ReportFail
from src.transport import Transport

logger = logging.getLogger(__name__)

type ConfigListener = Callable[[Configuration], None]


class ConfigurationTimeoutError(Exception):
    """Raised when no configuration at or above the requested version appears in time."""

    ...


class CoordinatorBackend(ABC):
    """Durable storage for the sequence of issued configurations."""

    @abstractmethod
    def load(self) -> list[Configuration]: ...

    @abstractmethod
    def append(self, config: Configuration) -> None: ...


class MemoryBackend(CoordinatorBackend):
    def __init__(self) -> None:
        self._configs: list[Configuration] = []

    def load(self) -> list[Configuration]:
        return list(self._configs)

    def append(self, config: Configuration) -> None:
        self._configs.append(config)


class FileBackend(CoordinatorBackend):
    """Append-only file of framed, encoded configurations. A torn final frame is ignored on load."""

    def __init__(self, path: Path) -> None:
        self.path = path

    def load(self) -> list[Configuration]:
        if not self.path.exists():
            return []
        return [codec.decode_configuration(body) for body in codec.read_frames(self.path.read_bytes())]

    def append(self, config: Configuration) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("ab") as fh:
            fh.write(codec.frame(codec.encode_configuration(config)))


class Coordinator:
    def __init__(self, initial: Configuration, backend: CoordinatorBackend | None = None) -> None:
        self.backend = backend or MemoryBackend()
        self._cond = threading.Condition()
        self._listeners: list[ConfigListener] = []

        self.history = self.backend.load()
        if self.history:
            logger.info(f"Resuming coordinator at configuration {self.history[-1].version}")
        else:
            self.history = [initial]
            self.backend.append(initial)
            logger.info(f"Coordinator starting at configuration {initial.version}")

    @property
    def current(self) -> Configuration:
        with self._cond:
            return self.history[-1]

    def subscribe(self, listener: ConfigListener) -> None:
        self._listeners.append(listener)

    def apply(self, event: MembershipEvent) -> Configuration:
        """
        Apply one membership event. On error the configuration is left as it was and the error is
        re-raised; NoReplacementAvailable freezes the configuration rather than issuing one with
        short replica sets.
        """

        with self._cond:
            try:
                config = apply_membership_event(self.history[-1], event)
            except NoReplacementAvailableError as e:
                logger.error(f"Configuration frozen at {self.history[-1].version}: {e}")
                raise
            self.backend.append(config)
            self.history.append(config)
            self._cond.notify_all()

        logger.info(f"Configuration {config.version}: {event} (live: {', '.join(config.live_servers)})")
        for listener in self._listeners:
            listener(config)
        return config

    def report_fail(self, server: ServerId) -> Configuration:
        return self.apply(ServerFail(server))

    def join(self, server: ServerId) -> Configuration:
        return self.apply(ServerJoin(server))

    def fetch_configuration(self, min_version: int = 0, timeout: float | None = None) -> Configuration:
        """Newest configuration with version >= min_version, waiting up to `timeout` seconds for it."""

        with self._cond:
            if not self._cond.wait_for(lambda: self.history[-1].version >= min_version, timeout=timeout):
                raise ConfigurationTimeoutError(
                    f"No configuration >= {min_version} (current {self.history[-1].version})"
                )
            return self.history[-1]


class CoordinatorEndpoint:
    """
    Puts a Coordinator on a transport. Answers configuration requests and failure reports, admits
    servers that register, and pushes every new configuration to the endpoints that have asked for one.
    """

    def __init__(self, coordinator: Coordinator, transport: Transport, name: Endpoint = "coordinator") -> None:
        self.coordinator = coordinator
        self.transport = transport
        self.name = name
        self.watchers: set[Endpoint] = set()
        coordinator.subscribe(self._push)

    def handle(self, env: Envelope) -> None:
        reply = self.serve(env.body)
        self.watchers.add(env.src)
        self.transport.send(self.name, env.src, reply)

    def serve(self, msg: Message) -> Message:
        match msg:
            case GetConfig():
                pass
            case ReportFail(server=server):
                self._report(server)
            case Register(server=server):
                self._register(server)
            case _:
                raise ValueError(f"The coordinator does not serve {type(msg).__name__}")
        return ConfigResponse(self.coordinator.current)

    def _report(self, server: ServerId) -> None:
        try:
            self.coordinator.report_fail(server)
        except (UnknownServerError, NoReplacementAvailableError) as e:
            logger.warning(f"Ignoring failure report for {server}: {e}")

    def _register(self, server: ServerId) -> None:
        self.watchers.add(server)
        if self.coordinator.current.is_alive(server):
            return
        try:
            self.coordinator.join(server)
        except DuplicateServerError:
            pass

    def _push(self, config: Configuration) -> None:
        for watcher in sorted(self.watchers):
            if watcher in config.servers and not config.is_alive(watcher):
                continue
            self.transport.send(self.name, watcher, ConfigResponse(config))
