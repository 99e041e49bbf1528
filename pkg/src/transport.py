"""
transport.py

How endpoints (servers, clients, the coordinator) exchange messages. Two backends share one
interface: the seeded discrete-event Simulation below, and the asyncio TCP transport in wire.py.

Links are reliable and FIFO per (src, dst). Loss happens only through crashes and injected Drop
faults; duplicates only through protocol-level retransmission. The simulator keeps one queue per
link and schedules "a message is ready on this link" markers, so a delivery that has to wait for a
busy server can never overtake an earlier message on the same link.

Virtual time is in integer microseconds, and all randomness comes from one seeded random.Random, so
a (seed, workload, fault schedule) triple fully determines every event.
"""

import heapq
import logging
import random
from abc import ABC, abstractmethod
from collections import Counter, deque
from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Protocol

from src.messages import (
    AbortBackward,
    ClientReply,
    CommitBackward,
    Endpoint,
    Envelope,
    Forward,
    Message,
    RetryBackward,
    txn_of,
)

logger = logging.getLogger(__name__)

type Link = tuple[Endpoint, Endpoint]
type Callback = Callable[[], None]

PROTOCOL_HOPS = (Forward, CommitBackward, AbortBackward, RetryBackward, ClientReply)


class DestinationCrashedError(Exception):
    """Raised by a synchronous request to an endpoint that is down or unknown."""

    ...


class Handler(Protocol):
    def handle(self, env: Envelope) -> None: ...

    def serve(self, msg: Message) -> Message: ...


@dataclass(eq=True, frozen=True)
class Crash:
    server: Endpoint


@dataclass(eq=True, frozen=True)
class Recover:
    server: Endpoint


@dataclass(eq=True, frozen=True)
class Drop:
    src: Endpoint
    dst: Endpoint
    count: int


type Fault = Crash | Recover | Drop


class Transport(ABC):
    """Message substrate shared by the simulator and the wire transport."""

    def __init__(self) -> None:
        self.endpoints: dict[Endpoint, Handler] = {}
        self.alive: dict[Endpoint, bool] = {}
        self.incarnation: Counter[Endpoint] = Counter()
        self.send_observers: list[Callable[[Envelope], None]] = []

    def register(self, name: Endpoint, endpoint: Handler) -> None:
        self.endpoints[name] = endpoint
        self.alive[name] = True
        self.incarnation[name] += 1

    def is_alive(self, name: Endpoint) -> bool:
        return self.alive.get(name, False)

    def request(self, src: Endpoint, dst: Endpoint, msg: Message) -> Message:
        """Synchronous request/response (reads, status queries, snapshots)."""

        if not self.is_alive(dst):
            raise DestinationCrashedError(f"{dst} is not reachable from {src}")
        return self.endpoints[dst].serve(msg)

    @abstractmethod
    def send(self, src: Endpoint, dst: Endpoint, msg: Message) -> None: ...

    @abstractmethod
    def now_us(self) -> int: ...

    @abstractmethod
    def call_later(self, owner: Endpoint, delay_us: int, callback: Callback) -> None: ...


@dataclass(eq=True, frozen=True)
class LinkReady:
    link: Link


@dataclass(eq=True, frozen=True)
class TimerFire:
    owner: Endpoint
    incarnation: int
    callback: Callback = field(compare=False)


@dataclass(eq=True, frozen=True)
class FaultEvent:
    fault: Fault


type Event = LinkReady | TimerFire | FaultEvent


@dataclass(eq=True, frozen=True)
class InFlight:
    env: Envelope
    dst_incarnation: int


class Simulation(Transport):
    """
    Seeded discrete-event simulator.

    `latency_us` is the uniform per-message latency range; `service_us` is how long a server spends on
    each message it handles (0 makes servers infinitely fast). Only endpoints registered with
    `service=True` pay service time.
    """

    def __init__(self, seed: int, latency_us: tuple[int, int] = (1000, 5000), service_us: int = 0) -> None:
        super().__init__()
        self.seed = seed
        self.rng = random.Random(seed)
        self.latency_us = latency_us
        self.service_us = service_us
        self.clock = 0

        self._queue: list[tuple[int, int, Event]] = []
        self._counter = 0
        self._links: dict[Link, deque[InFlight]] = {}
        self._link_last: dict[Link, int] = {}
        self._link_seq: Counter[Link] = Counter()
        self._drops: Counter[Link] = Counter()
        self._busy_until: dict[Endpoint, int] = {}
        self._service: set[Endpoint] = set()

        self.fault_listeners: list[Callable[[Fault], None]] = []
        self.hops: Counter[int] = Counter()
        self.hops_by_kind: Counter[str] = Counter()
        self.delivered = 0

    def register(self, name: Endpoint, endpoint: Handler, service: bool = False) -> None:
        super().register(name, endpoint)
        if service:
            self._service.add(name)

    def now_us(self) -> int:
        return self.clock

    def _push(self, at: int, event: Event) -> None:
        self._counter += 1
        heapq.heappush(self._queue, (at, self._counter, event))

    def send(self, src: Endpoint, dst: Endpoint, msg: Message) -> None:
        if not self.is_alive(src):
            return

        link = (src, dst)
        self._link_seq[link] += 1
        env = Envelope(src, dst, self._link_seq[link], msg)
        for observer in self.send_observers:
            observer(env)

        at = max(self.clock + self.rng.randint(*self.latency_us), self._link_last.get(link, 0))
        self._link_last[link] = at
        self._links.setdefault(link, deque()).append(InFlight(env, self.incarnation[dst]))
        self._push(at, LinkReady(link))

    def call_later(self, owner: Endpoint, delay_us: int, callback: Callback) -> None:
        self._push(self.clock + delay_us, TimerFire(owner, self.incarnation[owner], callback))

    def inject_fault(self, at_us: int, fault: Fault) -> None:
        self._push(at_us, FaultEvent(fault))

    @property
    def protocol_hops(self) -> int:
        return sum(self.hops_by_kind.values())

    @property
    def idle(self) -> bool:
        return not self._queue

    def step(self) -> Event | None:
        """Pop and process the earliest event. None when nothing is left."""

        if not self._queue:
            return None

        at, _, event = heapq.heappop(self._queue)
        self.clock = max(self.clock, at)

        match event:
            case LinkReady(link=link):
                self._deliver(link, event)
            case TimerFire(owner=owner, incarnation=incarnation, callback=callback):
                if self.is_alive(owner) and self.incarnation[owner] == incarnation:
                    callback()
            case FaultEvent(fault=fault):
                self._apply_fault(fault)
        return event

    def _deliver(self, link: Link, event: LinkReady) -> None:
        dst = link[1]
        if dst in self._service and self._busy_until.get(dst, 0) > self.clock:
            self._push(self._busy_until[dst], event)
            return

        inflight = self._links[link].popleft()
        if not self.is_alive(dst) or self.incarnation[dst] != inflight.dst_incarnation:
            logger.debug(f"Dropped {type(inflight.env.body).__name__} to crashed {dst}")
            return
        if self._drops[link] > 0:
            self._drops[link] -= 1
            logger.debug(f"Injected drop of {type(inflight.env.body).__name__} on {link}")
            return

        if dst in self._service and self.service_us:
            self._busy_until[dst] = self.clock + self.service_us

        body = inflight.env.body
        if isinstance(body, PROTOCOL_HOPS):
            self.hops_by_kind[type(body).__name__] += 1
            if (txn_id := txn_of(body)) is not None:
                self.hops[txn_id] += 1
        self.delivered += 1
        self.endpoints[dst].handle(inflight.env)

    def _apply_fault(self, fault: Fault) -> None:
        match fault:
            case Crash(server=s):
                logger.info(f"[{self.clock}us] crash {s}")
                self.alive[s] = False
                self.incarnation[s] += 1
            case Recover(server=s):
                logger.info(f"[{self.clock}us] recover {s}")
            case Drop(src=src, dst=dst, count=count):
                self._drops[(src, dst)] += count
        for listener in self.fault_listeners:
            listener(fault)

    def run(self, until_us: int | None = None, limit: int | None = None) -> int:
        """Process events until the queue is empty, virtual time passes `until_us`, or `limit` steps."""

        steps = 0
        while self._queue and (limit is None or steps < limit):
            if until_us is not None and self._queue[0][0] > until_us:
                self.clock = max(self.clock, until_us)
                break
            self.step()
            steps += 1
        return steps

    def run_until(self, predicate: Callable[[], bool], deadline_us: int) -> bool:
        """Step until `predicate()` holds; False if the deadline or an empty queue comes first."""

        while not predicate():
            if not self._queue or self._queue[0][0] > deadline_us:
                return False
            self.step()
        return True


class ControlledNetwork(Transport):
    """
    A transport whose delivery order is chosen from outside, one link at a time. Used to enumerate
    interleavings: `enabled()` lists the links with a message waiting, `deliver(link)` delivers the
    head of that link. Messages to clients are delivered as soon as they are sent. Timers never fire.
    """

    def __init__(self, clients: set[Endpoint]) -> None:
        super().__init__()
        self.clients = clients
        self._links: dict[Link, deque[Envelope]] = {}
        self._link_seq: Counter[Link] = Counter()
        self._steps = 0

    def now_us(self) -> int:
        return self._steps

    def call_later(self, owner: Endpoint, delay_us: int, callback: Callback) -> None:
        pass

    def send(self, src: Endpoint, dst: Endpoint, msg: Message) -> None:
        link = (src, dst)
        self._link_seq[link] += 1
        env = Envelope(src, dst, self._link_seq[link], msg)
        for observer in self.send_observers:
            observer(env)
        if dst in self.clients:
            self.endpoints[dst].handle(env)
        else:
            self._links.setdefault(link, deque()).append(env)

    def enabled(self) -> list[Link]:
        return sorted(link for link, q in self._links.items() if q)

    def deliver(self, link: Link) -> None:
        self._steps += 1
        env = self._links[link].popleft()
        self.endpoints[env.dst].handle(env)
