from collections.abc import Callable

import pytest

from src.core import TxnId
from src.messages import Envelope, GetConfig, Message, StatusQuery
from src.transport import ControlledNetwork, Crash, DestinationCrashedError, Drop, Simulation


class Recorder:
    def __init__(self, clock: Callable[[], int] | None = None) -> None:
        self.received: list[tuple[int, Envelope]] = []
        self.clock = clock

    def handle(self, env: Envelope) -> None:
        self.received.append((self.clock() if self.clock else 0, env))

    def serve(self, msg: Message) -> Message:
        return msg


def network(seed: int = 0, service_us: int = 0) -> tuple[Simulation, Recorder]:
    sim = Simulation(seed, service_us=service_us)
    sink = Recorder(sim.now_us)
    sim.register("a", Recorder())
    sim.register("b", Recorder())
    sim.register("dst", sink, service=True)
    return sim, sink


def test_links_are_fifo():
    sim, sink = network()
    for i in range(50):
        sim.send("a", "dst", StatusQuery(TxnId(i)))
    sim.run()
    assert [env.body for _, env in sink.received] == [StatusQuery(TxnId(i)) for i in range(50)]
    assert [env.seq for _, env in sink.received] == list(range(1, 51))


def test_latency_is_within_range():
    sim, sink = network()
    sim.send("a", "dst", GetConfig())
    sim.run()
    ((at, _),) = sink.received
    assert 1000 <= at <= 5000


@pytest.mark.parametrize("seed", [0, 1, 17])
def test_same_seed_same_deliveries(seed: int):
    def trace() -> list[tuple[int, str, int]]:
        sim, sink = network(seed)
        for i in range(20):
            sim.send("a", "dst", StatusQuery(TxnId(i)))
            sim.send("b", "dst", StatusQuery(TxnId(i)))
        sim.run()
        return [(at, env.src, env.seq) for at, env in sink.received]

    assert trace() == trace()


def test_service_time_serializes_deliveries():
    sim, sink = network(service_us=10_000)
    for src in ("a", "b", "a"):
        sim.send(src, "dst", GetConfig())
    sim.run()
    times = [at for at, _ in sink.received]
    assert len(times) == 3
    assert all(later - earlier >= 10_000 for earlier, later in zip(times, times[1:]))


def test_crash_loses_in_flight_messages():
    sim, sink = network()
    sim.send("a", "dst", GetConfig())
    sim.inject_fault(0, Crash("dst"))
    sim.run()
    assert sink.received == []
    assert not sim.is_alive("dst")


def test_drop_fault():
    sim, sink = network()
    sim.inject_fault(0, Drop("a", "dst", 1))
    sim.run()
    sim.send("a", "dst", StatusQuery(TxnId(1)))
    sim.send("a", "dst", StatusQuery(TxnId(2)))
    sim.run()
    assert [env.body for _, env in sink.received] == [StatusQuery(TxnId(2))]


def test_timers_do_not_survive_a_crash():
    sim, _ = network()
    fired: list[str] = []
    sim.call_later("a", 100, lambda: fired.append("a"))
    sim.call_later("b", 100, lambda: fired.append("b"))
    sim.inject_fault(50, Crash("a"))
    sim.run()
    assert fired == ["b"]


def test_request_to_crashed_endpoint():
    sim, _ = network()
    assert sim.request("a", "dst", GetConfig(3)) == GetConfig(3)
    sim.inject_fault(0, Crash("dst"))
    sim.run()
    with pytest.raises(DestinationCrashedError):
        sim.request("a", "dst", GetConfig())


def test_run_until_deadline():
    sim, sink = network()
    sim.send("a", "dst", GetConfig())
    assert not sim.run_until(lambda: bool(sink.received), deadline_us=500)
    assert sim.run_until(lambda: bool(sink.received), deadline_us=10_000)


def test_controlled_network_delivers_on_demand():
    net = ControlledNetwork(clients={"c"})
    server, client = Recorder(), Recorder()
    net.register("s", server)
    net.register("c", client)

    net.send("c", "s", GetConfig(1))
    net.send("c", "s", GetConfig(2))
    net.send("s", "c", GetConfig(9))
    assert [env.body for _, env in client.received] == [GetConfig(9)]
    assert net.enabled() == [("c", "s")]

    net.deliver(("c", "s"))
    assert [env.body for _, env in server.received] == [GetConfig(1)]
    net.deliver(("c", "s"))
    assert net.enabled() == []
