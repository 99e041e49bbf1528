"""
graph_utils.py

A small typed wrapper over networkx directed graphs, so the rest of the package does not deal with an
untyped library directly.
"""

from collections.abc import Hashable, Iterator

import networkx as nx  # pyright: ignore[reportMissingTypeStubs]


class LabeledDiGraph[N: Hashable, L: Hashable]:
    """A directed graph whose edges carry a set of labels (parallel edges of different kinds merge)."""

    def __init__(self) -> None:
        self._graph = nx.DiGraph()

    def add_node(self, node: N) -> None:
        self._graph.add_node(node)  # pyright: ignore[reportUnknownMemberType]

    def add_edge(self, src: N, dst: N, label: L) -> None:
        if self._graph.has_edge(src, dst):  # pyright: ignore[reportUnknownMemberType]
            self._graph.edges[src, dst]["labels"].add(label)  # pyright: ignore[reportUnknownMemberType]
        else:
            self._graph.add_edge(src, dst, labels={label})  # pyright: ignore[reportUnknownMemberType]

    def labels(self, src: N, dst: N) -> frozenset[L]:
        if not self._graph.has_edge(src, dst):  # pyright: ignore[reportUnknownMemberType]
            return frozenset()
        return frozenset(self._graph.edges[src, dst]["labels"])  # pyright: ignore[reportUnknownMemberType, reportUnknownArgumentType]

    def nodes(self) -> Iterator[N]:
        return iter(self._graph.nodes)  # pyright: ignore[reportUnknownArgumentType, reportUnknownMemberType]

    def number_of_edges(self) -> int:
        return self._graph.number_of_edges()  # pyright: ignore[reportUnknownMemberType, reportUnknownVariableType]

    def find_cycle(self) -> list[N] | None:
        """Nodes of some directed cycle in order, rotated to start at the smallest node, or None."""

        try:
            edges = nx.find_cycle(self._graph, orientation="original")  # pyright: ignore[reportUnknownMemberType, reportUnknownVariableType]
        except nx.NetworkXNoCycle:  # pyright: ignore[reportUnknownMemberType]
            return None

        nodes: list[N] = [edge[0] for edge in edges]  # pyright: ignore[reportUnknownVariableType]
        start = nodes.index(min(nodes))  # pyright: ignore[reportArgumentType]
        return nodes[start:] + nodes[:start]
