"""Directed capacitated road networks with fixed latencies.

Holds the graph container shared by every other module, the TNTP reader,
and the shortest-path machinery.  Path searches use a deterministic
tie-break: among equal-cost paths the lexicographically smallest edge-id
sequence wins when every edge cost is positive.  A (near) zero-cost edge
is only followed if it shortens the hop count to the target, which keeps
ties on zero-cost cycles from looping.  The batched search used by the equilibrium and pricing
code is compiled with numba.
"""
from __future__ import annotations

import heapq
import re
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numba
import numpy as np

# relative tolerance under which two path costs count as tied
TIE_RTOL = 1e-10


class TntpParseError(ValueError):
    """Raised for malformed TNTP input; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class Edge:
    id: int
    tail: int
    head: int
    latency: float
    capacity: float


@dataclass(frozen=True)
class Path:
    """A simple directed path, stored as edge ids."""

    edges: tuple[int, ...]
    origin: int
    destination: int
    latency: float

    def __len__(self) -> int:
        return len(self.edges)

    def __contains__(self, edge_id) -> bool:
        return edge_id in self.edges


class PathList(list):
    """List of paths plus a flag telling whether the enumeration was complete."""

    def __init__(self, paths=(), exhaustive: bool = False):
        super().__init__(paths)
        self.exhaustive = exhaustive


@dataclass(frozen=True, eq=False)
class Network:
    """Immutable directed graph.

    Edge attributes are stored as parallel numpy arrays indexed by edge id.
    `node_offset` is what was subtracted from file node labels (1 for TNTP).
    """

    node_count: int
    tail: np.ndarray
    head: np.ndarray
    latency: np.ndarray
    capacity: np.ndarray
    node_offset: int = 0
    name: str = ""
    out_ptr: np.ndarray = field(init=False, repr=False)
    out_edges: np.ndarray = field(init=False, repr=False)
    in_ptr: np.ndarray = field(init=False, repr=False)
    in_edges: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = int(self.node_count)
        if n < 1:
            raise ValueError("node_count must be positive")
        tail = np.asarray(self.tail, dtype=np.int64).copy()
        head = np.asarray(self.head, dtype=np.int64).copy()
        lat = np.asarray(self.latency, dtype=float).copy()
        cap = np.asarray(self.capacity, dtype=float).copy()
        m = len(tail)
        if not (len(head) == len(lat) == len(cap) == m):
            raise ValueError("edge arrays must have equal length")
        if m and (tail.min() < 0 or head.min() < 0 or tail.max() >= n or head.max() >= n):
            raise ValueError("edge references a node outside [0, node_count)")
        if np.any(lat < 0) or not np.all(np.isfinite(lat)):
            raise ValueError("latencies must be finite and nonnegative")
        if np.any(cap <= 0):
            raise ValueError("capacities must be positive")
        out_ptr, out_edges = _csr(tail, n)
        in_ptr, in_edges = _csr(head, n)
        for name, arr in [("tail", tail), ("head", head), ("latency", lat), ("capacity", cap),
                          ("out_ptr", out_ptr), ("out_edges", out_edges),
                          ("in_ptr", in_ptr), ("in_edges", in_edges)]:
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "node_count", n)

    @classmethod
    def from_edges(cls, node_count, edges, name=""):
        """Build from an iterable of (tail, head, latency, capacity) tuples."""
        edges = list(edges)
        if not edges:
            return cls(node_count, np.zeros(0, int), np.zeros(0, int), np.zeros(0), np.zeros(0), name=name)
        t, h, l, c = zip(*edges)
        return cls(node_count, np.array(t), np.array(h), np.array(l, float), np.array(c, float), name=name)

    @property
    def edge_count(self) -> int:
        return len(self.tail)

    @property
    def edges(self) -> list[Edge]:
        return [Edge(i, int(self.tail[i]), int(self.head[i]), float(self.latency[i]), float(self.capacity[i]))
                for i in range(self.edge_count)]

    def out_edge_ids(self, node: int) -> np.ndarray:
        return self.out_edges[self.out_ptr[node]:self.out_ptr[node + 1]]

    def with_capacity(self, capacity) -> "Network":
        return Network(self.node_count, self.tail, self.head, self.latency, capacity,
                       node_offset=self.node_offset, name=self.name)

    def path(self, edge_ids: Sequence[int]) -> Path:
        """Validate an edge sequence and wrap it as a Path."""
        edge_ids = tuple(int(e) for e in edge_ids)
        if not edge_ids:
            raise ValueError("a path needs at least one edge")
        nodes = [int(self.tail[edge_ids[0]])]
        for k, e in enumerate(edge_ids):
            if self.tail[e] != nodes[-1]:
                raise ValueError(f"edge {e} does not continue the path at position {k}")
            nodes.append(int(self.head[e]))
        if len(set(nodes)) != len(nodes):
            raise ValueError("path revisits a node")
        lat = float(sum(self.latency[e] for e in edge_ids))
        return Path(edge_ids, nodes[0], nodes[-1], lat)

    def path_nodes(self, path: Path) -> list[int]:
        return [path.origin] + [int(self.head[e]) for e in path.edges]


def _csr(keys, n):
    order = np.argsort(keys, kind="stable")
    counts = np.bincount(keys, minlength=n)
    ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=ptr[1:])
    return ptr, order.astype(np.int64)


# --------------------------------------------------------------------------
# TNTP input

_META = re.compile(r"<([^>]+)>\s*(.*)")


def _parse_metadata(lines):
    meta = {}
    for i, raw in enumerate(lines):
        line = raw.strip()
        if not line or line.startswith("~"):
            continue
        m = _META.match(line)
        if not m:
            raise TntpParseError("expected a <TAG> metadata line", i + 1)
        tag = m.group(1).strip().upper()
        if tag == "END OF METADATA":
            return meta, i + 1
        meta[tag] = m.group(2).strip()
    raise TntpParseError("missing <END OF METADATA>", len(lines))


def _meta_int(meta, tag, line):
    if tag not in meta:
        raise TntpParseError(f"missing <{tag}> header", line)
    try:
        return int(float(meta[tag]))
    except ValueError:
        raise TntpParseError(f"<{tag}> is not a number", line) from None


def load_tntp(net_text: str, trips_text: str = "", time_scale: float = 1.0, name: str = ""):
    """Parse TNTP network and trip-table text.

    Edge latency is ``length / speed`` when the speed column is positive and the
    free-flow time otherwise, multiplied by `time_scale` (use it to convert the
    file's time unit to hours).  Node labels are 1-based in the files and
    0-based in the returned network.

    Returns
    -------
    (Network, dict)
        The dict maps ``(origin, destination)`` to nonnegative demand, keeping
        only positive entries.
    """
    lines = net_text.splitlines()
    meta, start = _parse_metadata(lines)
    n_nodes = _meta_int(meta, "NUMBER OF NODES", start)
    n_links = _meta_int(meta, "NUMBER OF LINKS", start)
    rows = []
    for i in range(start, len(lines)):
        line = lines[i].strip()
        if not line or line.startswith("~"):
            continue
        parts = line.rstrip(";").split()
        if len(parts) < 5:
            raise TntpParseError("link record needs at least 5 fields", i + 1)
        try:
            vals = [float(p) for p in parts[:10]]
        except ValueError:
            raise TntpParseError("non-numeric link field", i + 1) from None
        a, b = int(vals[0]), int(vals[1])
        if not (1 <= a <= n_nodes and 1 <= b <= n_nodes):
            raise TntpParseError(f"link {a}->{b} references an unknown node", i + 1)
        cap, length, fft = vals[2], vals[3], vals[4]
        if cap <= 0:
            raise TntpParseError("capacity must be positive", i + 1)
        speed = vals[7] if len(vals) > 7 else 0.0
        lat = length / speed if speed > 0 else fft
        if lat < 0:
            raise TntpParseError("negative travel time", i + 1)
        rows.append((a - 1, b - 1, lat * time_scale, cap))
    if len(rows) != n_links:
        raise TntpParseError(f"header promises {n_links} links, found {len(rows)}", len(lines))
    net = Network.from_edges(n_nodes, rows, name=name)
    object.__setattr__(net, "node_offset", 1)
    return net, parse_trips(trips_text, n_nodes)


def parse_trips(text: str, node_count: int | None = None) -> dict[tuple[int, int], float]:
    demand: dict[tuple[int, int], float] = {}
    if not text.strip():
        return demand
    lines = text.splitlines()
    if any(l.strip().startswith("<") for l in lines):
        _, start = _parse_metadata(lines)
    else:
        start = 0
    origin = None
    for i in range(start, len(lines)):
        line = lines[i].split("~", 1)[0].strip()
        if not line:
            continue
        if line.lower().startswith("origin"):
            try:
                origin = int(line.split()[1]) - 1
            except (IndexError, ValueError):
                raise TntpParseError("bad Origin line", i + 1) from None
            if node_count is not None and not 0 <= origin < node_count:
                raise TntpParseError(f"origin {origin + 1} out of range", i + 1)
            continue
        if origin is None:
            raise TntpParseError("demand entry before any Origin line", i + 1)
        for chunk in line.split(";"):
            chunk = chunk.strip()
            if not chunk:
                continue
            try:
                d, v = (s.strip() for s in chunk.split(":"))
                dest, val = int(d) - 1, float(v)
            except ValueError:
                raise TntpParseError(f"bad demand entry {chunk!r}", i + 1) from None
            if node_count is not None and not 0 <= dest < node_count:
                raise TntpParseError(f"destination {dest + 1} out of range", i + 1)
            if val < 0:
                raise TntpParseError("negative demand", i + 1)
            if val > 0 and dest != origin:
                demand[(origin, dest)] = demand.get((origin, dest), 0.0) + val
    return demand


# --------------------------------------------------------------------------
# Shortest paths


@numba.njit(cache=True)
def _reverse_tree(n, in_ptr, in_edges, out_ptr, out_edges, tail, head, w, target, dist, hops, succ):
    """Costs to `target` plus the lexicographic successor edge of every node.

    The successor of node i is the smallest-id edge that starts some
    minimum-cost i->target path; following successors from any node therefore
    yields the lexicographically smallest optimal edge sequence when all
    weights are positive.  Near-zero edges additionally need a hop decrease,
    which rules out cycling.
    """
    inf = np.inf
    for i in range(n):
        dist[i] = inf
        hops[i] = n + 1
        succ[i] = -1
    done = np.zeros(n, np.bool_)
    dist[target] = 0.0
    hops[target] = 0
    for _ in range(n):
        j = -1
        best = inf
        for i in range(n):
            if not done[i] and dist[i] < best:
                best = dist[i]
                j = i
        if j < 0:
            break
        done[j] = True
        for k in range(in_ptr[j], in_ptr[j + 1]):
            e = in_edges[k]
            i = tail[e]
            nd = dist[j] + w[e]
            tol = TIE_RTOL * (1.0 + abs(nd))
            if nd < dist[i] - tol:
                dist[i] = nd
                hops[i] = hops[j] + 1
            elif nd <= dist[i] + tol and hops[j] + 1 < hops[i]:
                hops[i] = hops[j] + 1
    for i in range(n):
        if i == target or dist[i] == inf:
            continue
        tol = TIE_RTOL * (1.0 + abs(dist[i]))
        bestk = -1
        for k in range(out_ptr[i], out_ptr[i + 1]):
            e = out_edges[k]
            h = head[e]
            if dist[h] == inf:
                continue
            if w[e] + dist[h] <= dist[i] + tol:
                if w[e] <= tol and hops[h] >= hops[i]:
                    continue
                if bestk < 0 or e < bestk:
                    bestk = e
        succ[i] = bestk


@numba.njit(cache=True)
def _tree_at(q, n, in_ptr, in_edges, out_ptr, out_edges, tail, head, lat, tolls, targets, vots, w, dist, hops, succ):
    v = vots[q]
    for e in range(len(lat)):
        w[e] = v * lat[e] + tolls[e]
    _reverse_tree(n, in_ptr, in_edges, out_ptr, out_edges, tail, head, w, targets[q], dist, hops, succ[q])


@numba.njit(cache=True)
def _batched_trees(n, in_ptr, in_edges, out_ptr, out_edges, tail, head, lat, tolls, targets, vots, order, min_lat):
    """Successor arrays for every (target, vot) row.

    `order` sorts rows by (target, vot).  Within one target the optimal
    successor of every node is piecewise constant in the VoT, and a
    successor array that agrees at two VoTs is also the answer at every VoT
    between them (path costs are linear in the VoT, distances concave), so
    rows are filled by bisection instead of one search each.
    """
    r = len(targets)
    m = len(lat)
    succ = np.empty((r, n), np.int64)
    dist = np.empty(n)
    hops = np.empty(n, np.int64)
    w = np.empty(m)
    done = np.zeros(r, np.bool_)
    stack = np.empty((2 * r + 2, 2), np.int64)
    s = 0
    while s < r:
        t = targets[order[s]]
        e = s
        while e + 1 < r and targets[order[e + 1]] == t:
            e += 1
        # rows whose VoT is so small that near-zero edge weights could appear are done one by one
        a0 = s
        while a0 <= e and vots[order[a0]] * min_lat <= 1e-8:
            _tree_at(order[a0], n, in_ptr, in_edges, out_ptr, out_edges, tail, head, lat, tolls, targets, vots,
                     w, dist, hops, succ)
            done[order[a0]] = True
            a0 += 1
        if a0 <= e:
            for q in (order[a0], order[e]):
                if not done[q]:
                    _tree_at(q, n, in_ptr, in_edges, out_ptr, out_edges, tail, head, lat, tolls, targets, vots,
                             w, dist, hops, succ)
                    done[q] = True
            top = 0
            stack[0, 0] = a0
            stack[0, 1] = e
            top = 1
            while top > 0:
                top -= 1
                a = stack[top, 0]
                b = stack[top, 1]
                if b - a <= 1:
                    continue
                qa = order[a]
                qb = order[b]
                same = True
                for i in range(n):
                    if succ[qa, i] != succ[qb, i]:
                        same = False
                        break
                if same:
                    for k in range(a + 1, b):
                        succ[order[k]] = succ[qa]
                        done[order[k]] = True
                else:
                    mid = (a + b) // 2
                    _tree_at(order[mid], n, in_ptr, in_edges, out_ptr, out_edges, tail, head, lat, tolls,
                             targets, vots, w, dist, hops, succ)
                    done[order[mid]] = True
                    stack[top, 0] = a
                    stack[top, 1] = mid
                    stack[top + 1, 0] = mid
                    stack[top + 1, 1] = b
                    top += 2
        s = e + 1
    return succ


@numba.njit(cache=True)
def _trace_paths(succ, head, rows, origins, targets, n):
    """Follow successor arrays; returns (lengths, flat edge ids)."""
    qn = len(rows)
    lengths = np.zeros(qn, np.int64)
    flat = np.empty(qn * max(n - 1, 1), np.int64)
    pos = 0
    for q in range(qn):
        node = origins[q]
        row = rows[q]
        steps = 0
        while node != targets[q]:
            e = succ[row, node]
            if e < 0:
                lengths[q] = -1
                break
            flat[pos] = e
            pos += 1
            steps += 1
            if steps > n:
                raise RuntimeError("successor walk did not terminate")
            node = head[e]
        if lengths[q] != -1:
            lengths[q] = steps
    return lengths, flat[:pos]


@numba.njit(cache=True)
def factorize_rows(a, b, c, d):
    """Codes of distinct rows of four int64 columns, numbered by first appearance."""
    n = len(a)
    size = 1
    while size < 2 * n + 2:
        size *= 2
    table = np.full(size, -1, np.int64)
    inverse = np.empty(n, np.int64)
    first = np.empty(n, np.int64)
    k = 0
    for i in range(n):
        h = np.uint64(1469598103934665603)
        for x in (a[i], b[i], c[i], d[i]):
            h = (h ^ np.uint64(x)) * np.uint64(1099511628211)
            h ^= h >> np.uint64(29)
        slot = np.int64(h & np.uint64(size - 1))
        while True:
            j = table[slot]
            if j < 0:
                table[slot] = k
                first[k] = i
                inverse[i] = k
                k += 1
                break
            r = first[j]
            if a[r] == a[i] and b[r] == b[i] and c[r] == c[i] and d[r] == d[i]:
                inverse[i] = j
                break
            slot = (slot + 1) & (size - 1)
    return inverse, first[:k]


class PathBatch(NamedTuple):
    """Cheapest paths for a batch of (origin, destination, value-of-time) queries.

    ``cost[q]`` is ``inf`` and ``length[q]`` is -1 for unreachable queries;
    path q's edges are ``edges[indptr[q]:indptr[q+1]]``.
    """

    cost: np.ndarray
    latency: np.ndarray
    indptr: np.ndarray
    edges: np.ndarray

    def path_edges(self, q: int) -> np.ndarray:
        return self.edges[self.indptr[q]:self.indptr[q + 1]]

    def edge_loads(self, counts, edge_count: int) -> np.ndarray:
        """Per-edge total of `counts` over the queries' paths."""
        lengths = np.diff(self.indptr)
        weights = np.repeat(np.asarray(counts, dtype=float), lengths)
        return np.bincount(self.edges, weights=weights, minlength=edge_count)


def cheapest_paths(net: Network, origins, destinations, vots, tolls=None) -> PathBatch:
    """Batched best paths under per-query edge costs ``vot * latency + toll``.

    Queries sharing a (destination, value-of-time) pair share one reverse
    search.  Ties follow the module-level rule.
    """
    origins = np.asarray(origins, dtype=np.int64)
    destinations = np.asarray(destinations, dtype=np.int64)
    vots = np.asarray(vots, dtype=float)
    qn = len(origins)
    tolls = np.zeros(net.edge_count) if tolls is None else np.asarray(tolls, dtype=float)
    if qn == 0:
        return PathBatch(np.zeros(0), np.zeros(0), np.zeros(1, np.int64), np.zeros(0, np.int64))
    if np.any(origins == destinations):
        raise ValueError("origin equals destination")
    zero = np.zeros(qn, np.int64)
    rows, first = factorize_rows(destinations, (vots + 0.0).view(np.int64), zero, zero)
    targets, tvots = destinations[first], vots[first]
    order = np.lexsort((tvots, targets))
    pos = net.latency[net.latency > 0]
    min_lat = float(pos.min()) if pos.size else 0.0
    succ = _batched_trees(net.node_count, net.in_ptr, net.in_edges, net.out_ptr, net.out_edges,
                          net.tail, net.head, net.latency, tolls, targets, tvots, order, min_lat)
    lengths, flat = _trace_paths(succ, net.head, rows, origins, destinations, net.node_count)
    # recompute cost from the traced edges so reported costs are exact path sums
    reach = lengths >= 0
    lens = np.where(reach, lengths, 0)
    indptr = np.zeros(qn + 1, dtype=np.int64)
    np.cumsum(lens, out=indptr[1:])
    seg = np.repeat(np.arange(qn), lens)
    # astype: bincount returns ints when no path has any edges
    lat = np.bincount(seg, weights=net.latency[flat], minlength=qn).astype(float)
    toll = np.bincount(seg, weights=tolls[flat], minlength=qn).astype(float)
    cost = vots * lat + toll
    cost[~reach] = np.inf
    lat[~reach] = np.inf
    return PathBatch(cost, lat, indptr, flat)


def shortest_path(net: Network, origin: int, destination: int, edge_cost=None):
    """Minimum-cost simple path from `origin` to `destination`.

    `edge_cost` defaults to the latencies.  Returns ``(Path, cost)``, or
    ``None`` when the destination is unreachable.
    """
    if origin == destination:
        raise ValueError("origin and destination coincide")
    cost = net.latency if edge_cost is None else np.asarray(edge_cost, dtype=float)
    if cost.shape != (net.edge_count,):
        raise ValueError("edge_cost must have one entry per edge")
    if np.any(cost < 0):
        raise ValueError("edge costs must be nonnegative")
    n = net.node_count
    dist = np.empty(n)
    hops = np.empty(n, np.int64)
    succ = np.empty(n, np.int64)
    _reverse_tree(n, net.in_ptr, net.in_edges, net.out_ptr, net.out_edges, net.tail, net.head,
                  cost, destination, dist, hops, succ)
    if not np.isfinite(dist[origin]):
        return None
    edges = []
    node = origin
    while node != destination:
        e = int(succ[node])
        edges.append(e)
        node = int(net.head[e])
    path = net.path(edges)
    return path, float(sum(cost[e] for e in edges))


def enumerate_paths(net: Network, origin: int, destination: int, limit: int = 100) -> PathList:
    """Up to `limit` simple paths in nondecreasing latency order.

    Best-first search over partial simple paths, guided by the unrestricted
    latency-to-destination (a consistent lower bound), so complete paths come
    out in (latency, edge sequence) order.  The result is flagged exhaustive
    when no further simple path exists.
    """
    if limit < 1:
        raise ValueError("limit must be at least 1")
    if origin == destination:
        return PathList([], exhaustive=True)
    n = net.node_count
    dist = np.empty(n)
    hops = np.empty(n, np.int64)
    succ = np.empty(n, np.int64)
    _reverse_tree(n, net.in_ptr, net.in_edges, net.out_ptr, net.out_edges, net.tail, net.head,
                  net.latency, destination, dist, hops, succ)
    if not np.isfinite(dist[origin]):
        return PathList([], exhaustive=True)
    lat = net.latency
    heap = [(round(float(dist[origin]), 10), (), origin, 0.0, frozenset([origin]))]
    found = []
    while heap and len(found) <= limit:
        f, seq, node, g, visited = heapq.heappop(heap)
        if node == destination:
            found.append(seq)
            continue
        for e in net.out_edge_ids(node):
            h = int(net.head[e])
            if h in visited or not np.isfinite(dist[h]):
                continue
            g2 = g + float(lat[e])
            heapq.heappush(heap, (round(g2 + float(dist[h]), 10), seq + (int(e),), h, g2, visited | {h}))
    exhaustive = len(found) <= limit
    return PathList([net.path(s) for s in found[:limit]], exhaustive=exhaustive)
