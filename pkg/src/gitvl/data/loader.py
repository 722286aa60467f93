"""Trunk-based sharded streaming loader.

The dataset is split evenly across nodes; each node walks its shard trunk
by trunk. A trunk is shuffled on its own (cost independent of dataset size)
and split evenly among the node's ranks. One producer thread per node
prefetches at most ``prefetch_limit`` trunks ahead of the slowest rank and
keeps at most ``retain_limit`` trunks resident, evicting the oldest finished
trunk first. Delivery order depends only on ``(seed, topology)``, never on
thread timing.
"""

from __future__ import annotations

import bisect
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

DEFAULT_TRUNK_SIZE = 2**20
PREFETCH_LIMIT = 7
RETAIN_LIMIT = 12


def even_split(total: int, parts: int) -> list[tuple[int, int]]:
    """Contiguous ``[start, stop)`` ranges; sizes differ by at most one, larger ones first."""
    if parts < 1:
        raise ValueError("need at least one part")
    if total < 0:
        raise ValueError("total must be non-negative")
    base, rem = divmod(total, parts)
    out, start = [], 0
    for i in range(parts):
        size = base + (1 if i < rem else 0)
        out.append((start, start + size))
        start += size
    return out


def shard_pairs(total: int, nodes: int) -> list[tuple[int, int]]:
    """Per-node index ranges over ``[0, total)``."""
    return even_split(total, nodes)


def trunk_shuffle(items: Sequence[int] | range, seed: int, trunk_id: int, epoch: int = 0) -> list:
    """Permutation of ``items`` determined only by ``(seed, epoch, trunk_id)``."""
    items = list(items)
    rng = np.random.default_rng([seed, epoch, trunk_id])
    return [items[i] for i in rng.permutation(len(items))]


def rank_split(shuffled: Sequence, ranks: int) -> list[list]:
    """Even contiguous split of one shuffled trunk across ``ranks`` consumers."""
    return [list(shuffled[a:b]) for a, b in even_split(len(shuffled), ranks)]


@dataclass(frozen=True)
class TrunkManifest:
    """A node's shard as an ordered list of ``[start, stop)`` trunks."""

    node_id: int
    trunk_size: int
    trunks: tuple[tuple[int, int], ...]

    @classmethod
    def for_range(cls, node_id: int, start: int, stop: int, trunk_size: int = DEFAULT_TRUNK_SIZE) -> "TrunkManifest":
        if trunk_size < 1:
            raise ValueError("trunk_size must be positive")
        trunks = tuple((a, min(a + trunk_size, stop)) for a in range(start, stop, trunk_size))
        return cls(node_id, trunk_size, trunks)

    @classmethod
    def for_nodes(cls, total: int, nodes: int, trunk_size: int = DEFAULT_TRUNK_SIZE) -> list["TrunkManifest"]:
        return [cls.for_range(i, a, b, trunk_size) for i, (a, b) in enumerate(shard_pairs(total, nodes))]

    def __len__(self) -> int:
        return len(self.trunks)

    @property
    def n_items(self) -> int:
        return sum(b - a for a, b in self.trunks)

    def validate(self) -> None:
        for i, (a, b) in enumerate(self.trunks):
            if b <= a:
                raise ValueError(f"trunk {i} is empty")
            if i and self.trunks[i - 1][1] != a:
                raise ValueError(f"trunk {i} does not start where trunk {i - 1} ends")
            if i < len(self.trunks) - 1 and b - a != self.trunk_size:
                raise ValueError(f"trunk {i} has {b - a} items, expected {self.trunk_size}")
            if b - a > self.trunk_size:
                raise ValueError(f"trunk {i} exceeds trunk_size")


@dataclass
class LoaderStats:
    max_prefetch_lead: int = 0
    max_resident: int = 0
    stall_count: int = 0
    stall_seconds: float = 0.0
    fetched: int = 0
    evicted: int = 0
    delivered: list[int] = field(default_factory=list)


def _default_fetch(trunk: tuple[int, int]) -> list:
    return list(range(*trunk))


class EndOfEpoch(Exception):
    pass


class TrunkLoader:
    """Producer/consumer loader for one node.

    ``fetch(trunk_range) -> list of items`` stands in for downloading a trunk;
    by default the items are the global indices themselves. ``fetch_delay``
    and ``consume_delay`` inject latency (seconds) for simulations.

    Every rank stream must be drained by its own thread (or via :meth:`run`):
    the prefetch window is anchored at the slowest rank, so a rank that runs
    far ahead blocks until the others catch up.
    """

    def __init__(self, manifest: TrunkManifest, ranks: int, seed: int = 0, *,
                 fetch: Callable[[tuple[int, int]], list] | None = None,
                 prefetch_limit: int = PREFETCH_LIMIT, retain_limit: int = RETAIN_LIMIT,
                 epoch: int = 0, shuffle_trunk_order: bool = False,
                 fetch_delay: Callable[[int], float] | None = None,
                 timeout: float = 60.0):
        if ranks < 1:
            raise ValueError("ranks must be at least 1")
        if retain_limit < prefetch_limit + 1:
            raise ValueError("retain_limit must leave room for the current trunk plus the prefetch window")
        manifest.validate()
        self.manifest = manifest
        self.ranks = ranks
        self.seed = seed
        self.fetch = fetch or _default_fetch
        self.prefetch_limit = prefetch_limit
        self.retain_limit = retain_limit
        self.fetch_delay = fetch_delay
        self.timeout = timeout
        n = len(manifest)
        order = list(range(n))
        if shuffle_trunk_order:
            order = [int(i) for i in np.random.default_rng([seed, epoch, n]).permutation(n)]
        self.order = order  # position -> trunk id
        self.epoch = epoch
        self.stats = LoaderStats(delivered=[0] * ranks)
        self._cond = threading.Condition()
        self._resident: dict[int, list[list]] = {}  # position -> per-rank item lists
        self._resident_fifo: list[int] = []
        self._rank_pos = [0] * ranks
        self._error: BaseException | None = None
        self._producer: threading.Thread | None = None

    # -- producer ----------------------------------------------------------

    def _current(self) -> int:
        return min(self._rank_pos)

    def _produce(self) -> None:
        try:
            for pos, trunk_id in enumerate(self.order):
                with self._cond:
                    while True:
                        cur = self._current()
                        if pos - cur <= self.prefetch_limit:
                            if len(self._resident) < self.retain_limit:
                                break
                            old = self._resident_fifo[0]
                            if old < cur:
                                self._resident_fifo.pop(0)
                                del self._resident[old]
                                self.stats.evicted += 1
                                continue
                        if not self._cond.wait(self.timeout):
                            raise TimeoutError("producer starved: ranks are not consuming")
                if self.fetch_delay is not None:
                    time.sleep(self.fetch_delay(trunk_id))
                items = self.fetch(self.manifest.trunks[trunk_id])
                split = rank_split(trunk_shuffle(items, self.seed, trunk_id, self.epoch), self.ranks)
                with self._cond:
                    self._resident[pos] = split
                    self._resident_fifo.append(pos)
                    self.stats.fetched += 1
                    self.stats.max_resident = max(self.stats.max_resident, len(self._resident))
                    self.stats.max_prefetch_lead = max(self.stats.max_prefetch_lead, pos - self._current())
                    self._cond.notify_all()
        except BaseException as exc:  # surfaced to consumers
            with self._cond:
                self._error = exc
                self._cond.notify_all()

    def start(self) -> "TrunkLoader":
        if self._producer is None:
            self._producer = threading.Thread(target=self._produce, name=f"prefetch-node{self.manifest.node_id}",
                                              daemon=True)
            self._producer.start()
        return self

    # -- consumers ---------------------------------------------------------

    def stream(self, rank: int, consume_delay: Callable[[], float] | None = None) -> Iterator:
        """Items for ``rank``, trunk by trunk, ending with StopIteration at epoch end."""
        self.start()
        for pos in range(len(self.order)):
            with self._cond:
                if pos not in self._resident:
                    self.stats.stall_count += 1
                    t0 = time.perf_counter()
                    while pos not in self._resident:
                        if self._error is not None:
                            raise RuntimeError("trunk producer failed") from self._error
                        if not self._cond.wait(self.timeout):
                            raise TimeoutError(f"rank {rank} waited {self.timeout}s for trunk position {pos}")
                    self.stats.stall_seconds += time.perf_counter() - t0
                items = self._resident[pos][rank]
            for item in items:
                if consume_delay is not None:
                    d = consume_delay()
                    if d:
                        time.sleep(d)
                with self._cond:
                    self.stats.delivered[rank] += 1
                yield item
            with self._cond:
                self._rank_pos[rank] = pos + 1
                self._cond.notify_all()

    def streams(self) -> list[Iterator]:
        return [self.stream(r) for r in range(self.ranks)]

    def run(self, consume: Callable[[int, object], None] | None = None,
            consume_delay: Callable[[int], Callable[[], float]] | None = None) -> list[list]:
        """Drain every rank on its own thread; returns per-rank delivery lists."""
        out: list[list] = [[] for _ in range(self.ranks)]
        errors: list[BaseException] = []

        def worker(r: int) -> None:
            try:
                delay = consume_delay(r) if consume_delay is not None else None
                for item in self.stream(r, delay):
                    out[r].append(item)
                    if consume is not None:
                        consume(r, item)
            except BaseException as exc:
                errors.append(exc)

        threads = [threading.Thread(target=worker, args=(r,), name=f"rank{r}") for r in range(self.ranks)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if self._producer is not None:
            self._producer.join(self.timeout)
        if errors:
            raise errors[0]
        return out


def stream_epoch(manifest: TrunkManifest, ranks: int, seed: int = 0, **kwargs) -> list[Iterator]:
    """Start a loader for one node and return one item iterator per rank."""
    return TrunkLoader(manifest, ranks, seed, **kwargs).start().streams()


def delivery_order(total: int, nodes: int, ranks: int, trunk_size: int, seed: int = 0,
                   epoch: int = 0) -> list[list[list]]:
    """Expected ``[node][rank] -> items`` computed without threads (reference order)."""
    out = []
    for m in TrunkManifest.for_nodes(total, nodes, trunk_size):
        per_rank: list[list] = [[] for _ in range(ranks)]
        for tid, trunk in enumerate(m.trunks):
            for r, part in enumerate(rank_split(trunk_shuffle(range(*trunk), seed, tid, epoch), ranks)):
                per_rank[r].extend(part)
        out.append(per_rank)
    return out


@dataclass
class Timeline:
    """Outcome of :func:`simulate_timeline` for one node (times in seconds)."""

    ready: list[float]                 # when each trunk position became resident
    finished: list[list[float]]        # [rank][pos] -> time the rank finished that trunk
    stall_seconds: list[float]         # per rank, waiting on a fetch in flight
    stall_count: list[int]             # per rank: trunks whose fetch the rank had to wait for
    backpressure_seconds: list[float]  # per rank, waiting for slower ranks to open the window
    max_prefetch_lead: int

    @property
    def makespan(self) -> float:
        return max((row[-1] for row in self.finished if row), default=0.0)


def simulate_timeline(trunk_sizes: Sequence[int], ranks: int,
                      fetch_latency: Callable[[int], float],
                      consume_latency: Callable[[int, int], float],
                      prefetch_limit: int = PREFETCH_LIMIT) -> Timeline:
    """Virtual-clock model of the loader's scheduling policy.

    The producer fetches positions in order, one at a time, and may start
    position ``p`` only once every rank has finished position
    ``p - prefetch_limit - 1``. Rank ``r`` works through its share of each
    trunk, spending ``consume_latency(r, pos)`` per item. No threads and no
    wall clock are involved, so the figures are exact.

    A rank's idle time splits in two. Time spent after the fetch of the
    trunk it needs has started counts as a stall; with zero fetch latency
    there is none. Time spent before that, while the window is held shut by
    a slower rank, counts as backpressure.
    """
    n = len(trunk_sizes)
    ready = [0.0] * n
    finished = [[0.0] * n for _ in range(ranks)]
    stall_s = [0.0] * ranks
    stall_n = [0] * ranks
    back_s = [0.0] * ranks
    lead = 0
    for p in range(n):
        start = ready[p - 1] if p else 0.0
        gate = p - prefetch_limit - 1
        if gate >= 0:
            start = max(start, max(finished[r][gate] for r in range(ranks)))
        ready[p] = start + fetch_latency(p)
        shares = [b - a for a, b in even_split(trunk_sizes[p], ranks)]
        for r in range(ranks):
            free_at = finished[r][p - 1] if p else 0.0
            if start > free_at:
                back_s[r] += start - free_at
            fetch_wait = ready[p] - max(free_at, start)
            if fetch_wait > 0:
                stall_s[r] += fetch_wait
                stall_n[r] += 1
            finished[r][p] = max(free_at, ready[p]) + shares[r] * consume_latency(r, p)
    # lead when each trunk lands, measured against the slowest rank (finish times are sorted per rank)
    for p in range(n):
        slowest = min(bisect.bisect_right(finished[r], ready[p]) for r in range(ranks))
        lead = max(lead, p - slowest)
    return Timeline(ready, finished, stall_s, stall_n, back_s, lead)
