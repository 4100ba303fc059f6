"""Embedded partitioned message queue.

Topics are split into partitions; a message goes to partition
``fnv1a_64(key) % partition_count`` so every message of one key is totally
ordered.  Master topics additionally keep a compacted view (latest payload
per key, tombstones removed) that serves :meth:`Broker.snapshot`.

Consumer groups get partitions by range assignment.  Any membership change
bumps the group generation and queues a :class:`Rebalance` control event
for every member; :meth:`Broker.poll` hands that event out before any
message, so a consumer always learns about newly gained partitions first.

A small shared key-value register (``put_shared``/``get_shared``) lives
next to the queues and outlives any consumer.

With ``persist_dir`` set, partition logs, committed offsets and the shared
register are appended to newline-delimited JSON files and reloaded on the
next open.
"""

from __future__ import annotations

import base64
import json
import os
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator

from .hashing import partition_for

TopicPartition = tuple[str, int]


class BrokerError(Exception):
    pass


class UnknownTopicError(BrokerError):
    pass


class BrokerUsageError(BrokerError):
    pass


class BrokerUnavailable(BrokerError):
    """Raised while the broker is marked unavailable (fault injection)."""


class Nature(str, Enum):
    MASTER = "MASTER"
    OPERATIONAL = "OPERATIONAL"


@dataclass(frozen=True)
class Topic:
    name: str
    partition_count: int
    nature: Nature

    def __post_init__(self) -> None:
        if self.partition_count < 1:
            raise ValueError("partition_count must be >= 1")


@dataclass(frozen=True)
class Message:
    topic: str
    partition: int
    offset: int
    key: str
    payload: bytes
    tombstone: bool = False
    headers: tuple[tuple[str, str], ...] = ()

    def header(self, name: str) -> str | None:
        for k, v in self.headers:
            if k == name:
                return v
        return None


@dataclass(frozen=True)
class Assignment:
    group: str
    consumer_id: str
    partitions: frozenset[TopicPartition]
    generation: int


@dataclass(frozen=True)
class Rebalance:
    """Control event: the consumer's partitions changed."""

    assignment: Assignment


def range_assign(
    partitions_by_topic: dict[str, int], consumer_ids: Iterable[str]
) -> dict[str, frozenset[TopicPartition]]:
    """Range assignment: per topic, sorted partitions split into contiguous
    chunks over sorted consumer ids, earlier consumers taking the remainder."""
    consumers = sorted(set(consumer_ids))
    result: dict[str, set[TopicPartition]] = {c: set() for c in consumers}
    if not consumers:
        return {}
    for topic in sorted(partitions_by_topic):
        n = partitions_by_topic[topic]
        per, extra = divmod(n, len(consumers))
        start = 0
        for i, consumer in enumerate(consumers):
            count = per + (1 if i < extra else 0)
            result[consumer].update((topic, p) for p in range(start, start + count))
            start += count
    return {c: frozenset(ps) for c, ps in result.items()}


@dataclass
class _Partition:
    messages: list[Message] = field(default_factory=list)


@dataclass
class _Member:
    topics: tuple[str, ...]
    assignment: Assignment | None = None
    positions: dict[TopicPartition, int] = field(default_factory=dict)
    pending: Rebalance | None = None
    history: list[Assignment] = field(default_factory=list)
    rr: int = 0


@dataclass
class _Group:
    members: dict[str, _Member] = field(default_factory=dict)
    committed: dict[TopicPartition, int] = field(default_factory=dict)
    generation: int = 0


def _encode_payload(payload: bytes) -> dict[str, str]:
    try:
        return {"payload": payload.decode("utf-8")}
    except UnicodeDecodeError:
        return {"payload_b64": base64.b64encode(payload).decode("ascii")}


def _decode_payload(obj: dict) -> bytes:
    if "payload_b64" in obj:
        return base64.b64decode(obj["payload_b64"])
    return obj["payload"].encode("utf-8")


class Broker:
    """Thread-safe in-process broker."""

    def __init__(self, persist_dir: str | os.PathLike[str] | None = None) -> None:
        self._lock = threading.RLock()
        self._cond = threading.Condition(self._lock)
        self._topics: dict[str, Topic] = {}
        self._partitions: dict[TopicPartition, _Partition] = {}
        self._compacted: dict[str, dict[str, Message]] = {}
        self._groups: dict[str, _Group] = defaultdict(_Group)
        self._shared: dict[str, bytes] = {}
        self._available = True
        self.ownership_log: list[tuple[str, int, dict[str, frozenset[TopicPartition]]]] = []
        self._dir = Path(persist_dir) if persist_dir is not None else None
        self._files: dict[str, object] = {}
        if self._dir is not None:
            self._dir.mkdir(parents=True, exist_ok=True)
            self._load()

    # -- persistence ---------------------------------------------------

    def _append_line(self, relpath: str, obj: dict) -> None:
        if self._dir is None:
            return
        fh = self._files.get(relpath)
        if fh is None:
            path = self._dir / relpath
            path.parent.mkdir(parents=True, exist_ok=True)
            fh = open(path, "ab")
            self._files[relpath] = fh
        fh.write(json.dumps(obj, separators=(",", ":")).encode("utf-8") + b"\n")
        fh.flush()

    @staticmethod
    def _read_lines(path: Path) -> Iterator[dict]:
        data = path.read_bytes()
        end = data.rfind(b"\n") + 1
        if end != len(data):
            # torn tail from an interrupted write
            with open(path, "r+b") as fh:
                fh.truncate(end)
        for line in data[:end].splitlines():
            if line:
                yield json.loads(line)

    def _load(self) -> None:
        assert self._dir is not None
        topics_file = self._dir / "topics.jsonl"
        if topics_file.exists():
            for obj in self._read_lines(topics_file):
                self._install_topic(Topic(obj["name"], obj["partition_count"], Nature(obj["nature"])))
        for topic in list(self._topics.values()):
            for p in range(topic.partition_count):
                path = self._dir / "partitions" / topic.name / f"{p}.log"
                if not path.exists():
                    continue
                for obj in self._read_lines(path):
                    headers = tuple(sorted(obj.get("headers", {}).items()))
                    msg = Message(
                        topic.name, p, obj["offset"], obj["key"], _decode_payload(obj), obj["tombstone"], headers
                    )
                    self._store(topic, msg)
        offsets_file = self._dir / "offsets.jsonl"
        if offsets_file.exists():
            for obj in self._read_lines(offsets_file):
                self._groups[obj["group"]].committed[(obj["topic"], obj["partition"])] = obj["offset"]
        shared_file = self._dir / "shared.jsonl"
        if shared_file.exists():
            for obj in self._read_lines(shared_file):
                if obj["op"] == "put":
                    self._shared[obj["key"]] = base64.b64decode(obj["value"])
                else:
                    self._shared.pop(obj["key"], None)

    def close(self) -> None:
        with self._lock:
            for fh in self._files.values():
                fh.close()  # type: ignore[attr-defined]
            self._files.clear()

    # -- topics ----------------------------------------------------------

    def _install_topic(self, topic: Topic) -> None:
        self._topics[topic.name] = topic
        for p in range(topic.partition_count):
            self._partitions[(topic.name, p)] = _Partition()
        if topic.nature is Nature.MASTER:
            self._compacted[topic.name] = {}

    def create_topic(self, name: str, partition_count: int = 1, nature: Nature | str = Nature.OPERATIONAL) -> Topic:
        """Create a topic, or return the existing one if its definition matches."""
        topic = Topic(name, partition_count, Nature(nature))
        with self._lock:
            existing = self._topics.get(name)
            if existing is not None:
                if existing != topic:
                    raise BrokerUsageError(f"topic {name!r} already exists as {existing}")
                return existing
            self._install_topic(topic)
            self._append_line(
                "topics.jsonl", {"name": name, "partition_count": partition_count, "nature": topic.nature.value}
            )
            return topic

    def topic(self, name: str) -> Topic:
        try:
            return self._topics[name]
        except KeyError:
            raise UnknownTopicError(name) from None

    @property
    def topics(self) -> dict[str, Topic]:
        return dict(self._topics)

    # -- producing -------------------------------------------------------

    def set_available(self, available: bool) -> None:
        self._available = available

    def _store(self, topic: Topic, msg: Message) -> None:
        self._partitions[(topic.name, msg.partition)].messages.append(msg)
        if topic.nature is Nature.MASTER:
            self._compacted[topic.name][msg.key] = msg

    def publish(
        self,
        topic: str,
        key: str,
        payload: bytes,
        tombstone: bool = False,
        headers: dict[str, str] | None = None,
    ) -> tuple[int, int]:
        """Append a message; returns ``(partition, offset)``."""
        if not self._available:
            raise BrokerUnavailable("broker unavailable")
        t = self.topic(topic)
        partition = partition_for(key, t.partition_count)
        with self._cond:
            part = self._partitions[(topic, partition)]
            offset = len(part.messages)
            msg = Message(topic, partition, offset, key, payload, tombstone, tuple(sorted((headers or {}).items())))
            self._store(t, msg)
            line = {"offset": offset, "key": key, "tombstone": tombstone, **_encode_payload(payload)}
            if headers:
                line["headers"] = dict(headers)
            self._append_line(f"partitions/{topic}/{partition}.log", line)
            self._cond.notify_all()
        return partition, offset

    def end_offsets(self, topic: str) -> list[int]:
        t = self.topic(topic)
        with self._lock:
            return [len(self._partitions[(topic, p)].messages) for p in range(t.partition_count)]

    def read(self, topic: str, partition: int, offset: int, max_records: int = 1000) -> list[Message]:
        """Low-level positional read, independent of consumer groups."""
        self.topic(topic)
        with self._lock:
            msgs = self._partitions[(topic, partition)].messages
            return msgs[offset : offset + max_records]

    # -- compaction ------------------------------------------------------

    def snapshot(self, topic: str) -> dict[str, bytes]:
        """Latest payload per key of a master topic; deleted keys are absent."""
        return self.snapshot_with_offsets(topic)[0]

    def snapshot_with_offsets(self, topic: str) -> tuple[dict[str, bytes], list[int]]:
        """Snapshot plus the end offsets it reflects, taken atomically."""
        messages, ends = self.snapshot_messages(topic)
        return {k: m.payload for k, m in messages.items()}, ends

    def snapshot_messages(self, topic: str) -> tuple[dict[str, Message], list[int]]:
        """Like :meth:`snapshot_with_offsets` but keeps whole messages (headers included)."""
        t = self.topic(topic)
        if t.nature is not Nature.MASTER:
            raise BrokerUsageError(f"snapshot is only served for MASTER topics, {topic!r} is {t.nature.value}")
        with self._lock:
            latest = self._compacted[topic]
            return {k: m for k, m in latest.items() if not m.tombstone}, self.end_offsets(topic)

    # -- consumer groups -------------------------------------------------

    def subscribe(self, group: str, consumer_ids: str | Iterable[str], topics: Iterable[str]) -> None:
        """Add one or more consumers to ``group`` in a single rebalance."""
        ids = [consumer_ids] if isinstance(consumer_ids, str) else list(consumer_ids)
        topic_names = tuple(topics)
        for name in topic_names:
            self.topic(name)
        with self._cond:
            g = self._groups[group]
            for cid in ids:
                if cid in g.members:
                    raise BrokerUsageError(f"{cid!r} already in group {group!r}")
                g.members[cid] = _Member(topics=topic_names)
            self._rebalance(group)

    def leave(self, group: str, consumer_ids: str | Iterable[str]) -> None:
        """Remove consumers (shutdown or failure) in a single rebalance."""
        ids = [consumer_ids] if isinstance(consumer_ids, str) else list(consumer_ids)
        with self._cond:
            g = self._groups[group]
            for cid in ids:
                g.members.pop(cid, None)
            self._rebalance(group)

    def members(self, group: str) -> list[str]:
        with self._lock:
            return sorted(self._groups[group].members)

    def _rebalance(self, group: str) -> None:
        g = self._groups[group]
        g.generation += 1
        subscribed: dict[str, int] = {}
        for m in g.members.values():
            for name in m.topics:
                subscribed[name] = self._topics[name].partition_count
        plan = range_assign(subscribed, g.members)
        for cid, member in g.members.items():
            mine = frozenset(tp for tp in plan.get(cid, frozenset()) if tp[0] in member.topics)
            old = member.assignment.partitions if member.assignment else frozenset()
            member.positions = {
                tp: (member.positions[tp] if tp in old and tp in member.positions else g.committed.get(tp, 0))
                for tp in sorted(mine)
            }
            assignment = Assignment(group, cid, mine, g.generation)
            member.assignment = assignment
            member.pending = Rebalance(assignment)
            member.history.append(assignment)
        self.ownership_log.append(
            (group, g.generation, {cid: m.assignment.partitions for cid, m in g.members.items() if m.assignment})
        )
        self._cond.notify_all()

    def _member(self, group: str, consumer_id: str) -> _Member:
        member = self._groups[group].members.get(consumer_id)
        if member is None:
            raise BrokerUsageError(f"{consumer_id!r} is not a member of {group!r}")
        return member

    def assignment(self, group: str, consumer_id: str) -> Assignment | None:
        with self._lock:
            return self._member(group, consumer_id).assignment

    def poll(
        self, group: str, consumer_id: str, max_records: int = 500, timeout: float = 0.0
    ) -> list[Message | Rebalance]:
        """Fetch the next batch for a group member.

        A pending rebalance is returned alone, before any message.
        Messages come from owned partitions only, in offset order per
        partition.  Waits up to ``timeout`` seconds when nothing is ready.
        """
        deadline = time.monotonic() + timeout
        with self._cond:
            while True:
                member = self._member(group, consumer_id)
                if member.pending is not None:
                    event, member.pending = member.pending, None
                    return [event]
                batch = self._fetch(member, max_records)
                if batch:
                    return batch
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return []
                self._cond.wait(remaining)

    def _fetch(self, member: _Member, max_records: int) -> list[Message | Rebalance]:
        tps = list(member.positions)
        if not tps:
            return []
        out: list[Message | Rebalance] = []
        n = len(tps)
        start = member.rr % n
        member.rr += 1
        # round-robin over partitions so none starves
        per = max(1, max_records // n)
        while len(out) < max_records:
            got = 0
            for i in range(n):
                tp = tps[(start + i) % n]
                msgs = self._partitions[tp].messages
                pos = member.positions[tp]
                take = msgs[pos : pos + min(per, max_records - len(out))]
                if take:
                    out.extend(take)
                    member.positions[tp] = pos + len(take)
                    got += len(take)
                if len(out) >= max_records:
                    break
            if got == 0:
                break
        return out

    def consume(
        self, group: str, consumer_id: str, stop: threading.Event, poll_timeout: float = 0.05
    ) -> Iterator[Message | Rebalance]:
        """Stream of messages and rebalance events until ``stop`` is set."""
        while not stop.is_set():
            for item in self.poll(group, consumer_id, timeout=poll_timeout):
                yield item

    def commit(self, group: str, consumer_id: str, offsets: dict[TopicPartition, int]) -> None:
        """Record the next offset to consume; partitions not owned are ignored."""
        with self._lock:
            member = self._member(group, consumer_id)
            owned = member.assignment.partitions if member.assignment else frozenset()
            g = self._groups[group]
            for tp, off in offsets.items():
                if tp in owned and off > g.committed.get(tp, 0):
                    g.committed[tp] = off
                    self._append_line(
                        "offsets.jsonl", {"group": group, "topic": tp[0], "partition": tp[1], "offset": off}
                    )

    def seek_to_committed(self, group: str, consumer_id: str) -> None:
        """Rewind the member's fetch positions to the group's committed offsets."""
        with self._lock:
            member = self._member(group, consumer_id)
            g = self._groups[group]
            member.positions = {tp: g.committed.get(tp, 0) for tp in member.positions}

    def committed(self, group: str) -> dict[TopicPartition, int]:
        with self._lock:
            return dict(self._groups[group].committed)

    def lag(self, group: str, topic: str) -> int:
        """Messages of ``topic`` not yet committed by ``group``."""
        ends = self.end_offsets(topic)
        committed = self.committed(group)
        return sum(end - committed.get((topic, p), 0) for p, end in enumerate(ends))

    def rebalance_listener(
        self, group: str, consumer_id: str, stop: threading.Event | None = None, timeout: float = 0.05
    ) -> Iterator[Assignment]:
        """Every assignment this consumer has received, blocking for new ones.

        Ends when ``stop`` is set or the consumer leaves the group.
        """
        seen = 0
        while True:
            with self._cond:
                member = self._groups[group].members.get(consumer_id)
                if member is None:
                    return
                fresh = member.history[seen:]
                if not fresh:
                    if stop is None or stop.is_set():
                        return
                    self._cond.wait(timeout)
                    continue
            seen += len(fresh)
            yield from fresh

    def assignment_history(self, group: str, consumer_id: str) -> list[Assignment]:
        with self._lock:
            return list(self._member(group, consumer_id).history)

    # -- shared register -------------------------------------------------

    def put_shared(self, key: str, value: bytes) -> None:
        if not self._available:
            raise BrokerUnavailable("broker unavailable")
        with self._lock:
            self._shared[key] = bytes(value)
            self._append_line(
                "shared.jsonl", {"op": "put", "key": key, "value": base64.b64encode(value).decode("ascii")}
            )

    def get_shared(self, key: str) -> bytes | None:
        if not self._available:
            raise BrokerUnavailable("broker unavailable")
        with self._lock:
            return self._shared.get(key)

    def delete_shared(self, key: str) -> None:
        if not self._available:
            raise BrokerUnavailable("broker unavailable")
        with self._lock:
            if self._shared.pop(key, None) is not None:
                self._append_line("shared.jsonl", {"op": "del", "key": key})

    def shared_keys(self, prefix: str = "") -> list[str]:
        if not self._available:
            raise BrokerUnavailable("broker unavailable")
        with self._lock:
            return sorted(k for k in self._shared if k.startswith(prefix))
