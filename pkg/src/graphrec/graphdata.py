"""Rating and trust graph ingestion, indexing, splitting and neighbour views."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np


class DataFormatError(ValueError):
    """A line of an input file could not be parsed."""

    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = str(path)
        self.lineno = lineno


class RatingRangeError(DataFormatError):
    """A rating lies outside ``{1..r_max}`` or is not an integer level."""


class TooSmallError(ValueError):
    pass


class RatingTriple(NamedTuple):
    user: int
    item: int
    rating: int


@dataclass
class LoadReport:
    lines: int = 0
    triples: int = 0
    duplicates: int = 0
    rounded: int = 0
    edges: int = 0
    self_loops: int = 0
    unknown_users: int = 0
    duplicate_edges: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


class RatingGraph:
    """User-item rating graph with dense ids and both adjacency directions.

    ``by_user[u]`` is the list of ``(item, rating)`` pairs of user ``u`` and
    ``by_item[i]`` the list of ``(user, rating)`` pairs of item ``i``, both
    sorted by neighbour id.
    """

    def __init__(
        self,
        triples: Iterable[RatingTriple],
        n_users: int,
        n_items: int,
        r_max: int = 5,
        user_ids: Sequence[str] | None = None,
        item_ids: Sequence[str] | None = None,
        report: LoadReport | None = None,
    ):
        self.triples = [RatingTriple(*t) for t in triples]
        self.n_users = int(n_users)
        self.n_items = int(n_items)
        self.r_max = int(r_max)
        self.user_ids = list(user_ids) if user_ids is not None else [str(i) for i in range(self.n_users)]
        self.item_ids = list(item_ids) if item_ids is not None else [str(i) for i in range(self.n_items)]
        self.report = report if report is not None else LoadReport(triples=len(self.triples))
        if len(self.user_ids) != self.n_users or len(self.item_ids) != self.n_items:
            raise ValueError("id maps do not match declared counts")

        self.by_user: list[list[tuple[int, int]]] = [[] for _ in range(self.n_users)]
        self.by_item: list[list[tuple[int, int]]] = [[] for _ in range(self.n_items)]
        seen: set[tuple[int, int]] = set()
        for u, i, r in self.triples:
            if not (0 <= u < self.n_users and 0 <= i < self.n_items):
                raise IndexError(f"triple ({u}, {i}) outside {self.n_users} users x {self.n_items} items")
            if not 1 <= r <= self.r_max:
                raise ValueError(f"rating {r} outside 1..{self.r_max}")
            if (u, i) in seen:
                raise ValueError(f"duplicate rating for pair ({u}, {i})")
            seen.add((u, i))
            self.by_user[u].append((i, r))
            self.by_item[i].append((u, r))
        for adj in self.by_user:
            adj.sort()
        for adj in self.by_item:
            adj.sort()

    def __len__(self) -> int:
        return len(self.triples)

    @property
    def user_index(self) -> dict[str, int]:
        return {raw: k for k, raw in enumerate(self.user_ids)}

    def restricted(self, triples: Iterable[RatingTriple]) -> RatingGraph:
        """A graph over the same id space holding only ``triples`` (e.g. a training split)."""
        return RatingGraph(triples, self.n_users, self.n_items, self.r_max, self.user_ids, self.item_ids)


class SocialGraph:
    """Directed trust adjacency: ``neighbors[i]`` holds N(i), sorted and duplicate-free."""

    def __init__(self, neighbors: Sequence[Iterable[int]], report: LoadReport | None = None):
        self.neighbors: list[list[int]] = []
        for i, adj in enumerate(neighbors):
            lst = sorted(set(int(v) for v in adj))
            if i in lst:
                raise ValueError(f"self-loop on user {i}")
            self.neighbors.append(lst)
        n = len(self.neighbors)
        for adj in self.neighbors:
            if adj and (adj[0] < 0 or adj[-1] >= n):
                raise IndexError("social edge references a user outside the graph")
        self.report = report if report is not None else LoadReport(edges=self.n_edges)

    @classmethod
    def empty(cls, n_users: int) -> SocialGraph:
        return cls([[] for _ in range(n_users)])

    @classmethod
    def from_edges(cls, n_users: int, edges: Iterable[tuple[int, int]]) -> SocialGraph:
        """Edges are ``(i, o)`` pairs meaning ``o`` belongs to N(i)."""
        adj: list[set[int]] = [set() for _ in range(n_users)]
        for i, o in edges:
            if i != o:
                adj[i].add(o)
        return cls(adj)

    @property
    def n_users(self) -> int:
        return len(self.neighbors)

    @property
    def n_edges(self) -> int:
        return sum(len(a) for a in self.neighbors)

    def edges(self) -> Iterator[tuple[int, int]]:
        for i, adj in enumerate(self.neighbors):
            for o in adj:
                yield i, o


# ---------------------------------------------------------------------------
# loading


def _data_lines(path: Path) -> Iterator[tuple[int, list[str]]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            yield lineno, text.split()


def _parse_level(tok: str, r_max: int, round_ratings: bool, path, lineno: int) -> tuple[int, bool]:
    try:
        value = float(tok)
    except ValueError:
        raise DataFormatError(path, lineno, f"rating {tok!r} is not a number") from None
    if not math.isfinite(value):
        raise RatingRangeError(path, lineno, f"rating {tok!r} is not finite")
    level = math.floor(value + 0.5)
    rounded = level != value
    if rounded and not round_ratings:
        raise RatingRangeError(path, lineno, f"rating {tok!r} is not an integer level")
    if not 1 <= level <= r_max:
        raise RatingRangeError(path, lineno, f"rating {tok!r} outside 1..{r_max}")
    return int(level), rounded


def load_ratings(path, r_max: int = 5, round_ratings: bool = False) -> RatingGraph:
    """Read ``user item rating`` lines into a densely re-indexed graph.

    Raw ids are numbered from 0 in order of first appearance. A repeated
    ``(user, item)`` pair keeps its last rating and is counted in the report.
    """
    path = Path(path)
    user_idx: dict[str, int] = {}
    item_idx: dict[str, int] = {}
    ratings: dict[tuple[int, int], int] = {}
    report = LoadReport()
    for lineno, fields in _data_lines(path):
        report.lines += 1
        if len(fields) != 3:
            raise DataFormatError(path, lineno, f"expected 'user item rating', got {len(fields)} fields")
        u_raw, i_raw, r_tok = fields
        level, rounded = _parse_level(r_tok, r_max, round_ratings, path, lineno)
        report.rounded += rounded
        u = user_idx.setdefault(u_raw, len(user_idx))
        i = item_idx.setdefault(i_raw, len(item_idx))
        if (u, i) in ratings:
            report.duplicates += 1
            del ratings[(u, i)]  # re-insert so order follows the last occurrence
        ratings[(u, i)] = level
    triples = [RatingTriple(u, i, r) for (u, i), r in ratings.items()]
    report.triples = len(triples)
    return RatingGraph(triples, len(user_idx), len(item_idx), r_max, list(user_idx), list(item_idx), report)


def load_trust(path, graph: RatingGraph, symmetrize: bool = False) -> SocialGraph:
    """Read ``truster trustee`` lines; line ``a b`` puts ``b`` into N(a).

    Users unknown to the rating graph are dropped and counted, as are
    self-loops and repeated edges.
    """
    path = Path(path)
    index = graph.user_index
    adj: list[set[int]] = [set() for _ in range(graph.n_users)]
    report = LoadReport()
    for lineno, fields in _data_lines(path):
        report.lines += 1
        if len(fields) != 2:
            raise DataFormatError(path, lineno, f"expected 'user user', got {len(fields)} fields")
        a, b = (index.get(tok) for tok in fields)
        if a is None or b is None:
            report.unknown_users += 1
            continue
        if a == b:
            report.self_loops += 1
            continue
        pairs = [(a, b), (b, a)] if symmetrize else [(a, b)]
        for s, t in pairs:
            if t in adj[s]:
                report.duplicate_edges += 1
            adj[s].add(t)
    social = SocialGraph(adj, report)
    report.edges = social.n_edges
    return social


def export_ratings(graph: RatingGraph, path) -> None:
    """Write the graph back out with raw ids, one triple per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for u, i, r in graph.triples:
            fh.write(f"{graph.user_ids[u]}\t{graph.item_ids[i]}\t{r}\n")


def export_trust(social: SocialGraph, graph: RatingGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, o in social.edges():
            fh.write(f"{graph.user_ids[i]}\t{graph.user_ids[o]}\n")


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# splitting


@dataclass
class DatasetSplit:
    train: list[RatingTriple]
    validation: list[RatingTriple]
    test: list[RatingTriple]
    seed: int
    train_fraction: float = 0.8
    counts: dict = field(init=False)

    def __post_init__(self):
        self.counts = {"train": len(self.train), "validation": len(self.validation), "test": len(self.test)}

    def part(self, name: str) -> list[RatingTriple]:
        if name in ("val", "valid"):
            name = "validation"
        if name not in ("train", "validation", "test"):
            raise KeyError(f"unknown split part {name!r}")
        return getattr(self, name)


def split_sizes(n: int, train_fraction: float) -> tuple[int, int, int]:
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train fraction must lie in (0, 1), got {train_fraction}")
    if n < 3:
        raise TooSmallError(f"need at least 3 ratings to split, got {n}")
    n_train = min(max(int(math.floor(train_fraction * n + 0.5)), 1), n - 2)
    n_val = (n - n_train) // 2
    return n_train, n_val, n - n_train - n_val


def split(graph: RatingGraph, train_fraction: float, seed: int) -> DatasetSplit:
    """Seeded uniform permutation sliced into train / validation / test."""
    n_train, n_val, _ = split_sizes(len(graph.triples), train_fraction)
    order = np.random.default_rng(seed).permutation(len(graph.triples))
    shuffled = [graph.triples[k] for k in order]
    return DatasetSplit(
        shuffled[:n_train],
        shuffled[n_train : n_train + n_val],
        shuffled[n_train + n_val :],
        seed=seed,
        train_fraction=train_fraction,
    )


def write_split(split_: DatasetSplit, graph: RatingGraph, out_dir, input_hash: str | None = None) -> Path:
    """Write each part as a ratings file (raw ids) plus ``split_manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("train", "validation", "test"):
        with open(out / f"{name}.txt", "w", encoding="utf-8") as fh:
            for u, i, r in split_.part(name):
                fh.write(f"{graph.user_ids[u]}\t{graph.item_ids[i]}\t{r}\n")
    manifest = {
        "seed": split_.seed,
        "train_fraction": split_.train_fraction,
        "counts": split_.counts,
        "input_sha256": input_hash,
    }
    path = out / "split_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_split(graph: RatingGraph, out_dir) -> DatasetSplit:
    out = Path(out_dir)
    manifest = json.loads((out / "split_manifest.json").read_text())
    u_idx, i_idx = graph.user_index, {raw: k for k, raw in enumerate(graph.item_ids)}
    parts = {}
    for name in ("train", "validation", "test"):
        rows = []
        for lineno, (u, i, r) in _data_lines(out / f"{name}.txt"):
            rows.append(RatingTriple(u_idx[u], i_idx[i], int(r)))
        parts[name] = rows
    return DatasetSplit(**parts, seed=manifest["seed"], train_fraction=manifest["train_fraction"])


# ---------------------------------------------------------------------------
# neighbour queries


def _check_id(value: int, bound: int, what: str) -> None:
    if not 0 <= value < bound:
        raise IndexError(f"{what} id {value} out of range [0, {bound})")


def neighbors_C(graph: RatingGraph, user: int, exclude: tuple[int, int] | None = None) -> list[tuple[int, int]]:
    """Items rated by ``user`` as ``(item, rating)``, minus the ``exclude`` pair's item."""
    _check_id(user, graph.n_users, "user")
    adj = graph.by_user[user]
    if exclude is not None and exclude[0] == user:
        return [(i, r) for i, r in adj if i != exclude[1]]
    return list(adj)


def neighbors_B(graph: RatingGraph, item: int, exclude: tuple[int, int] | None = None) -> list[tuple[int, int]]:
    """Users who rated ``item`` as ``(user, rating)``, minus the ``exclude`` pair's user."""
    _check_id(item, graph.n_items, "item")
    adj = graph.by_item[item]
    if exclude is not None and exclude[1] == item:
        return [(u, r) for u, r in adj if u != exclude[0]]
    return list(adj)


def neighbors_N(social: SocialGraph, user: int) -> list[int]:
    _check_id(user, social.n_users, "user")
    return list(social.neighbors[user])


def _csr(adj: Sequence[Sequence], width: int) -> tuple[np.ndarray, np.ndarray]:
    ptr = np.zeros(len(adj) + 1, dtype=np.int64)
    ptr[1:] = np.cumsum([len(a) for a in adj])
    flat = np.array([x for a in adj for x in a], dtype=np.int64).reshape(-1, width)
    return ptr, flat


def _expand(ptr: np.ndarray, nodes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Segment id and flat position for every neighbour of every node in ``nodes``."""
    starts, ends = ptr[nodes], ptr[nodes + 1]
    lengths = ends - starts
    seg = np.repeat(np.arange(nodes.size), lengths)
    offsets = np.arange(lengths.sum()) - np.repeat(np.cumsum(lengths) - lengths, lengths)
    return seg, np.repeat(starts, lengths) + offsets


class NeighborView:
    """Frozen, optionally truncated adjacency used for one epoch of aggregation.

    Stores C(i), B(j) and N(i) in CSR form. ``cap`` limits every list to a
    uniform random subsample of that size.
    """

    def __init__(self, graph: RatingGraph, social: SocialGraph, cap: int | None = None, rng=None):
        if social.n_users != graph.n_users:
            raise ValueError("social graph and rating graph disagree on the number of users")
        if cap is not None and cap < 1:
            raise ValueError("neighbour cap must be positive")
        self.n_users, self.n_items, self.r_max = graph.n_users, graph.n_items, graph.r_max
        self.cap = cap

        def pick(adj):
            if cap is None or len(adj) <= cap:
                return adj
            if rng is None:
                raise ValueError("truncating neighbour lists needs a random generator")
            keep = np.sort(rng.choice(len(adj), size=cap, replace=False))
            return [adj[k] for k in keep]

        self.c_ptr, c = _csr([pick(a) for a in graph.by_user], 2)
        self.b_ptr, b = _csr([pick(a) for a in graph.by_item], 2)
        self.n_ptr, n = _csr([pick(a) for a in social.neighbors], 1)
        self.c_item, self.c_rating = c[:, 0], c[:, 1]
        self.b_user, self.b_rating = b[:, 0], b[:, 1]
        self.n_user = n[:, 0]

    def items_of(self, user: int, exclude_item: int | None = None) -> list[tuple[int, int]]:
        _check_id(user, self.n_users, "user")
        s, e = self.c_ptr[user], self.c_ptr[user + 1]
        return [(int(i), int(r)) for i, r in zip(self.c_item[s:e], self.c_rating[s:e]) if i != exclude_item]

    def users_of(self, item: int, exclude_user: int | None = None) -> list[tuple[int, int]]:
        _check_id(item, self.n_items, "item")
        s, e = self.b_ptr[item], self.b_ptr[item + 1]
        return [(int(u), int(r)) for u, r in zip(self.b_user[s:e], self.b_rating[s:e]) if u != exclude_user]

    def friends_of(self, user: int) -> list[int]:
        _check_id(user, self.n_users, "user")
        return [int(o) for o in self.n_user[self.n_ptr[user] : self.n_ptr[user + 1]]]

    def user_edges(self, users: np.ndarray, exclude_items: np.ndarray):
        """Flattened C lists for a batch of user nodes.

        Returns ``(seg, item, rating)`` arrays; entries whose item equals the
        node's excluded item (``-1`` for none) are dropped.
        """
        seg, pos = _expand(self.c_ptr, users)
        item, rating = self.c_item[pos], self.c_rating[pos]
        keep = item != exclude_items[seg]
        return seg[keep], item[keep], rating[keep]

    def item_edges(self, items: np.ndarray, exclude_users: np.ndarray):
        seg, pos = _expand(self.b_ptr, items)
        user, rating = self.b_user[pos], self.b_rating[pos]
        keep = user != exclude_users[seg]
        return seg[keep], user[keep], rating[keep]

    def social_edges(self, users: np.ndarray):
        seg, pos = _expand(self.n_ptr, users)
        return seg, self.n_user[pos]

    def cold_counts(self, pairs: np.ndarray) -> dict[str, int]:
        """How many pairs have an empty C(i), N(i) or B(j) after the leakage guard."""
        users, items = pairs[:, 0], pairs[:, 1]
        seg_c, _, _ = self.user_edges(users, items)
        seg_b, _, _ = self.item_edges(items, users)
        n = len(pairs)
        return {
            "cold_users": int(n - np.unique(seg_c).size),
            "cold_items": int(n - np.unique(seg_b).size),
            "isolated_users": int(np.sum(self.n_ptr[users + 1] == self.n_ptr[users])),
        }
