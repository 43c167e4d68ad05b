"""Transaction streams, bond metadata, chronological splits and synthetic data.

Events are stored column-wise (``day``, ``user``, ``item`` integer arrays)
against sorted key tables, so index order equals key order and sorting by
``(day, user, item)`` indices is the same as sorting by ``(day, user_id,
item_id)`` strings.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

log = logging.getLogger(__name__)

FEATURES = ("rating", "sector", "industry", "country", "currency", "grade", "seniority")
UNK = "UNK"
EVENTS_HEADER = ["day", "user_id", "item_id"]
ITEMS_HEADER = ["item_id", *FEATURES, "issue_day", "maturity_day"]


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class EmptyDatasetError(DataError):
    pass


class ConfigError(ValueError):
    """Invalid configuration value."""


class Event(NamedTuple):
    user_id: str
    item_id: str
    day: int


@dataclass(frozen=True)
class ItemMeta:
    item_id: str
    rating: str
    sector: str
    industry: str
    country: str
    currency: str
    grade: str
    seniority: str
    issue_day: int
    maturity_day: int


def _frozen(a) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class EventLog:
    """Deduplicated, sorted events with their inferred user/item indices."""

    user_keys: tuple[str, ...]
    item_keys: tuple[str, ...]
    day: np.ndarray
    user: np.ndarray
    item: np.ndarray
    n_duplicates: int = 0

    def __len__(self) -> int:
        return len(self.day)

    @property
    def events(self) -> list[Event]:
        return [Event(self.user_keys[u], self.item_keys[i], int(d))
                for d, u, i in zip(self.day, self.user, self.item)]

    def snapshot_sizes(self) -> dict[int, int]:
        days, counts = np.unique(self.day, return_counts=True)
        return dict(zip(days.tolist(), counts.tolist()))


def _build_log(days: Sequence[int], users: Sequence[str], items: Sequence[str],
               item_keys: Sequence[str] | None = None) -> EventLog:
    user_keys = tuple(sorted(set(users)))
    if item_keys is None:
        item_keys = tuple(sorted(set(items)))
    uix = {k: n for n, k in enumerate(user_keys)}
    iix = {k: n for n, k in enumerate(item_keys)}
    d = np.asarray(days, dtype=np.int64)
    u = np.fromiter((uix[k] for k in users), dtype=np.int64, count=len(users))
    i = np.fromiter((iix[k] for k in items), dtype=np.int64, count=len(items))
    if len(d):
        triples = np.unique(np.stack([d, u, i], axis=1), axis=0)  # lexicographic sort
    else:
        triples = np.zeros((0, 3), dtype=np.int64)
    dup = len(d) - len(triples)
    return EventLog(tuple(user_keys), tuple(item_keys), _frozen(triples[:, 0]),
                    _frozen(triples[:, 1]), _frozen(triples[:, 2]), dup)


def _check_header(reader, expected: list[str], path) -> None:
    header = next(reader, None)
    if header is None:
        raise EmptyDatasetError(f"{path}: empty file")
    if [h.strip() for h in header] != expected:
        raise DataError(f"{path}: line 1: expected header {','.join(expected)}, got {','.join(header)}")


def load_events(path: str | Path) -> EventLog:
    """Read an events CSV (``day,user_id,item_id``), sort and collapse duplicates."""
    days, users, items = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        _check_header(reader, EVENTS_HEADER, path)
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise DataError(f"{path}: line {line}: expected 3 columns, got {len(row)}")
            day_s, user, item = (c.strip() for c in row)
            try:
                day = int(day_s, 10)
            except ValueError:
                raise DataError(f"{path}: line {line}: day {day_s!r} is not an integer") from None
            if day < 0:
                raise DataError(f"{path}: line {line}: negative day {day}")
            if not user or not item:
                raise DataError(f"{path}: line {line}: missing user_id or item_id")
            days.append(day)
            users.append(user)
            items.append(item)
    if not days:
        raise EmptyDatasetError(f"{path}: no events")
    elog = _build_log(days, users, items)
    if elog.n_duplicates:
        log.info("%s: dropped %d duplicate events", path, elog.n_duplicates)
    return elog


@dataclass(frozen=True, eq=False)
class ItemTable:
    """Bond metadata aligned to sorted item keys.

    ``codes[n, f]`` indexes ``vocabs[f]``; index 0 of every vocabulary is UNK.
    """

    keys: tuple[str, ...]
    codes: np.ndarray
    vocabs: tuple[tuple[str, ...], ...]
    issue_day: np.ndarray
    maturity_day: np.ndarray

    def __len__(self) -> int:
        return len(self.keys)

    def index(self, item_id: str) -> int:
        n = int(np.searchsorted(np.asarray(self.keys, dtype=object), item_id))
        if n >= len(self.keys) or self.keys[n] != item_id:
            raise KeyError(item_id)
        return n

    def meta(self, item_id: str) -> ItemMeta:
        n = self.index(item_id)
        labels = [self.vocabs[f][self.codes[n, f]] for f in range(len(FEATURES))]
        return ItemMeta(item_id, *labels, int(self.issue_day[n]), int(self.maturity_day[n]))

    def available(self, day: int) -> np.ndarray:
        return (self.issue_day <= day) & (day <= self.maturity_day)

    @property
    def vocab_sizes(self) -> tuple[int, ...]:
        return tuple(len(v) for v in self.vocabs)

    def encode(self, feature: int, label: str) -> int:
        """Map a label to its code; unknown labels map to UNK (0)."""
        try:
            return self.vocabs[feature].index(label)
        except ValueError:
            return 0


def _make_table(rows: dict[str, tuple[list[str], int, int]]) -> ItemTable:
    keys = tuple(sorted(rows))
    vocabs = []
    for f in range(len(FEATURES)):
        labels = {rows[k][0][f] for k in keys} - {UNK}
        vocabs.append((UNK, *sorted(labels)))
    lookup = [{lab: n for n, lab in enumerate(v)} for v in vocabs]
    codes = np.zeros((len(keys), len(FEATURES)), dtype=np.int64)
    issue = np.zeros(len(keys), dtype=np.int64)
    maturity = np.zeros(len(keys), dtype=np.int64)
    for n, k in enumerate(keys):
        labels, iss, mat = rows[k]
        codes[n] = [lookup[f][lab] for f, lab in enumerate(labels)]
        issue[n], maturity[n] = iss, mat
    return ItemTable(keys, _frozen(codes), tuple(vocabs), _frozen(issue), _frozen(maturity))


def load_item_meta(path: str | Path | None, events: EventLog, infer: bool = True,
                   margin: int = 30) -> ItemTable:
    """Read the items CSV and fill availability gaps from observed activity.

    Missing issue day -> first observed day; missing maturity day -> last
    observed day + ``margin``. With ``path=None`` every item is inferred.
    """
    first: dict[str, int] = {}
    last: dict[str, int] = {}
    for d, i in zip(events.day.tolist(), events.item.tolist()):
        k = events.item_keys[i]
        first.setdefault(k, d)  # events are day-sorted
        last[k] = d

    rows: dict[str, tuple[list[str], int, int]] = {}
    if path is not None:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            _check_header(reader, ITEMS_HEADER, path)
            for row in reader:
                line = reader.line_num
                if not row or all(not c.strip() for c in row):
                    continue
                if len(row) != len(ITEMS_HEADER):
                    raise DataError(f"{path}: line {line}: expected {len(ITEMS_HEADER)} columns, got {len(row)}")
                row = [c.strip() for c in row]
                key = row[0]
                if not key:
                    raise DataError(f"{path}: line {line}: empty item_id")
                labels = [c or UNK for c in row[1:8]]
                try:
                    iss = int(row[8]) if row[8] else None
                    mat = int(row[9]) if row[9] else None
                except ValueError:
                    raise DataError(f"{path}: line {line}: issue/maturity day is not an integer") from None
                if iss is None:
                    if key not in first:
                        log.warning("%s: line %d: item %s has no issue day and no events; skipped", path, line, key)
                        continue
                    iss = first[key]
                if mat is None:
                    if key not in last:
                        log.warning("%s: line %d: item %s has no maturity day and no events; skipped", path, line, key)
                        continue
                    mat = last[key] + margin
                if iss > mat:
                    raise DataError(f"{path}: line {line}: issue_day {iss} after maturity_day {mat}")
                rows[key] = (labels, iss, mat)

    missing = sorted(set(events.item_keys) - set(rows))
    if missing and not infer:
        raise DataError(f"missing metadata for items: {', '.join(missing)}")
    for key in missing:
        rows[key] = ([UNK] * len(FEATURES), first[key], last[key] + margin)
    return _make_table(rows)


@dataclass(frozen=True)
class Split:
    """Half-open day ranges ``[start, end)`` for train / validation / test."""

    train: tuple[int, int]
    validation: tuple[int, int]
    test: tuple[int, int]

    def range(self, name: str) -> range:
        lo, hi = getattr(self, name)
        return range(lo, hi)


@dataclass(frozen=True, eq=False)
class Dataset:
    user_keys: tuple[str, ...]
    items: ItemTable
    day: np.ndarray
    user: np.ndarray
    item: np.ndarray
    split: Split | None = None
    n_duplicates: int = 0
    _offsets: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self._offsets is None:
            last = int(self.day[-1]) if len(self.day) else -1
            offs = np.searchsorted(self.day, np.arange(last + 2), side="left")
            object.__setattr__(self, "_offsets", _frozen(offs))

    @property
    def item_keys(self) -> tuple[str, ...]:
        return self.items.keys

    @property
    def n_users(self) -> int:
        return len(self.user_keys)

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def last_day(self) -> int:
        return int(self.day[-1])

    def __len__(self) -> int:
        return len(self.day)

    @property
    def events(self) -> list[Event]:
        keys = self.items.keys
        return [Event(self.user_keys[u], keys[i], int(d))
                for d, u, i in zip(self.day, self.user, self.item)]

    def day_bounds(self, lo: int, hi: int) -> tuple[int, int]:
        """Row slice covering events with ``lo <= day < hi``."""
        n = len(self._offsets) - 1
        lo = min(max(lo, 0), n)
        hi = min(max(hi, lo), n)
        return int(self._offsets[lo]), int(self._offsets[hi])

    def between(self, lo: int, hi: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        a, b = self.day_bounds(lo, hi)
        return self.day[a:b], self.user[a:b], self.item[a:b]

    def positives(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        _, u, i = self.between(t, t + 1)
        return u, i

    def available_items(self, t: int) -> np.ndarray:
        return np.flatnonzero(self.items.available(t))

    def split_rows(self, name: str) -> tuple[int, int]:
        if self.split is None:
            raise ConfigError("dataset has no split")
        lo, hi = getattr(self.split, name)
        return self.day_bounds(lo, hi)

    def active_days(self, lo: int, hi: int) -> list[int]:
        d, _, _ = self.between(lo, hi)
        return np.unique(d).tolist()

    def subset(self, mask: np.ndarray) -> "Dataset":
        """Same indices and metadata, keeping only rows where ``mask`` holds."""
        return Dataset(self.user_keys, self.items, _frozen(self.day[mask]),
                       _frozen(self.user[mask]), _frozen(self.item[mask]), self.split)

    def with_events(self, day, user, item) -> "Dataset":
        """Same indices and metadata with a replacement (re-sorted, deduped) event set."""
        trip = np.stack([np.asarray(day), np.asarray(user), np.asarray(item)], axis=1).astype(np.int64)
        trip = np.unique(trip, axis=0) if len(trip) else trip.reshape(0, 3)
        return Dataset(self.user_keys, self.items, _frozen(trip[:, 0]), _frozen(trip[:, 1]),
                       _frozen(trip[:, 2]), self.split)


def make_dataset(events: EventLog, items: ItemTable) -> Dataset:
    """Re-index events onto ``items`` and check every event lies inside its item's life."""
    keys = np.asarray(items.keys, dtype=object)
    ev_keys = np.asarray(events.item_keys, dtype=object)
    pos = np.searchsorted(keys, ev_keys) if len(ev_keys) else np.zeros(0, dtype=np.int64)
    bad = [k for k, p in zip(events.item_keys, pos) if p >= len(keys) or keys[p] != k]
    if bad:
        raise DataError(f"missing metadata for items: {', '.join(bad)}")
    item = pos.astype(np.int64)[events.item]
    day = events.day
    out = (day < items.issue_day[item]) | (day > items.maturity_day[item])
    if out.any():
        n = int(np.flatnonzero(out)[0])
        k = items.keys[item[n]]
        raise DataError(f"event (day {int(day[n])}, item {k}) outside availability "
                        f"[{int(items.issue_day[item[n]])}, {int(items.maturity_day[item[n]])}]"
                        f" ({int(out.sum())} such events)")
    # key order preserved by searchsorted, so rows stay sorted
    return Dataset(events.user_keys, items, events.day, events.user, _frozen(item),
                   n_duplicates=events.n_duplicates)


def load_dataset(events_path, items_path=None, infer: bool = True, margin: int = 30) -> Dataset:
    elog = load_events(events_path)
    return make_dataset(elog, load_item_meta(items_path, elog, infer=infer, margin=margin))


def from_events(events: Iterable[Event | tuple], item_meta: Iterable[ItemMeta] = (),
                margin: int = 30) -> Dataset:
    """Build a dataset in memory; items without metadata get inferred availability."""
    events = list(events)
    if not events:
        raise EmptyDatasetError("no events")
    users = [e[0] for e in events]
    items = [e[1] for e in events]
    days = [int(e[2]) for e in events]
    if min(days) < 0:
        raise DataError("negative day")
    elog = _build_log(days, users, items)
    first: dict[str, int] = {}
    last: dict[str, int] = {}
    for d, i in zip(elog.day.tolist(), elog.item.tolist()):
        k = elog.item_keys[i]
        first.setdefault(k, d)
        last[k] = d
    rows = {m.item_id: ([getattr(m, f) or UNK for f in FEATURES], m.issue_day, m.maturity_day)
            for m in item_meta}
    for k in elog.item_keys:
        if k not in rows:
            rows[k] = ([UNK] * len(FEATURES), first[k], last[k] + margin)
    return make_dataset(elog, _make_table(rows))


def chronological_split(dataset: Dataset, train_end_day: int, val_end_day: int) -> Dataset:
    last = dataset.last_day
    if not (0 < train_end_day < val_end_day <= last):
        raise ConfigError(f"split boundaries must satisfy 0 < train_end_day < val_end_day <= {last}; "
                          f"got ({train_end_day}, {val_end_day})")
    split = Split((0, train_end_day), (train_end_day, val_end_day), (val_end_day, last + 1))
    for name in ("train", "validation", "test"):
        lo, hi = getattr(split, name)
        a, b = dataset.day_bounds(lo, hi)
        if a == b:
            raise ConfigError(f"{name} split [{lo}, {hi}) contains no events")
    return dataclasses.replace(dataset, split=split)


def split_by_fraction(dataset: Dataset, train_frac: float = 0.6, val_frac: float = 0.2) -> Dataset:
    span = dataset.last_day + 1
    train_end = max(1, int(round(span * train_frac)))
    val_end = max(train_end + 1, int(round(span * (train_frac + val_frac))))
    return chronological_split(dataset, train_end, val_end)


def write_events(dataset: Dataset, path: str | Path) -> None:
    keys = dataset.items.keys
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENTS_HEADER)
        for d, u, i in zip(dataset.day.tolist(), dataset.user.tolist(), dataset.item.tolist()):
            w.writerow([d, dataset.user_keys[u], keys[i]])


def write_items(items: ItemTable, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ITEMS_HEADER)
        for n, k in enumerate(items.keys):
            labels = [items.vocabs[f][items.codes[n, f]] for f in range(len(FEATURES))]
            w.writerow([k, *labels, int(items.issue_day[n]), int(items.maturity_day[n])])


# --------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SynthSpec:
    users: int = 200
    items: int = 500
    days: int = 120
    events_per_day: float = 300.0
    segments: int = 8
    item_clusters: int = 12
    regime_length: int = 20
    repeat_prob: float = 0.134
    item_lifetime_mean: float = 60.0
    seed: int = 0

    def validate(self) -> None:
        for name in ("users", "items", "days", "segments", "item_clusters", "regime_length"):
            if getattr(self, name) < 1:
                raise ConfigError(f"synth.{name} must be >= 1")
        if self.events_per_day <= 0:
            raise ConfigError("synth.events_per_day must be > 0 (no events would be generated)")
        if not 0 <= self.repeat_prob < 1:
            raise ConfigError("synth.repeat_prob must lie in [0, 1)")
        if self.item_lifetime_mean < 1:
            raise ConfigError("synth.item_lifetime_mean must be >= 1")


_RATINGS = ("AAA", "AA", "A", "BBB", "BB", "B", "CCC")
_COUNTRIES = ("FR", "DE", "US", "GB", "IT", "ES", "NL", "JP")
_CURRENCIES = ("EUR", "USD", "GBP")
_SENIORITY = ("SENIOR", "SUB", "SECURED")

# how much of a user's taste is personal (static) vs. shared with the segment (drifting)
_PERSONAL_WEIGHT = 0.25
_DIRICHLET_ALPHA = 0.3


def generate_synthetic(spec: SynthSpec, seed: int | None = None) -> Dataset:
    """Draw a drifting bond-transaction stream.

    Users sit in latent segments whose preference over item clusters is
    re-drawn every ``regime_length`` days; each user also keeps a small
    static personal taste. Items live for a geometric number of days, so the
    catalog churns. Each day a ``repeat_prob`` share of events replays pairs
    from the previous day; fresh events never coincide with yesterday's pairs,
    so the repeat share is controlled exactly.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    n_u, n_i, n_c = spec.users, spec.items, spec.item_clusters

    segment = rng.integers(spec.segments, size=n_u)
    activity = rng.lognormal(0.0, 1.0, size=n_u)
    activity /= activity.sum()
    cluster = rng.integers(n_c, size=n_i)
    appeal = rng.lognormal(0.0, 0.75, size=n_i)
    lifetime = rng.geometric(1.0 / spec.item_lifetime_mean, size=n_i)
    raw_issue = np.array([rng.integers(-int(L) + 1, spec.days) for L in lifetime])
    issue = np.maximum(raw_issue, 0)
    maturity = raw_issue + lifetime - 1

    n_regimes = math.ceil(spec.days / spec.regime_length)
    seg_pref = rng.dirichlet(np.full(n_c, _DIRICHLET_ALPHA), size=(n_regimes, spec.segments))
    personal = rng.dirichlet(np.full(n_c, _DIRICHLET_ALPHA), size=n_u)

    # bond labels correlated with cluster so features carry signal
    cl_rating = rng.integers(len(_RATINGS), size=n_c)
    cl_country = rng.integers(len(_COUNTRIES), size=n_c)
    rating = np.clip(cl_rating[cluster] + rng.integers(-1, 2, size=n_i), 0, len(_RATINGS) - 1)

    rows = {}
    for n in range(n_i):
        r = _RATINGS[rating[n]]
        labels = [
            r,
            f"SEC{cluster[n]:02d}",
            f"IND{cluster[n]:02d}-{rng.integers(3)}",
            _COUNTRIES[cl_country[cluster[n]]] if rng.random() < 0.8 else _COUNTRIES[rng.integers(len(_COUNTRIES))],
            _CURRENCIES[rng.integers(len(_CURRENCIES))],
            "IG" if rating[n] <= 3 else "HY",
            _SENIORITY[rng.integers(len(_SENIORITY))],
        ]
        rows[f"b{n:05d}"] = (labels, int(issue[n]), int(maturity[n]))
    table = _make_table(rows)

    days_out, users_out, items_out = [], [], []
    prev: list[tuple[int, int]] = []
    for t in range(spec.days):
        avail = (issue <= t) & (t <= maturity)
        n_t = max(1, int(rng.poisson(spec.events_per_day)))
        today: set[tuple[int, int]] = set()
        prev_ok = [p for p in prev if avail[p[1]]]
        n_rep = min(int(round(spec.repeat_prob * n_t)), len(prev_ok))
        if n_rep:
            for k in rng.choice(len(prev_ok), size=n_rep, replace=False):
                today.add(prev_ok[k])
        prev_set = set(prev)
        if avail.any():
            w_item = np.where(avail, appeal, 0.0)
            cl_mass = np.bincount(cluster, weights=w_item, minlength=n_c)
            open_cl = cl_mass > 0
            members = [np.flatnonzero((cluster == c) & avail) for c in range(n_c)]
            member_cdf = [np.cumsum(appeal[m]) / appeal[m].sum() if len(m) else None for m in members]
            regime = min(t // spec.regime_length, n_regimes - 1)
            pref = (1 - _PERSONAL_WEIGHT) * seg_pref[regime, segment] + _PERSONAL_WEIGHT * personal
            pref = pref * open_cl
            pref /= pref.sum(axis=1, keepdims=True)
            need = n_t - len(today)
            tries = 0
            while need > 0 and tries < 50:
                tries += 1
                us = rng.choice(n_u, size=2 * need, p=activity)
                cu = np.cumsum(pref[us], axis=1)
                cs = np.minimum((cu < rng.random(len(us))[:, None] * cu[:, -1:]).sum(axis=1), n_c - 1)
                draws = rng.random(len(us))
                for u, c, r in zip(us.tolist(), cs.tolist(), draws.tolist()):
                    m = members[c]
                    i = int(m[min(np.searchsorted(member_cdf[c], r), len(m) - 1)])
                    pair = (u, i)
                    if pair in today or pair in prev_set:
                        continue
                    today.add(pair)
                    need -= 1
                    if need == 0:
                        break
        prev = sorted(today)
        for u, i in prev:
            days_out.append(t)
            users_out.append(f"u{u:05d}")
            items_out.append(f"b{i:05d}")

    if not days_out:
        raise ConfigError("synthetic spec produced no events")
    elog = _build_log(days_out, users_out, items_out, item_keys=None)
    return make_dataset(elog, table)


def repeat_fraction(dataset: Dataset) -> float:
    """Share of events on days >= 1 whose (user, item) pair also occurred the previous day."""
    n_items = dataset.n_items
    code = dataset.user.astype(np.int64) * n_items + dataset.item
    rep = total = 0
    prev = np.zeros(0, dtype=np.int64)
    for t in range(dataset.last_day + 1):
        a, b = dataset.day_bounds(t, t + 1)
        cur = code[a:b]
        if t > 0:
            rep += int(np.isin(cur, prev).sum())
            total += len(cur)
        prev = cur
    return rep / total if total else 0.0


def daily_stats(dataset: Dataset) -> dict[str, float]:
    days = dataset.active_days(0, dataset.last_day + 1)
    ev, us, it = [], [], []
    for t in days:
        _, u, i = dataset.between(t, t + 1)
        ev.append(len(u))
        us.append(len(np.unique(u)))
        it.append(len(np.unique(i)))
    return {
        "days": len(days),
        "events_per_day": float(np.mean(ev)),
        "users_per_day": float(np.mean(us)),
        "items_per_day": float(np.mean(it)),
        "available_items_per_day": float(np.mean([dataset.items.available(t).sum() for t in days])),
        "repeat_fraction": repeat_fraction(dataset),
    }
