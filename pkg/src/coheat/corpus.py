"""Interaction tables, dataset loading, scenario splits, and synthetic data.

File format: one pair of 0-based integer ids per line, any whitespace as
separator on read, a single tab on write. Tables are deduplicated and kept
in canonical (left, right) sorted order so that writes are reproducible.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

UB_FILE = "user_bundle.txt"
UI_FILE = "user_item.txt"
BI_FILE = "bundle_item.txt"
SIZE_FILE = "data_size.txt"

# fraction of a bundle's items a user is assumed to have touched when the
# synthetic generator induces user-item pairs from a user-bundle interaction
_INDUCED_ITEM_PROB = 0.9


@dataclass(frozen=True)
class InteractionTable:
    """Deduplicated (left_id, right_id) pairs with declared cardinalities."""

    pairs: np.ndarray  # (n, 2) int64, lexicographically sorted
    n_left: int
    n_right: int

    def __len__(self) -> int:
        return self.pairs.shape[0]

    def pair_set(self) -> frozenset[tuple[int, int]]:
        return frozenset(map(tuple, self.pairs.tolist()))

    def left_ids(self) -> np.ndarray:
        return self.pairs[:, 0]

    def right_ids(self) -> np.ndarray:
        return self.pairs[:, 1]


def make_table(pairs, n_left: int, n_right: int) -> InteractionTable:
    """Build a canonical InteractionTable: validated, deduplicated, sorted."""
    arr = np.asarray(list(pairs) if not isinstance(pairs, np.ndarray) else pairs, dtype=np.int64)
    if arr.size == 0:
        arr = arr.reshape(0, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise DataError(f"expected (n, 2) pair array, got shape {arr.shape}")
    if arr.shape[0]:
        bad = (arr[:, 0] < 0) | (arr[:, 0] >= n_left) | (arr[:, 1] < 0) | (arr[:, 1] >= n_right)
        if bad.any():
            l, r = arr[np.argmax(bad)]
            raise DataError(
                f"id out of range: pair ({l}, {r}) with cardinalities ({n_left}, {n_right})"
            )
        arr = np.unique(arr, axis=0)
    return InteractionTable(pairs=arr, n_left=int(n_left), n_right=int(n_right))


def load_pairs(path: str | Path, n_left: int, n_right: int) -> InteractionTable:
    """Load whitespace-separated id pairs; duplicates collapse, bad ids reject."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"interaction file not found: {path}")
    rows = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected two integers, got {line.rstrip()!r}")
            try:
                l, r = int(parts[0]), int(parts[1])
            except ValueError:
                raise DataError(
                    f"{path}:{lineno}: expected two integers, got {line.rstrip()!r}"
                ) from None
            if not (0 <= l < n_left and 0 <= r < n_right):
                raise DataError(
                    f"{path}:{lineno}: id out of range: pair ({l}, {r}) "
                    f"with cardinalities ({n_left}, {n_right})"
                )
            rows.append((l, r))
    return make_table(rows, n_left, n_right)


def write_pairs(table: InteractionTable, path: str | Path) -> None:
    """Write a table in canonical order, one tab-separated pair per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for l, r in table.pairs.tolist():
            fh.write(f"{l}\t{r}\n")


@dataclass(frozen=True)
class DatasetBundle:
    """The three interaction tables over shared user/bundle/item id spaces."""

    ub: InteractionTable  # users x bundles
    ui: InteractionTable  # users x items
    bi: InteractionTable  # bundles x items
    u_count: int
    b_count: int
    i_count: int

    def __post_init__(self):
        ok = (
            self.ub.n_left == self.ui.n_left == self.u_count
            and self.ub.n_right == self.bi.n_left == self.b_count
            and self.ui.n_right == self.bi.n_right == self.i_count
        )
        if not ok:
            raise DataError("interaction tables disagree on shared cardinalities")
        sizes = np.bincount(self.bi.left_ids(), minlength=self.b_count)
        empty = np.flatnonzero(sizes == 0)
        if empty.size:
            raise DataError(
                "bundles without affiliated items (mean pooling undefined): "
                f"{empty.tolist()}"
            )


@dataclass(frozen=True)
class PopularityIndex:
    """Per-bundle count of distinct interacting users in the training table."""

    n: np.ndarray  # (b_count,) int64

    def total(self) -> int:
        return int(self.n.sum())


def popularity_counts(train_ub: InteractionTable) -> PopularityIndex:
    counts = np.bincount(train_ub.right_ids(), minlength=train_ub.n_right)
    return PopularityIndex(n=counts.astype(np.int64))


_SCENARIOS = ("warm", "cold", "all")


@dataclass(frozen=True)
class ScenarioSplit:
    """Train/val/test user-bundle tables plus the warm/cold bundle partition."""

    scenario: str
    train: InteractionTable
    val: InteractionTable
    test: InteractionTable
    warm_bundles: np.ndarray  # sorted ids with >=1 train pair
    cold_bundles: np.ndarray  # sorted complement


def _partition_counts(n: int, ratios: tuple[float, float, float]) -> tuple[int, int, int]:
    # floor for train and val, remainder to test
    n_train = int(np.floor(ratios[0] * n))
    n_val = int(np.floor(ratios[1] * n))
    n_test = n - n_train - n_val
    return n_train, n_val, n_test


def _warm_cold(train: InteractionTable, b_count: int) -> tuple[np.ndarray, np.ndarray]:
    counts = np.bincount(train.right_ids(), minlength=b_count)
    warm = np.flatnonzero(counts > 0)
    cold = np.flatnonzero(counts == 0)
    return warm, cold


def split_scenario(
    data: DatasetBundle,
    scenario: str,
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2),
    seed: int = 0,
) -> ScenarioSplit:
    """Split the user-bundle table per the warm / cold / all protocols.

    warm: interaction-level split. cold: bundle-level split, every pair
    follows its bundle. all: bundles covering roughly half of the eval
    mass are held out entirely; val and test each combine a cold half
    (held-out bundles) with a warm half (trained bundles).
    """
    if scenario not in _SCENARIOS:
        raise ConfigError(f"unknown scenario {scenario!r}, expected one of {_SCENARIOS}")
    if abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ConfigError(f"ratios must be non-negative and sum to 1, got {ratios}")
    n = len(data.ub)
    if n == 0:
        raise DataError("cannot split an empty user-bundle table")
    rng = np.random.default_rng(seed)
    pairs = data.ub.pairs

    if scenario == "warm":
        order = rng.permutation(n)
        n_train, n_val, n_test = _partition_counts(n, ratios)
        if min(n_train, n_val, n_test) == 0:
            raise DataError(f"insufficient data to populate all partitions ({n} pairs)")
        tr = pairs[order[:n_train]]
        va = pairs[order[n_train : n_train + n_val]]
        te = pairs[order[n_train + n_val :]]
    elif scenario == "cold":
        bundles = np.unique(pairs[:, 1])
        order = rng.permutation(bundles.size)
        shuffled = bundles[order]
        b_train, b_val, b_test = _partition_counts(bundles.size, ratios)
        if min(b_train, b_val, b_test) == 0:
            raise DataError(
                f"insufficient bundles to populate all partitions ({bundles.size} interacting bundles)"
            )
        train_b = set(shuffled[:b_train].tolist())
        val_b = set(shuffled[b_train : b_train + b_val].tolist())
        tr, va, te = [], [], []
        for l, r in pairs.tolist():
            if r in train_b:
                tr.append((l, r))
            elif r in val_b:
                va.append((l, r))
            else:
                te.append((l, r))
        if not tr or not va or not te:
            raise DataError("a cold-split partition received no interactions")
    else:  # all
        n_train, n_val, n_test = _partition_counts(n, ratios)
        if min(n_train, n_val, n_test) == 0:
            raise DataError(f"insufficient data to populate all partitions ({n} pairs)")
        counts = np.bincount(pairs[:, 1], minlength=data.b_count)
        bundles = np.flatnonzero(counts > 0)
        shuffled = bundles[rng.permutation(bundles.size)]
        cold_mass_target = (n_val + n_test) // 2
        held, mass = [], 0
        for b in shuffled.tolist():
            if mass >= cold_mass_target:
                break
            if mass + counts[b] <= cold_mass_target:
                held.append(b)
                mass += int(counts[b])
        held_set = set(held)
        cold_mask = np.isin(pairs[:, 1], np.asarray(sorted(held_set), dtype=np.int64))
        cold_pool = pairs[cold_mask]
        warm_pool = pairs[~cold_mask]
        if warm_pool.shape[0] < n_train:
            raise DataError("insufficient warm interactions to fill the training partition")
        warm_pool = warm_pool[rng.permutation(warm_pool.shape[0])]
        cold_pool = cold_pool[rng.permutation(cold_pool.shape[0])]
        tr = warm_pool[:n_train]
        warm_eval = warm_pool[n_train:]
        val_cold_n = min(n_val // 2, cold_pool.shape[0])
        val_warm_n = min(n_val - val_cold_n, warm_eval.shape[0])
        va = np.concatenate([cold_pool[:val_cold_n], warm_eval[:val_warm_n]])
        te = np.concatenate([cold_pool[val_cold_n:], warm_eval[val_warm_n:]])
        if va.shape[0] == 0 or te.shape[0] == 0:
            raise DataError("an all-scenario partition received no interactions")

    train = make_table(tr, data.u_count, data.b_count)
    val = make_table(va, data.u_count, data.b_count)
    test = make_table(te, data.u_count, data.b_count)
    warm, cold = _warm_cold(train, data.b_count)
    return ScenarioSplit(
        scenario=scenario, train=train, val=val, test=test, warm_bundles=warm, cold_bundles=cold
    )


def _largest_remainder(total: int, weights: np.ndarray) -> np.ndarray:
    quota = total * weights / weights.sum()
    base = np.floor(quota).astype(np.int64)
    shortfall = total - int(base.sum())
    order = np.argsort(-(quota - base), kind="stable")
    base[order[:shortfall]] += 1
    return base


def _apportion_capped(total: int, weights: np.ndarray, cap: int) -> np.ndarray:
    """Largest-remainder apportionment with a per-slot cap; deterministic."""
    counts = np.minimum(_largest_remainder(total, weights), cap)
    deficit = total - int(counts.sum())
    order = np.argsort(-weights, kind="stable")
    while deficit > 0:
        placed = False
        for idx in order:
            if deficit == 0:
                break
            if counts[idx] < cap:
                counts[idx] += 1
                deficit -= 1
                placed = True
        if not placed:
            break  # everything saturated
    return counts


def gen_synthetic(
    u_count: int,
    b_count: int,
    i_count: int,
    zipf_exponent: float,
    interactions: int,
    seed: int = 0,
) -> DatasetBundle:
    """Generate a skewed dataset: power-law bundle popularity, 1-20 items per
    bundle, user-item pairs induced from interacted bundles plus noise."""
    if min(u_count, b_count, i_count) < 1:
        raise ConfigError("u_count, b_count, i_count must all be >= 1")
    if zipf_exponent <= 0:
        raise ConfigError(f"zipf_exponent must be > 0, got {zipf_exponent}")
    if interactions < 0:
        raise ConfigError(f"interactions must be >= 0, got {interactions}")
    rng = np.random.default_rng(seed)

    bi_rows = []
    bundle_items: list[np.ndarray] = []
    for b in range(b_count):
        size = int(rng.integers(1, min(20, i_count) + 1))
        items = rng.choice(i_count, size=size, replace=False)
        bundle_items.append(items)
        bi_rows.extend((b, int(i)) for i in items)

    weights = np.arange(1, b_count + 1, dtype=np.float64) ** (-zipf_exponent)
    per_bundle = (
        _apportion_capped(interactions, weights, cap=u_count)
        if interactions
        else np.zeros(b_count, dtype=np.int64)
    )
    ub_rows = []
    for b, cnt in enumerate(per_bundle.tolist()):
        if cnt:
            users = rng.choice(u_count, size=cnt, replace=False)
            ub_rows.extend((int(u), b) for u in users)

    ui_rows = []
    for u, b in ub_rows:
        items = bundle_items[b]
        keep = rng.random(items.size) < _INDUCED_ITEM_PROB
        ui_rows.extend((u, int(i)) for i in items[keep])
    n_noise = interactions // 2
    if n_noise:
        noise_u = rng.integers(0, u_count, size=n_noise)
        noise_i = rng.integers(0, i_count, size=n_noise)
        ui_rows.extend(zip(noise_u.tolist(), noise_i.tolist()))
    if not ui_rows:  # keep the UI graph non-degenerate even with interactions=0
        ui_rows.append((0, int(bundle_items[0][0])))

    return DatasetBundle(
        ub=make_table(ub_rows, u_count, b_count),
        ui=make_table(ui_rows, u_count, i_count),
        bi=make_table(bi_rows, b_count, i_count),
        u_count=u_count,
        b_count=b_count,
        i_count=i_count,
    )


def save_dataset(data: DatasetBundle, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_pairs(data.ub, out_dir / UB_FILE)
    write_pairs(data.ui, out_dir / UI_FILE)
    write_pairs(data.bi, out_dir / BI_FILE)
    (out_dir / SIZE_FILE).write_text(f"{data.u_count}\t{data.b_count}\t{data.i_count}\n")


def load_dataset(dataset_dir: str | Path) -> DatasetBundle:
    """Load the three-table directory layout; cardinalities come from
    data_size.txt when present, otherwise from the maximum observed ids."""
    d = Path(dataset_dir)
    for name in (UB_FILE, UI_FILE, BI_FILE):
        if not (d / name).exists():
            raise DataError(f"missing dataset file: {d / name}")
    size_file = d / SIZE_FILE
    if size_file.exists():
        parts = size_file.read_text().split()
        if len(parts) != 3:
            raise DataError(f"{size_file}: expected three integers (users bundles items)")
        u_count, b_count, i_count = (int(p) for p in parts)
    else:
        warnings.warn(f"{size_file} absent; inferring cardinalities from max ids")
        u_count = b_count = i_count = 0
        raw = {}
        for name in (UB_FILE, UI_FILE, BI_FILE):
            arr = np.loadtxt(d / name, dtype=np.int64, ndmin=2)
            raw[name] = arr if arr.size else np.zeros((0, 2), dtype=np.int64)
        u_count = int(max(raw[UB_FILE][:, 0].max(initial=-1), raw[UI_FILE][:, 0].max(initial=-1))) + 1
        b_count = int(max(raw[UB_FILE][:, 1].max(initial=-1), raw[BI_FILE][:, 0].max(initial=-1))) + 1
        i_count = int(max(raw[UI_FILE][:, 1].max(initial=-1), raw[BI_FILE][:, 1].max(initial=-1))) + 1
    return DatasetBundle(
        ub=load_pairs(d / UB_FILE, u_count, b_count),
        ui=load_pairs(d / UI_FILE, u_count, i_count),
        bi=load_pairs(d / BI_FILE, b_count, i_count),
        u_count=u_count,
        b_count=b_count,
        i_count=i_count,
    )


def save_split(split: ScenarioSplit, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    s = split.scenario
    write_pairs(split.train, out_dir / f"{s}_train.txt")
    write_pairs(split.val, out_dir / f"{s}_val.txt")
    write_pairs(split.test, out_dir / f"{s}_test.txt")
    with (out_dir / f"{s}_cold_bundles.txt").open("w", encoding="utf-8") as fh:
        for b in split.cold_bundles.tolist():
            fh.write(f"{b}\n")


def load_split(split_dir: str | Path, scenario: str, u_count: int, b_count: int) -> ScenarioSplit:
    d = Path(split_dir)
    if scenario not in _SCENARIOS:
        raise ConfigError(f"unknown scenario {scenario!r}, expected one of {_SCENARIOS}")
    train = load_pairs(d / f"{scenario}_train.txt", u_count, b_count)
    val = load_pairs(d / f"{scenario}_val.txt", u_count, b_count)
    test = load_pairs(d / f"{scenario}_test.txt", u_count, b_count)
    warm, cold = _warm_cold(train, b_count)
    return ScenarioSplit(
        scenario=scenario, train=train, val=val, test=test, warm_bundles=warm, cold_bundles=cold
    )
