"""Class balancing and stratified train/test splitting."""

from __future__ import annotations

import math
from collections import defaultdict
from typing import NamedTuple

from ..seeding import rng_for
from .types import Patch, PatchError


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _by_stratum(patches: list[Patch]) -> dict[tuple[str, str], list[Patch]]:
    groups: dict[tuple[str, str], list[Patch]] = defaultdict(list)
    for p in sorted(patches, key=lambda q: q.patch_id):
        groups[p.stratum].append(p)
    return dict(sorted(groups.items()))


def balance_classes(patches: list[Patch], target: int, seed: int) -> tuple[list[Patch], dict[str, int]]:
    """Subsample every (class, view) group to exactly ``target`` members.

    Groups that fall short are kept whole; the shortfall is returned keyed
    ``"<class>/<view>"``. Output is ordered by patch_id, independent of input order.
    """
    kept: list[Patch] = []
    deficits: dict[str, int] = {}
    for (label, view), group in _by_stratum(patches).items():
        if len(group) > target:
            rng = rng_for(seed, "balance", label, view)
            idx = sorted(rng.choice(len(group), size=target, replace=False).tolist())
            group = [group[i] for i in idx]
        elif len(group) < target:
            deficits[f"{label}/{view}"] = target - len(group)
        kept.extend(group)
    kept.sort(key=lambda q: q.patch_id)
    return kept, deficits


class SplitResult(NamedTuple):
    train: list[Patch]
    test: list[Patch]
    report: dict


def _test_count(n: int, fraction: float) -> int:
    # both sides stay non-empty for any splittable stratum
    return min(max(round_half_up(fraction * n), 1), n - 1)


def split_train_test(patches: list[Patch], test_fraction: float, seed: int, leak_free: bool = False) -> SplitResult:
    """Stratified split by (class, view).

    Without ``leak_free`` each stratum contributes exactly round(fraction * n)
    test patches. With ``leak_free`` whole specimens are assigned to one side,
    chosen greedily per class to approach the same targets; per-stratum
    deviations are returned in the report.
    """
    if not patches:
        raise PatchError("cannot split an empty patch set")
    strata = _by_stratum(patches)
    for (label, view), group in strata.items():
        if len(group) < 2:
            raise PatchError(f"stratum {label}/{view} has {len(group)} patch(es); at least 2 are needed to split")

    test_ids: set[str] = set()
    if not leak_free:
        for (label, view), group in strata.items():
            rng = rng_for(seed, "split", label, view)
            order = rng.permutation(len(group))
            test_ids.update(group[i].patch_id for i in order[: _test_count(len(group), test_fraction)])
    else:
        test_ids = _leak_free_test_ids(patches, test_fraction, seed)

    train = [p for (_, group) in strata.items() for p in group if p.patch_id not in test_ids]
    test = [p for (_, group) in strata.items() for p in group if p.patch_id in test_ids]
    train.sort(key=lambda q: q.patch_id)
    test.sort(key=lambda q: q.patch_id)

    report = {"leak_free": leak_free, "test_fraction": test_fraction, "strata": {}}
    for (label, view), group in strata.items():
        n_test = sum(p.patch_id in test_ids for p in group)
        target = _test_count(len(group), test_fraction)
        report["strata"][f"{label}/{view}"] = {
            "total": len(group),
            "test": n_test,
            "target_test": target,
            "deviation": n_test - target,
        }
    return SplitResult(train, test, report)


def _leak_free_test_ids(patches: list[Patch], fraction: float, seed: int) -> set[str]:
    # specimen -> class of its first patch (a specimen is one physical stone)
    sizes: dict[str, int] = defaultdict(int)
    owner: dict[str, str] = {}
    for p in sorted(patches, key=lambda q: q.patch_id):
        sizes[p.specimen_id] += 1
        owner.setdefault(p.specimen_id, p.label)
    by_class: dict[str, list[str]] = defaultdict(list)
    for spec in sorted(sizes):
        by_class[owner[spec]].append(spec)

    test_specimens: set[str] = set()
    for label, specimens in sorted(by_class.items()):
        rng = rng_for(seed, "split-specimens", label)
        order = [specimens[i] for i in rng.permutation(len(specimens))]
        total = sum(sizes[s] for s in order)
        target = round_half_up(fraction * total)
        chosen: list[str] = []
        cur = 0
        for s in order:
            if abs(cur + sizes[s] - target) < abs(cur - target):
                chosen.append(s)
                cur += sizes[s]
        if not chosen and len(order) >= 2:
            chosen.append(min(order, key=lambda s: sizes[s]))
        if len(chosen) == len(order) and len(order) >= 2:
            chosen.remove(max(chosen, key=lambda s: sizes[s]))
        test_specimens.update(chosen)
    return {p.patch_id for p in patches if p.specimen_id in test_specimens}
