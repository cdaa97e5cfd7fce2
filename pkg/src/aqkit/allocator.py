"""Layer-balanced budgeted bit allocation.

Minimize sum_l E_l^2 with E_l = sum_{j in layer l} max(S_j, 0) * 2^(-2 b_j)
subject to the size-weighted mean bits-per-weight staying within the budget.
The greedy solver starts every tensor at the cheapest type and repeatedly
takes the one-step upgrade with the best (E_l^2 - E~_l^2) / extra-bits ratio.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .quantcore import QuantType
from .sensitivity import SensitivityEntry, SensitivityTable, module_rank

BUDGET_TOL = 1e-9
MAX_ENUMERATION = 10 ** 6


class InfeasibleBudgetError(ValueError):
    pass


class InstanceTooLargeError(ValueError):
    pass


def zero_overhead(qt: QuantType) -> float:
    return float(qt.bit_width)


def storage_overhead(qt: QuantType) -> float:
    return qt.effective_bpw()


OVERHEAD_MODELS = {"zero": zero_overhead, "storage": storage_overhead}


@dataclass
class AllocationInstance:
    table: SensitivityTable
    type_menu: List[QuantType]
    budget: float
    overhead: Callable[[QuantType], float] = zero_overhead

    def __post_init__(self):
        if not self.type_menu:
            raise ValueError("type menu is empty")
        bits = [t.bit_width for t in self.type_menu]
        if any(b >= c for b, c in zip(bits, bits[1:])):
            raise ValueError(f"type menu must be strictly ascending in bit width, got {bits}")
        cheapest = self.overhead(self.type_menu[0])
        if self.budget < cheapest - BUDGET_TOL:
            raise InfeasibleBudgetError(
                f"budget {self.budget} below cheapest type's {cheapest} bpw")

    @property
    def sizes(self) -> np.ndarray:
        return np.array([e.size for e in self.table.entries], dtype=np.float64)


@dataclass
class Assignment:
    types: Dict[str, QuantType]
    achieved_bpw: float
    objective: float
    layer_errors: Dict[int, float]
    history: List[dict] = field(default_factory=list)
    flags: List[str] = field(default_factory=list)

    def bits(self) -> Dict[str, int]:
        return {n: t.bit_width for n, t in self.types.items()}

    def to_dict(self):
        return {"types": {n: t.tag for n, t in self.types.items()},
                "bits": self.bits(),
                "achieved_bpw": self.achieved_bpw, "objective": self.objective,
                "layer_errors": {str(k): v for k, v in self.layer_errors.items()},
                "history": self.history, "flags": self.flags}


def clamped(score: float) -> float:
    return max(score, 0.0)


def layer_errors(table: SensitivityTable, types: Dict[str, QuantType]) -> Dict[int, float]:
    out = {l: 0.0 for l in sorted({e.layer for e in table.entries})}
    for e in table.entries:
        if e.name not in types:
            raise KeyError(f"tensor {e.name!r} has no assigned type")
        out[e.layer] += clamped(e.score) * types[e.name].error_factor
    return out


def objective(errors: Dict[int, float], squared: bool = True) -> float:
    vals = np.array(list(errors.values()))
    return float(np.sum(vals ** 2) if squared else np.sum(vals))


def achieved_bpw(types: Dict[str, QuantType], sizes: Dict[str, int],
                 overhead: Callable[[QuantType], float] = zero_overhead) -> float:
    tot = sum(sizes.values())
    if tot <= 0 or any(v <= 0 for v in sizes.values()):
        raise ValueError("tensor sizes must be positive")
    return sum(overhead(types[n]) * sizes[n] for n in sizes) / tot


def _finish(inst: AllocationInstance, types: Dict[str, QuantType], history=None) -> Assignment:
    sizes = {e.name: e.size for e in inst.table.entries}
    errs = layer_errors(inst.table, types)
    flags = [f"clamped:{e.name}" for e in inst.table.entries if e.score < 0]
    return Assignment(types, achieved_bpw(types, sizes, inst.overhead), objective(errs), errs,
                      history or [], flags)


def greedy_allocate(inst: AllocationInstance) -> Assignment:
    entries = inst.table.entries
    menu = inst.type_menu
    cost = [inst.overhead(t) for t in menu]
    eta = [t.error_factor for t in menu]
    size = np.array([e.size for e in entries], dtype=np.float64)
    total = size.sum()
    level = [0] * len(entries)
    score = [clamped(e.score) for e in entries]
    layers = sorted({e.layer for e in entries})
    E = {l: 0.0 for l in layers}
    for k, e in enumerate(entries):
        E[e.layer] += score[k] * eta[0]
    used = float(np.dot(size, [cost[0]] * len(entries)))
    history = []
    fill = False
    while True:
        best, best_key = None, None
        for k, e in enumerate(entries):
            lv = level[k]
            if lv + 1 >= len(menu):
                continue
            dbits = (cost[lv + 1] - cost[lv]) * size[k]
            if (used + dbits) / total > inst.budget + BUDGET_TOL:
                continue
            e_new = E[e.layer] - score[k] * (eta[lv] - eta[lv + 1])
            gain = (E[e.layer] ** 2 - e_new ** 2) / dbits
            if (gain <= 0) != fill:
                continue
            # larger gain first, then lower layer, earlier module, lower current width
            key = (-gain, e.layer, module_rank(e.module), menu[lv].bit_width, k)
            if best_key is None or key < best_key:
                best, best_key = (k, dbits, e_new, gain), key
        if best is None:
            if fill:
                break
            # leftover budget goes to upgrades that cannot lower the objective
            # (clamped or zero scores), so an unconstrained budget reaches the top type
            fill = True
            continue
        k, dbits, e_new, gain = best
        e = entries[k]
        E[e.layer] = e_new
        level[k] += 1
        used += dbits
        step = {"tensor": e.name, "to_bits": menu[level[k]].bit_width, "gain": gain}
        if fill:
            step["fill"] = True
        history.append(step)
    types = {e.name: menu[level[k]] for k, e in enumerate(entries)}
    return _finish(inst, types, history)


def brute_force_allocate(inst: AllocationInstance, squared: bool = True) -> Assignment:
    """Exact minimizer by enumeration; ties go to the lexicographically first assignment."""
    entries = inst.table.entries
    menu = inst.type_menu
    n, m = len(entries), len(menu)
    if m ** n > MAX_ENUMERATION:
        raise InstanceTooLargeError(f"{m}^{n} assignments exceed {MAX_ENUMERATION}")
    cost = np.array([inst.overhead(t) for t in menu])
    eta = np.array([t.error_factor for t in menu])
    size = np.array([e.size for e in entries], dtype=np.float64)
    score = np.array([clamped(e.score) for e in entries])
    layers = sorted({e.layer for e in entries})
    lidx = np.array([layers.index(e.layer) for e in entries])
    # rows enumerate in itertools.product order, so the first strict minimum wins ties
    total = m ** n
    best, best_obj = -1, np.inf
    chunk = 1 << 16
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total))
        grid = np.stack(np.unravel_index(idx, (m,) * n), axis=1) if n else idx[:, None]
        bpw = (cost[grid] * size).sum(axis=1) / size.sum()
        contrib = score * eta[grid]
        E = np.zeros((len(idx), len(layers)))
        for j in range(n):
            E[:, lidx[j]] += contrib[:, j]
        obj = (E ** 2).sum(axis=1) if squared else E.sum(axis=1)
        obj = np.where(bpw <= inst.budget + BUDGET_TOL, obj, np.inf)
        k = int(np.argmin(obj))
        if obj[k] < best_obj:
            best, best_obj, best_row = start + k, obj[k], grid[k]
    if best < 0:
        raise InfeasibleBudgetError(f"no assignment meets budget {inst.budget}")
    types = {e.name: menu[int(best_row[k])] for k, e in enumerate(entries)}
    return _finish(inst, types)


def allocate_grouped(inst: AllocationInstance, groups: Dict[str, str]) -> Assignment:
    """Separate budgets per tensor group (e.g. vision vs language), each at ``inst.budget``."""
    merged: Dict[str, QuantType] = {}
    history = []
    for g in sorted(set(groups.values())):
        sub = SensitivityTable([e for e in inst.table.entries if groups[e.name] == g])
        a = greedy_allocate(AllocationInstance(sub, inst.type_menu, inst.budget, inst.overhead))
        merged.update(a.types)
        history += a.history
    return _finish(inst, {e.name: merged[e.name] for e in inst.table.entries}, history)


def table_from_arrays(scores: Sequence[float], layers: Sequence[int],
                      sizes: Sequence[int], modules: Optional[Sequence[str]] = None
                      ) -> SensitivityTable:
    modules = modules or ["up"] * len(scores)
    ents = [SensitivityEntry(f"{l}.{m}.{k}", int(l), m, float(s), int(z))
            for k, (s, l, z, m) in enumerate(zip(scores, layers, sizes, modules))]
    return SensitivityTable(ents)


def random_instance(rng: np.random.Generator, max_tensors: int = 12, max_layers: int = 4,
                    bits=(2, 3, 4, 8)) -> AllocationInstance:
    """Random small instance whose enumeration stays within MAX_ENUMERATION."""
    n = int(rng.integers(2, max_tensors + 1))
    menu_bits = list(bits)
    while len(menu_bits) ** n > MAX_ENUMERATION:
        menu_bits.pop(int(rng.integers(1, len(menu_bits))))
    n_layers = int(rng.integers(1, min(max_layers, n) + 1))
    layers = np.sort(np.concatenate([np.arange(1, n_layers + 1),
                                     rng.integers(1, n_layers + 1, n - n_layers)]))
    mods = ["Q", "K", "V", "O", "up", "down", "gate"]
    modules = [mods[int(i)] for i in rng.integers(0, len(mods), n)]
    scores = rng.lognormal(0.0, 1.0, n)
    sizes = rng.integers(1, 9, n) * 256
    table = table_from_arrays(scores, layers, sizes, modules)
    menu = [QuantType(b) for b in menu_bits]
    budget = float(rng.uniform(menu_bits[0], menu_bits[-1]))
    return AllocationInstance(table, menu, budget)
