"""Trade-off search over block-floating-point configuration candidates.

Enumerates (shared-exponent width, block size) candidates, obtains each
candidate's accuracy loss (proxy or measured table) and its traffic-derived
performance loss (tiling-optimized per layer, normalized by the candidate-set
maximum), and returns the plan minimizing

    objective = acc_loss + alpha * perf_loss

Modes ablate single factors: ``full`` optimizes the weighted objective,
``no_qat`` ignores accuracy and minimizes traffic (for setups with no trained
accuracy numbers), ``no_dm`` minimizes accuracy loss alone, ``pareto`` treats
the two losses independently and picks the frontier's knee.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

from .accuracy import (
    AccuracyError,
    AccuracyTable,
    layer_samples,
    lookup_acc_loss,
    proxy_layer_loss,
)
from .codec import BfpSpec
from .dm import OPERANDS
from .energy import EnergyParams, energy, normalized_energy
from .model import ModelDesc, layer_volumes
from .tiling import InfeasibleError, LayerMappingTable

DEFAULT_BS_SET = (1, 2, 4, 8, 16, 24, 32, 48)
DEFAULT_ALPHA = 0.2

MODES = ("full", "no_qat", "no_dm", "pareto")
LOSS_SOURCES = ("proxy", "table")
SCOPES = ("model", "layer")

ORIGINAL_BITS = 32.0  # unquantized reference representation


class SearchError(ValueError):
    pass


def default_se_set(total_bits: int) -> tuple:
    if total_bits == 16:
        return (2, 3, 4, 5, 6, 7)
    if total_bits == 8:
        return (2, 3, 4, 5, 6)
    raise SearchError(f"no default shared-exponent set for total_bits={total_bits}")


@dataclass(frozen=True)
class CandidateSpace:
    """The (SE, BS) grid the search enumerates, per total bitwidth."""

    total_bits: int = 8
    se_set: tuple = None
    bs_set: tuple = DEFAULT_BS_SET
    scope: str = "model"

    def __post_init__(self):
        if self.se_set is None:
            object.__setattr__(self, "se_set", default_se_set(self.total_bits))
        if not self.se_set or not self.bs_set:
            raise SearchError("candidate space must have nonempty SE and BS sets")
        if self.scope not in SCOPES:
            raise SearchError(f"scope must be one of {SCOPES}, got {self.scope!r}")
        object.__setattr__(self, "se_set", tuple(sorted(self.se_set)))
        object.__setattr__(self, "bs_set", tuple(sorted(self.bs_set)))

    def configs(self):
        for se in self.se_set:
            for bs in self.bs_set:
                yield (se, bs, self.total_bits)


def specs_for_config(config) -> tuple:
    se, bs, qb = config
    return tuple(BfpSpec(qb, se, bs, role) for role in OPERANDS)


@dataclass
class CandidateEval:
    config: tuple  # (se, bs, qb)
    feasible: bool
    dm_sum_bits: float = math.inf
    raw_acc: float = math.inf
    acc_loss: float = math.inf
    perf_loss: float = math.inf
    objective: float = math.inf
    layer_choices: list = field(default_factory=list)  # (mapping, dm_bits) per layer

    def row(self) -> dict:
        se, bs, qb = self.config
        return {
            "se": se,
            "bs": bs,
            "qb": qb,
            "feasible": self.feasible,
            "dm_sum_bits": self.dm_sum_bits if self.feasible else None,
            "acc_loss": self.acc_loss if self.feasible else None,
            "perf_loss": self.perf_loss if self.feasible else None,
            "objective": self.objective if self.feasible else None,
        }


@dataclass
class LayerAssignment:
    layer_index: int
    config: tuple
    specs: tuple
    mapping: object
    breakdown: object


@dataclass
class QuantPlan:
    """Search output: per-layer formats and mappings plus the loss summary."""

    model_name: str
    mode: str
    alpha: float
    scope: str
    assignments: list
    acc_loss: float
    perf_loss: float
    objective: float
    dm_sum_bits: float
    dm_max_bits: float
    candidates: list = field(default_factory=list)
    pareto: list = field(default_factory=list)
    energy_report: object = None
    baseline_energy_report: object = None

    def to_record(self) -> dict:
        rec = {
            "format_version": 1,
            "model": self.model_name,
            "mode": self.mode,
            "alpha": self.alpha,
            "scope": self.scope,
            "acc_loss": self.acc_loss,
            "perf_loss": self.perf_loss,
            "objective": self.objective,
            "dm_sum_bits": self.dm_sum_bits,
            "dm_max_bits": self.dm_max_bits,
            "layers": [
                {
                    "layer": a.layer_index,
                    "se": a.config[0],
                    "bs": a.config[1],
                    "qb": a.config[2],
                    "permutation": list(a.mapping.permutation),
                    "tiles": list(a.mapping.tiles),
                    "dm_bits": a.breakdown.dm_total_bits,
                    "dm_breakdown": a.breakdown.to_record(),
                }
                for a in self.assignments
            ],
            "candidates": list(self.candidates),
        }
        if self.pareto:
            rec["pareto"] = list(self.pareto)
        if self.energy_report is not None:
            rec["energy"] = self.energy_report.to_record()
        if self.baseline_energy_report is not None:
            rec["baseline_energy"] = self.baseline_energy_report.to_record()
        return rec


# ---------------------------------------------------------------------------
# Candidate selection (pure, for direct property testing)
# ---------------------------------------------------------------------------


def selection_key(cand: CandidateEval, mode: str, alpha: float):
    """Deterministic ranking: mode objective, then smaller traffic, larger
    block size, smaller shared-exponent width."""
    se, bs, _ = cand.config
    if mode == "no_qat":
        primary = cand.dm_sum_bits
    elif mode == "no_dm":
        primary = cand.acc_loss
    else:
        primary = cand.objective
    return (primary, cand.dm_sum_bits, -bs, se)


def select_candidate(cands, mode: str, alpha: float) -> CandidateEval:
    feasible = [c for c in cands if c.feasible]
    if not feasible:
        raise InfeasibleError("every candidate is infeasible under the memory capacity")
    if mode == "pareto":
        frontier = pareto_frontier(feasible)
        return knee_point(frontier, alpha)
    return min(feasible, key=lambda c: selection_key(c, mode, alpha))


def pareto_frontier(cands) -> list:
    """Non-dominated candidates in (acc_loss, perf_loss), sorted by acc_loss."""
    ordered = sorted(cands, key=lambda c: (c.acc_loss, c.perf_loss, selection_key(c, "full", 0.0)))
    frontier = []
    best_perf = math.inf
    for c in ordered:
        if c.perf_loss < best_perf:
            frontier.append(c)
            best_perf = c.perf_loss
    return frontier


def knee_point(frontier, alpha: float) -> CandidateEval:
    """Frontier point farthest (perpendicular) from the endpoint chord;
    degenerate frontiers fall back to the weighted-objective minimum."""
    if not frontier:
        raise InfeasibleError("empty Pareto frontier")
    if len(frontier) <= 2:
        return min(frontier, key=lambda c: selection_key(c, "full", alpha))
    a = frontier[0]
    b = frontier[-1]
    ax, ay = a.acc_loss, a.perf_loss
    bx, by = b.acc_loss, b.perf_loss
    chord = math.hypot(bx - ax, by - ay)
    if chord == 0.0:
        return min(frontier, key=lambda c: selection_key(c, "full", alpha))
    best = None
    for c in frontier:
        dist = abs((bx - ax) * (ay - c.perf_loss) - (ax - c.acc_loss) * (by - ay)) / chord
        key = (-dist,) + selection_key(c, "full", alpha)
        if best is None or key < best[0]:
            best = (key, c)
    return best[1]


# ---------------------------------------------------------------------------
# Search drivers
# ---------------------------------------------------------------------------


def _build_table(args):
    layer, ceil_k, count_first_load = args
    return LayerMappingTable(layer, ceil_k=ceil_k, count_first_load=count_first_load)


def build_mapping_tables(model: ModelDesc, ceil_k: int = 8, count_first_load: bool = True, jobs: int = 1) -> dict:
    """Per-layer mapping tables; independent layers build in parallel."""
    args = [(layer, ceil_k, count_first_load) for layer in model.layers]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            tables = list(pool.map(_build_table, args))
    else:
        tables = [_build_table(a) for a in args]
    return {layer.index: table for layer, table in zip(model.layers, tables)}


def _gather_samples(model, sample_dir, seed):
    kwargs = {"model_dir": sample_dir}
    if seed is not None:
        kwargs["seed"] = seed
    return {layer.index: layer_samples(layer, **kwargs) for layer in model.layers}


def _acc_raw_per_layer(model, config, loss_source, samples, table: AccuracyTable | None):
    """Per-layer raw accuracy terms for one config (proxy MSE or table entries)."""
    specs = specs_for_config(config)
    out = {}
    for layer in model.layers:
        if loss_source == "proxy":
            out[layer.index] = proxy_layer_loss(layer, specs, samples[layer.index])
        else:
            key = (layer.index,) + tuple(config)
            if key not in table.layer_entries:
                raise AccuracyError(
                    f"accuracy table has no per-layer entry for layer {layer.index}, config {config}"
                )
            out[layer.index] = table.layer_entries[key]
    return out


def _whole_model_acc(model, config, loss_source, samples, table):
    if loss_source == "table":
        return lookup_acc_loss(table, config, model=model, compose=True)
    per_layer = _acc_raw_per_layer(model, config, "proxy", samples, None)
    total = 0.0
    wsum = 0.0
    for layer in model.layers:
        w = float(layer_volumes(layer)[1])
        total += w * per_layer[layer.index]
        wsum += w
    return total / wsum


def search(
    model: ModelDesc,
    space: CandidateSpace,
    alpha: float = DEFAULT_ALPHA,
    mc_bits: float = None,
    loss_source: str = "proxy",
    mode: str = "full",
    acc_table: AccuracyTable | None = None,
    samples: dict | None = None,
    tables: dict | None = None,
    energy_params: EnergyParams = EnergyParams(),
    count_first_load: bool = True,
    jobs: int = 1,
    seed: int | None = None,
    sample_dir: str | None = None,
) -> QuantPlan:
    """Search the candidate grid for the plan minimizing the trade-off objective.

    One (SE, BS) pair applies to the whole model (``space.scope == 'model'``);
    per-layer assignment goes through :func:`decompose_search`.  Layer sample
    references resolve against ``sample_dir`` (usually the model file's
    directory); layers without samples fall back to fixed-seed synthetic ones.
    """
    if mode not in MODES:
        raise SearchError(f"mode must be one of {MODES}, got {mode!r}")
    if loss_source not in LOSS_SOURCES:
        raise SearchError(f"loss_source must be one of {LOSS_SOURCES}, got {loss_source!r}")
    if alpha < 0:
        raise SearchError(f"alpha must be >= 0, got {alpha}")
    if mc_bits is None or mc_bits <= 0:
        raise SearchError(f"memory capacity (bits) must be positive, got {mc_bits}")
    if loss_source == "table" and acc_table is None:
        raise SearchError("loss_source='table' needs an accuracy table")
    if space.scope == "layer":
        if mode != "full":
            raise SearchError("per-layer scope supports only the full trade-off mode")
        return decompose_search(
            model, space, alpha, mc_bits,
            loss_source=loss_source, acc_table=acc_table, samples=samples, tables=tables,
            energy_params=energy_params, count_first_load=count_first_load, jobs=jobs,
            seed=seed, sample_dir=sample_dir,
        )

    if tables is None:
        tables = build_mapping_tables(model, count_first_load=count_first_load, jobs=jobs)
    if loss_source == "proxy" and samples is None:
        samples = _gather_samples(model, sample_dir, seed)

    cands = []
    for config in space.configs():
        specs = specs_for_config(config)
        ev = CandidateEval(config=config, feasible=True)
        dm_total = 0.0
        choices = []
        for layer in model.layers:
            hit = tables[layer.index].query(specs, mc_bits)
            if hit is None:
                ev.feasible = False
                break
            mapping, dm_bits, _foot = hit
            dm_total += dm_bits
            choices.append((mapping, dm_bits))
        if not ev.feasible:
            cands.append(ev)
            continue
        ev.dm_sum_bits = dm_total
        ev.layer_choices = choices
        ev.raw_acc = _whole_model_acc(model, config, loss_source, samples, acc_table)
        cands.append(ev)

    feasible = [c for c in cands if c.feasible]
    if not feasible:
        raise InfeasibleError("every candidate is infeasible under the memory capacity")
    dm_max = max(c.dm_sum_bits for c in feasible)
    if dm_max <= 0:
        raise SearchError(
            "every candidate moves zero bits (literal reuse accounting with whole-layer "
            "residency); performance loss cannot be normalized"
        )
    acc_norm = max(c.raw_acc for c in feasible) if loss_source == "proxy" else 1.0
    for c in feasible:
        c.perf_loss = c.dm_sum_bits / dm_max
        c.acc_loss = c.raw_acc / acc_norm if acc_norm > 0 else 0.0
        c.objective = c.acc_loss + alpha * c.perf_loss

    winner = select_candidate(cands, mode, alpha)
    return _assemble_plan(
        model, winner, cands, dm_max, alpha, mode, space.scope,
        tables, mc_bits, energy_params, count_first_load,
    )


def decompose_search(
    model: ModelDesc,
    space: CandidateSpace,
    alpha: float = DEFAULT_ALPHA,
    mc_bits: float = None,
    loss_source: str = "proxy",
    acc_table: AccuracyTable | None = None,
    samples: dict | None = None,
    tables: dict | None = None,
    energy_params: EnergyParams = EnergyParams(),
    count_first_load: bool = True,
    jobs: int = 1,
    seed: int | None = None,
    sample_dir: str | None = None,
) -> QuantPlan:
    """Per-layer independent assignment over the joint candidate space.

    Both loss terms are additive over layers, so with the normalizers fixed
    (either term's joint maximum separates into per-layer maxima) the
    per-layer argmin IS the joint optimum of the weighted objective.
    """
    if mc_bits is None or mc_bits <= 0:
        raise SearchError(f"memory capacity (bits) must be positive, got {mc_bits}")
    if loss_source == "table":
        if acc_table is None:
            raise SearchError("loss_source='table' needs an accuracy table")
        if not acc_table.layer_entries:
            raise AccuracyError(
                "per-layer search needs per-layer accuracy entries; "
                "this table only has whole-model rows -- use scope='model'"
            )
    if tables is None:
        tables = build_mapping_tables(model, count_first_load=count_first_load, jobs=jobs)
    if loss_source == "proxy" and samples is None:
        samples = _gather_samples(model, sample_dir, seed)

    configs = list(space.configs())
    wsum = sum(float(layer_volumes(layer)[1]) for layer in model.layers)

    # Per (layer, config): traffic of the optimal mapping and the raw accuracy term.
    per_layer = {}
    for layer in model.layers:
        rows = {}
        for config in configs:
            specs = specs_for_config(config)
            hit = tables[layer.index].query(specs, mc_bits)
            if hit is None:
                continue
            mapping, dm_bits, _ = hit
            if loss_source == "proxy":
                acc = proxy_layer_loss(layer, specs, samples[layer.index])
            else:
                key = (layer.index,) + tuple(config)
                if key not in acc_table.layer_entries:
                    raise AccuracyError(
                        f"accuracy table has no per-layer entry for layer {layer.index}, config {config}"
                    )
                acc = acc_table.layer_entries[key]
            w = float(layer_volumes(layer)[1]) / wsum
            rows[config] = (mapping, dm_bits, w * acc)
        if not rows:
            raise InfeasibleError(f"layer {layer.index}: every candidate is infeasible")
        per_layer[layer.index] = rows

    # Joint normalizers separate into per-layer maxima.
    dm_max = sum(max(r[1] for r in rows.values()) for rows in per_layer.values())
    if dm_max <= 0:
        raise SearchError(
            "every candidate moves zero bits (literal reuse accounting with whole-layer "
            "residency); performance loss cannot be normalized"
        )
    acc_norm = sum(max(r[2] for r in rows.values()) for rows in per_layer.values())
    if loss_source == "table":
        acc_norm = 1.0

    assignments = []
    dm_total = 0.0
    acc_total = 0.0
    for layer in model.layers:
        rows = per_layer[layer.index]

        def key(config):
            mapping, dm_bits, acc_term = rows[config]
            acc_scaled = acc_term / acc_norm if acc_norm > 0 else 0.0
            obj = acc_scaled + alpha * (dm_bits / dm_max)
            se, bs, _ = config
            return (obj, dm_bits, -bs, se)

        best = min(rows.keys(), key=key)
        mapping, dm_bits, acc_term = rows[best]
        dm_total += dm_bits
        acc_total += acc_term
        from .dm import dm_layer as _dm_layer

        specs = specs_for_config(best)
        assignments.append(
            LayerAssignment(
                layer_index=layer.index,
                config=best,
                specs=specs,
                mapping=mapping,
                breakdown=_dm_layer(layer, mapping, specs, count_first_load=count_first_load),
            )
        )

    acc_loss = acc_total / acc_norm if acc_norm > 0 else 0.0
    perf = dm_total / dm_max
    plan = QuantPlan(
        model_name=model.name,
        mode="full",
        alpha=alpha,
        scope="layer",
        assignments=assignments,
        acc_loss=acc_loss,
        perf_loss=perf,
        objective=acc_loss + alpha * perf,
        dm_sum_bits=dm_total,
        dm_max_bits=dm_max,
    )
    _attach_energy(plan, model, tables, mc_bits, energy_params, count_first_load)
    return plan


def _assemble_plan(model, winner, cands, dm_max, alpha, mode, scope, tables, mc_bits,
                   energy_params, count_first_load) -> QuantPlan:
    from .dm import dm_layer as _dm_layer

    specs = specs_for_config(winner.config)
    assignments = []
    for layer, (mapping, _dm_bits) in zip(model.layers, winner.layer_choices):
        assignments.append(
            LayerAssignment(
                layer_index=layer.index,
                config=winner.config,
                specs=specs,
                mapping=mapping,
                breakdown=_dm_layer(layer, mapping, specs, count_first_load=count_first_load),
            )
        )
    plan = QuantPlan(
        model_name=model.name,
        mode=mode,
        alpha=alpha,
        scope=scope,
        assignments=assignments,
        acc_loss=winner.acc_loss,
        perf_loss=winner.perf_loss,
        objective=winner.acc_loss + alpha * winner.perf_loss,
        dm_sum_bits=winner.dm_sum_bits,
        dm_max_bits=dm_max,
        candidates=[c.row() for c in cands],
    )
    if mode == "pareto":
        frontier = pareto_frontier([c for c in cands if c.feasible])
        plan.pareto = [c.row() for c in frontier]
    _attach_energy(plan, model, tables, mc_bits, energy_params, count_first_load)
    return plan


def _attach_energy(plan: QuantPlan, model, tables, mc_bits, energy_params, count_first_load):
    """Energy for the plan plus the unquantized 32-bit baseline under the
    same mapping optimizer."""
    from .dm import dm_layer as _dm_layer

    plan.energy_report = energy(
        model, [(a.breakdown, a.specs) for a in plan.assignments], energy_params
    )
    baseline_rows = []
    for layer in model.layers:
        bits32 = (ORIGINAL_BITS, ORIGINAL_BITS, ORIGINAL_BITS)
        hit = tables[layer.index].query(bits32, mc_bits)
        if hit is None:
            plan.baseline_energy_report = None
            return
        mapping, _dm_bits, _ = hit
        baseline_rows.append((_dm_layer(layer, mapping, bits32, count_first_load=count_first_load), bits32))
    plan.baseline_energy_report = energy(model, baseline_rows, energy_params)
    normalized_energy(plan.energy_report, plan.baseline_energy_report, baseline_name="original")
