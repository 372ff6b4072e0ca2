"""The evolution engine: variation operators, selection, and the main loop.

Individuals are fixed-length lists of typed trees. Each generation, every
parent may emit a mutant and may take part in one crossover pairing; the new
offspring are evaluated, node gains are refreshed, and the next population is
filled by repeated size-then-index tie-broken tournaments over parents and
offspring together. A hall of fame keeps the best individual ever seen, out
of reach of tournament luck.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import multiprocessing

import numpy as np

from .grammar import Grammar, TransitionModel
from .tree import (
    ExprTree,
    Node,
    node_weights,
    operator_node,
    record_gain,
    sample_subtree,
    sample_tree,
)

UNIFORM = "uniform"
REPLACEMENT = "replacement"
INSERTION = "insertion"
_MUTATION_KINDS = (UNIFORM, REPLACEMENT, INSERTION)


@dataclass
class Individual:
    """A fixed-length list of constructed-feature trees plus its fitness."""

    trees: list[ExprTree]
    fitness: float | None = None
    gain: float | None = None
    valid: bool = True

    def size(self) -> int:
        return sum(t.size() for t in self.trees)

    def clone(self, keep_fitness: bool = False) -> "Individual":
        return Individual(
            [t.clone() for t in self.trees],
            fitness=self.fitness if keep_fitness else None,
            gain=self.gain if keep_fitness else None,
            valid=self.valid if keep_fitness else True,
        )


@dataclass(frozen=True)
class EvolutionConfig:
    """Run settings; the defaults are the reference configuration."""

    population_size: int = 500
    generations: int = 150
    p_mutation: float = 0.6
    p_crossover: float = 0.6
    n_features: int = 1
    depth_min: int = 2
    depth_max: int = 8
    tournament_size: int = 3
    node_weight_floor: float = 0.1
    seed: int = 0
    gain_mode: str = "baseline"  # "baseline": gain over run baseline; "absolute": raw score

    def __post_init__(self):
        if self.population_size < 1 or self.generations < 0 or self.n_features < 1:
            raise ValueError("population_size >= 1, generations >= 0, n_features >= 1 required")
        if not (1 <= self.depth_min <= self.depth_max):
            raise ValueError("need 1 <= depth_min <= depth_max")
        if self.tournament_size < 1 or self.node_weight_floor <= 0:
            raise ValueError("tournament_size >= 1 and node_weight_floor > 0 required")
        if self.gain_mode not in ("baseline", "absolute"):
            raise ValueError("gain_mode must be 'baseline' or 'absolute'")

    @classmethod
    def from_dict(cls, doc: dict) -> "EvolutionConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in doc.items() if k in known})

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class HallOfFame:
    """Best-ever individual and the per-generation population-best trace."""

    best: Individual | None = None
    best_generation: int = -1
    fitness_trace: list[float] = field(default_factory=list)

    def update(self, pool: list[Individual], generation: int) -> None:
        for ind in pool:
            if ind.fitness is None:
                continue
            if self.best is None or ind.fitness > self.best.fitness:
                self.best = ind.clone(keep_fitness=True)
                self.best_generation = generation


@dataclass
class GenerationStats:
    generation: int
    best: float
    mean: float
    std: float
    hof_best: float
    evaluations: int


@dataclass
class EvolveResult:
    best: Individual
    formulas: list[str]
    stats: list[GenerationStats]
    hall_of_fame: HallOfFame
    n_evaluations: int


# -- population initialization ---------------------------------------------------


def init_population(cfg: EvolutionConfig, g: Grammar, tm: TransitionModel, rng) -> list[Individual]:
    """Ramped half-and-half: per tree, a uniform target depth and a coin-flip
    between grow and full."""
    population = []
    for _ in range(cfg.population_size):
        trees = []
        for _ in range(cfg.n_features):
            method = "grow" if rng.random() < 0.5 else "full"
            trees.append(
                sample_tree(g, tm, rng, method=method, depth_min=cfg.depth_min, depth_max=cfg.depth_max)
            )
        population.append(Individual(trees))
    return population


# -- mutation ---------------------------------------------------------------------


def _select_node_index(tree: ExprTree, rng, floor: float) -> int:
    w = node_weights(tree, floor)
    r = rng.random()
    acc = 0.0
    for i, wi in enumerate(w):
        acc += wi
        if r < acc:
            return i
    return len(w) - 1


def _attach(tree: ExprTree, parent: Node | None, slot: int, new: Node) -> None:
    if parent is None:
        tree.root = new
    else:
        parent.children[slot] = new


def _mutate_uniform(tree, ctx, idx, g, tm, rng, cfg) -> None:
    node, parent, slot, depth = ctx[idx]
    if parent is None:
        fresh = sample_tree(
            g, tm, rng, method="grow", depth_min=cfg.depth_min, depth_max=cfg.depth_max,
            forced_type=tree.return_type,
        )
        tree.root = fresh.root
        return
    budget = cfg.depth_max - depth
    target = int(rng.integers(0, budget + 1))
    new = sample_subtree(g, tm, rng, node.type, parent.op, slot, target)
    _attach(tree, parent, slot, new)


def _legal_under(tm: TransitionModel, parent: Node | None, child_prod) -> bool:
    if parent is None or child_prod is None:
        return True
    return not tm.is_forbidden(parent.op.key, child_prod.key)


def _mutate_replacement(tree, ctx, idx, g, tm, rng, cfg) -> bool:
    """Swap the node for another of identical signature; False if none exists."""
    node, parent, slot, depth = ctx[idx]
    if node.is_operator:
        candidates = [
            p
            for p in g.productions_returning(node.type)
            if p.arg_types == node.op.arg_types
            and p is not node.op
            and _legal_under(tm, parent, p)
            and all(
                not (c.is_operator and tm.is_forbidden(p.key, c.op.key)) for c in node.children
            )
        ]
        if not candidates:
            return False
        pick = candidates[int(rng.integers(len(candidates)))]
        node.op = pick
        node.best_gain = 0.0
        return True
    spec = g.terminal_for(node.type)
    if spec is None:
        return False
    options: list[tuple[str, object]] = [("f", f) for f in spec.base_features if f != node.feature]
    if spec.constant_range is not None:
        options.append(("c", spec.constant_range))
    if not options:
        return False
    kind, payload = options[int(rng.integers(len(options)))]
    if kind == "f":
        node.feature, node.value = payload, None
    else:
        low, high = payload
        node.feature = None
        node.value = float(f"{float(rng.uniform(low, high)):.6g}")
    node.best_gain = 0.0
    return True


def _mutate_insertion(tree, ctx, idx, g, tm, rng, cfg) -> bool:
    """Insert a new operator above the node, keeping it as one child."""
    node, parent, slot, depth = ctx[idx]
    h = g.min_heights()
    sub_budget = cfg.depth_max - depth - 1
    if sub_budget < 0 or depth + 1 + node.height() > cfg.depth_max:
        return False
    candidates = []
    for p in g.productions_returning(node.type):
        if node.type not in p.arg_types:
            continue
        if not _legal_under(tm, parent, p):
            continue
        if node.is_operator and tm.is_forbidden(p.key, node.op.key):
            continue
        if any(h.get(a, float("inf")) > sub_budget for a in p.arg_types):
            continue
        candidates.append(p)
    if not candidates:
        return False
    prod = candidates[int(rng.integers(len(candidates)))]
    keep_slots = [i for i, a in enumerate(prod.arg_types) if a == node.type]
    keep = keep_slots[int(rng.integers(len(keep_slots)))]
    children = []
    for i, arg in enumerate(prod.arg_types):
        if i == keep:
            children.append(node)
        else:
            target = int(rng.integers(0, min(sub_budget, 2) + 1))
            children.append(sample_subtree(g, tm, rng, arg, prod, i, target))
    _attach(tree, parent, slot, operator_node(prod, children))
    return True


def mutate(ind: Individual, g: Grammar, tm: TransitionModel, rng, cfg: EvolutionConfig) -> Individual:
    """Mutate one individual (never in place).

    Each tree is hit with probability 1/n (redrawn until at least one is
    selected); the mutation kind is drawn uniformly from uniform-regeneration,
    node-replacement, and insertion, at a node picked by its gain weight. The
    tree's root unit type is always preserved. Replacement and insertion fall
    back to uniform regeneration when no grammar-compatible candidate exists.
    """
    n = len(ind.trees)
    while True:
        flags = rng.random(n) < (1.0 / n)
        if flags.any():
            break
    trees = []
    for tree, flag in zip(ind.trees, flags):
        if not flag:
            trees.append(tree)
            continue
        work = tree.clone()
        kind = _MUTATION_KINDS[int(rng.integers(3))]
        ctx = work.nodes_with_context()
        idx = _select_node_index(work, rng, cfg.node_weight_floor)
        done = False
        if kind == REPLACEMENT:
            done = _mutate_replacement(work, ctx, idx, g, tm, rng, cfg)
        elif kind == INSERTION:
            done = _mutate_insertion(work, ctx, idx, g, tm, rng, cfg)
        if not done:
            _mutate_uniform(work, ctx, idx, g, tm, rng, cfg)
        trees.append(work)
    return Individual(trees)


# -- crossover ---------------------------------------------------------------------


def _swap_compatible(x_entry, y_entry, tm) -> bool:
    xn, xp, _, xd = x_entry
    yn, yp, _, yd = y_entry
    if xn.type != yn.type:
        return False
    if xp is not None and yn.is_operator and tm.is_forbidden(xp.op.key, yn.op.key):
        return False
    if yp is not None and xn.is_operator and tm.is_forbidden(yp.op.key, xn.op.key):
        return False
    return True


def crossover(
    a: Individual, b: Individual, rng, cfg: EvolutionConfig, tm: TransitionModel | None = None
) -> tuple[Individual, Individual]:
    """Grammar-compatible one-point crossover.

    Single-tree individuals swap two same-type subtrees chosen by gain weight;
    multi-tree individuals swap list tails at a cut point without touching the
    trees. When no compatible pair of nodes exists the parents come back
    unchanged, and an offspring that would exceed depth_max is replaced by a
    copy of its first parent.
    """
    tm = tm if tm is not None else TransitionModel()
    n = len(a.trees)
    if n != len(b.trees):
        raise ValueError("individuals must have the same number of trees")
    if n > 1:
        cut = int(rng.integers(1, n))
        c1 = Individual([t.clone() for t in a.trees[:cut]] + [t.clone() for t in b.trees[cut:]])
        c2 = Individual([t.clone() for t in b.trees[:cut]] + [t.clone() for t in a.trees[cut:]])
        return c1, c2

    ta, tb = a.trees[0].clone(), b.trees[0].clone()
    ctx_a, ctx_b = ta.nodes_with_context(), tb.nodes_with_context()
    types_b: dict[str, list[int]] = {}
    for j, entry in enumerate(ctx_b):
        types_b.setdefault(entry[0].type, []).append(j)

    weights_a = node_weights(ta, cfg.node_weight_floor)
    weights_b = node_weights(tb, cfg.node_weight_floor)
    pool = [i for i, entry in enumerate(ctx_a) if entry[0].type in types_b]
    while pool:
        wa = np.array([weights_a[i] for i in pool])
        pick = pool[int(_weighted_index(rng, wa))]
        mates = [j for j in types_b[ctx_a[pick][0].type] if _swap_compatible(ctx_a[pick], ctx_b[j], tm)]
        if not mates:
            pool.remove(pick)
            continue
        wb = np.array([weights_b[j] for j in mates])
        mate = mates[int(_weighted_index(rng, wb))]
        xn, xp, xs, _ = ctx_a[pick]
        yn, yp, ys, _ = ctx_b[mate]
        _attach(ta, xp, xs, yn)
        _attach(tb, yp, ys, xn)
        c1 = Individual([ta]) if ta.height() <= cfg.depth_max else a.clone(keep_fitness=True)
        c2 = Individual([tb]) if tb.height() <= cfg.depth_max else b.clone(keep_fitness=True)
        return c1, c2
    return a, b


def _weighted_index(rng, weights: np.ndarray) -> int:
    total = weights.sum()
    r = rng.random() * total
    acc = 0.0
    for i, w in enumerate(weights):
        acc += w
        if r < acc:
            return i
    return len(weights) - 1


# -- selection ----------------------------------------------------------------------


def tournament_select(pool: list[Individual], k: int, rng) -> Individual:
    """Best of k uniform draws (with replacement); ties prefer fewer nodes,
    then the earlier pool position."""
    draws = rng.integers(0, len(pool), size=k)
    best_key = None
    best = None
    for i in draws:
        ind = pool[int(i)]
        key = (-ind.fitness, ind.size(), int(i))
        if best_key is None or key < best_key:
            best_key, best = key, ind
    return best


# -- parallel evaluation ---------------------------------------------------------------

_WORKER_FN = None


def _pool_init(fn):
    global _WORKER_FN
    _WORKER_FN = fn


def _pool_eval(ind):
    return _WORKER_FN(ind)


class _Evaluator:
    """Applies the fitness function to unevaluated individuals, in order."""

    def __init__(self, fitness_fn, jobs: int = 1):
        self.fitness_fn = fitness_fn
        self.jobs = max(int(jobs), 1)
        self._executor = None
        if self.jobs > 1:
            ctx = multiprocessing.get_context("fork")
            self._executor = ProcessPoolExecutor(
                max_workers=self.jobs, mp_context=ctx, initializer=_pool_init, initargs=(fitness_fn,)
            )
        self.count = 0

    def evaluate(self, individuals: list[Individual]) -> None:
        todo = [ind for ind in individuals if ind.fitness is None]
        if not todo:
            return
        self.count += len(todo)
        if self._executor is None:
            reports = [self.fitness_fn(ind) for ind in todo]
        else:
            chunk = max(1, len(todo) // (self.jobs * 4))
            reports = list(self._executor.map(_pool_eval, todo, chunksize=chunk))
        for ind, rep in zip(todo, reports):
            ind.fitness = rep.score
            ind.gain = rep.gain
            ind.valid = rep.valid
            if not rep.valid:
                ind.fitness = 0.0

    def close(self):
        if self._executor is not None:
            self._executor.shutdown()
            self._executor = None


# -- the loop -----------------------------------------------------------------------


def evolve(
    cfg: EvolutionConfig,
    g: Grammar,
    tm: TransitionModel,
    train,
    fitness_fn,
    jobs: int = 1,
    on_generation=None,
) -> EvolveResult:
    """Run the full evolution and return the hall-of-fame individual.

    `fitness_fn` maps an Individual to a FitnessReport and must already be
    bound to the training partition; `train` is accepted only so callers can
    keep the pairing obvious. All randomness flows through one generator
    seeded by the config, and evaluation consumes none of it, so the result
    is identical for any worker count.
    """
    from .tree import render_infix

    rng = np.random.default_rng(cfg.seed)
    evaluator = _Evaluator(fitness_fn, jobs=jobs)
    try:
        population = init_population(cfg, g, tm, rng)
        evaluator.evaluate(population)
        _record_gains(population, cfg)
        hof = HallOfFame()
        hof.update(population, generation=0)
        stats = [_generation_stats(0, population, hof, evaluator.count)]
        hof.fitness_trace.append(stats[-1].best)

        for gen in range(1, cfg.generations + 1):
            mu = len(population)
            mutate_flags = rng.random(mu) < cfg.p_mutation
            cross_flags = rng.random(mu) < cfg.p_crossover

            offspring: list[Individual] = []
            for i in range(mu):
                if mutate_flags[i]:
                    offspring.append(mutate(population[i], g, tm, rng, cfg))

            cross_ids = [i for i in range(mu) if cross_flags[i]]
            order = rng.permutation(len(cross_ids))
            shuffled = [cross_ids[int(i)] for i in order]
            if len(shuffled) % 2 == 1:
                leftover = shuffled.pop()
                others = [i for i in range(mu) if not cross_flags[i]]
                if not others:
                    others = [i for i in range(mu) if i != leftover]
                if others:
                    partner = others[int(rng.integers(len(others)))]
                    shuffled.extend([leftover, partner])
            for apos in range(0, len(shuffled) - 1, 2):
                i, j = shuffled[apos], shuffled[apos + 1]
                c1, c2 = crossover(population[i], population[j], rng, cfg, tm)
                for child in (c1, c2):
                    if child is not population[i] and child is not population[j]:
                        offspring.append(child)

            evaluator.evaluate(offspring)
            pool = population + offspring
            _record_gains(pool, cfg)
            hof.update(pool, generation=gen)
            population = [tournament_select(pool, cfg.tournament_size, rng) for _ in range(mu)]
            stats.append(_generation_stats(gen, population, hof, evaluator.count))
            hof.fitness_trace.append(stats[-1].best)
            if on_generation is not None:
                on_generation(stats[-1])
    finally:
        evaluator.close()

    best = hof.best
    return EvolveResult(
        best=best,
        formulas=[render_infix(t) for t in best.trees],
        stats=stats,
        hall_of_fame=hof,
        n_evaluations=evaluator.count,
    )


def _record_gains(individuals: list[Individual], cfg: EvolutionConfig) -> None:
    for ind in individuals:
        if ind.fitness is None or not ind.valid:
            continue
        value = ind.fitness if cfg.gain_mode == "absolute" else (ind.gain if ind.gain is not None else 0.0)
        for t in ind.trees:
            record_gain(t, value)


def _generation_stats(gen: int, population: list[Individual], hof: HallOfFame, evals: int) -> GenerationStats:
    fits = np.array([ind.fitness for ind in population], dtype=float)
    return GenerationStats(
        generation=gen,
        best=float(fits.max()),
        mean=float(fits.mean()),
        std=float(fits.std()),
        hof_best=float(hof.best.fitness) if hof.best is not None else float("nan"),
        evaluations=evals,
    )
