"""Upper-level configuration search: MCTS over the decision tuple.

The tree has one level per pipeline decision (width, inner/outer/fine-tune
learning rates, optimizer, optionally shots). Child selection maximizes the
UCT score Q/N + c*sqrt(ln N_parent / N_child); expansion is throttled by
progressive widening (a node may gain a child only when ceil(N^kappa)
increments); new options are ranked by all-moves-as-first (AMAF) reward
statistics gathered from every simulation that passed through the node;
remaining levels are filled by uniform random rollout; rewards back-propagate
additively along the visited path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .meta import EvalSettings, EvaluationRecord, PipelineConfig, evaluate_pipeline
from .rng import derive_seed, spawn
from .stats import best_so_far

WIDTH_OPTIONS = (128, 256, 384, 512, 640, 768, 896, 1024)
LR_MIN, LR_MAX = 1e-4, 0.5
OPTIMIZER_OPTIONS = ("sgd", "adam", "rmsprop", "adadelta", "adagrad")
SHOT_OPTIONS = (1, 5, 10, 20)


@dataclass(frozen=True)
class Level:
    name: str
    options: tuple


@dataclass(frozen=True)
class SearchSpace:
    family: str
    levels: tuple[Level, ...]
    kappa: float = 0.5
    c_uct: float = 1.0


def lr_grid(resolution: int) -> tuple[float, ...]:
    """Log-spaced learning-rate grid over [1e-4, 0.5], endpoints included."""
    if resolution < 2:
        raise ValueError(f"grid resolution must be >= 2, got {resolution}")
    return tuple(float(v) for v in np.geomspace(LR_MIN, LR_MAX, resolution))


def build_search_space(
    family: str,
    grid_resolution: int = 8,
    kappa: float = 0.5,
    c_uct: float = 1.0,
    include_shots_level: bool = False,
) -> SearchSpace:
    """Assemble the decision levels for one learner family.

    The linear family has no width to choose, so its first level is a single
    placeholder option.
    """
    if not 0.0 < kappa < 1.0:
        raise ValueError(f"kappa must lie in (0, 1), got {kappa}")
    if c_uct <= 0.0:
        raise ValueError(f"c_uct must be positive, got {c_uct}")
    widths = (1,) if family == "linear" else WIDTH_OPTIONS
    grid = lr_grid(grid_resolution)
    levels = [
        Level("width", widths),
        Level("inner_lr", grid),
        Level("outer_lr", grid),
        Level("finetune_lr", grid),
        Level("optimizer", OPTIMIZER_OPTIONS),
    ]
    if include_shots_level:
        levels.append(Level("shots", SHOT_OPTIONS))
    return SearchSpace(family=family, levels=tuple(levels), kappa=kappa, c_uct=c_uct)


def space_size(space: SearchSpace) -> int:
    size = 1
    for level in space.levels:
        size *= len(level.options)
    return size


def config_from_choices(space: SearchSpace, choices: tuple[int, ...]) -> PipelineConfig:
    if len(choices) != len(space.levels):
        raise ValueError(f"expected {len(space.levels)} choices, got {len(choices)}")
    resolved = {}
    for level, index in zip(space.levels, choices):
        if not 0 <= index < len(level.options):
            raise ValueError(f"choice {index} out of range for level {level.name!r}")
        resolved[level.name] = level.options[index]
    return PipelineConfig(
        family=space.family,
        width=resolved["width"],
        inner_lr=resolved["inner_lr"],
        outer_lr=resolved["outer_lr"],
        finetune_lr=resolved["finetune_lr"],
        optimizer=resolved["optimizer"],
        shots=resolved.get("shots"),
        choices=tuple(int(c) for c in choices),
    )


@dataclass
class TreeNode:
    """Search-tree node; ``level`` 0 is the root, level L fixes decision L."""

    level: int
    option: int | None = None
    visit_count: int = 0
    total_reward: float = 0.0
    children: list["TreeNode"] = field(default_factory=list)
    amaf_stats: dict[tuple[int, int], list] = field(default_factory=dict)


def uct_score(child: TreeNode, parent_visits: int, c_uct: float) -> float:
    if child.visit_count == 0:
        return math.inf
    exploit = child.total_reward / child.visit_count
    return exploit + c_uct * math.sqrt(math.log(parent_visits) / child.visit_count)


def select(node: TreeNode, c_uct: float, rng) -> TreeNode:
    """Highest-UCT child; unvisited children score +inf, ties break uniformly."""
    if not node.children:
        raise RuntimeError("select called on a node without children")
    scores = [uct_score(child, node.visit_count, c_uct) for child in node.children]
    best = max(scores)
    tied = [i for i, s in enumerate(scores) if s == best]
    pick = tied[0] if len(tied) == 1 else tied[int(rng.integers(len(tied)))]
    return node.children[pick]


def _ceil(x: float) -> int:
    # Tolerate float dust just below an integer (e.g. 27*(1/3)-powers).
    return math.ceil(x - 1e-9)


def widening_allows_child(visit_count: int, kappa: float) -> bool:
    return _ceil((visit_count + 1) ** kappa) > _ceil(visit_count**kappa)


def maybe_expand(node: TreeNode, space: SearchSpace, rng) -> TreeNode | None:
    """Attach one new child if progressive widening permits and untried
    options remain; the option is the untried one with the best AMAF mean
    (options never seen in a rollout rank after those, in seeded random
    order)."""
    if node.level >= len(space.levels):
        return None
    next_level = node.level + 1
    options = space.levels[node.level].options
    tried = {child.option for child in node.children}
    untried = [i for i in range(len(options)) if i not in tried]
    if not untried:
        return None
    if not widening_allows_child(node.visit_count, space.kappa):
        return None
    shuffle_rank = {int(option): pos for pos, option in enumerate(rng.permutation(len(options)))}

    def rank(option: int):
        stat = node.amaf_stats.get((next_level, option))
        if stat is None or stat[0] == 0:
            return (0, 0.0, -shuffle_rank[option])
        return (1, stat[1] / stat[0], -shuffle_rank[option])

    choice = max(untried, key=rank)
    child = TreeNode(level=next_level, option=choice)
    node.children.append(child)
    return child


def rollout(prefix: tuple[int, ...], space: SearchSpace, rng) -> PipelineConfig:
    """Complete a partial decision tuple by uniform seeded sampling."""
    if len(prefix) > len(space.levels):
        raise ValueError(f"prefix of length {len(prefix)} exceeds the {len(space.levels)} levels")
    choices = list(prefix)
    for level in range(len(choices), len(space.levels)):
        choices.append(int(rng.integers(len(space.levels[level].options))))
    return config_from_choices(space, tuple(choices))


def backpropagate(path: list[TreeNode], reward: float, config: PipelineConfig) -> None:
    """N += 1 and Q += reward on every path node; AMAF stats on each node for
    every option the evaluated config took at deeper levels."""
    if not math.isfinite(reward):
        raise ValueError(f"reward must be finite, got {reward}")
    for node in path:
        node.visit_count += 1
        node.total_reward += reward
        for level in range(node.level + 1, len(config.choices) + 1):
            stat = node.amaf_stats.setdefault((level, config.choices[level - 1]), [0, 0.0])
            stat[0] += 1
            stat[1] += reward


def reward_from_mse(mse: float | None) -> float:
    """Monotone map from error to a bounded reward: 1/(1+mse); failures get 0."""
    if mse is None:
        return 0.0
    if math.isnan(mse):
        return 0.0
    if mse < 0:
        raise ValueError(f"mse must be non-negative, got {mse}")
    return 1.0 / (1.0 + mse)


@dataclass(frozen=True)
class SearchTrajectory:
    records: tuple[EvaluationRecord, ...]

    def best_so_far(self) -> list[float]:
        return best_so_far(self.records)

    def best_record(self) -> EvaluationRecord | None:
        ok = [r for r in self.records if r.status == "ok" and r.test_mse is not None]
        return min(ok, key=lambda r: r.test_mse) if ok else None

    def to_jsonl(self, include_timing: bool = True) -> str:
        return "\n".join(r.to_json(include_timing=include_timing) for r in self.records) + "\n"


def _one_iteration(root: TreeNode, space: SearchSpace, rng) -> tuple[list[TreeNode], tuple[int, ...]]:
    path = [root]
    node = root
    while node.level < len(space.levels):
        child = maybe_expand(node, space, rng)
        if child is not None:
            path.append(child)
            break
        if not node.children:
            break
        node = select(node, space.c_uct, rng)
        path.append(node)
    prefix = tuple(n.option for n in path[1:])
    return path, prefix


def search(
    space: SearchSpace,
    bundle,
    budget: int,
    seed: int,
    evaluator=None,
    settings: EvalSettings = EvalSettings(),
) -> tuple[PipelineConfig | None, SearchTrajectory]:
    """Run ``budget`` select/expand/rollout/evaluate/backpropagate iterations.

    Returns the config of the record with the lowest test MSE (None when
    every evaluation failed) and the full trajectory. Deterministic per seed;
    evaluator failures become reward-0 records, never exceptions.
    """
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    if evaluator is None:
        evaluator = lambda cfg, bnd, s: evaluate_pipeline(cfg, bnd, s, settings=settings)
    root = TreeNode(level=0)
    tree_rng = spawn(seed, "tree")
    records = []
    for it in range(budget):
        path, prefix = _one_iteration(root, space, tree_rng)
        config = rollout(prefix, space, tree_rng)
        record = evaluator(config, bundle, derive_seed(seed, "eval", it))
        record = replace(record, iteration=it)
        reward = reward_from_mse(record.test_mse if record.status == "ok" else None)
        backpropagate(path, reward, config)
        records.append(record)
    trajectory = SearchTrajectory(records=tuple(records))
    best = trajectory.best_record()
    return (best.config if best else None), trajectory


def random_search(
    space: SearchSpace,
    bundle,
    budget: int,
    seed: int,
    evaluator=None,
    settings: EvalSettings = EvalSettings(),
) -> tuple[PipelineConfig | None, SearchTrajectory]:
    """Uniform sampling baseline with the same record/trajectory contract."""
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    if evaluator is None:
        evaluator = lambda cfg, bnd, s: evaluate_pipeline(cfg, bnd, s, settings=settings)
    rng = spawn(seed, "random-search")
    records = []
    for it in range(budget):
        config = rollout((), space, rng)
        record = evaluator(config, bundle, derive_seed(seed, "eval", it))
        records.append(replace(record, iteration=it))
    trajectory = SearchTrajectory(records=tuple(records))
    best = trajectory.best_record()
    return (best.config if best else None), trajectory
