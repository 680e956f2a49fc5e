"""Directed network topology and the graph-coloring compatibility test.

Nodes are indexed agents first, then anchors: agent ``i`` has index ``i`` for
``0 <= i < num_agents`` and anchor ``a`` has index ``num_agents + a``.
``observation[j, i]`` is True when node ``i`` receives a measurement from
node ``j`` (edge ``j -> i``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

MIN_REFERENCES = 3

# Default 11-anchor layout over the 100 m x 100 m area: corners, edge
# midpoints and three interior points.
DEFAULT_ANCHORS = (
    (0.0, 0.0), (100.0, 0.0), (0.0, 100.0), (100.0, 100.0),
    (50.0, 0.0), (0.0, 50.0), (100.0, 50.0), (50.0, 100.0),
    (50.0, 50.0), (25.0, 50.0), (75.0, 50.0),
)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class DirectedNetwork:
    num_agents: int
    anchor_positions: np.ndarray
    observation: np.ndarray
    los: np.ndarray

    def __post_init__(self):
        anchors = np.asarray(self.anchor_positions, dtype=float).reshape(-1, 2)
        n = self.num_agents + len(anchors)
        obs = np.asarray(self.observation, dtype=bool)
        los = np.asarray(self.los, dtype=bool)
        if self.num_agents < 0:
            raise ValueError("num_agents must be non-negative")
        if obs.shape != (n, n) or los.shape != (n, n):
            raise ValueError(f"observation and los must be {n}x{n} matrices")
        if obs.diagonal().any():
            raise ValueError("a node cannot observe itself")
        if not np.array_equal(los, los.T):
            raise ValueError("LoS matrix must be symmetric")
        object.__setattr__(self, "anchor_positions", _frozen(anchors))
        object.__setattr__(self, "observation", _frozen(obs))
        object.__setattr__(self, "los", _frozen(los))

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_positions)

    @property
    def num_nodes(self) -> int:
        return self.num_agents + self.num_anchors

    def is_agent(self, i: int) -> bool:
        return 0 <= i < self.num_agents

    def is_anchor(self, i: int) -> bool:
        return self.num_agents <= i < self.num_nodes

    def agent_receivers(self, i: int) -> list[int]:
        """Agents that receive measurements (and broadcasts) from node ``i``."""
        return [int(j) for j in np.flatnonzero(self.observation[i, : self.num_agents])]

    def with_los(self, los: np.ndarray) -> "DirectedNetwork":
        return DirectedNetwork(self.num_agents, self.anchor_positions, self.observation, los)

    def with_observation(self, observation: np.ndarray) -> "DirectedNetwork":
        return DirectedNetwork(self.num_agents, self.anchor_positions, observation, self.los)


def complete_network(num_agents: int, anchor_positions, los=None) -> DirectedNetwork:
    n = num_agents + len(anchor_positions)
    obs = ~np.eye(n, dtype=bool)
    if los is None:
        los = np.ones((n, n), dtype=bool)
    return DirectedNetwork(num_agents, anchor_positions, obs, los)


def neighborhoods(net: DirectedNetwork, i: int) -> tuple[frozenset, frozenset, frozenset]:
    """Return ``(gamma, gamma_anchor, gamma_agent)`` for node ``i``.

    ``gamma`` holds every node ``j != i`` with an edge ``j -> i``; the other two
    split it into anchor and agent neighbors.
    """
    if not (0 <= int(i) < net.num_nodes) or int(i) != i:
        raise ValueError(f"invalid node id {i!r}")
    src = np.flatnonzero(net.observation[:, i])
    gamma = frozenset(int(j) for j in src)
    gamma_u = frozenset(j for j in gamma if j < net.num_agents)
    return gamma, gamma - gamma_u, gamma_u


def anchor_degree(net: DirectedNetwork) -> np.ndarray:
    """|Gamma_a(i)| for every agent."""
    return net.observation[net.num_agents :, : net.num_agents].sum(axis=0)


def is_initializable(net: DirectedNetwork) -> bool:
    return bool(net.num_agents and (anchor_degree(net) >= MIN_REFERENCES).any())


@dataclass
class ColoringState:
    """Trajectory of the synchronous black/white coloring of the agents."""

    black: np.ndarray
    step: int = 0
    hat_gamma_u: list = field(default_factory=list)
    b_u_size_history: list = field(default_factory=list)
    black_history: list = field(default_factory=list)


def _color_step(agent_obs: np.ndarray, a_deg: np.ndarray, black: np.ndarray) -> np.ndarray:
    # agent_obs[j, i]: agent j -> agent i; counts black agent-neighbors per agent
    hat = agent_obs[black].sum(axis=0)
    return black | (a_deg + hat >= MIN_REFERENCES)


def coloring_trajectory(net: DirectedNetwork, max_steps: int | None = None) -> ColoringState:
    """Run the coloring until the black set stops growing.

    Step 0 colors every agent with at least three anchor neighbors; step ``k``
    colors every agent whose anchor neighbors plus black agent neighbors at
    step ``k - 1`` reach three. The returned history ends with the first
    repeated set.
    """
    nu = net.num_agents
    a_deg = anchor_degree(net)
    agent_obs = net.observation[:nu, :nu]
    black = a_deg >= MIN_REFERENCES
    state = ColoringState(black=black.copy())
    state.black_history.append(frozenset(int(i) for i in np.flatnonzero(black)))
    state.b_u_size_history.append(int(black.sum()))
    cap = nu + 1 if max_steps is None else max_steps
    while True:
        if state.step >= cap:
            raise RuntimeError("coloring did not stabilise within N_u + 1 steps")
        new = _color_step(agent_obs, a_deg, black)
        state.step += 1
        state.black_history.append(frozenset(int(i) for i in np.flatnonzero(new)))
        state.b_u_size_history.append(int(new.sum()))
        if new.sum() == black.sum():
            break
        black = new
    state.black = black
    state.hat_gamma_u = [
        frozenset(int(j) for j in np.flatnonzero(agent_obs[:, i] & black)) for i in range(nu)
    ]
    return state


@dataclass(frozen=True)
class CompatibilityReport:
    initializable: bool
    compatible: bool
    depth: int
    lifetime: float
    coloring_order: tuple
    iterations: int = 0

    def as_dict(self) -> dict:
        return {
            "initializable": self.initializable,
            "compatible": self.compatible,
            "depth": self.depth,
            "lifetime": None if math.isinf(self.lifetime) else int(self.lifetime),
            "coloring_order": list(self.coloring_order),
        }


def compatibility_test(net: DirectedNetwork) -> CompatibilityReport:
    """Graph compatibility test: flag ``f_G``, depth ``h_G`` and lifetime.

    ``coloring_order[i]`` is the step at which agent ``i`` turned black, or
    ``None`` if it never does.
    """
    nu = net.num_agents
    a_deg = anchor_degree(net)
    agent_obs = net.observation[:nu, :nu]
    black = a_deg >= MIN_REFERENCES
    order: list = [0 if b else None for b in black]
    init = bool(black.any())
    sizes = [int(black.sum())]
    if sizes[0] == nu:
        return CompatibilityReport(init or nu == 0, True, 0, 0, tuple(order), 0)

    k = 1
    while True:
        if k > nu + 1:
            raise RuntimeError("coloring loop exceeded N_u + 1 iterations")
        new = _color_step(agent_obs, a_deg, black)
        for i in np.flatnonzero(new & ~black):
            order[i] = k
        sizes.append(int(new.sum()))
        black = new
        if sizes[k - 1] == sizes[k]:
            depth = k - 1
            compatible = sizes[k] == nu
            break
        k += 1
    lifetime = max(order) if compatible else math.inf
    return CompatibilityReport(init, compatible, depth, lifetime, tuple(order), k)


def pairwise_distances(points: np.ndarray) -> np.ndarray:
    p = np.asarray(points, dtype=float)
    return np.linalg.norm(p[:, None, :] - p[None, :, :], axis=-1)


def generate_geometric_network(
    anchor_positions,
    agent_positions,
    radius: float,
    rng: np.random.Generator | None = None,
    drop_edges: Iterable[Sequence[int]] = (),
    drop_prob: float = 0.0,
    los: np.ndarray | None = None,
) -> DirectedNetwork:
    """Ideal-disk network: edge ``j -> i`` iff the nodes are within ``radius``.

    The disk model is symmetric; ``drop_edges`` (explicit ``(j, i)`` pairs) and
    ``drop_prob`` (independent per directed edge, needs ``rng``) remove
    individual directions to model miss-detections.
    """
    if not radius > 0:
        raise ValueError("radius must be positive")
    agents = np.asarray(agent_positions, dtype=float).reshape(-1, 2)
    anchors = np.asarray(anchor_positions, dtype=float).reshape(-1, 2)
    pts = np.vstack([agents, anchors])
    obs = pairwise_distances(pts) <= radius
    np.fill_diagonal(obs, False)
    for j, i in drop_edges:
        obs[j, i] = False
    if drop_prob > 0:
        if rng is None:
            raise ValueError("drop_prob requires an rng")
        obs &= rng.random(obs.shape) >= drop_prob
    if los is None:
        los = np.ones(obs.shape, dtype=bool)
    return DirectedNetwork(len(agents), anchors, obs, los)


def generate_los_matrix(net_or_size, nlos_fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Symmetric LoS matrix; each unordered pair is NLoS w.p. ``nlos_fraction``."""
    if not 0.0 <= nlos_fraction <= 1.0:
        raise ValueError("nlos_fraction must lie in [0, 1]")
    n = net_or_size.num_nodes if isinstance(net_or_size, DirectedNetwork) else int(net_or_size)
    upper = np.triu(rng.random((n, n)) < nlos_fraction, k=1)
    nlos = upper | upper.T
    return ~nlos


@dataclass(frozen=True)
class ScheduledRound:
    """One synchronous round: who solves, with which agent neighbors, and
    who broadcasts a first position estimate at the end of it."""

    index: int
    solvers: tuple
    hat_gamma_u: dict
    broadcasters: tuple


def update_schedule(net: DirectedNetwork) -> list[ScheduledRound]:
    """Round-by-round plan of the distributed schemes on ``net``.

    Round 0 self-localizes every agent with at least three anchor neighbors.
    In round ``n`` an agent solves when its anchor neighbors plus the agent
    neighbors that have already broadcast reach three and that neighbor set
    grew since its last solve. An agent broadcasts once, the round it is
    first localized. The plan ends with the first round without solvers,
    which is not included.
    """
    nu = net.num_agents
    a_deg = anchor_degree(net)
    agent_obs = net.observation[:nu, :nu]
    localized = np.zeros(nu, dtype=bool)
    last_seen = np.full(nu, -1)
    visible = np.zeros(nu, dtype=bool)
    rounds = []
    n = 0
    while True:
        solvers, hats = [], {}
        for i in range(nu):
            hat = np.flatnonzero(agent_obs[:, i] & visible)
            if a_deg[i] + len(hat) >= MIN_REFERENCES and len(hat) > last_seen[i]:
                solvers.append(i)
                hats[i] = tuple(int(j) for j in hat)
        if not solvers:
            break
        if n > nu + 1:
            raise RuntimeError("update schedule exceeded N_u + 1 rounds")
        new = tuple(i for i in solvers if not localized[i])
        for i in solvers:
            last_seen[i] = len(hats[i])
        localized[list(new)] = True
        visible[list(new)] = True
        rounds.append(ScheduledRound(n, tuple(solvers), hats, new))
        n += 1
    return rounds
