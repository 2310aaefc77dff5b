"""Unrolled-trajectory training of the frequency controller.

A rollout integrates the discretized swing dynamics for K stages with the
controller in the loop, recording per-stage outputs: the resulting
frequency deviations, the squared applied actions, and (when a trained
certificate network is supplied) a hinge penalty on stability-condition
violations.  The whole rollout is built as one expression graph, so the
loss gradient with respect to the raw controller parameters comes from a
single backward pass through all K stages; the certificate weights enter
as constants and receive no gradient.

The per-stage stability penalty is recorded divided by the bus count and
re-summed across buses inside the loss, so each stage's penalty enters
the total exactly once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .controller import ControllerParams, StackedReluPolicy
from .errors import TrainingDivergedError, ValidationError
from .gradcore import Adam, Node, Tape
from .grid_model import Equilibrium, NetworkCase, SystemState, adjusted_case
from .lyapunov import (
    LyapunovNet,
    build_lie,
    build_pre,
    build_value,
    lie_derivative_batch,
    net_nodes,
)

TRUNCATION_LIMIT = 1e3


@dataclass
class RolloutConfig:
    """Discretization, cost weights and training schedule for rollouts."""

    dt: float = 0.02
    stages: int = 100
    batch_size: int = 50
    gamma: float = 0.005
    lam: float = 0.01
    beta: float = 0.005
    delta0_box: tuple = (-1.0, 1.0)
    omega0_box: tuple = (-0.5, 0.5)
    episodes: int = 400
    lr: float = 0.04
    lr_decay: float = 0.7
    lr_decay_every: int = 30
    hidden_units: int = 20
    rng_seed: int = 0

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ValidationError(f"dt: must be positive, got {self.dt}")
        if self.stages < 1:
            raise ValidationError(f"stages: must be >= 1, got {self.stages}")
        if min(self.gamma, self.lam, self.beta) < 0.0:
            raise ValidationError("gamma/lam/beta: must be nonnegative")


@dataclass
class TrajectoryRecord:
    """Stored rollout: states, actions and per-stage outputs.

    ``y1`` holds the signed post-step frequency deviations (stages 1..K);
    the loss applies the absolute value.  ``y2`` holds the squared applied
    actions and ``y3`` the per-stage stability penalty divided by the bus
    count, both over stages 0..K-1.  On state blow-up past 1e3 the rollout
    stops early; recorded stages keep their values and the loss terms are
    averaged over the recorded count.
    """

    states_delta: np.ndarray
    states_omega: np.ndarray
    actions: np.ndarray
    y1: np.ndarray
    y2: np.ndarray
    y3: np.ndarray
    truncated: bool
    nadir: float
    effort: float
    regularizer: float
    total: float


def sample_initial_states(
    rng: np.random.Generator, config: RolloutConfig, count: int, n_buses: int
) -> tuple[np.ndarray, np.ndarray]:
    d0 = rng.uniform(config.delta0_box[0], config.delta0_box[1], size=(count, n_buses))
    o0 = rng.uniform(config.omega0_box[0], config.omega0_box[1], size=(count, n_buses))
    return d0, o0


# ---------------------------------------------------------------------------
# Graph construction
# ---------------------------------------------------------------------------

def build_swing_rhs(tape: Tape, consts: dict, d: Node, o: Node, u: Node):
    """Graph mirror of ``grid_model.swing_rhs`` (same expression order)."""
    s = tape.sin(d)
    c = tape.cos(d)
    flow = (
        s * tape.affine(c, consts["B"])
        - c * tape.affine(s, consts["B"])
        + c * tape.affine(c, consts["G"])
        + s * tape.affine(s, consts["G"])
    )
    omega_dot = (((consts["P"] - consts["D"] * o) - u) - flow) / consts["M"]
    return o, omega_dot


def _case_consts(tape: Tape, case: NetworkCase) -> dict:
    return {
        "B": tape.constant(case.susceptance),
        "G": tape.constant(case.conductance),
        "P": tape.constant(case.mech_power),
        "D": tape.constant(case.damping),
        "M": tape.constant(case.inertia),
    }


@dataclass
class RolloutGraph:
    """Node handles for one batched unrolled rollout."""

    tape: Tape
    deltas: list
    omegas: list
    actions: list
    penalties: list
    loss: Node
    nadir_mean: Node
    effort_mean: Node
    regularizer_mean: Node
    per_sample_loss: Node
    recorded_stages: int
    truncated: bool
    max_abs_omega: float


def build_rollout(
    tape: Tape,
    case: NetworkCase,
    eq: Equilibrium,
    policy,
    lyap_net: LyapunovNet | None,
    config: RolloutConfig,
    d0: np.ndarray,
    o0: np.ndarray,
    gamma: float | None = None,
    lam: float | None = None,
) -> RolloutGraph:
    """Unroll the Euler dynamics for K stages on one tape.

    ``policy.register(tape)`` must already have run.  The mechanical power
    is slack-corrected internally, so the supplied equilibrium is a true
    steady state of the unrolled dynamics.
    """
    gamma = config.gamma if gamma is None else gamma
    lam = config.lam if lam is None else lam
    case_adj = adjusted_case(case, eq)
    consts = _case_consts(tape, case_adj)
    dt = tape.constant(config.dt)
    h = d0.shape[0]

    use_reg = lyap_net is not None
    if use_reg:
        ln = net_nodes(tape, lyap_net, trainable=False)
        eq_d = tape.constant(eq.state.delta[None, :])
        eq_o = tape.constant(eq.state.omega[None, :])
        v_star = tape.sum(build_value(tape, ln, build_pre(tape, ln, eq_d, eq_o)))
        beta = config.beta

    d = tape.constant(np.atleast_2d(d0))
    o = tape.constant(np.atleast_2d(o0))
    deltas, omegas, actions, penalties = [d], [o], [], []
    abs_omegas = []
    truncated = False
    max_abs_omega = float(np.max(np.abs(o.value)))
    for _ in range(config.stages):
        u = policy.action(tape, o)
        delta_dot, omega_dot = build_swing_rhs(tape, consts, d, o, u)
        if use_reg:
            pre = build_pre(tape, ln, d, o)
            v = build_value(tape, ln, pre)
            lie = build_lie(tape, ln, pre, delta_dot, omega_dot)
            penalties.append(tape.relu(lie + beta * (v - v_star)))
        d = d + dt * o
        o = o + dt * omega_dot
        deltas.append(d)
        omegas.append(o)
        actions.append(u)
        abs_omegas.append(tape.abs(o))
        max_abs_omega = max(max_abs_omega, float(np.max(np.abs(o.value))))
        if (
            np.max(np.abs(d.value)) > TRUNCATION_LIMIT
            or np.max(np.abs(o.value)) > TRUNCATION_LIMIT
        ):
            truncated = True
            break

    k_rec = len(actions)
    # Running elementwise max over stages; max(a, b) = a + relu(b - a) keeps
    # the subgradient on the earliest maximizing stage.
    peak = abs_omegas[0]
    for nxt in abs_omegas[1:]:
        peak = peak + tape.relu(nxt - peak)
    nadir_h = tape.sum(peak, axis=1)

    effort_acc = None
    for u in actions:
        sq = u * u
        effort_acc = sq if effort_acc is None else effort_acc + sq
    effort_h = tape.sum(effort_acc, axis=1) * (gamma / k_rec)

    if use_reg and penalties:
        reg_acc = penalties[0]
        for r in penalties[1:]:
            reg_acc = reg_acc + r
        reg_h = reg_acc * (lam / k_rec)
    else:
        reg_h = tape.constant(np.zeros(h))

    per_sample = nadir_h + effort_h + reg_h
    loss = tape.sum(per_sample) / float(h)
    return RolloutGraph(
        tape=tape,
        deltas=deltas,
        omegas=omegas,
        actions=actions,
        penalties=penalties,
        loss=loss,
        nadir_mean=tape.sum(nadir_h) / float(h),
        effort_mean=tape.sum(effort_h) / float(h),
        regularizer_mean=tape.sum(reg_h) / float(h),
        per_sample_loss=per_sample,
        recorded_stages=k_rec,
        truncated=truncated,
        max_abs_omega=max_abs_omega,
    )


# ---------------------------------------------------------------------------
# Public rollout and loss over records
# ---------------------------------------------------------------------------

def lyapunov_regularizer(
    net: LyapunovNet,
    case: NetworkCase,
    state: SystemState,
    u,
    eq: Equilibrium,
    beta: float,
) -> float:
    """Hinge penalty on violating the exponential-decrease condition."""
    case_adj = adjusted_case(case, eq)
    lie = float(
        lie_derivative_batch(net, case_adj, state.delta[None, :], state.omega[None, :], u)[0]
    )
    v = float(net.value_batch(state.delta, state.omega)[0])
    v_star = float(net.value_batch(eq.state.delta, eq.state.omega)[0])
    return max(lie + beta * (v - v_star), 0.0)


def rollout(
    case: NetworkCase,
    policy,
    lyap_net: LyapunovNet | None,
    config: RolloutConfig,
    initial: SystemState,
    eq: Equilibrium,
    gamma: float | None = None,
    lam: float | None = None,
) -> TrajectoryRecord:
    """Simulate one initial state through the unrolled graph.

    Returns the stored trajectory with its loss components evaluated at
    the rollout's (gamma, lam).
    """
    tape = Tape()
    policy.register(tape)
    graph = build_rollout(
        tape,
        case,
        eq,
        policy,
        lyap_net,
        config,
        initial.delta[None, :],
        initial.omega[None, :],
        gamma=gamma,
        lam=lam,
    )
    n = case.n_buses
    k_rec = graph.recorded_stages
    states_delta = np.stack([nd.value[0] for nd in graph.deltas])
    states_omega = np.stack([nd.value[0] for nd in graph.omegas])
    actions = np.stack([nd.value[0] for nd in graph.actions])
    y1 = states_omega[1:]
    y2 = actions**2
    if graph.penalties:
        y3 = np.array([float(p.value[0]) for p in graph.penalties]) / n
    else:
        y3 = np.zeros(k_rec)
    return TrajectoryRecord(
        states_delta=states_delta,
        states_omega=states_omega,
        actions=actions,
        y1=y1,
        y2=y2,
        y3=y3,
        truncated=graph.truncated,
        nadir=float(graph.nadir_mean.value),
        effort=float(graph.effort_mean.value),
        regularizer=float(graph.regularizer_mean.value),
        total=float(graph.loss.value),
    )


def trajectory_loss(record: TrajectoryRecord, gamma: float, lam: float) -> float:
    """Nadir + mean squared effort + stability penalty from a stored record.

    Matches the unrolled-graph loss on the same record: per bus, the max
    absolute deviation over stages plus gamma times the stage-mean squared
    action plus lam times the stage-mean per-bus penalty share, summed
    over buses.
    """
    k = record.y1.shape[0]
    n = record.y1.shape[1]
    nadir = float(np.sum(np.max(np.abs(record.y1), axis=0)))
    effort = gamma * float(np.sum(record.y2)) / k
    reg = lam * n * float(np.sum(record.y3)) / k
    return nadir + effort + reg


# ---------------------------------------------------------------------------
# Evaluation and training
# ---------------------------------------------------------------------------

def evaluate_cost(
    case: NetworkCase,
    eq: Equilibrium,
    policy,
    config: RolloutConfig,
    d0: np.ndarray,
    o0: np.ndarray,
) -> float:
    """Mean nadir-plus-effort cost (no stability penalty) over a batch."""
    tape = Tape()
    policy.register(tape)
    graph = build_rollout(tape, case, eq, policy, None, config, d0, o0, lam=0.0)
    return float(graph.loss.value)


def tail_peak_omega(
    case: NetworkCase,
    eq: Equilibrium,
    policy,
    config: RolloutConfig,
    d0: np.ndarray,
    o0: np.ndarray,
    tail_fraction: float = 0.2,
) -> float:
    """Mean over the batch of max |omega| over the final stages."""
    tape = Tape()
    policy.register(tape)
    graph = build_rollout(tape, case, eq, policy, None, config, d0, o0, lam=0.0)
    k_rec = graph.recorded_stages
    tail = max(1, int(round(tail_fraction * k_rec)))
    stack = np.stack([nd.value for nd in graph.omegas[-tail:]])  # (tail, H, N)
    return float(np.mean(np.max(np.abs(stack), axis=(0, 2))))


def train_controller(
    case: NetworkCase,
    eq: Equilibrium,
    lyap_net: LyapunovNet | None,
    config: RolloutConfig,
    initial: ControllerParams | None = None,
    reference_cost: float | None = None,
) -> tuple[ControllerParams, list[dict]]:
    """Batched episode training of the stacked-ReLU controller.

    Every episode draws fresh initial states, unrolls the batch through
    the dynamics, and Adam-updates the raw parameters on the batch-mean
    loss.  Returns the best-loss parameters seen (training curves
    oscillate near convergence) and a per-episode log.
    """
    n = case.n_buses
    start = initial or ControllerParams.initialize(
        n, m=config.hidden_units, seed=config.rng_seed
    )
    m = start.m
    params = start.to_param_dict()
    adam = Adam(
        params,
        lr=config.lr,
        decay_rate=config.lr_decay,
        decay_every=config.lr_decay_every,
    )
    rng = np.random.default_rng(np.random.SeedSequence([int(config.rng_seed), 0xB2]))
    best_loss = np.inf
    best_params = {k: v.copy() for k, v in params.items()}
    log: list[dict] = []
    for episode in range(config.episodes):
        d0, o0 = sample_initial_states(rng, config, config.batch_size, n)
        tape = Tape()
        policy = StackedReluPolicy(
            ControllerParams.from_param_dict(n, m, params), case, trainable=True
        )
        policy.register(tape, param_values=params)
        graph = build_rollout(tape, case, eq, policy, lyap_net, config, d0, o0)
        loss_val = float(graph.loss.value)
        if not np.isfinite(loss_val):
            raise TrainingDivergedError(
                f"non-finite loss at episode {episode}",
                episode=episode,
                snapshot={k: v.copy() for k, v in params.items()},
            )
        grads = tape.backward(graph.loss)
        adam.step(grads)
        if loss_val < best_loss:
            best_loss = loss_val
            best_params = {k: v.copy() for k, v in params.items()}
        row = {
            "episode": episode,
            "nadir": float(graph.nadir_mean.value),
            "effort": float(graph.effort_mean.value),
            "regularizer": float(graph.regularizer_mean.value),
            "total": loss_val,
            "normalized_vs_droop": (
                loss_val / reference_cost if reference_cost else float("nan")
            ),
        }
        log.append(row)
    return ControllerParams.from_param_dict(n, m, best_params), log
