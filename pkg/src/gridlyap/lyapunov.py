"""Neural scalar certificate for the swing dynamics.

A one-hidden-layer ELU network V(delta, omega) is trained so that, away
from the equilibrium, its value stays above the equilibrium value while
its derivative along the droop-controlled vector field stays negative.
Three loss terms drive this: a tanh-squashed derivative term weighted
toward the equilibrium, a hinge on values dipping below the equilibrium
value, and a penalty pinning the derivative at the equilibrium itself.
Training alternates uniform-box sampling with an active-sampling twist:
once the satisfied fraction rho passes a threshold, recent violating
states are appended to the next batches.

The derivative of V along the dynamics is kept as a first-order
expression graph in the network weights: for this fixed architecture the
input gradient is output_weights . diag(elu'(pre)) . input_weights, and
elu'(pre) = exp(min(pre, 0)) is built from clip and exp nodes, so the
losses differentiate through it without second-order machinery.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .controller import DroopParams
from .errors import TrainingDivergedError, ValidationError
from .gradcore import Adam, Node, Tape, load_checkpoint, save_checkpoint
from .grid_model import Equilibrium, NetworkCase, SystemState, adjusted_case, swing_rhs

EQUILIBRIUM_EXCLUSION_RADIUS = 1e-6


def _elu(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0.0, x, np.expm1(x))


def _elu_grad(x: np.ndarray) -> np.ndarray:
    return np.exp(np.minimum(x, 0.0))


@dataclass(frozen=True)
class LyapunovNet:
    """One-hidden-layer ELU network producing a scalar over (delta, omega).

    The 2N-input first layer is stored split into angle and frequency
    blocks so both appear as independent leaves in expression graphs.
    """

    n_buses: int
    hidden: int
    w1_delta: np.ndarray
    w1_omega: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        n, h = self.n_buses, self.hidden
        expect = {
            "w1_delta": (h, n),
            "w1_omega": (h, n),
            "b1": (h,),
            "w2": (h,),
            "b2": (),
        }
        for name, shape in expect.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(shape).copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @classmethod
    def initialize(cls, n_buses: int, hidden: int = 50, seed: int = 0) -> "LyapunovNet":
        """Uniform +-1/sqrt(fan_in) per layer, seeded."""
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x1F]))
        lim1 = 1.0 / np.sqrt(2.0 * n_buses)
        lim2 = 1.0 / np.sqrt(hidden)
        return cls(
            n_buses=n_buses,
            hidden=hidden,
            w1_delta=rng.uniform(-lim1, lim1, size=(hidden, n_buses)),
            w1_omega=rng.uniform(-lim1, lim1, size=(hidden, n_buses)),
            b1=rng.uniform(-lim1, lim1, size=hidden),
            w2=rng.uniform(-lim2, lim2, size=hidden),
            b2=rng.uniform(-lim2, lim2, size=()),
        )

    def params(self) -> dict[str, np.ndarray]:
        return {
            "w1_delta": self.w1_delta.copy(),
            "w1_omega": self.w1_omega.copy(),
            "b1": self.b1.copy(),
            "w2": self.w2.copy(),
            "b2": self.b2.copy(),
        }

    @classmethod
    def from_params(cls, n_buses: int, hidden: int, params: dict) -> "LyapunovNet":
        return cls(n_buses=n_buses, hidden=hidden, **{k: params[k] for k in
                   ("w1_delta", "w1_omega", "b1", "w2", "b2")})

    # -- numpy evaluation -----------------------------------------------------

    def _pre(self, delta2: np.ndarray, omega2: np.ndarray) -> np.ndarray:
        return delta2 @ self.w1_delta.T + omega2 @ self.w1_omega.T + self.b1

    def value_batch(self, delta: np.ndarray, omega: np.ndarray) -> np.ndarray:
        d2, o2 = np.atleast_2d(delta), np.atleast_2d(omega)
        return _elu(self._pre(d2, o2)) @ self.w2 + self.b2

    def input_gradient_batch(
        self, delta: np.ndarray, omega: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        d2, o2 = np.atleast_2d(delta), np.atleast_2d(omega)
        t = _elu_grad(self._pre(d2, o2)) * self.w2
        return t @ self.w1_delta, t @ self.w1_omega

    def value(self, state: SystemState) -> float:
        return float(self.value_batch(state.delta, state.omega)[0])

    def input_gradient(self, state: SystemState) -> tuple[np.ndarray, np.ndarray]:
        gd, go = self.input_gradient_batch(state.delta, state.omega)
        return gd[0], go[0]


# -- graph builders -----------------------------------------------------------

def net_nodes(tape: Tape, net: LyapunovNet, trainable: bool) -> dict[str, Node]:
    make = tape.parameter if trainable else tape.constant
    out = {}
    for name, value in net.params().items():
        out[name] = make(name, value) if trainable else make(value)
    return out

def build_pre(tape: Tape, nodes: dict, d_node: Node, o_node: Node) -> Node:
    return tape.affine(d_node, nodes["w1_delta"], nodes["b1"]) + tape.affine(
        o_node, nodes["w1_omega"]
    )


def build_value(tape: Tape, nodes: dict, pre_node: Node) -> Node:
    return tape.dot(tape.elu(pre_node), nodes["w2"]) + nodes["b2"]


def build_lie(
    tape: Tape, nodes: dict, pre_node: Node, delta_dot: Node, omega_dot: Node
) -> Node:
    """Derivative of V along (delta_dot, omega_dot) as a graph node.

    elu'(pre) is expressed as exp(clip(pre, -inf, 0)): value and first
    derivative match the ELU slope exactly while avoiding overflow.
    """
    act_grad = tape.exp(tape.clip(pre_node, None, 0.0))
    weighted = act_grad * nodes["w2"]
    proj = tape.affine(delta_dot, nodes["w1_delta"]) + tape.affine(
        omega_dot, nodes["w1_omega"]
    )
    return tape.dot(weighted, proj)


def build_input_gradient(
    tape: Tape, nodes: dict, pre_node: Node
) -> tuple[Node, Node]:
    act_grad = tape.exp(tape.clip(pre_node, None, 0.0))
    weighted = act_grad * nodes["w2"]
    gd = tape.affine(weighted, nodes["w1_delta"], transpose=True)
    go = tape.affine(weighted, nodes["w1_omega"], transpose=True)
    return gd, go


# ---------------------------------------------------------------------------
# Lie derivative and condition checking (numpy paths)
# ---------------------------------------------------------------------------

def lie_derivative_batch(net, case: NetworkCase, delta, omega, u) -> np.ndarray:
    """Derivative of V along the swing field at each row of the batch.

    ``net`` needs only ``input_gradient_batch``; surrogate certificates
    (e.g. a fixed quadratic) plug in the same way as trained networks.
    """
    d2, o2 = np.atleast_2d(delta), np.atleast_2d(omega)
    dd, od = swing_rhs(case, d2, o2, u)
    gd, go = net.input_gradient_batch(d2, o2)
    return np.sum(gd * dd, axis=1) + np.sum(go * od, axis=1)


def lie_derivative(net, case: NetworkCase, state: SystemState, u) -> float:
    return float(lie_derivative_batch(net, case, state.delta, state.omega, u)[0])


@dataclass(frozen=True)
class ConditionReport:
    """Outcome of checking value/derivative conditions over a sample set."""

    rho: float
    violators: list
    worst_lie_derivative: float
    v_at_equilibrium: float

    @property
    def n_violators(self) -> int:
        return len(self.violators)


def _droop_actions(droop: DroopParams, case: NetworkCase, omega2: np.ndarray) -> np.ndarray:
    return np.clip(droop.coefficients * omega2, case.u_min, case.u_max)


def _check_arrays(net, case_adj, d2, o2, eq, droop):
    u = _droop_actions(droop, case_adj, o2)
    v = net.value_batch(d2, o2)
    lie = lie_derivative_batch(net, case_adj, d2, o2, u)
    v_star = float(net.value_batch(eq.state.delta, eq.state.omega)[0])
    satisfied = (v > v_star) & (lie < 0.0)
    return satisfied, v, lie, v_star


def check_conditions(
    net, case: NetworkCase, samples, eq: Equilibrium, droop: DroopParams
) -> ConditionReport:
    """Fraction of samples with V above its equilibrium value and a
    negative derivative along the droop-controlled dynamics.

    ``samples`` is a list of SystemState or a (delta, omega) array pair.
    Samples must stay outside a ball of radius 1e-6 around the
    equilibrium, where the strict conditions are vacuous.
    """
    if isinstance(samples, (tuple, list)) and len(samples) == 2 and not isinstance(
        samples[0], SystemState
    ):
        d2 = np.atleast_2d(np.asarray(samples[0], dtype=np.float64))
        o2 = np.atleast_2d(np.asarray(samples[1], dtype=np.float64))
    else:
        d2 = np.stack([s.delta for s in samples])
        o2 = np.stack([s.omega for s in samples])
    dist = np.sqrt(
        np.sum((d2 - eq.state.delta) ** 2, axis=1) + np.sum(o2**2, axis=1)
    )
    if np.any(dist <= EQUILIBRIUM_EXCLUSION_RADIUS):
        raise ValidationError(
            "samples: state inside the equilibrium exclusion ball"
        )
    case_adj = adjusted_case(case, eq)
    satisfied, v, lie, v_star = _check_arrays(net, case_adj, d2, o2, eq, droop)
    bad = np.flatnonzero(~satisfied)
    violators = [SystemState(delta=d2[i], omega=o2[i]) for i in bad]
    return ConditionReport(
        rho=1.0 - len(violators) / d2.shape[0],
        violators=violators,
        worst_lie_derivative=float(np.max(lie)),
        v_at_equilibrium=v_star,
    )


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------

def _l1_terms(lie: np.ndarray, dist: np.ndarray, mu: float) -> float:
    return float(np.mean(np.tanh(lie) * np.exp(-dist / mu)))


def _l3_terms(lie_at_eq: float) -> float:
    return lie_at_eq * lie_at_eq + max(lie_at_eq, 0.0)


def _state_distance(d2, o2, eq) -> np.ndarray:
    return np.sqrt(np.sum((d2 - eq.state.delta) ** 2, axis=1) + np.sum(o2**2, axis=1))


def loss_l1(
    net,
    case: NetworkCase,
    batch,
    droop: DroopParams,
    eq: Equilibrium,
    mu: float,
) -> float:
    """Equilibrium-weighted squashed-derivative loss over a batch."""
    d2, o2 = _batch_arrays(batch)
    case_adj = adjusted_case(case, eq)
    u = _droop_actions(droop, case_adj, o2)
    lie = lie_derivative_batch(net, case_adj, d2, o2, u)
    return _l1_terms(lie, _state_distance(d2, o2, eq), mu)


def loss_l2(net, batch, eq: Equilibrium) -> float:
    """Mean hinge penalty on values below the equilibrium value."""
    d2, o2 = _batch_arrays(batch)
    v = net.value_batch(d2, o2)
    v_star = float(net.value_batch(eq.state.delta, eq.state.omega)[0])
    return float(np.mean(np.maximum(v_star - v, 0.0)))


def loss_l3(net, case: NetworkCase, eq: Equilibrium, droop: DroopParams) -> float:
    """Squared-plus-hinge penalty on the derivative at the equilibrium."""
    case_adj = adjusted_case(case, eq)
    u = _droop_actions(droop, case_adj, np.zeros((1, case.n_buses)))
    lie = lie_derivative_batch(
        net, case_adj, eq.state.delta[None, :], eq.state.omega[None, :], u
    )
    return _l3_terms(float(lie[0]))


def total_lyapunov_loss(l1, l2, l3, q1, q2, q3) -> float:
    return q1 * l1 + q2 * l2 + q3 * l3


def _batch_arrays(batch):
    if isinstance(batch, (tuple, list)) and len(batch) == 2 and not isinstance(
        batch[0], SystemState
    ):
        return (
            np.atleast_2d(np.asarray(batch[0], dtype=np.float64)),
            np.atleast_2d(np.asarray(batch[1], dtype=np.float64)),
        )
    return np.stack([s.delta for s in batch]), np.stack([s.omega for s in batch])


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class LyapunovTrainConfig:
    """Hyperparameters for certificate training."""

    mu: float = 50.0
    q1: float = 10.0
    q2: float = 5.0
    q3: float = 100.0
    batch_size: int = 1000
    episodes: int = 4000
    delta_box: tuple = (-20.0, 20.0)
    omega_box: tuple = (-30.0, 30.0)
    resample_threshold: float = 0.95
    structured_fraction: float = 0.0
    lr: float = 0.05
    lr_decay: float = 0.9
    lr_decay_every: int = 100
    hidden: int = 50
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("mu", "q1", "q2", "q3", "lr", "lr_decay"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name}: must be positive")
        if self.batch_size < 1 or self.episodes < 0:
            raise ValidationError("batch_size/episodes: must be positive")
        if not (0.0 < self.resample_threshold < 1.0):
            raise ValidationError("resample_threshold: must lie in (0, 1)")
        if not (0.0 <= self.structured_fraction < 1.0):
            raise ValidationError("structured_fraction: must lie in [0, 1)")


def sample_states(
    rng: np.random.Generator,
    config: LyapunovTrainConfig,
    count: int,
    n_buses: int,
    eq: Equilibrium,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate uniform box samples, excluding the equilibrium ball."""
    d = rng.uniform(config.delta_box[0], config.delta_box[1], size=(count, n_buses))
    o = rng.uniform(config.omega_box[0], config.omega_box[1], size=(count, n_buses))
    for _ in range(100):
        dist = _state_distance(d, o, eq)
        inside = dist <= EQUILIBRIUM_EXCLUSION_RADIUS
        if not np.any(inside):
            break
        k = int(np.count_nonzero(inside))
        d[inside] = rng.uniform(config.delta_box[0], config.delta_box[1], size=(k, n_buses))
        o[inside] = rng.uniform(config.omega_box[0], config.omega_box[1], size=(k, n_buses))
    return d, o


def _training_batch(
    rng: np.random.Generator,
    config: LyapunovTrainConfig,
    n_buses: int,
    eq: Equilibrium,
) -> tuple[np.ndarray, np.ndarray]:
    """Training batch: uniform box samples plus optional structured samples.

    When ``structured_fraction`` is positive, that share of the batch is
    drawn as scaled perturbations of the equilibrium: coordinates are
    displaced by a per-sample magnitude factor drawn quadratically toward
    zero (covering all perturbation radii), and half of these samples
    additionally zero out a random coordinate subset.  The family
    concentrates mass on the equilibrium neighbourhood, the trajectory
    envelope, and the low-dimensional axis structures, where condition
    violations cluster and which uniform box sampling essentially never
    visits.
    """
    n_struct = int(round(config.structured_fraction * config.batch_size))
    d, o = sample_states(rng, config, config.batch_size - n_struct, n_buses, eq)
    if n_struct == 0:
        return d, o
    ds = np.tile(eq.state.delta, (n_struct, 1))
    os_ = np.tile(eq.state.omega, (n_struct, 1))
    mask = rng.random(size=(n_struct, 2 * n_buses)) < 0.5
    dense = rng.random(size=n_struct) < 0.5
    mask[dense] = True
    none = ~mask.any(axis=1)
    mask[none, rng.integers(0, 2 * n_buses, size=int(none.sum()))] = True
    md, mo = mask[:, :n_buses], mask[:, n_buses:]
    scale = rng.random(size=n_struct) ** 2
    d_off = rng.uniform(config.delta_box[0], config.delta_box[1], size=(n_struct, n_buses))
    o_off = rng.uniform(config.omega_box[0], config.omega_box[1], size=(n_struct, n_buses))
    ds += md * (scale[:, None] * d_off)
    os_ += mo * (scale[:, None] * o_off)
    dist = _state_distance(ds, os_, eq)
    keep = dist > EQUILIBRIUM_EXCLUSION_RADIUS
    return np.vstack([d, ds[keep]]), np.vstack([o, os_[keep]])


def _episode_graph(params, n, case_adj, eq, droop, d2, o2, config):
    """Per-episode loss graph; returns the tape, loss node and pieces."""
    tape = Tape()
    nodes = {name: tape.parameter(name, value) for name, value in params.items()}

    u = _droop_actions(droop, case_adj, o2)
    dd, od = swing_rhs(case_adj, d2, o2, u)
    d_in = tape.constant(d2)
    o_in = tape.constant(o2)
    pre = build_pre(tape, nodes, d_in, o_in)
    v = build_value(tape, nodes, pre)
    lie = build_lie(tape, nodes, pre, tape.constant(dd), tape.constant(od))

    eq_d = tape.constant(eq.state.delta[None, :])
    eq_o = tape.constant(eq.state.omega[None, :])
    pre_eq = build_pre(tape, nodes, eq_d, eq_o)
    v_eq = build_value(tape, nodes, pre_eq)
    dd_eq, od_eq = swing_rhs(
        case_adj,
        eq.state.delta[None, :],
        eq.state.omega[None, :],
        _droop_actions(droop, case_adj, np.zeros((1, n))),
    )
    lie_eq = build_lie(tape, nodes, pre_eq, tape.constant(dd_eq), tape.constant(od_eq))

    h = d2.shape[0]
    weights = tape.constant(np.exp(-_state_distance(d2, o2, eq) / config.mu))
    l1 = tape.sum(tape.tanh(lie) * weights) / float(h)
    l2 = tape.sum(tape.relu(v_eq - v)) / float(h)
    lie_eq_s = tape.sum(lie_eq)  # (1,) -> scalar
    l3 = lie_eq_s * lie_eq_s + tape.relu(lie_eq_s)
    loss = config.q1 * l1 + config.q2 * l2 + config.q3 * l3
    return tape, loss, l1, l2, l3, v, lie, v_eq


def train_lyapunov(
    case: NetworkCase,
    eq: Equilibrium,
    droop: DroopParams,
    config: LyapunovTrainConfig,
    initial_net: LyapunovNet | None = None,
) -> tuple[LyapunovNet, list[dict]]:
    """Certificate training with violator recycling.

    Per episode: sample a fresh uniform batch; if the previous episode's
    satisfied fraction exceeded the threshold, append buffered violating
    states (buffer capped at twice the batch size, oldest evicted);
    evaluate the loss graph under the fixed droop controller; log the
    satisfied fraction rho; Adam-update the weights.  Returns the final
    network and one log row per episode.
    """
    n = case.n_buses
    net = initial_net or LyapunovNet.initialize(n, hidden=config.hidden, seed=config.rng_seed)
    if net.n_buses != n:
        raise ValidationError(f"net: expected {n} buses, got {net.n_buses}")
    hidden = net.hidden
    params = net.params()
    adam = Adam(
        params,
        lr=config.lr,
        decay_rate=config.lr_decay,
        decay_every=config.lr_decay_every,
    )
    case_adj = adjusted_case(case, eq)
    rng = np.random.default_rng(np.random.SeedSequence([int(config.rng_seed), 0xA1]))
    buf_d = np.empty((0, n))
    buf_o = np.empty((0, n))
    cap = 2 * config.batch_size
    rho_prev = 0.0
    log: list[dict] = []
    for episode in range(config.episodes):
        d2, o2 = _training_batch(rng, config, n, eq)
        if rho_prev > config.resample_threshold and buf_d.shape[0] > 0:
            d2 = np.vstack([d2, buf_d])
            o2 = np.vstack([o2, buf_o])
        tape, loss, l1, l2, l3, v, lie, v_eq = _episode_graph(
            params, n, case_adj, eq, droop, d2, o2, config
        )
        loss_val = float(loss.value)
        if not np.isfinite(loss_val):
            raise TrainingDivergedError(
                f"non-finite loss at episode {episode}",
                episode=episode,
                snapshot={k: p.copy() for k, p in params.items()},
            )
        v_star = float(v_eq.value[0])
        satisfied = (v.value > v_star) & (lie.value < 0.0)
        rho = float(np.mean(satisfied))
        bad = np.flatnonzero(~satisfied)
        if bad.size:
            buf_d = np.vstack([buf_d, d2[bad]])[-cap:]
            buf_o = np.vstack([buf_o, o2[bad]])[-cap:]
        grads = tape.backward(loss)
        adam.step(grads)
        rho_prev = rho
        log.append(
            {
                "episode": episode,
                "l1": float(l1.value),
                "l2": float(l2.value),
                "l3": float(l3.value),
                "total": loss_val,
                "rho": rho,
                "batch": int(d2.shape[0]),
            }
        )
    return LyapunovNet.from_params(n, hidden, params), log


# ---------------------------------------------------------------------------
# Slice diagnostics
# ---------------------------------------------------------------------------

def axis_slice_report(
    net,
    case: NetworkCase,
    eq: Equilibrium,
    droop: DroopParams,
    half_width: float = 6.0,
    points: int = 61,
) -> dict:
    """Value/derivative behaviour on 1-D axis slices through the equilibrium.

    For each coordinate (every delta_i, every omega_i) the slice varies
    that coordinate over [eq - half_width, eq + half_width] on a uniform
    grid while holding all others at the equilibrium.  Reports, per slice,
    the argmin of V and the fraction of grid points with a nonpositive
    derivative under the droop controller.  The center grid point is the
    equilibrium itself, where the strict conditions are vacuous; it is
    kept for the argmin check but excluded from the derivative counts.
    """
    n = case.n_buses
    case_adj = adjusted_case(case, eq)
    offsets = np.linspace(-half_width, half_width, points)
    center = points // 2
    off_center = np.arange(points) != center
    slices = []
    for kind in ("delta", "omega"):
        for i in range(n):
            d2 = np.tile(eq.state.delta, (points, 1))
            o2 = np.tile(eq.state.omega, (points, 1))
            if kind == "delta":
                d2[:, i] += offsets
            else:
                o2[:, i] += offsets
            v = net.value_batch(d2, o2)
            u = _droop_actions(droop, case_adj, o2)
            lie = lie_derivative_batch(net, case_adj, d2, o2, u)
            slices.append(
                {
                    "kind": kind,
                    "bus": i,
                    "argmin_v": int(np.argmin(v)),
                    "center": center,
                    "frac_lie_nonpositive": float(np.mean(lie[off_center] <= 0.0)),
                    "v": v,
                    "lie": lie,
                }
            )
    return {
        "points": points,
        "center": center,
        "slices": slices,
        "all_min_at_center": all(s["argmin_v"] == center for s in slices),
        "pooled_lie_nonpositive": float(
            np.mean(np.concatenate([s["lie"][off_center] for s in slices]) <= 0.0)
        ),
    }


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_net(path, net: LyapunovNet, rng_seed=0, episode=0) -> None:
    save_checkpoint(
        path,
        arch={"kind": "lyapunov_net", "n_buses": net.n_buses, "hidden": net.hidden},
        parameters=net.params(),
        rng_seed=rng_seed,
        episode=episode,
    )


def load_net(path) -> LyapunovNet:
    ck = load_checkpoint(path)
    if ck.arch.get("kind") != "lyapunov_net":
        raise ValidationError(f"{path}: not a lyapunov_net checkpoint")
    return LyapunovNet.from_params(
        int(ck.arch["n_buses"]), int(ck.arch["hidden"]), ck.parameters
    )
