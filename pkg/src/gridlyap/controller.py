"""Per-bus monotone stacked-ReLU controller and the linear-droop baseline.

Each bus maps its local frequency deviation through

    u_i(w) = sum_l q_i^l relu(w + b_i^l) + z_i^l relu(-w + c_i^l)

clipped to the actuation bounds.  The weights are constrained so u_i is
non-decreasing and passes through the origin: every prefix sum of q_i is
nonnegative, every prefix sum of z_i is nonpositive, and the bias ladders
b_i, c_i start at zero and never increase.

Raw trainable parameters are mapped onto that constraint set by
construction rather than by projection: the *prefix sums* of q are
parameterized directly as softplus(raw_q) (free sequences, so individual
increments may be negative while prefixes stay nonnegative), z mirrors
that with a sign flip, and the bias ladders subtract softplus amounts
cumulatively.  Gradients flow through softplus, so training stays
unconstrained while the constraints hold exactly at every iterate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .gradcore import Tape, load_checkpoint, save_checkpoint
from .grid_model import NetworkCase

DEFAULT_HIDDEN_UNITS = 20


def softplus(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


@dataclass(frozen=True)
class ControllerParams:
    """Raw weights of the stacked-ReLU controller, one row per bus.

    The first column of ``raw_b``/``raw_c`` is inert: the leading bias of
    each ladder is pinned to zero by construction.
    """

    n_buses: int
    m: int
    raw_q: np.ndarray
    raw_z: np.ndarray
    raw_b: np.ndarray
    raw_c: np.ndarray

    def __post_init__(self):
        shape = (self.n_buses, self.m)
        for name in ("raw_q", "raw_z", "raw_b", "raw_c"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ValidationError(
                    f"{name}: expected shape {shape}, got {arr.shape}"
                )
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @classmethod
    def initialize(
        cls, n_buses: int, m: int = DEFAULT_HIDDEN_UNITS, seed: int = 0
    ) -> "ControllerParams":
        """Seeded start: gentle slopes, bias knots spread near the origin."""
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5C]))
        return cls(
            n_buses=n_buses,
            m=m,
            raw_q=rng.uniform(-1.0, 0.0, size=(n_buses, m)),
            raw_z=rng.uniform(-1.0, 0.0, size=(n_buses, m)),
            raw_b=rng.uniform(-2.5, -1.0, size=(n_buses, m)),
            raw_c=rng.uniform(-2.5, -1.0, size=(n_buses, m)),
        )

    def to_param_dict(self) -> dict[str, np.ndarray]:
        """Column-keyed trainable view (one vector per hidden unit)."""
        out: dict[str, np.ndarray] = {}
        for name in ("raw_q", "raw_z", "raw_b", "raw_c"):
            arr = getattr(self, name)
            for l in range(self.m):
                out[f"{name}:{l}"] = arr[:, l].copy()
        return out

    @classmethod
    def from_param_dict(
        cls, n_buses: int, m: int, params: dict[str, np.ndarray]
    ) -> "ControllerParams":
        cols = {}
        for name in ("raw_q", "raw_z", "raw_b", "raw_c"):
            cols[name] = np.stack([params[f"{name}:{l}"] for l in range(m)], axis=1)
        return cls(n_buses=n_buses, m=m, **cols)


@dataclass(frozen=True)
class DroopParams:
    """Nonnegative per-bus droop gains for u_i = l_i * w_i."""

    coefficients: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.coefficients, dtype=np.float64).copy()
        if arr.ndim != 1:
            raise ValidationError(f"l: expected a vector, got shape {arr.shape}")
        if np.any(arr < 0.0):
            i = int(np.flatnonzero(arr < 0.0)[0])
            raise ValidationError(f"l[{i}]: must be nonnegative")
        arr.flags.writeable = False
        object.__setattr__(self, "coefficients", arr)


def materialize(
    params: ControllerParams,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Constrained (q, z, b, c) weight matrices, each (n_buses, m)."""
    sp_q = softplus(params.raw_q)
    sp_z = softplus(params.raw_z)
    q = np.diff(sp_q, axis=1, prepend=0.0)
    z = -np.diff(sp_z, axis=1, prepend=0.0)
    sp_b = softplus(params.raw_b)
    sp_b[:, 0] = 0.0
    b = -np.cumsum(sp_b, axis=1)
    sp_c = softplus(params.raw_c)
    sp_c[:, 0] = 0.0
    c = -np.cumsum(sp_c, axis=1)
    return q, z, b, c


def evaluate(params: ControllerParams, bus: int, omega_i: float, bounds=None) -> float:
    """Scalar control action of one bus at frequency deviation ``omega_i``."""
    q, z, b, c = materialize(params)
    u = float(
        q[bus] @ np.maximum(omega_i + b[bus], 0.0)
        + z[bus] @ np.maximum(-omega_i + c[bus], 0.0)
    )
    if bounds is not None:
        u = float(np.clip(u, bounds[0], bounds[1]))
    return u


def evaluate_all(params: ControllerParams, omega: np.ndarray, case: NetworkCase) -> np.ndarray:
    """Vectorized actions for all buses, clipped to the case bounds."""
    q, z, b, c = materialize(params)
    w = np.asarray(omega, dtype=np.float64)[..., None]
    u = np.sum(q * np.maximum(w + b, 0.0), axis=-1) + np.sum(
        z * np.maximum(-w + c, 0.0), axis=-1
    )
    return np.clip(u, case.u_min, case.u_max)


# ---------------------------------------------------------------------------
# Policies: graph builders shared by training and evaluation rollouts
# ---------------------------------------------------------------------------

class StackedReluPolicy:
    """Stacked-ReLU controller wired into an expression graph.

    When ``trainable`` the raw columns are registered as tape parameters;
    otherwise they enter as constants.  ``register`` must run once per
    tape before ``action``.
    """

    def __init__(self, params: ControllerParams, case: NetworkCase, trainable: bool = False):
        self.params = params
        self.case = case
        self.trainable = trainable
        self._weights = None

    def register(self, tape: Tape, param_values: dict | None = None) -> None:
        m = self.params.m
        n = self.params.n_buses
        values = param_values or self.params.to_param_dict()
        make = tape.parameter if self.trainable else tape.constant
        leaves = {}
        for name in ("raw_q", "raw_z", "raw_b", "raw_c"):
            for l in range(m):
                key = f"{name}:{l}"
                leaves[key] = make(key, values[key]) if self.trainable else make(values[key])
        q, z, b, c = [], [], [], []
        prev_spq = prev_spz = None
        for l in range(m):
            spq = tape.softplus(leaves[f"raw_q:{l}"])
            spz = tape.softplus(leaves[f"raw_z:{l}"])
            q.append(spq if l == 0 else spq - prev_spq)
            z.append(tape.neg(spz) if l == 0 else prev_spz - spz)
            prev_spq, prev_spz = spq, spz
        b.append(tape.constant(np.zeros(n)))
        c.append(tape.constant(np.zeros(n)))
        for l in range(1, m):
            b.append(b[-1] - tape.softplus(leaves[f"raw_b:{l}"]))
            c.append(c[-1] - tape.softplus(leaves[f"raw_c:{l}"]))
        self._weights = (q, z, b, c)

    def action(self, tape: Tape, omega_node):
        if self._weights is None:
            raise RuntimeError("policy not registered on a tape")
        q, z, b, c = self._weights
        acc = None
        neg_omega = tape.neg(omega_node)
        for l in range(self.params.m):
            term = q[l] * tape.relu(omega_node + b[l]) + z[l] * tape.relu(neg_omega + c[l])
            acc = term if acc is None else acc + term
        return tape.clip(acc, self.case.u_min, self.case.u_max)

    def numpy_action(self, omega: np.ndarray) -> np.ndarray:
        return evaluate_all(self.params, omega, self.case)


class DroopPolicy:
    """Linear droop u = clip(l * w, bounds) as a graph policy."""

    def __init__(self, droop: DroopParams, case: NetworkCase, trainable: bool = False):
        self.droop = droop
        self.case = case
        self.trainable = trainable
        self._l_node = None

    def register(self, tape: Tape, param_values: dict | None = None) -> None:
        values = param_values or {"droop_l": self.droop.coefficients}
        if self.trainable:
            self._l_node = tape.parameter("droop_l", values["droop_l"])
        else:
            self._l_node = tape.constant(values["droop_l"])

    def action(self, tape: Tape, omega_node):
        if self._l_node is None:
            raise RuntimeError("policy not registered on a tape")
        return tape.clip(self._l_node * omega_node, self.case.u_min, self.case.u_max)

    def numpy_action(self, omega: np.ndarray) -> np.ndarray:
        return np.clip(
            self.droop.coefficients * np.asarray(omega, dtype=np.float64),
            self.case.u_min,
            self.case.u_max,
        )


class ZeroPolicy:
    """u = 0 everywhere; handy for open-loop rollouts."""

    def __init__(self, case: NetworkCase):
        self.case = case

    def register(self, tape: Tape, param_values: dict | None = None) -> None:
        pass

    def action(self, tape: Tape, omega_node):
        return tape.constant(np.zeros_like(omega_node.value))

    def numpy_action(self, omega: np.ndarray) -> np.ndarray:
        return np.zeros_like(np.asarray(omega, dtype=np.float64))


# ---------------------------------------------------------------------------
# Droop baseline optimizer
# ---------------------------------------------------------------------------

def optimize_droop(
    case: NetworkCase,
    eq,
    config,
    gamma: float | None = None,
    iters: int = 40,
    lr: float = 0.3,
    divergence_limit: float = 100.0,
) -> tuple[DroopParams, float]:
    """Projected gradient descent on the droop gains.

    Minimizes the nadir-plus-quadratic-effort cost over a fixed seeded
    batch of initial states, keeping gains nonnegative.  A trial step
    whose rollout drives any |omega| beyond ``divergence_limit`` is
    rejected and the step halved.  Returns the best gains seen and their
    cost.
    """
    from . import policy_training  # deferred: policy_training imports this module

    gamma = config.gamma if gamma is None else float(gamma)
    rng = np.random.default_rng(np.random.SeedSequence([int(config.rng_seed), 0xD6]))
    d0, o0 = policy_training.sample_initial_states(rng, config, config.batch_size, case.n_buses)

    def run(l_vec: np.ndarray, want_grad: bool):
        tape = Tape()
        policy = DroopPolicy(DroopParams(l_vec), case, trainable=want_grad)
        policy.register(tape)
        graph = policy_training.build_rollout(
            tape, case, eq, policy, None, config, d0, o0, gamma=gamma, lam=0.0
        )
        cost = float(graph.loss.value)
        max_omega = graph.max_abs_omega
        grad = tape.backward(graph.loss)["droop_l"] if want_grad else None
        return cost, max_omega, grad

    l_cur = np.zeros(case.n_buses)
    best_l = l_cur.copy()
    best_cost, _, _ = run(l_cur, want_grad=False)
    step = float(lr)
    for _ in range(iters):
        cost, max_omega, grad = run(l_cur, want_grad=True)
        if cost < best_cost:
            best_cost, best_l = cost, l_cur.copy()
        accepted = False
        for _ in range(20):
            trial = np.maximum(l_cur - step * grad, 0.0)
            t_cost, t_max, _ = run(trial, want_grad=False)
            if t_max > divergence_limit:
                step *= 0.5
                continue
            l_cur = trial
            if t_cost < best_cost:
                best_cost, best_l = t_cost, trial.copy()
            accepted = True
            break
        if not accepted:
            break
    return DroopParams(best_l), best_cost


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_controller(path, params: ControllerParams, case: NetworkCase, rng_seed=0, episode=0):
    save_checkpoint(
        path,
        arch={
            "kind": "stacked_relu",
            "n_buses": params.n_buses,
            "m": params.m,
            "u_max": case.u_max.tolist(),
            "u_min": case.u_min.tolist(),
        },
        parameters={
            "raw_q": params.raw_q,
            "raw_z": params.raw_z,
            "raw_b": params.raw_b,
            "raw_c": params.raw_c,
        },
        rng_seed=rng_seed,
        episode=episode,
    )


def load_controller(path) -> ControllerParams:
    ck = load_checkpoint(path)
    if ck.arch.get("kind") != "stacked_relu":
        raise ValidationError(f"{path}: not a stacked_relu checkpoint")
    return ControllerParams(
        n_buses=int(ck.arch["n_buses"]),
        m=int(ck.arch["m"]),
        raw_q=ck.parameters["raw_q"],
        raw_z=ck.parameters["raw_z"],
        raw_b=ck.parameters["raw_b"],
        raw_c=ck.parameters["raw_c"],
    )


def save_droop(path, droop: DroopParams, rng_seed=0, episode=0, cost=None):
    arch = {"kind": "droop"}
    if cost is not None:
        arch["cost"] = float(cost)
    save_checkpoint(
        path,
        arch=arch,
        parameters={"l": droop.coefficients},
        rng_seed=rng_seed,
        episode=episode,
    )


def load_droop(path) -> DroopParams:
    ck = load_checkpoint(path)
    if ck.arch.get("kind") != "droop":
        raise ValidationError(f"{path}: not a droop checkpoint")
    return DroopParams(coefficients=ck.parameters["l"])
