"""Kron-reduced generator network model and swing dynamics.

The network couples rotor angles delta (rad) and frequency deviations
omega (rad/s) through

    d(delta_i)/dt = omega_i
    M_i d(omega_i)/dt = P_m,i - D_i omega_i - u_i
                        - sum_j B_ij sin(delta_i - delta_j)
                        - sum_j G_ij cos(delta_i - delta_j)

with symmetric zero-diagonal coupling matrices B (susceptance) and
G (conductance), both in p.u.  All quantities are kept in rad / rad/s
internally; case files may declare Hz, in which case the loader rescales
the frequency-coefficient fields (M, D) by 1/(2*pi) on ingestion.

Because the conductance term drains power at every angle configuration,
a raw mechanical-power vector generally admits no omega = 0 steady state.
``solve_equilibrium`` therefore applies a distributed slack: the mean
active-power mismatch is subtracted uniformly from every bus at each
Newton iteration, and the final uniform correction is reported in
``Equilibrium.slack_adjustment``.  Downstream simulation and training must
run on the corrected case, obtained via ``adjusted_case``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import EquilibriumError, ReductionError, ValidationError

CASE_SCHEMA_VERSION = 1

_TWO_PI = 2.0 * np.pi


def _as_float_array(x, name: str, shape: tuple) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.shape != shape:
        raise ValidationError(f"{name}: expected shape {shape}, got {a.shape}")
    if not np.all(np.isfinite(a)):
        i = int(np.flatnonzero(~np.isfinite(a.ravel()))[0])
        raise ValidationError(f"{name}[{i}]: non-finite entry")
    a = a.copy()
    a.flags.writeable = False
    return a


def _check_coupling(mat: np.ndarray, name: str) -> None:
    n = mat.shape[0]
    if not np.allclose(mat, mat.T, atol=1e-9, rtol=0.0):
        raise ValidationError(f"{name}: must be symmetric within 1e-9")
    if np.any(np.abs(np.diag(mat)) > 0.0):
        i = int(np.flatnonzero(np.abs(np.diag(mat)) > 0.0)[0])
        raise ValidationError(f"{name}[{i}][{i}]: diagonal must be zero")
    if np.any(mat < 0.0):
        i, j = np.unravel_index(int(np.argmin(mat)), (n, n))
        raise ValidationError(f"{name}[{i}][{j}]: negative coupling {mat[i, j]}")


@dataclass(frozen=True)
class NetworkCase:
    """Immutable Kron-reduced generator network.

    Fields follow per-unit conventions: ``susceptance``/``conductance`` are
    N x N symmetric zero-diagonal coupling matrices, ``inertia`` and
    ``damping`` are the per-bus M_i > 0 and D_i >= 0 coefficients,
    ``mech_power`` the mechanical injections, and ``u_min <= 0 <= u_max``
    the per-bus actuation bounds.
    """

    n_buses: int
    susceptance: np.ndarray
    conductance: np.ndarray
    inertia: np.ndarray
    damping: np.ndarray
    mech_power: np.ndarray
    u_max: np.ndarray
    u_min: np.ndarray

    def __post_init__(self):
        n = int(self.n_buses)
        if n < 1:
            raise ValidationError("n_buses: must be a positive integer")
        object.__setattr__(self, "n_buses", n)
        object.__setattr__(
            self, "susceptance", _as_float_array(self.susceptance, "B", (n, n))
        )
        object.__setattr__(
            self, "conductance", _as_float_array(self.conductance, "G", (n, n))
        )
        for name in ("inertia", "damping", "mech_power", "u_max", "u_min"):
            object.__setattr__(
                self, name, _as_float_array(getattr(self, name), _FIELD_LABEL[name], (n,))
            )
        _check_coupling(self.susceptance, "B")
        _check_coupling(self.conductance, "G")
        if np.any(self.inertia <= 0.0):
            i = int(np.flatnonzero(self.inertia <= 0.0)[0])
            raise ValidationError(f"M[{i}]: must be positive")
        if np.any(self.damping < 0.0):
            i = int(np.flatnonzero(self.damping < 0.0)[0])
            raise ValidationError(f"D[{i}]: must be nonnegative")
        if np.any(self.u_max < 0.0):
            i = int(np.flatnonzero(self.u_max < 0.0)[0])
            raise ValidationError(f"u_max[{i}]: must be nonnegative")
        if np.any(self.u_min > 0.0):
            i = int(np.flatnonzero(self.u_min > 0.0)[0])
            raise ValidationError(f"u_min[{i}]: must be nonpositive")

    def with_mech_power(self, mech_power: np.ndarray) -> "NetworkCase":
        return NetworkCase(
            n_buses=self.n_buses,
            susceptance=self.susceptance,
            conductance=self.conductance,
            inertia=self.inertia,
            damping=self.damping,
            mech_power=mech_power,
            u_max=self.u_max,
            u_min=self.u_min,
        )


_FIELD_LABEL = {
    "inertia": "M",
    "damping": "D",
    "mech_power": "P_m",
    "u_max": "u_max",
    "u_min": "u_min",
}


@dataclass(frozen=True)
class SystemState:
    """Rotor angles (rad) and frequency deviations (rad/s) at one instant."""

    delta: np.ndarray
    omega: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.delta, dtype=np.float64).copy()
        o = np.asarray(self.omega, dtype=np.float64).copy()
        if d.ndim != 1 or o.ndim != 1 or d.shape != o.shape:
            raise ValidationError(
                f"state: delta/omega must be equal-length vectors, got {d.shape}, {o.shape}"
            )
        if not np.all(np.isfinite(d)):
            raise ValidationError("delta: non-finite entry")
        if not np.all(np.isfinite(o)):
            raise ValidationError("omega: non-finite entry")
        d.flags.writeable = False
        o.flags.writeable = False
        object.__setattr__(self, "delta", d)
        object.__setattr__(self, "omega", o)

    @property
    def n(self) -> int:
        return self.delta.shape[0]


@dataclass(frozen=True)
class Equilibrium:
    """Steady state with omega identically zero.

    ``slack_adjustment`` is the uniform vector added to ``mech_power`` to
    make the steady state exist; ``residual_norm`` is the max-norm power
    mismatch of the corrected case at ``state``.
    """

    state: SystemState
    slack_adjustment: np.ndarray
    residual_norm: float

    def __post_init__(self):
        if np.any(self.state.omega != 0.0):
            raise ValidationError("equilibrium: omega must be exactly zero")
        adj = np.asarray(self.slack_adjustment, dtype=np.float64).copy()
        adj.flags.writeable = False
        object.__setattr__(self, "slack_adjustment", adj)


def adjusted_case(case: NetworkCase, eq: Equilibrium) -> NetworkCase:
    """Case with the distributed-slack correction folded into mech_power."""
    return case.with_mech_power(case.mech_power + eq.slack_adjustment)


# ---------------------------------------------------------------------------
# Kron reduction
# ---------------------------------------------------------------------------

def kron_reduce_admittance(y_full: np.ndarray, n_gen: int) -> np.ndarray:
    """Eliminate load buses from a complex admittance matrix.

    ``y_full`` is an (N+L) x (N+L) complex matrix whose leading ``n_gen``
    rows/columns are generator buses.  Returns the N x N reduced matrix
    Y_gg - Y_gl Y_ll^-1 Y_lg.
    """
    y = np.asarray(y_full, dtype=np.complex128)
    if y.ndim != 2 or y.shape[0] != y.shape[1]:
        raise ValidationError(f"Y: must be square, got {y.shape}")
    total = y.shape[0]
    if not (0 < n_gen <= total):
        raise ValidationError(f"n_gen: must be in [1, {total}], got {n_gen}")
    if not np.allclose(y, y.T, atol=1e-9, rtol=0.0):
        raise ValidationError("Y: must be symmetric within 1e-9")
    if n_gen == total:
        return y.copy()
    y_gg = y[:n_gen, :n_gen]
    y_gl = y[:n_gen, n_gen:]
    y_lg = y[n_gen:, :n_gen]
    y_ll = y[n_gen:, n_gen:]
    try:
        x = np.linalg.solve(y_ll, y_lg)
    except np.linalg.LinAlgError as exc:
        raise ReductionError(
            f"load block Y_ll ({total - n_gen}x{total - n_gen}) is singular"
        ) from exc
    return y_gg - y_gl @ x


def coupling_from_admittance(y_red: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map a reduced admittance matrix to swing-equation (B, G) couplings.

    Off-diagonal bus-admittance entries are the negated line admittances
    (Y_ij = -g_ij + j b_ij for an inductive line), so the nonnegative line
    parameters are B_ij = Im(Y_ij) and G_ij = -Re(Y_ij).  Diagonals are
    dropped: the swing model carries zero-diagonal couplings.
    """
    y = np.asarray(y_red, dtype=np.complex128)
    n = y.shape[0]
    b = np.imag(y).copy()
    g = -np.real(y).copy()
    np.fill_diagonal(b, 0.0)
    np.fill_diagonal(g, 0.0)
    # Reduction roundoff can leave -1e-17 style residue on zero couplings.
    b[np.abs(b) < 1e-12] = 0.0
    g[np.abs(g) < 1e-12] = 0.0
    b = 0.5 * (b + b.T)
    g = 0.5 * (g + g.T)
    if np.any(b < 0.0):
        i, j = np.unravel_index(int(np.argmin(b)), (n, n))
        raise ReductionError(f"reduced susceptance B[{i}][{j}] = {b[i, j]} is negative")
    if np.any(g < 0.0):
        i, j = np.unravel_index(int(np.argmin(g)), (n, n))
        raise ReductionError(f"reduced conductance G[{i}][{j}] = {g[i, j]} is negative")
    return b, g


def kron_reduce(y_full: np.ndarray, n_gen: int) -> tuple[np.ndarray, np.ndarray]:
    """Kron-reduce a full admittance matrix down to generator (B, G) couplings."""
    return coupling_from_admittance(kron_reduce_admittance(y_full, n_gen))


# ---------------------------------------------------------------------------
# Swing dynamics
# ---------------------------------------------------------------------------

def _net_flow(case: NetworkCase, delta2: np.ndarray) -> np.ndarray:
    """Electrical power drawn from each bus, batched over rows of delta2.

    Uses sum_j B_ij sin(di - dj) = sin(di) (B cos d)_i - cos(di) (B sin d)_i
    (and the cosine analogue) so batched evaluation is two matmuls per
    coupling matrix.  The unrolled-graph builder mirrors this expression
    order exactly; keep the two in sync.
    """
    b = case.susceptance
    g = case.conductance
    s = np.sin(delta2)
    c = np.cos(delta2)
    return s * (c @ b.T) - c * (s @ b.T) + c * (c @ g.T) + s * (s @ g.T)


def _check_batch(case: NetworkCase, delta, omega, u, who: str):
    d = np.asarray(delta, dtype=np.float64)
    o = np.asarray(omega, dtype=np.float64)
    a = np.asarray(u, dtype=np.float64)
    n = case.n_buses
    for name, arr in (("delta", d), ("omega", o), ("u", a)):
        if arr.shape[-1:] != (n,) or arr.ndim not in (1, 2):
            raise ValidationError(
                f"{who}: {name} must have trailing dimension {n}, got shape {arr.shape}"
            )
        if not np.all(np.isfinite(arr)):
            raise ValidationError(f"{who}: {name} has non-finite entries")
    if not (d.shape == o.shape):
        raise ValidationError(f"{who}: delta/omega shapes differ: {d.shape} vs {o.shape}")
    if a.shape not in (d.shape, (n,)):
        raise ValidationError(f"{who}: u shape {a.shape} incompatible with state {d.shape}")
    return d, o, a


def swing_rhs(
    case: NetworkCase, state_or_delta, omega=None, u=None
) -> tuple[np.ndarray, np.ndarray]:
    """Continuous-time right-hand side of the swing dynamics.

    Accepts either ``swing_rhs(case, state, u=...)`` with a ``SystemState``
    or ``swing_rhs(case, delta, omega, u)`` with arrays (1-D for a single
    state, 2-D ``(H, N)`` for a batch).  Returns ``(delta_dot, omega_dot)``
    with the input's shape.  ``u`` defaults to zero; callers are expected
    to have clipped it to the actuation bounds already.
    """
    if isinstance(state_or_delta, SystemState):
        delta, omega_arr = state_or_delta.delta, state_or_delta.omega
    else:
        if omega is None:
            raise ValidationError("swing_rhs: omega missing for array-form call")
        delta, omega_arr = state_or_delta, omega
    if u is None:
        u = np.zeros(case.n_buses)
    d, o, a = _check_batch(case, delta, omega_arr, u, "swing_rhs")
    single = d.ndim == 1
    d2 = np.atleast_2d(d)
    o2 = np.atleast_2d(o)
    a2 = np.broadcast_to(np.atleast_2d(a), d2.shape)
    flow = _net_flow(case, d2)
    omega_dot = (((case.mech_power - case.damping * o2) - a2) - flow) / case.inertia
    delta_dot = o2
    if single:
        return delta_dot[0].copy(), omega_dot[0].copy()
    return delta_dot.copy(), omega_dot.copy()


def euler_step(case: NetworkCase, state: SystemState, u, dt: float) -> SystemState:
    """One forward-Euler step of the swing dynamics."""
    if dt <= 0.0:
        raise ValidationError(f"dt: must be positive, got {dt}")
    delta_dot, omega_dot = swing_rhs(case, state, u=u)
    return SystemState(
        delta=state.delta + dt * delta_dot,
        omega=state.omega + dt * omega_dot,
    )


def rk4_step(case: NetworkCase, state: SystemState, u, dt: float) -> SystemState:
    """Classic RK4 step with the action held constant over the substeps.

    Simulation-fidelity checks only; training gradients are defined
    against the Euler discretization.
    """
    if dt <= 0.0:
        raise ValidationError(f"dt: must be positive, got {dt}")
    d0, o0 = state.delta, state.omega
    k1d, k1o = swing_rhs(case, d0, o0, u)
    k2d, k2o = swing_rhs(case, d0 + 0.5 * dt * k1d, o0 + 0.5 * dt * k1o, u)
    k3d, k3o = swing_rhs(case, d0 + 0.5 * dt * k2d, o0 + 0.5 * dt * k2o, u)
    k4d, k4o = swing_rhs(case, d0 + dt * k3d, o0 + dt * k3o, u)
    return SystemState(
        delta=d0 + (dt / 6.0) * (k1d + 2.0 * k2d + 2.0 * k3d + k4d),
        omega=o0 + (dt / 6.0) * (k1o + 2.0 * k2o + 2.0 * k3o + k4o),
    )


def lossless_energy(case: NetworkCase, state: SystemState) -> float:
    """Energy function conserved when G = 0, D = 0 and u = 0.

    E = sum_i M_i w_i^2 / 2 - sum_{i<j} B_ij cos(d_i - d_j) - sum_i P_m,i d_i
    """
    d, o = state.delta, state.omega
    kinetic = 0.5 * float(np.sum(case.inertia * o * o))
    diff = d[:, None] - d[None, :]
    potential = -0.5 * float(np.sum(case.susceptance * np.cos(diff)))
    drive = -float(np.sum(case.mech_power * d))
    return kinetic + potential + drive


# ---------------------------------------------------------------------------
# Equilibrium
# ---------------------------------------------------------------------------

def _mismatch(case: NetworkCase, delta: np.ndarray) -> np.ndarray:
    return case.mech_power - _net_flow(case, delta[None, :])[0]


def _mismatch_jacobian(case: NetworkCase, delta: np.ndarray) -> np.ndarray:
    b = case.susceptance
    g = case.conductance
    diff = delta[:, None] - delta[None, :]
    jac = b * np.cos(diff) - g * np.sin(diff)
    np.fill_diagonal(jac, 0.0)
    np.fill_diagonal(jac, -jac.sum(axis=1))
    return jac


def solve_equilibrium(
    case: NetworkCase, tol: float = 1e-10, max_iter: int = 100
) -> Equilibrium:
    """Newton solve for the omega = 0 steady state with distributed slack.

    The angle reference is pinned at delta_1 = 0.  At every iterate the
    mean power mismatch is removed uniformly from all buses, which makes
    the lossy balance solvable; the final uniform correction is returned
    in ``slack_adjustment`` (to be *added* to ``mech_power``).  A
    step-halving line search guards iterates that increase the residual.
    """
    if tol <= 0.0:
        raise ValidationError(f"tol: must be positive, got {tol}")
    n = case.n_buses
    delta = np.zeros(n)
    raw = _mismatch(case, delta)
    res = raw - raw.mean()
    res_norm = float(np.max(np.abs(res)))
    for _ in range(max_iter):
        if res_norm <= tol:
            break
        if n == 1:
            break  # single bus: slack removes the whole mismatch
        jac = _mismatch_jacobian(case, delta)
        jac = jac - jac.mean(axis=0, keepdims=True)
        try:
            step = np.linalg.solve(jac[1:, 1:], -res[1:])
        except np.linalg.LinAlgError as exc:
            raise EquilibriumError(
                f"jacobian singular at residual {res_norm:.3e}", residual=res_norm
            ) from exc
        scale = 1.0
        for _ in range(40):
            trial = delta.copy()
            trial[1:] += scale * step
            traw = _mismatch(case, trial)
            tres = traw - traw.mean()
            tnorm = float(np.max(np.abs(tres)))
            if tnorm < res_norm or scale < 1e-12:
                break
            scale *= 0.5
        delta, raw, res, res_norm = trial, traw, tres, tnorm
    if res_norm > tol:
        raise EquilibriumError(
            f"no convergence in {max_iter} iterations (residual {res_norm:.3e})",
            residual=res_norm,
        )
    slack = np.full(n, -raw.mean())
    state = SystemState(delta=delta, omega=np.zeros(n))
    return Equilibrium(state=state, slack_adjustment=slack, residual_norm=res_norm)


# ---------------------------------------------------------------------------
# Case file ingestion
# ---------------------------------------------------------------------------

def case_to_dict(case: NetworkCase) -> dict:
    return {
        "version": CASE_SCHEMA_VERSION,
        "n_buses": case.n_buses,
        "units": {"omega": "rad_s"},
        "B": case.susceptance.ravel().tolist(),
        "G": case.conductance.ravel().tolist(),
        "M": case.inertia.tolist(),
        "D": case.damping.tolist(),
        "P_m": case.mech_power.tolist(),
        "u_max": case.u_max.tolist(),
        "u_min": case.u_min.tolist(),
    }


def case_from_dict(doc: dict) -> NetworkCase:
    """Build a validated NetworkCase from a schema-version-1 document.

    Raises ValidationError with a path-qualified message on the first
    violation encountered.
    """
    if not isinstance(doc, dict):
        raise ValidationError("case: document must be a JSON object")
    version = doc.get("version")
    if version != CASE_SCHEMA_VERSION:
        raise ValidationError(f"version: unknown case schema version {version!r}")
    try:
        n = int(doc["n_buses"])
    except (KeyError, TypeError, ValueError):
        raise ValidationError("n_buses: missing or not an integer") from None
    if n < 1:
        raise ValidationError(f"n_buses: must be positive, got {n}")
    units = doc.get("units", {"omega": "rad_s"})
    omega_unit = units.get("omega", "rad_s")
    if omega_unit not in ("rad_s", "hz"):
        raise ValidationError(f"units.omega: must be 'rad_s' or 'hz', got {omega_unit!r}")

    def grab(key: str, count: int) -> np.ndarray:
        if key not in doc:
            raise ValidationError(f"{key}: missing field")
        arr = np.asarray(doc[key], dtype=np.float64).ravel()
        if arr.size != count:
            raise ValidationError(f"{key}: expected {count} entries, got {arr.size}")
        return arr

    b = grab("B", n * n).reshape(n, n)
    g = grab("G", n * n).reshape(n, n)
    m = grab("M", n)
    d = grab("D", n)
    p = grab("P_m", n)
    u_max = grab("u_max", n)
    if "u_min" in doc:
        u_min = grab("u_min", n)
    else:
        u_min = -u_max
    if omega_unit == "hz":
        # Coefficients that multiply a frequency are rescaled so the
        # internal rad/s dynamics are equivalent: omega_rad = 2*pi*omega_hz.
        m = m / _TWO_PI
        d = d / _TWO_PI
    return NetworkCase(
        n_buses=n,
        susceptance=b,
        conductance=g,
        inertia=m,
        damping=d,
        mech_power=p,
        u_max=u_max,
        u_min=u_min,
    )


def load_case(path) -> NetworkCase:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: not valid JSON ({exc})") from exc
    try:
        return case_from_dict(doc)
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def save_case(case: NetworkCase, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(case_to_dict(case), fh, indent=1)
        fh.write("\n")


def bundled_case_path() -> str:
    """Path of the 10-generator reduced case shipped with the package."""
    from importlib.resources import files

    return str(files("gridlyap.data").joinpath("reduced_10gen.json"))
