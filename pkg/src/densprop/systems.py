"""Benchmark systems: Kraichnan-Orszag, an LQR-stabilized rigid body with an
uncertain actuator parameter, and linear systems used as closed-form oracles.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import InitialDensity, SystemModel


class CareError(RuntimeError):
    """Riccati iteration failed to converge or the pair is not stabilizable."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


# ---------------------------------------------------------------------------
# Kraichnan-Orszag
# ---------------------------------------------------------------------------

def kraichnan_orszag() -> SystemModel:
    """Three-state quadratic benchmark; the vector field is divergence-free,
    so the density is conserved along every characteristic."""

    def f(x):
        x = np.asarray(x, dtype=float)
        x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
        return np.stack([x1 * x3, -x2 * x3, -x1 ** 2 + x2 ** 2], axis=-1)

    def div(x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1])

    rho0 = InitialDensity.gaussian(mean=[1.0, 0.0, 0.0], stdev=[0.25, 0.5, 0.5])
    return SystemModel("kraichnan-orszag", 3, f, div, rho0)


# ---------------------------------------------------------------------------
# Linear systems (analytic oracles)
# ---------------------------------------------------------------------------

def linear_system(A, initial_density: InitialDensity, name: str = "linear") -> SystemModel:
    """x' = A x.  Along any trajectory, log rho(t) = log rho0(x0) - t * tr(A)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    trace = float(np.trace(A))

    def f(x):
        x = np.asarray(x, dtype=float)
        return x @ A.T

    def div(x):
        x = np.asarray(x, dtype=float)
        return np.full(x.shape[:-1], trace)

    return SystemModel(name, A.shape[0], f, div, initial_density)


def linear_test() -> SystemModel:
    """1-d contraction x' = -x with standard normal initial density.

    Exact density: rho(x; t) = e^t * rho0(x e^t)."""
    return linear_system([[-1.0]], InitialDensity.gaussian([0.0], [1.0]), name="linear-test")


# ---------------------------------------------------------------------------
# Rigid body attitude kinematics/dynamics
# ---------------------------------------------------------------------------

def rotation_inertial_to_body(v):
    """ZYX (yaw-pitch-roll) Euler angles v = (phi, theta, psi); R(0) = I."""
    phi, theta, psi = v
    cf, sf = np.cos(phi), np.sin(phi)
    ct, st = np.cos(theta), np.sin(theta)
    cp, sp = np.cos(psi), np.sin(psi)
    return np.array([
        [ct * cp, ct * sp, -st],
        [sf * st * cp - cf * sp, sf * st * sp + cf * cp, sf * ct],
        [cf * st * cp + sf * sp, cf * st * sp - sf * cp, cf * ct],
    ])


def euler_rate_matrix(v):
    """Body angular velocity -> Euler angle rates; E(0) = I, singular at theta = +-pi/2."""
    phi, theta, _ = v
    cf, sf = np.cos(phi), np.sin(phi)
    ct = np.cos(theta)
    tt = np.tan(theta)
    return np.array([
        [1.0, sf * tt, cf * tt],
        [0.0, cf, -sf],
        [0.0, sf / ct, cf / ct],
    ])


def momentum_cross_matrix(omega):
    """S(omega) with S(omega) a = a x omega for any vector a (so S(omega) omega = 0)."""
    w1, w2, w3 = omega
    return np.array([
        [0.0, w3, -w2],
        [-w3, 0.0, w1],
        [w2, -w1, 0.0],
    ])


@dataclass(frozen=True)
class RigidBodyParams:
    """Inertia, actuator matrix as a function of the uncertain gain beta, and
    the stored angular momentum."""

    J: np.ndarray = field(default_factory=lambda: np.diag([2.0, 3.0, 4.0]))
    h: np.ndarray = field(default_factory=lambda: np.array([1.0, 1.0, 1.0]))
    beta_nominal: float = 1.0

    def __post_init__(self):
        J = np.asarray(self.J, dtype=float)
        if J.shape != (3, 3) or np.any(np.diag(J) <= 0) or np.any(J != np.diag(np.diag(J))):
            raise ValueError("J must be a positive-definite diagonal 3x3 matrix")
        object.__setattr__(self, "J", J)
        object.__setattr__(self, "h", np.asarray(self.h, dtype=float))

    def B(self, beta):
        return np.array([
            [beta, 0.1, 0.2],
            [0.2, beta, 0.3],
            [0.3, 0.2, beta],
        ])


# singular Euler kinematics guard: |theta| at pi/2 - 1e-6 or beyond
_THETA_LIMIT = np.pi / 2 - 1e-6


def rigid_body_open_loop(params: RigidBodyParams, beta: float):
    """f(x6, u3) for the 6-state attitude system at a fixed actuator gain."""
    J_inv = np.diag(1.0 / np.diag(params.J))
    B = params.B(beta)

    def f(x, u):
        v, omega = x[:3], x[3:6]
        if abs(v[1]) >= _THETA_LIMIT:
            return np.full(6, np.nan)
        vdot = euler_rate_matrix(v) @ omega
        m = rotation_inertial_to_body(v) @ params.h
        wdot = J_inv @ (np.cross(m, omega) + B @ u)
        return np.concatenate([vdot, wdot])

    return f


def linearize(f, x_bar, u_bar, step: float = 1e-6):
    """Central finite-difference Jacobians (F, G) of f(x, u) about (x_bar, u_bar)."""
    x_bar = np.asarray(x_bar, dtype=float)
    u_bar = np.asarray(u_bar, dtype=float)
    n, m = x_bar.size, u_bar.size
    F = np.empty((n, n))
    G = np.empty((n, m))
    for i in range(n):
        e = np.zeros(n)
        e[i] = step
        F[:, i] = (f(x_bar + e, u_bar) - f(x_bar - e, u_bar)) / (2 * step)
    for i in range(m):
        e = np.zeros(m)
        e[i] = step
        G[:, i] = (f(x_bar, u_bar + e) - f(x_bar, u_bar - e)) / (2 * step)
    if not (np.all(np.isfinite(F)) and np.all(np.isfinite(G))):
        raise ValueError("non-finite values encountered during linearization")
    return F, G


# ---------------------------------------------------------------------------
# Continuous algebraic Riccati equation via Newton-Kleinman
# ---------------------------------------------------------------------------

def _solve_lyapunov(A, C):
    """Solve A^T P + P A + C = 0 by Kronecker vectorization (small n only)."""
    n = A.shape[0]
    eye = np.eye(n)
    # row-major vec: vec(A^T P) = (A^T (x) I) vec(P), vec(P A) = (I (x) A^T) vec(P)
    M = np.kron(A.T, eye) + np.kron(eye, A.T)
    p = np.linalg.solve(M, -C.ravel())
    P = p.reshape(n, n)
    return 0.5 * (P + P.T)


def care_residual(F, G, Q, R, P) -> float:
    """Relative Frobenius residual of F^T P + P F - P G R^-1 G^T P + Q."""
    res = F.T @ P + P @ F - P @ G @ np.linalg.solve(R, G.T @ P) + Q
    return float(np.linalg.norm(res) / np.linalg.norm(Q))


@dataclass(frozen=True)
class LqrDesign:
    F: np.ndarray
    G: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray
    K: np.ndarray

    @property
    def residual(self) -> float:
        return care_residual(self.F, self.G, self.Q, self.R, self.P)

    @property
    def closed_loop_eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvals(self.F - self.G @ self.K)


def _initial_stabilizing_gain(F, G):
    """Bass-style construction: with c exceeding every |Re eig(F)|, the Lyapunov
    solution W of (F + cI) W + W (F + cI)^T = 2 G G^T yields K0 = G^T W^-1 with
    F - G K0 Hurwitz. Requires a controllable pair; K0 = 0 covers stable F."""
    eigs = np.linalg.eigvals(F)
    if np.max(eigs.real) < 0:
        return np.zeros((G.shape[1], F.shape[0]))
    c = 1.0 + float(np.max(np.abs(eigs.real)))
    W = _solve_lyapunov((F + c * np.eye(F.shape[0])).T, -2.0 * G @ G.T)
    try:
        K0 = np.linalg.solve(W.T, G).T  # G^T W^-1, W symmetric
    except np.linalg.LinAlgError as exc:
        raise CareError("failed to construct an initial stabilizing gain "
                        "(pair likely not stabilizable)") from exc
    if np.max(np.linalg.eigvals(F - G @ K0).real) >= 0:
        raise CareError("initial gain does not stabilize the pair "
                        "(pair likely not stabilizable)")
    return K0


def solve_care(F, G, Q, R, max_iter: int = 60, tol: float = 1e-13) -> LqrDesign:
    """Newton-Kleinman iteration: each step solves a closed-loop Lyapunov
    equation; quadratically convergent from any stabilizing gain."""
    F = np.atleast_2d(np.asarray(F, dtype=float))
    G = np.asarray(G, dtype=float).reshape(F.shape[0], -1)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))

    K = _initial_stabilizing_gain(F, G)
    P = None
    residual = np.inf
    for _ in range(max_iter):
        A = F - G @ K
        C = Q + K.T @ R @ K
        P = _solve_lyapunov(A, C)
        K = np.linalg.solve(R, G.T @ P)
        residual = care_residual(F, G, Q, R, P)
        if residual < tol:
            break
    if P is None or not np.isfinite(residual) or residual > 1e-9:
        raise CareError(f"Riccati iteration did not converge (residual {residual:.3e})",
                        residual=residual)
    return LqrDesign(F=F, G=G, Q=Q, R=R, P=P, K=K)


def design_rigid_body_lqr(params: RigidBodyParams | None = None,
                          w1: float = 4.0, w2: float = 0.5, w3: float = 8.0) -> LqrDesign:
    """Linearize about the origin at the nominal actuator gain and solve the CARE
    for the quadratic weights diag(w1 I3, w2 I3) on the state and w3 I3 on the input."""
    params = params or RigidBodyParams()
    f = rigid_body_open_loop(params, params.beta_nominal)
    F, G = linearize(f, np.zeros(6), np.zeros(3))
    Q = np.diag([w1] * 3 + [w2] * 3)
    R = w3 * np.eye(3)
    return solve_care(F, G, Q, R)


# ---------------------------------------------------------------------------
# Closed-loop rigid body with augmented uncertain parameter
# ---------------------------------------------------------------------------

def rigid_body_lqr(params: RigidBodyParams | None = None,
                   design: LqrDesign | None = None,
                   w1: float = 4.0, w2: float = 0.5, w3: float = 8.0) -> SystemModel:
    """7-state closed-loop model: x = (phi, theta, psi, w1, w2, w3, beta) with
    u = -K (v, omega) designed at the nominal beta, while the plant actuates
    through B(beta); beta' = 0 augments the uncertain parameter into the state.

    Initial density: angles ~ N(0, (pi/6)^2), rates ~ N(0, 2^2), and a bimodal
    beta mixture N(1/3, 1/9^2)/2 + N(1, 1/9^2)/2.
    """
    params = params or RigidBodyParams()
    if design is None:
        design = design_rigid_body_lqr(params, w1=w1, w2=w2, w3=w3)
    K = design.K
    J_diag = np.diag(params.J)
    h1, h2, h3 = params.h
    # B(beta) = beta * I + B_off, so the actuation batches over beta cheaply
    B_off = params.B(0.0)

    def f(x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        X = np.atleast_2d(x)
        phi, theta, psi = X[:, 0], X[:, 1], X[:, 2]
        w = X[:, 3:6]
        beta = X[:, 6]
        bad = np.abs(theta) >= _THETA_LIMIT
        theta_safe = np.where(bad, 0.0, theta)
        cf, sf = np.cos(phi), np.sin(phi)
        ct, st = np.cos(theta_safe), np.sin(theta_safe)
        cp, sp = np.cos(psi), np.sin(psi)
        tt = st / ct
        # attitude kinematics v' = E(v) w
        vdot = np.stack([
            w[:, 0] + sf * tt * w[:, 1] + cf * tt * w[:, 2],
            cf * w[:, 1] - sf * w[:, 2],
            (sf * w[:, 1] + cf * w[:, 2]) / ct,
        ], axis=-1)
        # stored momentum resolved in the body frame: m = R(v) h
        m1 = ct * cp * h1 + ct * sp * h2 - st * h3
        m2 = (sf * st * cp - cf * sp) * h1 + (sf * st * sp + cf * cp) * h2 + sf * ct * h3
        m3 = (cf * st * cp + sf * sp) * h1 + (cf * st * sp - sf * cp) * h2 + cf * ct * h3
        # gyroscopic torque m x w
        gyro = np.stack([
            m2 * w[:, 2] - m3 * w[:, 1],
            m3 * w[:, 0] - m1 * w[:, 2],
            m1 * w[:, 1] - m2 * w[:, 0],
        ], axis=-1)
        u = -(X[:, :6] @ K.T)
        torque = gyro + beta[:, None] * u + u @ B_off.T
        out = np.concatenate([vdot, torque / J_diag, np.zeros((len(X), 1))], axis=-1)
        out[bad] = np.nan
        return out[0] if single else out

    # analytic divergence:
    #   d(vdot1)/dphi = tan(theta) (cos(phi) w2 - sin(phi) w3); the other E
    #   rows contribute nothing; the gyroscopic term m x w has a zero-diagonal
    #   Jacobian in w; the feedback contributes -tr of the w-block of
    #   J^-1 B(beta) K, which is affine in beta; beta itself is constant.
    fb_lin = float(np.sum(np.diag(K[:, 3:6]) / J_diag))
    fb_const = float(np.sum(np.diag((B_off @ K)[:, 3:6]) / J_diag))

    def div(x):
        x = np.asarray(x, dtype=float)
        phi, theta = x[..., 0], x[..., 1]
        w2_, w3_ = x[..., 4], x[..., 5]
        beta = x[..., 6]
        kin = np.tan(theta) * (np.cos(phi) * w2_ - np.sin(phi) * w3_)
        return kin - (fb_lin * beta + fb_const)

    rho0 = InitialDensity.mixture([
        (0.5, [0, 0, 0, 0, 0, 0, 1.0 / 3.0], [np.pi / 6] * 3 + [2.0] * 3 + [1.0 / 9.0]),
        (0.5, [0, 0, 0, 0, 0, 0, 1.0], [np.pi / 6] * 3 + [2.0] * 3 + [1.0 / 9.0]),
    ])
    return SystemModel("rigid-body-lqr", 7, f, div, rho0)
