"""Landmark-based reconstruction with a toy linear blendshape head.

The toy head has the same parameter interface as FLAME: 100 shape, 50
expression and 50 pose coefficients. Pose dims 0-2 rotate the jaw region
about a pivot, dims 3-5 rotate the whole head (axis-angle); the rest are inert.
"""
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve
from scipy.spatial import cKDTree

from . import container
from .errors import DivergenceError, ManifestError, ValidationError
from .motion_core import EXPR_DIM, POSE_DIM, SHAPE_DIM, CameraParams, MotionSequence

TOY_MODEL_SEED = 20240117
N_LANDMARKS = 68
JAW = slice(0, 3)
GLOBAL = slice(3, 6)
# per-frame fitted vector: expression, jaw, global rotation, camera (scale, tx, ty)
N_FRAME_PARAMS = EXPR_DIM + 6 + 3


@dataclass(frozen=True, eq=False)
class ToyHeadModel:
    template: np.ndarray      # (V, 3) metres
    shape_basis: np.ndarray   # (V, 3, 100)
    expr_basis: np.ndarray    # (V, 3, 50)
    jaw_pivot: np.ndarray     # (3,)
    jaw_weights: np.ndarray   # (V,) in [0, 1]
    landmarks: np.ndarray     # (68,) vertex indices

    def __post_init__(self):
        V = self.template.shape[0]
        if self.template.shape != (V, 3):
            raise ValidationError(f"template must be (V, 3), got {self.template.shape}")
        if self.shape_basis.shape != (V, 3, SHAPE_DIM) or self.expr_basis.shape != (V, 3, EXPR_DIM):
            raise ValidationError("basis shapes are inconsistent with the template")
        if self.jaw_weights.shape != (V,) or np.asarray(self.jaw_pivot).shape != (3,):
            raise ValidationError("jaw pivot/weights have the wrong shape")
        lm = np.asarray(self.landmarks)
        if lm.shape != (N_LANDMARKS,) or lm.min() < 0 or lm.max() >= V:
            raise ValidationError("landmark indices must be 68 vertex ids < V")
        object.__setattr__(self, "landmarks", lm.astype(np.int64))

    @property
    def n_vertices(self):
        return self.template.shape[0]


def _orthonormal_basis(rng, rows, cols, scale, decay):
    q, _ = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q * (scale * np.exp(-np.arange(cols) / decay))


def make_toy_model(seed=TOY_MODEL_SEED, n_vertices=500):
    """Ellipsoidal head, random orthogonal bases with decaying singular values."""
    rng = np.random.default_rng(seed)
    # Fibonacci sphere, stretched to head proportions
    i = np.arange(n_vertices) + 0.5
    phi = np.arccos(1 - 2 * i / n_vertices)
    theta = np.pi * (1 + 5 ** 0.5) * i
    unit = np.stack([np.sin(phi) * np.cos(theta), np.cos(phi), np.sin(phi) * np.sin(theta)], axis=1)
    template = unit * np.array([0.075, 0.1, 0.09])

    V3 = 3 * n_vertices
    shape_basis = _orthonormal_basis(rng, V3, SHAPE_DIM, 0.05, 40.0).reshape(n_vertices, 3, SHAPE_DIM)
    expr_basis = _orthonormal_basis(rng, V3, EXPR_DIM, 0.04, 25.0).reshape(n_vertices, 3, EXPR_DIM)

    jaw_pivot = np.array([0.0, -0.01, -0.03])
    jaw_weights = np.clip((-template[:, 1] - 0.01) / 0.04, 0.0, 1.0) * (template[:, 2] > -0.02)

    front = np.flatnonzero(template[:, 2] > 0.03)
    landmarks = np.sort(rng.choice(front, N_LANDMARKS, replace=False))
    return ToyHeadModel(template, shape_basis, expr_basis, jaw_pivot, jaw_weights.astype(float), landmarks)


def save_head_model(path, model):
    container.write_arrays(path, {
        "template": model.template, "shape_basis": model.shape_basis, "expr_basis": model.expr_basis,
        "jaw_pivot": model.jaw_pivot, "jaw_weights": model.jaw_weights,
        "landmarks": model.landmarks.astype(np.float32),
    }, {"kind": "head-model", "n_vertices": model.n_vertices})


def load_head_model(path):
    meta, a = container.read_arrays(path)
    if meta.get("kind") != "head-model":
        raise ManifestError(f"{path}: not a head model file")
    d = {k: a[k].astype(np.float64) for k in ("template", "shape_basis", "expr_basis", "jaw_pivot", "jaw_weights")}
    return ToyHeadModel(landmarks=np.rint(a["landmarks"]).astype(np.int64), **d)


def _skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


_E = np.eye(3)


def rodrigues(r):
    """Axis-angle -> (R, dR) with dR[k] = dR/dr_k."""
    r = np.asarray(r, dtype=np.float64)
    theta = np.linalg.norm(r)
    K = _skew(r)
    if theta < 1e-5:
        R = np.eye(3) + K + 0.5 * K @ K
        dR = np.stack([_skew(_E[k]) + 0.5 * (_skew(_E[k]) @ K + K @ _skew(_E[k])) for k in range(3)])
        return R, dR
    R = np.eye(3) + np.sin(theta) / theta * K + (1 - np.cos(theta)) / theta ** 2 * K @ K
    I_R = np.eye(3) - R
    dR = np.stack([
        (r[k] * K + _skew(np.cross(r, I_R[:, k]))) / theta ** 2 @ R for k in range(3)])
    return R, dR


def _check_params(beta, psi, theta):
    beta, psi, theta = (np.asarray(x, dtype=np.float64) for x in (beta, psi, theta))
    if beta.shape != (SHAPE_DIM,) or psi.shape != (EXPR_DIM,) or theta.shape != (POSE_DIM,):
        raise ValidationError(
            f"expected beta/psi/theta of length {SHAPE_DIM}/{EXPR_DIM}/{POSE_DIM}, "
            f"got {beta.shape}/{psi.shape}/{theta.shape}")
    return beta, psi, theta


def _articulate(model, v, theta):
    Rj, _ = rodrigues(theta[JAW])
    Rg, _ = rodrigues(theta[GLOBAL])
    p = model.jaw_pivot
    w = model.jaw_weights[:, None]
    u = v + w * ((v - p) @ Rj.T + p - v)
    return u @ Rg.T


def forward(model, beta, psi, theta):
    """Vertices (V, 3) for shape ``beta``, expression ``psi``, pose ``theta``."""
    beta, psi, theta = _check_params(beta, psi, theta)
    v = model.template + model.shape_basis @ beta + model.expr_basis @ psi
    return _articulate(model, v, theta)


def project(vertices, cam, landmarks=None):
    """Weak-perspective projection: pixel = scale * (x, y) + translation.

    With ``landmarks`` given, only those vertex rows are projected.
    """
    if not isinstance(cam, CameraParams):
        cam = CameraParams(cam[0], tuple(cam[1:3]))
    x = np.asarray(vertices, dtype=np.float64)
    if landmarks is not None:
        x = x[np.asarray(landmarks)]
    return cam.scale * x[:, :2] + np.asarray(cam.translation)


def project_landmarks(model, vertices, cam):
    return project(vertices, cam, model.landmarks)


# ---------------------------------------------------------------- sequence fit

def _frame_residual(model, base_lmk, E_lmk, q, obs, need_jac=True):
    """Residual (136,) and Jacobian (136, 59) of one frame's reprojection."""
    psi, jaw, glob = q[:EXPR_DIM], q[EXPR_DIM:EXPR_DIM + 3], q[EXPR_DIM + 3:EXPR_DIM + 6]
    s, t = q[EXPR_DIM + 6], q[EXPR_DIM + 7:]
    Rj, dRj = rodrigues(jaw)
    Rg, dRg = rodrigues(glob)
    p = model.jaw_pivot
    w = model.jaw_weights[model.landmarks][:, None]
    v = base_lmk + E_lmk @ psi
    u = v + w * ((v - p) @ Rj.T + p - v)
    x = u @ Rg.T
    r = (s * x[:, :2] + t - obs).reshape(-1)
    if not need_jac:
        return r, None
    L = len(model.landmarks)
    J = np.empty((L, 2, N_FRAME_PARAMS))
    # du/dv = (1-w) I + w Rj, so dx/dpsi = Rg ((1-w) E + w Rj E)
    RjE = np.einsum("ij,ljk->lik", Rj, E_lmk)
    dU = (1 - w)[:, :, None] * E_lmk + w[:, :, None] * RjE
    dX = np.einsum("ij,ljk->lik", Rg, dU)
    J[:, :, :EXPR_DIM] = s * dX[:, :2]
    for k in range(3):
        dxj = w * ((v - p) @ dRj[k].T) @ Rg.T
        J[:, :, EXPR_DIM + k] = s * dxj[:, :2]
        dxg = u @ dRg[k].T
        J[:, :, EXPR_DIM + 3 + k] = s * dxg[:, :2]
    J[:, :, EXPR_DIM + 6] = x[:, :2]
    J[:, :, EXPR_DIM + 7:] = np.eye(2)
    return r, J.reshape(2 * L, N_FRAME_PARAMS)


def _landmark_bases(model, beta):
    lm = model.landmarks
    base = model.template[lm] + model.shape_basis[lm] @ beta
    return base, model.expr_basis[lm]


def sequence_objective(model, beta, observed, X, lambda_s=0.1, need_grad=True):
    """Total loss and gradient over per-frame parameters ``X`` (T, 59)."""
    base, E = _landmark_bases(model, np.asarray(beta, dtype=np.float64))
    loss, grad = 0.0, np.zeros_like(X) if need_grad else None
    for t in range(X.shape[0]):
        r, J = _frame_residual(model, base, E, X[t], observed[t], need_grad)
        loss += r @ r
        if need_grad:
            grad[t] = 2.0 * J.T @ r
    dX = np.diff(X, axis=0)
    loss += lambda_s * (dX ** 2).sum()
    if need_grad and len(X) > 1:
        grad[1:] += 2 * lambda_s * dX
        grad[:-1] -= 2 * lambda_s * dX
    return loss, grad


def initial_camera(model, beta, observed_frame):
    """Closed-form (scale, tx, ty) aligning the neutral landmarks to one observation."""
    base, _ = _landmark_bases(model, beta)
    xy = base[:, :2]
    A = np.zeros((2 * len(xy), 3))
    A[:, 0] = xy.reshape(-1)
    A[0::2, 1] = 1.0
    A[1::2, 2] = 1.0
    sol, *_ = np.linalg.lstsq(A, observed_frame.reshape(-1), rcond=None)
    if sol[0] <= 0:
        sol[0] = np.std(observed_frame) / max(np.std(xy), 1e-12)
    return sol


@dataclass
class SequenceFit:
    params: np.ndarray        # (T, 59)
    loss_trace: list
    rmse: float
    converged: bool

    @property
    def expression(self):
        return self.params[:, :EXPR_DIM]

    @property
    def pose(self):
        pose = np.zeros((len(self.params), POSE_DIM))
        pose[:, :6] = self.params[:, EXPR_DIM:EXPR_DIM + 6]
        return pose

    @property
    def cameras(self):
        c = self.params[:, EXPR_DIM + 6:]
        return [CameraParams(row[0], (row[1], row[2])) for row in c]

    def motion(self, fps=30.0):
        return MotionSequence(np.hstack([self.expression, self.pose]), fps)


def _pack_init(model, beta, observed, init):
    T = observed.shape[0]
    if init is None:
        X = np.zeros((T, N_FRAME_PARAMS))
        for t in range(T):
            X[t, EXPR_DIM + 6:] = initial_camera(model, beta, observed[t])
        return X
    X = np.array(init, dtype=np.float64)
    if X.shape != (T, N_FRAME_PARAMS):
        raise ValidationError(f"init must be (T, {N_FRAME_PARAMS}), got {X.shape}")
    return X


def pack_frame_params(psi, theta, cam):
    cam = cam if isinstance(cam, CameraParams) else CameraParams(cam[0], tuple(cam[1:3]))
    return np.concatenate([np.asarray(psi, float), np.asarray(theta, float)[:6], cam.as_vector()])


def reprojection_rmse(model, beta, observed, X):
    base, E = _landmark_bases(model, beta)
    sq = 0.0
    for t in range(X.shape[0]):
        r, _ = _frame_residual(model, base, E, X[t], observed[t], need_jac=False)
        sq += r @ r
    return float(np.sqrt(sq / (observed.shape[0] * observed.shape[1])))


def fit_sequence(model, beta, observed, init=None, lambda_s=0.1, method="gauss_newton",
                 max_iter=None, tol=1e-8):
    """Per-frame expression, jaw/global pose and camera from 2D landmark tracks.

    Minimises  sum_t ||proj_t - obs_t||^2 + lambda_s sum_t ||x_{t+1} - x_t||^2.
    ``method`` is "gauss_newton" (damped, default) or "gradient_descent".
    """
    beta = np.asarray(getattr(beta, "beta", beta), dtype=np.float64)
    observed = np.asarray(observed, dtype=np.float64)
    if observed.ndim != 3 or observed.shape[1:] != (N_LANDMARKS, 2) or observed.shape[0] < 1:
        raise ValidationError(f"observations must be (T>=1, 68, 2), got {observed.shape}")
    if lambda_s < 0:
        raise ValidationError("lambda_s must be >= 0")
    X = _pack_init(model, beta, observed, init)
    if method == "gauss_newton":
        X, trace, converged = _gauss_newton_sequence(model, beta, observed, X, lambda_s,
                                                     max_iter or 200, tol)
    elif method == "gradient_descent":
        def fn(x, need_grad=True):
            return sequence_objective(model, beta, observed, x, lambda_s, need_grad)
        X, trace, converged = gradient_descent(fn, X, max_iter or 2000, tol)
    else:
        raise ValidationError(f"unknown method {method!r}")
    return SequenceFit(X, trace, reprojection_rmse(model, beta, observed, X), converged)


def _gauss_newton_sequence(model, beta, observed, X, lambda_s, max_iter, tol):
    T, P = X.shape
    base, E = _landmark_bases(model, beta)
    D = sparse.diags([-np.ones(T - 1), np.ones(T - 1)], [0, 1], shape=(T - 1, T)) if T > 1 else None
    smooth = lambda_s * sparse.kron(D.T @ D, sparse.identity(P)) if D is not None else None

    def evaluate(X):
        loss, blocks, g = 0.0, [], np.zeros_like(X)
        for t in range(T):
            r, J = _frame_residual(model, base, E, X[t], observed[t])
            loss += r @ r
            blocks.append(J.T @ J)
            g[t] = J.T @ r
        if T > 1:
            dX = np.diff(X, axis=0)
            loss += lambda_s * (dX ** 2).sum()
            g[1:] += lambda_s * dX
            g[:-1] -= lambda_s * dX
        return loss, blocks, g

    def loss_only(X):
        return sequence_objective(model, beta, observed, X, lambda_s, need_grad=False)[0]

    loss, blocks, g = evaluate(X)
    trace = [float(loss)]
    mu = 1e-3
    converged = False
    for _ in range(max_iter):
        H = sparse.block_diag(blocks, format="csc")
        if smooth is not None:
            H = H + smooth
        diag = H.diagonal()
        accepted = False
        while mu < 1e12:
            A = (H + sparse.diags(mu * np.maximum(diag, 1e-12))).tocsc()
            step = spsolve(A, -g.reshape(-1)).reshape(T, P)
            if not np.all(np.isfinite(step)):
                mu *= 10
                continue
            new_loss = loss_only(X + step)
            if np.isfinite(new_loss) and new_loss <= loss:
                accepted = True
                break
            mu *= 10
        if not accepted:
            converged = True
            break
        X = X + step
        rel = (loss - new_loss) / max(loss, 1e-300)
        loss, blocks, g = evaluate(X)
        trace.append(float(loss))
        mu = max(mu / 10, 1e-9)
        if rel < tol or loss < 1e-20:
            converged = True
            break
    if not np.isfinite(loss):
        raise DivergenceError("sequence fit produced a non-finite loss", trace)
    return X, trace, converged


# ---------------------------------------------------------------- shape fit

@dataclass(frozen=True, eq=False)
class Scan:
    points: np.ndarray                 # (P, 3) metres
    landmarks: np.ndarray = None       # optional (68, 3)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ValidationError(f"scan points must be (P>=1, 3), got {pts.shape}")
        object.__setattr__(self, "points", pts)
        if self.landmarks is not None:
            lm = np.asarray(self.landmarks, dtype=np.float64)
            if lm.shape != (N_LANDMARKS, 3):
                raise ValidationError(f"scan landmarks must be (68, 3), got {lm.shape}")
            object.__setattr__(self, "landmarks", lm)


def shape_objective(model, scan, beta, w_landmark=1.0, w_scan=0.1, need_grad=True):
    """3D landmark residuals plus squared point-to-nearest-vertex distances (neutral pose)."""
    beta = np.asarray(beta, dtype=np.float64)
    verts = model.template + model.shape_basis @ beta
    loss, grad = 0.0, np.zeros_like(beta)
    if scan.landmarks is not None and w_landmark:
        r = verts[model.landmarks] - scan.landmarks
        loss += w_landmark * (r ** 2).sum()
        if need_grad:
            grad += 2 * w_landmark * np.einsum("lij,li->j", model.shape_basis[model.landmarks], r)
    if w_scan:
        _, nn = cKDTree(verts).query(scan.points)
        r = verts[nn] - scan.points
        loss += w_scan * (r ** 2).sum()
        if need_grad:
            grad += 2 * w_scan * np.einsum("lij,li->j", model.shape_basis[nn], r)
    return loss, (grad if need_grad else None)


@dataclass
class ShapeFit:
    beta: np.ndarray
    loss_trace: list
    converged: bool


def average_shapes(per_frame_betas):
    """Identity initialisation: mean of per-frame monocular shape estimates."""
    b = np.asarray(per_frame_betas, dtype=np.float64)
    if b.ndim != 2 or b.shape[1] != SHAPE_DIM or b.shape[0] < 1:
        raise ValidationError(f"per-frame shapes must be (N>=1, {SHAPE_DIM}), got {b.shape}")
    return b.mean(axis=0)


def fit_shape(model, scan, init_beta=None, w_landmark=1.0, w_scan=0.1, max_iter=2000, tol=1e-8):
    """Refine ``init_beta`` against a scan by gradient descent with backtracking."""
    beta0 = np.zeros(SHAPE_DIM) if init_beta is None else np.asarray(
        getattr(init_beta, "beta", init_beta), dtype=np.float64)
    if beta0.shape != (SHAPE_DIM,):
        raise ValidationError(f"init beta must have length {SHAPE_DIM}")

    def fn(b, need_grad=True):
        return shape_objective(model, scan, b, w_landmark, w_scan, need_grad)

    beta, trace, converged = gradient_descent(fn, beta0, max_iter, tol)
    return ShapeFit(beta, trace, converged)


def gradient_descent(fn, x0, max_iter=2000, tol=1e-8, step0=1.0, shrink=0.5, c=1e-4, min_step=1e-30,
                     atol=1e-24):
    """Armijo backtracking descent. Stops when the relative loss change drops below ``tol``
    or the loss itself falls below ``atol``.

    Raises DivergenceError if no step along -grad decreases a non-stationary loss.
    """
    x = np.array(x0, dtype=np.float64)
    loss, g = fn(x)
    trace = [float(loss)]
    step = step0
    for _ in range(max_iter):
        gg = float((g * g).sum())
        if gg == 0.0:
            return x, trace, True
        while step > min_step:
            cand = x - step * g
            new_loss, _ = fn(cand, need_grad=False)
            if np.isfinite(new_loss) and new_loss <= loss - c * step * gg:
                break
            step *= shrink
        else:
            if loss > 0 and np.sqrt(gg) > 1e-6 * (1.0 + abs(loss)):
                raise DivergenceError(
                    f"line search failed at loss {loss:.6g} with |grad| {np.sqrt(gg):.3g}", trace)
            return x, trace, True
        x = cand
        rel = (loss - new_loss) / max(abs(loss), 1e-300)
        loss, g = fn(x)
        trace.append(float(loss))
        step /= shrink ** 2  # let the step grow back
        if rel < tol or loss <= atol:
            return x, trace, True
    return x, trace, False
