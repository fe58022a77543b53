"""Trainable observation layers and end-to-end training.

A small fully-connected network maps a grayscale patch to the predicted
dense code plus an auxiliary object count (the multi-task label is the
dense code concatenated with beta * count). Training minimizes

    0.5 * ||prediction - label||^2 + alpha * ||a_hat - a||_1

where a_hat is recovered from the predicted code by the L1 solver. Three
modes differ only in how (and whether) the L1 term's gradient reaches
the network:

    cnncs    L2 term only (alpha treated as 0); no recovery during training
    ecnncs1  reverse accumulation through the unrolled solver's graph
    ecnncs2  analytic recovery-layer rules applied at the ISTA solution
             (approximate rules by default; exact rules behind a flag,
             falling back per sample when the support exceeds m)

The sensing matrix can itself be trained (train_D) using the matching
recovery-layer rule; labels are refreshed whenever D moves.
"""

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .encoding import (PatchShape, PointSet, ProjectionGeometry, SparseCode,
                       encode_sparse)
from .errors import ConfigError, DimensionError, NumericError
from .recovery import (ListaParams, RecoveryConfig, ista_recover_batch,
                       lista_forward_batch, resolve_step)
from .recovery_grad import (RecoverySolution, approx_grad_D, approx_grad_x,
                            exact_grad_D, exact_grad_x)
from .rng import CounterRng
from .sensing import SensingMatrix
from .errors import SingularityError


@dataclass
class MlpModel:
    """Fully-connected rectifier network.

    sizes[0] is the flattened (optionally average-pooled) patch length;
    sizes[-1] the dense-code length plus one count slot. out_scale is a
    fixed (non-trained) multiplier on the linear output so the trainable
    parameters live at unit scale even when labels do not.
    """

    sizes: list
    weights: list
    biases: list
    out_scale: float = 1.0
    input_pool: int = 1


def init_model(shape, hidden, out_dim, seed, out_scale=1.0, input_pool=1):
    if input_pool < 1 or shape.h % input_pool or shape.w % input_pool:
        raise ConfigError(f"input_pool {input_pool} must divide patch sides "
                          f"{shape.h}x{shape.w}")
    sizes = [(shape.h // input_pool) * (shape.w // input_pool)] + list(hidden) + [out_dim]
    rng = CounterRng(seed).derive(0x717)
    weights, biases = [], []
    for i in range(len(sizes) - 1):
        fan_in = sizes[i]
        scale = np.sqrt(2.0 / fan_in) if i < len(sizes) - 2 else np.sqrt(1.0 / fan_in)
        weights.append(rng.normal((sizes[i + 1], sizes[i])) * scale)
        biases.append(np.zeros(sizes[i + 1]))
    return MlpModel(sizes=sizes, weights=weights, biases=biases,
                    out_scale=float(out_scale), input_pool=int(input_pool))


def _prepare_inputs(model, patches):
    """uint8 patches (B, h, w) -> flattened float batch in [0, 1]."""
    X = np.asarray(patches, dtype=np.float64) / 255.0
    if X.ndim == 2:
        X = X[None]
    p = model.input_pool
    if p > 1:
        B, h, w = X.shape
        X = X.reshape(B, h // p, p, w // p, p).mean(axis=(2, 4))
    return X.reshape(X.shape[0], -1)


def _blur_raw(X, taps, r):
    for axis in (1, 2):
        pad = [(0, 0)] * 3
        pad[axis] = (r, r)
        Xp = np.pad(X, pad)
        out = np.zeros_like(X)
        for k, w in enumerate(taps):
            sl = [slice(None)] * 3
            sl[axis] = slice(k, k + X.shape[axis])
            out += w * Xp[tuple(sl)]
        X = out
    return X


def _blur(X, sigma):
    """Separable Gaussian blur of (B, h, w), edge-corrected.

    Normalized convolution: the zero-padded blur is divided by the blur
    of an all-ones image, so borders see a properly weighted local mean
    instead of padding artifacts (a difference of two such blurs would
    otherwise ring along the image edges).
    """
    r = int(np.ceil(3.0 * sigma))
    taps = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma) ** 2)
    taps /= taps.sum()
    weight = _blur_raw(np.ones((1,) + X.shape[1:]), taps, r)
    return _blur_raw(X, taps, r) / weight


def blob_response(images, sigma):
    """Difference-of-Gaussians blob detector, clipped to its positive lobe.

    Flat backgrounds and slow illumination gradients cancel; isotropic
    bright bumps of radius about 2 * sigma give compact positive peaks.
    """
    X = np.asarray(images, dtype=np.float64) / 255.0
    if X.ndim == 2:
        X = X[None]
    return np.maximum(_blur(X, sigma) - _blur(X, 3.0 * sigma), 0.0)


def _pool(X, cell, reduce="mean"):
    B, h, w = X.shape
    Xr = X.reshape(B, h // cell, cell, w // cell, cell)
    return Xr.mean(axis=(2, 4)) if reduce == "mean" else Xr.max(axis=(2, 4))


def _box_sum(X, radius):
    """Sliding (2r+1)^2 box sum over the last two axes via integral images."""
    B, h, w = X.shape
    pad = np.pad(X, ((0, 0), (radius + 1, radius), (radius + 1, radius)))
    ii = pad.cumsum(axis=1).cumsum(axis=2)
    r = 2 * radius + 1
    return (ii[:, r:, r:] - ii[:, :-r, r:] - ii[:, r:, :-r] + ii[:, :-r, :-r])


def peak_mass(resp, sigma, floor=1e-3, thresh=0.0):
    """Self-normalizing point-mass map: resp^2 over its local box energy.

    Within one blob the ratios sum to about 1 regardless of the blob's
    brightness, so the mass channel is intensity-invariant. `thresh`
    (an absolute response level) is subtracted in the energy domain so
    pixel noise contributes exactly zero; the `floor` in the denominator
    guards the ratio where almost nothing remains.
    """
    e = np.maximum(resp * resp - thresh * thresh, 0.0)
    denom = _box_sum(e, int(np.ceil(3.0 * sigma))) + floor
    return e / denom


CELL_FEATURES = 4  # normalized mass, response mean, response max, brightness


@dataclass
class CellHeadModel:
    """Observation layer factored as fixed geometry plus a tiny shared head.

    A fixed blob-response front end pools the image onto the encoding
    lattice; a small trainable network (shared across all cells, so every
    cell is a training example) turns each cell's feature vector into a
    point mass; and a fixed linear embedding built from the geometry and
    the sensing matrix maps cell masses to the dense code. The trainable
    surface is the head plus a linear bypass (initialized to the analytic
    mass calibration kappa) and the two count-slot coefficients, exposed
    through the same weights/biases lists as the plain network.
    """

    head_sizes: list
    weights: list   # [head W..., linear bypass (1, F), count weight (1, 1)]
    biases: list    # [head b..., bypass bias (1,), count bias (1,)]
    image_shape: tuple
    cell: int
    sigma: float
    kappa: float
    resp_floor: float = 0.0
    phi: np.ndarray = field(repr=False, default=None)  # fixed embed, rebuilt on load

    @property
    def grid(self):
        return self.image_shape[0] // self.cell, self.image_shape[1] // self.cell


def build_cell_embed(geometry, D, image_shape, cell):
    """Fixed (L*m, cells) embedding: column (gy, gx) is the concatenated
    per-line code of a unit point mass at that cell's centre, splatted
    across the two bins bracketing the exact projection so the embedding
    varies continuously across the lattice."""
    h, w = image_shape
    gh, gw = h // cell, w // cell
    s = geometry.shape.h / h
    gx, gy = np.meshgrid(np.arange(gw), np.arange(gh))
    centers = np.stack([(gx.ravel() + 0.5) * cell * s,
                        (gy.ravel() + 0.5) * cell * s], axis=1)
    rel = centers[None, :, :] - geometry.anchors[:, None, :]
    t = np.einsum("lcd,ld->lc", rel, geometry.directions)
    v = np.einsum("lcd,ld->lc", rel, geometry.normals)
    lo = np.floor(t).astype(np.intp)
    frac = t - lo
    L = geometry.num_lines
    phi = np.empty((L * D.m, gh * gw))
    for l in range(L):
        phi[l * D.m:(l + 1) * D.m] = (
            D.entries[:, lo[l]] * (v[l] * (1.0 - frac[l]))[None, :]
            + D.entries[:, lo[l] + 1] * (v[l] * frac[l])[None, :])
    return phi


def nominal_blob_stats(sigma, blob_sigma, nominal_intensity=1.0, canvas=None,
                       floor_frac=0.15):
    """(unit mass, response floor) for one nominal blob.

    The mass is the total of the normalized point-mass map (calibrates
    the bypass weight); the floor is a fixed fraction of the blob's peak
    detector response, used to zero out pixel-noise energy.
    """
    if canvas is None:
        canvas = int(8 * max(sigma * 3, blob_sigma * 3))
    c = canvas / 2.0
    ys, xs = np.mgrid[0:canvas, 0:canvas]
    r2 = ((xs - c) ** 2 + (ys - c) ** 2) / (blob_sigma ** 2)
    img = nominal_intensity * np.exp(-0.5 * r2) * (r2 <= 9.0)
    resp = np.maximum(_blur(img[None], sigma) - _blur(img[None], 3.0 * sigma), 0.0)
    thresh = floor_frac * float(resp.max())
    return float(peak_mass(resp, sigma, thresh=thresh).sum()), thresh


def init_cell_head(geometry, D, image_shape, cell, sigma, blob_sigma,
                   nominal_intensity, hidden, seed, count_beta=0.2):
    """CellHeadModel whose initial output is the analytic base path:
    masses = kappa * response, corrections start at zero, and the count
    slot reads beta * (total mass)."""
    h, w = image_shape
    if h % cell or w % cell:
        raise ConfigError(f"cell size {cell} must divide the patch {h}x{w}")
    if geometry.shape.h * (h // geometry.shape.h) != h:
        raise ConfigError("geometry frame must be an integer divisor of the image")
    mass, resp_floor = nominal_blob_stats(sigma, blob_sigma, nominal_intensity)
    kappa = 1.0 / mass
    rng = CounterRng(seed).derive(0x9c1)
    F = CELL_FEATURES
    W1 = rng.normal((hidden, F)) * np.sqrt(2.0 / F)
    b1 = np.zeros(hidden)
    W2 = np.zeros((1, hidden))  # zero-init: the gate starts at exactly 1
    b2 = np.zeros(1)
    lin = np.zeros((1, F))
    weights = [W1, W2, lin, np.array([[count_beta]])]
    biases = [b1, b2, np.zeros(1), np.zeros(1)]
    return CellHeadModel(head_sizes=[F, hidden, 1], weights=weights, biases=biases,
                         image_shape=(h, w), cell=cell, sigma=float(sigma),
                         kappa=float(kappa), resp_floor=float(resp_floor),
                         phi=build_cell_embed(geometry, D, (h, w), cell))


def cell_features(model, patches):
    """(B, cells, F) fixed per-cell features for a batch of images.

    Response features are pre-scaled by the model's calibration constant
    kappa, so a unit linear weight on the first feature reproduces the
    analytic mass estimate and every trainable parameter lives at O(1).
    """
    X = np.asarray(patches, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    resp = blob_response(X, model.sigma)
    mass = _pool(peak_mass(resp, model.sigma, thresh=model.resp_floor),
                 model.cell, "mean")
    mass *= model.kappa * (model.cell * model.cell)
    # blob centres keep a radius from the borders; a spurious rim response
    # can never be a detection, so blank the outermost mass cells
    mass[:, :2, :] = 0.0
    mass[:, -2:, :] = 0.0
    mass[:, :, :2] = 0.0
    mass[:, :, -2:] = 0.0
    U = _pool(resp, model.cell, "mean")
    Umax = _pool(resp, model.cell, "max")
    P = _pool(X / 255.0, model.cell, "mean")
    feats = np.stack([mass, U, Umax, P], axis=-1)
    B = feats.shape[0]
    return feats.reshape(B, -1, CELL_FEATURES)


def _cellhead_forward(model, patches, features=None):
    """Cell masses are the fixed mass feature times a learned gate:
    M = f0 * (1 + correction(features)). Cells with no response mass
    therefore contribute neither output nor gradient, which keeps the
    shared parameters' effective curvature bounded."""
    f = cell_features(model, patches) if features is None else features
    B, C, F = f.shape
    W1, W2, lin, cw = model.weights
    b1, b2, linb, cb = model.biases
    flat = f.reshape(B * C, F)
    Z1 = flat @ W1.T + b1
    A1 = np.maximum(Z1, 0.0)
    G = (1.0 + A1 @ W2.T + b2 + flat @ lin.T + linb).reshape(B, C)
    M = f[:, :, 0] * G
    x = M @ model.phi.T
    total = M.sum(axis=1)
    count = cw[0, 0] * total + cb[0]
    Y = np.concatenate([x, count[:, None]], axis=1)
    return Y, (f, Z1, A1, M, total)


def _cellhead_backward(model, cache, dY):
    f, Z1, A1, M, total = cache
    B, C, F = f.shape
    W1, W2, lin, cw = model.weights
    dx = dY[:, :-1]
    dc = dY[:, -1]
    dM = dx @ model.phi + (dc * cw[0, 0])[:, None]
    dcw = np.array([[float(dc @ total)]])
    dcb = np.array([float(dc.sum())])
    dG = dM * f[:, :, 0]
    dt = dG.reshape(B * C, 1)
    flat = f.reshape(B * C, F)
    dW2 = dt.T @ A1
    db2 = np.array([float(dt.sum())])
    dlin = dt.T @ flat
    dlinb = np.array([float(dt.sum())])
    dZ1 = (dt @ W2) * (Z1 > 0.0)
    dW1 = dZ1.T @ flat
    db1 = dZ1.sum(axis=0)
    return [dW1, dW2, dlin, dcw], [db1, db2, dlinb, dcb]


def forward_batch(model, patches, features=None):
    """Returns (outputs (B, out_dim), cache for backward).

    For CellHeadModel the fixed per-cell features may be precomputed and
    passed in (training reuses them across epochs)."""
    if isinstance(model, CellHeadModel):
        return _cellhead_forward(model, patches, features=features)
    A = _prepare_inputs(model, patches)
    if A.shape[1] != model.sizes[0]:
        raise DimensionError(f"patch gives {A.shape[1]} inputs, model wants {model.sizes[0]}")
    cache = [A]
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        Z = A @ W.T + b
        if i < len(model.weights) - 1:
            A = np.maximum(Z, 0.0)
            cache.append(A)
        else:
            A = Z
    return A * model.out_scale, cache


def forward(model, patch):
    """Single-patch prediction: (dense code of length out-1, count)."""
    Y, _ = forward_batch(model, np.asarray(patch)[None])
    return Y[0, :-1], float(Y[0, -1])


def backward_batch(model, cache, dY):
    """Parameter gradients from the output gradient dY (B, out_dim)."""
    if isinstance(model, CellHeadModel):
        return _cellhead_backward(model, cache, dY)
    dZ = dY * model.out_scale
    dW = [None] * len(model.weights)
    db = [None] * len(model.biases)
    for i in range(len(model.weights) - 1, -1, -1):
        A_prev = cache[i]
        dW[i] = dZ.T @ A_prev
        db[i] = dZ.sum(axis=0)
        if i > 0:
            dA = dZ @ model.weights[i]
            dZ = dA * (cache[i] > 0.0)
    return dW, db


@dataclass(frozen=True)
class TrainLabel:
    """Dense code plus a count scaled by beta; the L2 target is their
    concatenation."""

    x: np.ndarray
    count: int
    beta: float

    def full(self):
        return np.concatenate([self.x, [self.beta * self.count]])


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.3
    beta: float = 0.20
    lam: float = 0.39

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.lam < 0:
            raise ConfigError("loss weights must be non-negative")


def loss(x_hat, c_hat, a_hat, label, a, cfg):
    """Mixed loss for one sample; zero exactly at a perfect fit."""
    pred = np.concatenate([np.asarray(x_hat).ravel(), [c_hat]])
    resid = pred - label.full()
    l2 = 0.5 * float(resid @ resid)
    a_hat_flat = a_hat.concatenated() if isinstance(a_hat, SparseCode) else np.asarray(a_hat).ravel()
    a_flat = a.concatenated() if isinstance(a, SparseCode) else np.asarray(a).ravel()
    return l2 + cfg.alpha * float(np.sum(np.abs(a_hat_flat - a_flat)))


MODES = ("cnncs", "ecnncs1", "ecnncs2")


@dataclass
class TrainState:
    model: MlpModel
    D: SensingMatrix
    geometry: ProjectionGeometry
    recovery: RecoveryConfig
    loss_cfg: LossConfig
    mode: str = "cnncs"
    lista_T: int = 16
    train_D: bool = False
    grad_rule: str = "approx"
    lr: float = 1e-3
    optimizer: str = "rms"
    rms_decay: float = 0.9
    rms_eps: float = 1e-8
    momentum: float = 0.0
    seed: int = 0
    epoch: int = 0
    step_count: int = 0
    opt_w: list = None
    opt_b: list = None
    opt_D: np.ndarray = None
    mom_w: list = None
    mom_b: list = None
    mom_D: np.ndarray = None
    support_clamps: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.grad_rule not in ("approx", "exact"):
            raise ConfigError(f"grad_rule must be approx or exact, got {self.grad_rule!r}")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError("momentum must be in [0, 1)")
        if self.optimizer not in ("rms", "sgd"):
            raise ConfigError(f"optimizer must be rms or sgd, got {self.optimizer!r}")
        if self.opt_w is None:
            self.opt_w = [np.zeros_like(W) for W in self.model.weights]
        if self.opt_b is None:
            self.opt_b = [np.zeros_like(b) for b in self.model.biases]
        if self.mom_w is None:
            self.mom_w = [np.zeros_like(W) for W in self.model.weights]
        if self.mom_b is None:
            self.mom_b = [np.zeros_like(b) for b in self.model.biases]
        if self.train_D:
            if self.opt_D is None:
                self.opt_D = np.zeros_like(self.D.entries)
            if self.mom_D is None:
                self.mom_D = np.zeros_like(self.D.entries)


def geometry_scale(geometry, image_shape):
    """Ratio between the encoding frame and the image frame.

    The code geometry may live in a downscaled coordinate system (coarser
    projection bins are far easier to regress); the scale is recoverable
    from the two shapes, so checkpoints need no extra field.
    """
    return geometry.shape.h / image_shape.h


def encode_records(records, geometry, splat=False):
    """Per-record sparse codes (N, L, n), done once per geometry.

    Points are mapped into the geometry's coordinate frame when the
    geometry is a scaled version of the image patch.
    """
    out = []
    for rec in records:
        s = geometry_scale(geometry, rec.points.shape)
        pts = PointSet(points=rec.points.points * s, shape=geometry.shape)
        out.append(encode_sparse(pts, geometry, splat=splat))
    return out


def make_labels(sparse_codes, counts, D, beta):
    """Label matrix (N, L*m + 1) = [flattened dense codes | beta * count]."""
    N = len(sparse_codes)
    L = sparse_codes[0].per_line.shape[0] if N else 0
    out = np.empty((N, L * D.m + 1))
    for i, (code, c) in enumerate(zip(sparse_codes, counts)):
        out[i, :-1] = (code.per_line @ D.entries.T).reshape(-1)
        out[i, -1] = beta * c
    return out


def _recovery_term(state, X_hat_lines, A_true, step):
    """Recovered codes, the L1-term gradient at the network's code output,
    and (when trainable) the sensing-matrix gradient.

    X_hat_lines is (m, K) with K = batch * lines; A_true matches (n, K).
    Returns (A_hat (n, K), dX (m, K), dD or None).
    """
    alpha = state.loss_cfg.alpha
    D = state.D
    cfg = replace(state.recovery, step=step)
    if state.mode == "ecnncs1":
        params = ListaParams.ista_init(D, cfg, state.lista_T)
        A_hat, trace = lista_forward_batch(X_hat_lines, params, keep_trace=True)
        dA = alpha * np.sign(A_hat - A_true)
        dX = np.zeros_like(X_hat_lines)
        for t in range(params.T - 1, -1, -1):
            dpre = dA * (np.abs(trace[t]) > params.threshold_at(t))
            dX += params.W.T @ dpre
            dA = params.S.T @ dpre
        dD = None
        if state.train_D:
            # D enters the unrolled graph only through the rule below; use
            # the same recovery-layer rule as the ecnncs2 path for it
            dD = _rule_grad_D(state, X_hat_lines, A_hat, alpha * np.sign(A_hat - A_true))
        return A_hat, dX, dD
    # ecnncs2: solve with ISTA, then apply the recovery-layer rules
    A_hat = ista_recover_batch(X_hat_lines, D, cfg)
    dA = alpha * np.sign(A_hat - A_true)
    if state.grad_rule == "approx":
        mask = np.abs(A_hat) > 0.0
        dX = D.entries @ (dA * mask)
    else:
        dX = np.empty_like(X_hat_lines)
        for col in range(A_hat.shape[1]):
            sol = RecoverySolution.from_arrays(A_hat[:, col], X_hat_lines[:, col])
            try:
                dX[:, col] = exact_grad_x(sol, D, dA[:, col])
            except SingularityError:
                state.support_clamps += 1
                dX[:, col] = approx_grad_x(sol, D, dA[:, col])
    dD = _rule_grad_D(state, X_hat_lines, A_hat, dA) if state.train_D else None
    return A_hat, dX, dD


def _rule_grad_D(state, X_hat_lines, A_hat, dA):
    """Batched sensing-matrix gradient, summed over all columns."""
    D = state.D
    if state.grad_rule == "approx" or state.mode == "ecnncs1":
        mask = np.abs(A_hat) > 0.0
        dAm = dA * mask
        R = X_hat_lines - D.entries @ A_hat
        return R @ dAm.T - (D.entries @ dAm) @ (A_hat * mask).T
    dD = np.zeros_like(D.entries)
    for col in range(A_hat.shape[1]):
        sol = RecoverySolution.from_arrays(A_hat[:, col], X_hat_lines[:, col])
        try:
            dD += exact_grad_D(sol, D, dA[:, col])
        except SingularityError:
            state.support_clamps += 1
            dD += approx_grad_D(sol, D, dA[:, col])
    return dD


def backward(state, patches, labels, sparse_codes_batch, step=None, features=None):
    """Loss and gradients for one batch.

    Returns (mean loss, dW list, db list, dD or None). The output-layer
    gradient is the L2 residual plus, in end-to-end modes, the
    recovery-layer term obtained from da = alpha * sign(a_hat - a).
    """
    B = len(patches)
    L, n = state.geometry.num_lines, state.geometry.code_len
    m = state.D.m
    Y, cache = forward_batch(state.model, patches, features=features)
    resid = Y - labels
    out_grad = resid.copy()
    total = 0.5 * float(np.sum(resid * resid))
    if state.mode != "cnncs" and state.loss_cfg.alpha > 0:
        if step is None:
            step = resolve_step(state.D, state.recovery)
        X_lines = Y[:, :L * m].reshape(B * L, m).T
        A_true = np.concatenate([c.per_line for c in sparse_codes_batch], axis=0).T
        A_hat, dX, dD = _recovery_term(state, X_lines, A_true, step)
        total += state.loss_cfg.alpha * float(np.sum(np.abs(A_hat - A_true)))
        out_grad[:, :L * m] += dX.T.reshape(B, L * m)
    else:
        dD = None
    out_grad /= B
    if not np.isfinite(out_grad).all():
        raise NumericError("non-finite gradient in batch")
    dW, db = backward_batch(state.model, cache, out_grad)
    if dD is not None:
        dD = dD / B
    return total / B, dW, db, dD


def _opt_step(param, grad, acc, mom, state):
    """One optimizer update.

    optimizer="rms": per-parameter adaptive scaling with a bias-corrected
    second moment; the elementwise update is clipped to a few times the
    learning rate, which keeps the first steps from kicking every
    parameter at once and poisoning the accumulators. momentum=0 (the
    default) keeps the rule memoryless in the gradient direction.

    optimizer="sgd": gradient-proportional steps with classical momentum —
    the right geometry when parameters are shared across many positions
    and their gradients encode vastly different output leverage.
    """
    if state.optimizer == "sgd":
        if state.momentum > 0.0:
            mom *= state.momentum
            mom += grad
            g = mom
        else:
            g = grad
        param -= state.lr * g
        return
    t = state.step_count
    decay = state.rms_decay
    acc *= decay
    acc += (1.0 - decay) * grad * grad
    corrected = acc / (1.0 - decay ** t)
    if state.momentum > 0.0:
        mom *= state.momentum
        mom += (1.0 - state.momentum) * grad
        g = mom / (1.0 - state.momentum ** t)
    else:
        g = grad
    upd = state.lr * g / (np.sqrt(corrected) + state.rms_eps)
    np.clip(upd, -3.0 * state.lr, 3.0 * state.lr, out=upd)
    param -= upd


def train(state, records, sparse_codes, epochs, batch_size,
          epoch_callback=None, checkpoint_path=None):
    """Mini-batch training with per-parameter adaptive scaling.

    records/sparse_codes are parallel lists (training split only). Batch
    order is drawn from the state's seed and epoch counter, so a rerun
    from the same state reproduces the same trajectory bit for bit.
    Returns a history list with one dict per epoch.
    """
    if not records:
        raise ConfigError("empty training set")
    counts = [len(rec.points) for rec in records]
    labels = make_labels(sparse_codes, counts, state.D, state.loss_cfg.beta)
    images = np.stack([rec.image for rec in records])
    feats = (cell_features(state.model, images)
             if isinstance(state.model, CellHeadModel) else None)
    N = len(records)
    history = []
    rng = CounterRng(state.seed).derive(0xb47c)
    step = resolve_step(state.D, state.recovery)
    for _ in range(epochs):
        order = rng.derive(state.epoch).shuffled(N)
        epoch_loss = 0.0
        for start in range(0, N, batch_size):
            idx = order[start:start + batch_size]
            batch_codes = [sparse_codes[i] for i in idx]
            bloss, dW, db, dD = backward(state, images[idx], labels[idx],
                                         batch_codes, step=step,
                                         features=None if feats is None else feats[idx])
            if not np.isfinite(bloss):
                raise NumericError(f"training diverged at epoch {state.epoch}, "
                                   f"batch starting {start}")
            epoch_loss += bloss * len(idx)
            state.step_count += 1
            for W, g, acc, mo in zip(state.model.weights, dW, state.opt_w, state.mom_w):
                _opt_step(W, g, acc, mo, state)
            for b, g, acc, mo in zip(state.model.biases, db, state.opt_b, state.mom_b):
                _opt_step(b, g, acc, mo, state)
            if dD is not None:
                entries = state.D.entries.copy()
                _opt_step(entries, dD, state.opt_D, state.mom_D, state)
                state.D = SensingMatrix(m=state.D.m, n=state.D.n,
                                        entries=entries, seed=state.D.seed)
                labels = make_labels(sparse_codes, counts, state.D,
                                     state.loss_cfg.beta)
                step = resolve_step(state.D, state.recovery)
                if isinstance(state.model, CellHeadModel):
                    # the fixed embedding encodes through D; keep it in sync
                    state.model.phi = build_cell_embed(
                        state.geometry, state.D, state.model.image_shape,
                        state.model.cell)
        state.epoch += 1
        entry = {"epoch": state.epoch, "train_loss": epoch_loss / N}
        if epoch_callback is not None:
            extra = epoch_callback(state, entry)
            if extra:
                entry.update(extra)
        history.append(entry)
        if checkpoint_path is not None:
            save_checkpoint(state, checkpoint_path)
    return history


# ---------------------------------------------------------------------------
# checkpoint serialization: magic SPCKPT1, version 1, little-endian

_CKPT_MAGIC = b"SPCKPT1"


class _Writer:
    def __init__(self, fh):
        self.fh = fh

    def u64(self, v):
        self.fh.write(struct.pack("<Q", int(v) & 0xFFFFFFFFFFFFFFFF))

    def f64(self, v):
        self.fh.write(struct.pack("<d", float(v)))

    def arr(self, a):
        a = np.ascontiguousarray(a, dtype="<f8")
        self.u64(a.ndim)
        for d in a.shape:
            self.u64(d)
        self.fh.write(a.tobytes())

    def text(self, s):
        b = s.encode("utf-8")
        self.u64(len(b))
        self.fh.write(b)


class _Reader:
    def __init__(self, fh):
        self.fh = fh

    def u64(self):
        return struct.unpack("<Q", self.fh.read(8))[0]

    def f64(self):
        return struct.unpack("<d", self.fh.read(8))[0]

    def arr(self):
        shape = tuple(self.u64() for _ in range(self.u64()))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(self.fh.read(8 * count), dtype="<f8", count=count)
        return data.reshape(shape).astype(np.float64)

    def text(self):
        return self.fh.read(self.u64()).decode("utf-8")


def save_checkpoint(state, path):
    with open(path, "wb") as fh:
        w = _Writer(fh)
        fh.write(_CKPT_MAGIC)
        w.u64(1)  # version
        mdl = state.model
        if isinstance(mdl, CellHeadModel):
            w.text("cellhead")
            w.u64(len(mdl.head_sizes))
            for s in mdl.head_sizes:
                w.u64(s)
            w.u64(mdl.image_shape[0])
            w.u64(mdl.image_shape[1])
            w.u64(mdl.cell)
            w.f64(mdl.sigma)
            w.f64(mdl.kappa)
            w.f64(mdl.resp_floor)
        else:
            w.text("mlp")
            w.u64(len(mdl.sizes))
            for s in mdl.sizes:
                w.u64(s)
            w.f64(mdl.out_scale)
            w.u64(mdl.input_pool)
        for W in mdl.weights:
            w.arr(W)
        for b in mdl.biases:
            w.arr(b)
        w.u64(state.D.m)
        w.u64(state.D.n)
        w.u64(state.D.seed)
        w.arr(state.D.entries)
        g = state.geometry
        w.u64(g.shape.h)
        w.u64(g.shape.w)
        w.u64(g.num_lines)
        w.f64(g.offset_margin)
        w.u64(g.code_len)
        w.u64(g.seed)
        w.arr(g.anchors)
        w.arr(g.directions)
        w.arr(g.normals)
        rc = state.recovery
        w.f64(rc.lam)
        w.u64(rc.max_iters)
        w.f64(rc.tol)
        w.f64(-1.0 if rc.step == "auto" else rc.step)
        lc = state.loss_cfg
        w.f64(lc.alpha)
        w.f64(lc.beta)
        w.f64(lc.lam)
        w.text(state.mode)
        w.u64(state.lista_T)
        w.u64(1 if state.train_D else 0)
        w.text(state.grad_rule)
        w.f64(state.lr)
        w.text(state.optimizer)
        w.f64(state.rms_decay)
        w.f64(state.rms_eps)
        w.f64(state.momentum)
        w.u64(state.seed)
        w.u64(state.epoch)
        w.u64(state.step_count)
        w.u64(state.support_clamps)
        for acc in state.opt_w + state.mom_w:
            w.arr(acc)
        for acc in state.opt_b + state.mom_b:
            w.arr(acc)
        w.u64(1 if state.opt_D is not None else 0)
        if state.opt_D is not None:
            w.arr(state.opt_D)
            w.arr(state.mom_D)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if fh.read(7) != _CKPT_MAGIC:
            raise ConfigError(f"{path}: not a checkpoint file")
        r = _Reader(fh)
        version = r.u64()
        if version != 1:
            raise ConfigError(f"{path}: unsupported checkpoint version {version}")
        kind = r.text()
        if kind == "cellhead":
            head_sizes = [r.u64() for _ in range(r.u64())]
            image_shape = (r.u64(), r.u64())
            cell = r.u64()
            sigma = r.f64()
            kappa = r.f64()
            resp_floor = r.f64()
            weights = [r.arr() for _ in range(4)]
            biases = [r.arr() for _ in range(4)]
            model = CellHeadModel(head_sizes=head_sizes, weights=weights,
                                  biases=biases, image_shape=image_shape,
                                  cell=int(cell), sigma=sigma, kappa=kappa,
                                  resp_floor=resp_floor)
        elif kind == "mlp":
            sizes = [r.u64() for _ in range(r.u64())]
            out_scale = r.f64()
            input_pool = r.u64()
            weights = [r.arr() for _ in sizes[1:]]
            biases = [r.arr() for _ in sizes[1:]]
            model = MlpModel(sizes=sizes, weights=weights, biases=biases,
                             out_scale=out_scale, input_pool=int(input_pool))
        else:
            raise ConfigError(f"{path}: unknown model kind {kind!r}")
        m, n, dseed = r.u64(), r.u64(), r.u64()
        D = SensingMatrix(m=int(m), n=int(n), entries=r.arr(), seed=int(dseed))
        h, wdt, L = r.u64(), r.u64(), r.u64()
        margin = r.f64()
        code_len = r.u64()
        gseed = r.u64()
        geometry = ProjectionGeometry(
            shape=PatchShape(h=int(h), w=int(wdt)), num_lines=int(L),
            anchors=r.arr(), directions=r.arr(), normals=r.arr(),
            offset_margin=margin, code_len=int(code_len), seed=int(gseed))
        lam, max_iters, tol, step = r.f64(), r.u64(), r.f64(), r.f64()
        recovery = RecoveryConfig(lam=lam, max_iters=int(max_iters), tol=tol,
                                  step="auto" if step < 0 else step)
        loss_cfg = LossConfig(alpha=r.f64(), beta=r.f64(), lam=r.f64())
        mode = r.text()
        lista_T = r.u64()
        train_D = bool(r.u64())
        grad_rule = r.text()
        lr = r.f64()
        optimizer = r.text()
        rms_decay, rms_eps, momentum = r.f64(), r.f64(), r.f64()
        seed, epoch, step_count, clamps = r.u64(), r.u64(), r.u64(), r.u64()
        accs = [r.arr() for _ in range(2 * len(weights))]
        opt_w, mom_w = accs[:len(weights)], accs[len(weights):]
        accs = [r.arr() for _ in range(2 * len(biases))]
        opt_b, mom_b = accs[:len(biases)], accs[len(biases):]
        opt_D = mom_D = None
        if r.u64():
            opt_D = r.arr()
            mom_D = r.arr()
    if isinstance(model, CellHeadModel):
        model.phi = build_cell_embed(geometry, D, model.image_shape, model.cell)
    return TrainState(model=model, D=D, geometry=geometry, recovery=recovery,
                      loss_cfg=loss_cfg, mode=mode, lista_T=int(lista_T),
                      train_D=train_D, grad_rule=grad_rule, lr=lr,
                      optimizer=optimizer, rms_decay=rms_decay,
                      rms_eps=rms_eps, momentum=momentum,
                      seed=int(seed), epoch=int(epoch), step_count=int(step_count),
                      opt_w=opt_w, opt_b=opt_b, opt_D=opt_D, mom_w=mom_w,
                      mom_b=mom_b, mom_D=mom_D, support_clamps=int(clamps))
