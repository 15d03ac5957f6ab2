"""Per-time-step neural tracking controllers.

Each step gets its own small network whose structure pins two properties no
matter what the weights are: the nominal state maps exactly to the nominal
input (the input offset is gated by a multiplication with the state
deviation), and the output never leaves a trainable band around the nominal
input (tanh saturation times a scale vector).  Training pushes sampled
states of one backward reachable set toward the center of the next deflated
set, using an analytic reverse-mode gradient through the network, the
dynamics, and the fixed factor-recovery map.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .geom import Box, Zonotope, sample
from .model import DynamicsModel
from .numerics import pseudoinverse

__all__ = [
    "StepNet",
    "TrainConfig",
    "TrainingLog",
    "BaselineResult",
    "forward_raw",
    "forward_trimmed",
    "loss",
    "loss_and_gradients",
    "init_step_net",
    "train_step_controller",
    "baseline_control",
    "save_controller",
    "load_controller",
    "save_manifest",
    "load_manifest",
    "mix_seed",
]


def mix_seed(base: int, index: int) -> int:
    """Splitmix-style mixer deriving independent child seeds."""
    z = (base + 0x9E3779B97F4A7C15 * (index + 1)) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return int(z ^ (z >> 31))


@dataclass
class StepNet:
    """Tracking network for one time step; mutable during training only."""

    k: int
    x_nom: np.ndarray
    u_nom: np.ndarray
    hidden_w: list  # ReLU layers
    hidden_b: list
    w_mult: np.ndarray  # multiplication layer, (n x d_last_hidden)
    b_mult: np.ndarray
    w_out: np.ndarray  # tanh layer, (m x n), no bias
    r_scale: np.ndarray  # trainable output band, (m,)

    @property
    def n(self) -> int:
        return self.x_nom.shape[0]

    @property
    def m(self) -> int:
        return self.u_nom.shape[0]

    def parameters(self) -> list:
        return [
            *self.hidden_w,
            *self.hidden_b,
            self.w_mult,
            self.b_mult,
            self.w_out,
            self.r_scale,
        ]


@dataclass
class TrainConfig:
    lam: float = 0.1  # exponential-overflow weight inside the tracking term
    alpha1: float = 10.0
    alpha2: float = 0.01
    h_uniform: int = 40
    h_extreme: int = 60
    train_frac: float = 0.7
    lr: float = 3e-4
    weight_decay: float = 1e-4
    val_period: int = 200
    patience: int = 5
    hidden_sizes: tuple = (32, 32, 32, 32)
    max_epochs: int = 20000
    r_init_scale: float = 0.25  # fraction of the input-tube half-width
    seed: int = 0

    def __post_init__(self):
        positives = (
            self.lam, self.alpha1, self.alpha2, self.lr, self.weight_decay,
            self.val_period, self.patience, self.max_epochs, self.r_init_scale,
            self.h_uniform, self.h_extreme,
        )
        if any(v <= 0 for v in positives):
            raise ValueError("training hyperparameters must be positive")
        if not 0.0 < self.train_frac < 1.0:
            raise ValueError("train fraction must be in (0, 1)")
        if any(d < 1 for d in self.hidden_sizes):
            raise ValueError("hidden sizes must be positive")


@dataclass
class TrainingLog:
    val_history: list = field(default_factory=list)  # (epoch, mean val deviation)
    best_epoch: int = 0
    best_val: float = np.inf
    stopped_epoch: int = 0
    initial_val: float = np.inf
    final_train_loss: float = np.inf


def init_step_net(
    k: int,
    x_nom: np.ndarray,
    u_nom: np.ndarray,
    r_u: np.ndarray,
    cfg: TrainConfig,
    seed: int,
) -> StepNet:
    """Kaiming-initialized weights, zero biases, band scale from the input tube."""
    rng = np.random.default_rng(seed)
    n, m = x_nom.shape[0], u_nom.shape[0]
    sizes = [n, *cfg.hidden_sizes]
    hidden_w, hidden_b = [], []
    for d_in, d_out in zip(sizes[:-1], sizes[1:]):
        hidden_w.append(rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_out, d_in)))
        hidden_b.append(np.zeros(d_out))
    d_last = sizes[-1]
    w_mult = rng.normal(0.0, np.sqrt(2.0 / d_last), size=(n, d_last))
    b_mult = np.zeros(n)
    w_out = rng.normal(0.0, np.sqrt(2.0 / n), size=(m, n))
    r_scale = cfg.r_init_scale * np.asarray(r_u, dtype=float)
    return StepNet(
        k=k,
        x_nom=np.array(x_nom, dtype=float),
        u_nom=np.array(u_nom, dtype=float),
        hidden_w=hidden_w,
        hidden_b=hidden_b,
        w_mult=w_mult,
        b_mult=b_mult,
        w_out=w_out,
        r_scale=r_scale,
    )


def _forward_parts(net: StepNet, x: np.ndarray):
    """Forward pass keeping intermediates; x is (batch, n)."""
    x0 = x - net.x_nom
    acts = [x0]
    pres = []
    h = x0
    for W, b in zip(net.hidden_w, net.hidden_b):
        z = h @ W.T + b
        pres.append(z)
        h = np.maximum(z, 0.0)
        acts.append(h)
    v = h @ net.w_mult.T + net.b_mult
    p = x0 * v
    t = np.tanh(p @ net.w_out.T)
    u = net.r_scale * t + net.u_nom
    return u, (x0, acts, pres, v, p, t)


def forward_raw(net: StepNet, x) -> np.ndarray:
    """Untrimmed control; accepts a single state or a batch."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    u, _ = _forward_parts(net, np.atleast_2d(x))
    return u[0] if single else u


def forward_trimmed(net: StepNet, x, inputs: Box) -> np.ndarray:
    """Control clamped coordinate-wise into the admissible input box."""
    u = forward_raw(net, x)
    return np.clip(u, inputs.lower, inputs.upper)


def _deviations(batch_u, batch_x, pinv_next, x_next, model: DynamicsModel):
    """Factor-space deviations d and the successor states f(x, u)."""
    f_next = model.step(batch_x, batch_u)
    return (f_next - x_next) @ pinv_next.T, f_next


def loss(
    net: StepNet,
    batch: np.ndarray,
    pinv_next: np.ndarray,
    x_next: np.ndarray,
    model: DynamicsModel,
    cfg: TrainConfig,
):
    """Training objective (total, tracking term, band-size term)."""
    batch = np.atleast_2d(np.asarray(batch, dtype=float))
    if batch.shape[0] == 0:
        raise ValueError("empty batch")
    u, _ = _forward_parts(net, batch)
    d, _ = _deviations(u, batch, pinv_next, x_next, model)
    d_inf = np.max(np.abs(d), axis=1)
    p1 = float(np.mean(d_inf + cfg.lam * np.exp(np.maximum(d_inf - 1.0, 0.0))))
    p2 = float(np.sum(np.abs(net.r_scale)))
    return cfg.alpha1 * p1 + cfg.alpha2 * p2, p1, p2


def loss_and_gradients(
    net: StepNet,
    batch: np.ndarray,
    pinv_next: np.ndarray,
    x_next: np.ndarray,
    model: DynamicsModel,
    cfg: TrainConfig,
):
    """Objective plus reverse-mode gradients for every trainable parameter.

    The max-norm routes its gradient through the first maximizing factor
    coordinate; ReLU and the exponential hinge use zero derivative at their
    kinks.  Gradients are returned in the order of net.parameters().
    """
    batch = np.atleast_2d(np.asarray(batch, dtype=float))
    B = batch.shape[0]
    if B == 0:
        raise ValueError("empty batch")

    u, (x0, acts, pres, v, p, t) = _forward_parts(net, batch)
    d, _ = _deviations(u, batch, pinv_next, x_next, model)
    abs_d = np.abs(d)
    d_inf = np.max(abs_d, axis=1)
    p1 = float(np.mean(d_inf + cfg.lam * np.exp(np.maximum(d_inf - 1.0, 0.0))))
    p2 = float(np.sum(np.abs(net.r_scale)))
    total = cfg.alpha1 * p1 + cfg.alpha2 * p2

    # d(P1)/d(d_inf) per point, then into the maximizing coordinate of d.
    hinge = np.where(d_inf > 1.0, cfg.lam * np.exp(d_inf - 1.0), 0.0)
    g_inf = cfg.alpha1 * (1.0 + hinge) / B
    idx = np.argmax(abs_d, axis=1)
    g_d = np.zeros_like(d)
    rows = np.arange(B)
    g_d[rows, idx] = g_inf * np.sign(d[rows, idx])

    # Through the fixed factor map and the dynamics input Jacobian.
    g_f = g_d @ pinv_next  # (B, n)
    ju = model.jacobian_u(batch, u)  # (B, n, m)
    g_u = np.einsum("bn,bnm->bm", g_f, ju)

    # Through the network head.
    g_r = np.sum(g_u * t, axis=0) + cfg.alpha2 * np.sign(net.r_scale)
    g_t = g_u * net.r_scale
    g_z_out = g_t * (1.0 - t * t)
    g_w_out = g_z_out.T @ p
    g_p = g_z_out @ net.w_out
    g_v = g_p * x0
    g_w_mult = g_v.T @ acts[-1]
    g_b_mult = np.sum(g_v, axis=0)

    g_h = g_v @ net.w_mult
    g_hidden_w = [None] * len(net.hidden_w)
    g_hidden_b = [None] * len(net.hidden_b)
    for j in range(len(net.hidden_w) - 1, -1, -1):
        g_z = g_h * (pres[j] > 0.0)
        g_hidden_w[j] = g_z.T @ acts[j]
        g_hidden_b[j] = np.sum(g_z, axis=0)
        g_h = g_z @ net.hidden_w[j]

    grads = [*g_hidden_w, *g_hidden_b, g_w_mult, g_b_mult, g_w_out, g_r]
    return (total, p1, p2), grads


class _Adam:
    """Adaptive-moment updates with torch-style coupled weight decay."""

    def __init__(self, params, lr, weight_decay, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads):
        self.t += 1
        for i, (p, g) in enumerate(zip(self.params, grads)):
            g = g + self.wd * p
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            m_hat = self.m[i] / (1.0 - self.b1**self.t)
            v_hat = self.v[i] / (1.0 - self.b2**self.t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _validation_loss(net, batch, pinv_next, x_next, model):
    u, _ = _forward_parts(net, batch)
    d, _ = _deviations(u, batch, pinv_next, x_next, model)
    return float(np.mean(np.max(np.abs(d), axis=1)))


def train_step_controller(
    k: int,
    lam_k: Zonotope,
    deflated_next: Zonotope,
    x_next: np.ndarray,
    u_nom: np.ndarray,
    r_u: np.ndarray,
    model: DynamicsModel,
    cfg: TrainConfig,
) -> tuple[StepNet, TrainingLog]:
    """Train the step-k controller on samples of its backward reachable set.

    Mixed uniform and corner sampling, a random split, full-batch updates,
    and early stopping on the validation deviation; the weights attached to
    the best validation epoch are returned.  Deterministic given cfg.seed.
    """
    seed = mix_seed(cfg.seed, k)
    uniform = sample(lam_k, cfg.h_uniform, "uniform", mix_seed(seed, 1))
    extreme = sample(lam_k, cfg.h_extreme, "extreme", mix_seed(seed, 2))
    points = np.vstack([uniform, extreme])
    rng = np.random.default_rng(mix_seed(seed, 3))
    order = rng.permutation(points.shape[0])
    n_train = int(round(cfg.train_frac * points.shape[0]))
    train_set = points[order[:n_train]]
    val_set = points[order[n_train:]]

    net = init_step_net(k, lam_k.center, u_nom, r_u, cfg, mix_seed(seed, 4))
    pinv_next = pseudoinverse(deflated_next.generators)
    x_next = np.asarray(x_next, dtype=float)

    optimizer = _Adam(net.parameters(), cfg.lr, cfg.weight_decay)
    log = TrainingLog()
    log.initial_val = _validation_loss(net, val_set, pinv_next, x_next, model)
    log.val_history.append((0, log.initial_val))
    log.best_val = log.initial_val
    best_params = [p.copy() for p in net.parameters()]
    streak = 0

    for epoch in range(1, cfg.max_epochs + 1):
        (total, _, _), grads = loss_and_gradients(
            net, train_set, pinv_next, x_next, model, cfg
        )
        if not np.isfinite(total):
            raise RuntimeError(
                f"non-finite training loss at step k={k}, epoch {epoch}"
            )
        optimizer.step(grads)
        log.final_train_loss = total

        if epoch % cfg.val_period == 0:
            val = _validation_loss(net, val_set, pinv_next, x_next, model)
            log.val_history.append((epoch, val))
            if val < log.best_val - 1e-12:
                log.best_val = val
                log.best_epoch = epoch
                best_params = [p.copy() for p in net.parameters()]
                streak = 0
            else:
                streak += 1
                if streak >= cfg.patience:
                    log.stopped_epoch = epoch
                    break
    else:
        log.stopped_epoch = cfg.max_epochs

    for p, best in zip(net.parameters(), best_params):
        p[...] = best
    return net, log


@dataclass
class BaselineResult:
    u: np.ndarray
    value: float
    success: bool


def baseline_control(
    x,
    k: int,
    brs_result,
    model: DynamicsModel,
    grid_points: int = 9,
    refine_iters: int = 60,
) -> BaselineResult:
    """Direct per-state optimization over the input tube.

    Coarse grid search on the tube followed by shrinking coordinate
    descent; succeeds when the best factor-space deviation is at most one,
    i.e. the state can provably be driven into the next deflated set.
    Failure is a normal result.
    """
    x = np.asarray(x, dtype=float)
    tube = brs_result.tubes_u[k]
    target = brs_result.deflated[k + 1]
    pinv_next = pseudoinverse(target.generators)
    x_next = target.center

    def objective(us):
        us = np.atleast_2d(us)
        xs = np.broadcast_to(x, (us.shape[0], x.shape[0]))
        d = (model.step(xs, us) - x_next) @ pinv_next.T
        return np.max(np.abs(d), axis=1)

    axes = [
        np.linspace(lo, hi, grid_points)
        for lo, hi in zip(tube.lower, tube.upper)
    ]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, tube.dim)
    values = objective(grid)
    order = np.argsort(values)[: min(4, grid.shape[0])]

    m = tube.dim
    starts = grid[order].copy()  # (S, m) refined in parallel
    start_vals = values[order].copy()
    steps = np.tile(
        (tube.upper - tube.lower) / max(grid_points - 1, 1), (starts.shape[0], 1)
    )
    moves = np.vstack([np.eye(m), -np.eye(m)])  # (2m, m)
    for _ in range(refine_iters):
        cands = starts[:, None, :] + steps[:, None, :] * moves[None, :, :]
        cands = np.clip(cands, tube.lower, tube.upper)
        cand_vals = objective(cands.reshape(-1, m)).reshape(starts.shape[0], 2 * m)
        best_move = np.argmin(cand_vals, axis=1)
        move_vals = cand_vals[np.arange(starts.shape[0]), best_move]
        improved = move_vals < start_vals - 1e-12
        starts[improved] = cands[improved, best_move[improved]]
        start_vals[improved] = move_vals[improved]
        steps[~improved] *= 0.5
        if np.max(steps) < 1e-7:
            break
    best = int(np.argmin(start_vals))
    return BaselineResult(
        u=starts[best], value=float(start_vals[best]), success=start_vals[best] <= 1.0
    )


# ---------------------------------------------------------------------------
# Weights files
# ---------------------------------------------------------------------------


def _write_array(fh, name, arr):
    arr = np.atleast_2d(np.asarray(arr, dtype=float))
    fh.write(f"{name} {arr.shape[0]} {arr.shape[1]}\n")
    for row in arr:
        fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def save_controller(net: StepNet, path):
    with open(path, "w") as fh:
        sizes = [net.n] + [w.shape[0] for w in net.hidden_w] + [net.n, net.m]
        fh.write(f"stepnet {net.k} " + " ".join(str(s) for s in sizes) + "\n")
        for j, (W, b) in enumerate(zip(net.hidden_w, net.hidden_b)):
            _write_array(fh, f"hidden_w{j}", W)
            _write_array(fh, f"hidden_b{j}", b)
        _write_array(fh, "w_mult", net.w_mult)
        _write_array(fh, "b_mult", net.b_mult)
        _write_array(fh, "w_out", net.w_out)
        _write_array(fh, "r_scale", net.r_scale)
        _write_array(fh, "x_nom", net.x_nom)
        _write_array(fh, "u_nom", net.u_nom)


def load_controller(path) -> StepNet:
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    header = lines[0].split()
    if header[0] != "stepnet":
        raise ValueError(f"{path}: not a controller weights file")
    k = int(header[1])
    pos = 1
    arrays = {}
    while pos < len(lines):
        name, rows, cols = lines[pos].split()
        rows, cols = int(rows), int(cols)
        block = lines[pos + 1 : pos + 1 + rows]
        arrays[name] = np.array([[float(v) for v in ln.split()] for ln in block])
        pos += 1 + rows
    hidden_w, hidden_b = [], []
    j = 0
    while f"hidden_w{j}" in arrays:
        hidden_w.append(arrays[f"hidden_w{j}"])
        hidden_b.append(arrays[f"hidden_b{j}"].ravel())
        j += 1
    return StepNet(
        k=k,
        x_nom=arrays["x_nom"].ravel(),
        u_nom=arrays["u_nom"].ravel(),
        hidden_w=hidden_w,
        hidden_b=hidden_b,
        w_mult=arrays["w_mult"],
        b_mult=arrays["b_mult"].ravel(),
        w_out=arrays["w_out"],
        r_scale=arrays["r_scale"].ravel(),
    )


def save_manifest(nets: list, directory):
    os.makedirs(directory, exist_ok=True)
    manifest = os.path.join(directory, "manifest.txt")
    with open(manifest, "w") as fh:
        fh.write(f"controllers {len(nets)}\n")
        for net in nets:
            name = f"step_{net.k:04d}.txt"
            save_controller(net, os.path.join(directory, name))
            fh.write(f"{net.k} {name}\n")
    return manifest


def load_manifest(directory) -> list:
    manifest = os.path.join(directory, "manifest.txt")
    with open(manifest) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    count = int(lines[0].split()[1])
    nets = []
    for ln in lines[1 : 1 + count]:
        k, name = ln.split()
        net = load_controller(os.path.join(directory, name))
        if net.k != int(k):
            raise ValueError(f"manifest step {k} does not match file {name}")
        nets.append(net)
    nets.sort(key=lambda net: net.k)
    return nets
