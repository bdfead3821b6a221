"""Loss assembly, Adam optimization, batch sampling and training loops.

Covers the point-cloud SDF objective (fit + normal + Eikonal terms), L1
SDF regression, L2 image regression, the multiscale segment schedule with
sphere pretraining, and auto-decoder shape-space training with a shared
network and per-shape encodings.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .encoding import FourierEncoding, IdentityEncoding, SplineEncoding
from .network import Checkpoint, FieldModel, init_random

__all__ = [
    "TrainConfig",
    "AdamState",
    "LossUpstreams",
    "TrainingDiverged",
    "sdf_loss",
    "l1_regression_loss",
    "l2_image_loss",
    "sample_batches",
    "pretrain_sphere",
    "train_sdf",
    "ShapeSpace",
    "train_shape_space",
    "fit_new_shape",
]


class TrainingDiverged(RuntimeError):
    """Raised when the training loss becomes NaN."""


@dataclass
class TrainConfig:
    # loss weights
    lam: float = 0.1  # Eikonal weight
    tau: float = 1.0  # normal weight
    # optimizer
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # batches and schedule
    batch_points: int = 10000
    k_schedule: tuple = (2, 8, 32, 128, 256)
    steps_per_stage: tuple | None = None  # default: 500 at stage 0, 1000 after
    seed: int = 0
    # encoder
    encoder: str = "spe"  # spe | fpe | identity
    channels: int = 64
    projections: int = 3
    degree: int = 1
    # Knot span of the spline encoding. None: sqrt(input_dim), covering the
    # projection range of the full bounding box, so domain samples in the
    # corners stay inside the partition-of-unity region.
    domain_radius: float | None = None
    freeze_directions: bool = False
    fourier_frequencies: int = 128
    fourier_sigma: float = 4.0
    # network
    hidden: int = 256
    depth: int = 4  # number of fully-connected layers
    out_dim: int = 1
    input_dim: int = 3
    # sphere pretraining
    pretrain_radius: float = 0.5
    pretrain_steps: int = 4000
    pretrain_lr: float = 3e-3
    pretrain_batch: int = 2048
    pretrain_tol: float = 0.01

    def validate(self):
        ks = list(self.k_schedule)
        if any(b <= a for a, b in zip(ks, ks[1:])):
            raise ValueError("k_schedule must be strictly increasing")
        for a, b in zip(ks, ks[1:]):
            ratio = b // a
            if a * ratio != b or ratio & (ratio - 1):
                raise ValueError(
                    "each k_schedule entry must be a power-of-two multiple "
                    "of the previous one"
                )
        if self.encoder not in ("spe", "fpe", "identity"):
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if self.projections < 1:
            raise ValueError("projections must be >= 1")
        if self.batch_points < 1:
            raise ValueError("batch_points must be >= 1")

    def stage_steps(self):
        if self.steps_per_stage is not None:
            steps = list(self.steps_per_stage)
            if len(steps) != len(self.k_schedule):
                raise ValueError("steps_per_stage length must match k_schedule")
            return steps
        # Desk-scale default, calibrated so the analytic-shape fits converge
        # within a single-core budget; override for larger runs.
        return [150] * len(self.k_schedule)

    def mlp_dims(self, in_dim):
        return [in_dim] + [self.hidden] * (self.depth - 1) + [self.out_dim]


def make_encoder(cfg: TrainConfig, segments, rng):
    if cfg.encoder == "spe":
        radius = cfg.domain_radius
        if radius is None:
            radius = float(np.sqrt(cfg.input_dim))
        return SplineEncoding.random(
            degree=cfg.degree,
            segments=segments,
            channels=cfg.channels,
            projections=cfg.projections,
            input_dim=cfg.input_dim,
            domain_radius=radius,
            rng=rng,
            train_directions=not cfg.freeze_directions,
        )
    if cfg.encoder == "fpe":
        return FourierEncoding.random(
            n_frequencies=cfg.fourier_frequencies,
            input_dim=cfg.input_dim,
            sigma=cfg.fourier_sigma,
            rng=rng,
        )
    return IdentityEncoding(input_dim=cfg.input_dim)


def make_model(cfg: TrainConfig, segments, rng):
    encoder = make_encoder(cfg, segments, rng)
    mlp = init_random(cfg.mlp_dims(encoder.out_dim), seed=rng)
    return FieldModel(encoder, mlp)


# -- optimizer ----------------------------------------------------------------


class AdamState:
    """Adam moments over a flat parameter vector, with bias correction."""

    def __init__(self, n_params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def step(self, params, grads, lr):
        if grads.shape != params.shape or params.shape != self.m.shape:
            raise ValueError("parameter/gradient shape mismatch")
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grads
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grads**2
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return params - lr * m_hat / (np.sqrt(v_hat) + self.eps)


# -- losses ---------------------------------------------------------------------


@dataclass
class LossUpstreams:
    """Per-point upstream derivatives ready for FieldModel.backward."""

    x: np.ndarray
    g_value: np.ndarray
    g_grad: np.ndarray | None = None
    cache: object = None  # forward-pass intermediates for the same batch


def sdf_loss(model: FieldModel, surface_points, surface_normals, domain_points,
             lam=0.1, tau=1.0):
    """Surface fit + normal agreement + Eikonal penalty.

    Surface terms are averaged over the surface batch, the Eikonal term
    over the domain batch. Returns (loss, terms, upstreams) where terms is
    a dict with the three components.
    """
    xs = np.atleast_2d(np.asarray(surface_points, dtype=float))
    ns = np.atleast_2d(np.asarray(surface_normals, dtype=float))
    xd = np.atleast_2d(np.asarray(domain_points, dtype=float))
    if xs.shape[0] == 0 or xd.shape[0] == 0:
        raise ValueError("empty batch")
    n_s, n_d = xs.shape[0], xd.shape[0]

    x_all = np.concatenate([xs, xd], axis=0)
    f, g, cache = model.forward_with_input_grad(x_all, return_cache=True)
    f_s, g_s = f[:n_s], g[:n_s]
    g_d = g[n_s:]

    fit = float(np.mean(f_s**2))
    normal = tau * float(np.mean(np.sum((g_s - ns) ** 2, axis=1)))
    norms = np.linalg.norm(g_d, axis=1)
    eik = lam * float(np.mean((norms - 1.0) ** 2))
    loss = fit + normal + eik

    g_value = np.zeros((n_s + n_d, 1))
    g_value[:n_s, 0] = 2.0 * f_s / n_s
    g_grad = np.zeros_like(x_all)
    g_grad[:n_s] = 2.0 * tau * (g_s - ns) / n_s
    safe = norms > 0.0
    unit = np.zeros_like(g_d)
    unit[safe] = g_d[safe] / norms[safe, None]
    g_grad[n_s:] = 2.0 * lam * (norms - 1.0)[:, None] * unit / n_d

    terms = {"fit": fit, "normal": normal, "eikonal": eik}
    return loss, terms, LossUpstreams(
        x=x_all, g_value=g_value, g_grad=g_grad, cache=cache
    )


def l1_regression_loss(model: FieldModel, points, sdf_gt):
    """Mean |F(x) - sdf_gt|, subgradient zero at exact ties."""
    x = np.atleast_2d(np.asarray(points, dtype=float))
    gt = np.asarray(sdf_gt, dtype=float).reshape(-1)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    f = model.forward(x)[:, 0]
    resid = f - gt
    loss = float(np.mean(np.abs(resid)))
    g_value = (np.sign(resid) / x.shape[0])[:, None]
    return loss, LossUpstreams(x=x, g_value=g_value)


def l2_image_loss(model: FieldModel, uv, rgb):
    """Mean squared error over pixels and channels."""
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    rgb = np.atleast_2d(np.asarray(rgb, dtype=float))
    if uv.shape[0] == 0:
        raise ValueError("empty batch")
    f = model.forward(uv)
    resid = f - rgb
    loss = float(np.mean(resid**2))
    g_value = 2.0 * resid / resid.size
    return loss, LossUpstreams(x=uv, g_value=g_value)


# -- sampling -------------------------------------------------------------------


def sample_batches(positions, normals, bbox_lo, bbox_hi, n, rng):
    """Uniform-with-replacement surface draw plus a uniform box draw."""
    idx = rng.integers(0, positions.shape[0], size=n)
    xs = positions[idx]
    ns = normals[idx]
    xd = rng.uniform(bbox_lo, bbox_hi, size=(n, positions.shape[1]))
    return xs, ns, xd


# -- sphere pretraining -----------------------------------------------------------


def pretrain_sphere(cfg: TrainConfig, rng=None):
    """Fit the analytic SDF of a centered sphere by L2 regression.

    Returns a Checkpoint used to initialize the coarsest SDF-fitting stage.
    If the tolerance is not reached within the step budget the checkpoint
    is returned anyway with meta["converged"] = False.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed if rng is None else rng)
    model = make_model(cfg, cfg.k_schedule[0], rng)
    params = model.get_params()
    adam = AdamState(params.size, cfg.beta1, cfg.beta2, cfg.eps)
    r = cfg.pretrain_radius
    d = cfg.input_dim
    probe = rng.uniform(-1.0, 1.0, size=(4096, d))
    probe_sdf = np.linalg.norm(probe, axis=1) - r
    converged = False
    step = 0
    for step in range(1, cfg.pretrain_steps + 1):
        x = rng.uniform(-1.0, 1.0, size=(cfg.pretrain_batch, d))
        gt = np.linalg.norm(x, axis=1) - r
        f = model.forward(x)[:, 0]
        g_value = (2.0 * (f - gt) / x.shape[0])[:, None]
        grads = model.backward(x, g_value)
        # halve the rate every 2000 steps: the constant-rate endgame
        # oscillates around the optimum instead of settling
        lr = cfg.pretrain_lr * 0.5 ** (step // 2000)
        params = adam.step(params, grads, lr)
        model.set_params(params)
        if step % 25 == 0:
            mae = np.mean(np.abs(model.forward(probe)[:, 0] - probe_sdf))
            if mae < cfg.pretrain_tol:
                converged = True
                break
    return Checkpoint.of(model, meta={"pretrain_steps": step, "converged": converged})


# -- single-shape training ---------------------------------------------------------


def _run_stage(model, params, adam, positions, normals, cfg, stage_k, steps, rng, log,
               step_offset):
    lo = -np.ones(cfg.input_dim)
    hi = np.ones(cfg.input_dim)
    for i in range(steps):
        xs, ns, xd = sample_batches(positions, normals, lo, hi, cfg.batch_points, rng)
        loss, terms, up = sdf_loss(model, xs, ns, xd, lam=cfg.lam, tau=cfg.tau)
        if not np.isfinite(loss):
            raise TrainingDiverged(
                f"loss became non-finite at stage K={stage_k}, step {i}"
            )
        grads = model.backward(up.x, up.g_value, up.g_grad, cache=up.cache)
        params = adam.step(params, grads, cfg.lr)
        model.set_params(params)
        log.append(
            {
                "step": step_offset + i,
                "stage_K": stage_k,
                "loss": loss,
                "eikonal_term": terms["eikonal"],
                "fit_term": terms["fit"],
                "normal_term": terms["normal"],
            }
        )
    return params


def train_sdf(positions, normals, cfg: TrainConfig):
    """Multiscale SDF fitting from an oriented point cloud.

    Stage 0 starts from a sphere-pretrained checkpoint; between stages the
    spline encoding is refined (doubling) to the next segment count and the
    Adam state is re-initialized. Returns (model, log) where log is a list
    of per-step records.
    """
    cfg.validate()
    positions = np.asarray(positions, dtype=float)
    normals = np.asarray(normals, dtype=float)
    rng = np.random.default_rng(cfg.seed)

    ckpt = pretrain_sphere(cfg, rng=rng)
    model = ckpt.build_model()

    multiscale = cfg.encoder == "spe"
    schedule = list(cfg.k_schedule) if multiscale else [cfg.k_schedule[0]]
    steps = cfg.stage_steps() if multiscale else [sum(cfg.stage_steps())]

    log = []
    params = model.get_params()
    step_offset = 0
    for stage, (k, n_steps) in enumerate(zip(schedule, steps)):
        if multiscale and model.encoder.segments < k:
            model = FieldModel(model.encoder.refine_to(k), model.mlp)
            params = model.get_params()
        adam = AdamState(params.size, cfg.beta1, cfg.beta2, cfg.eps)
        params = _run_stage(
            model, params, adam, positions, normals, cfg, k, n_steps, rng, log,
            step_offset,
        )
        step_offset += n_steps
    return model, log


# -- shape-space training --------------------------------------------------------


@dataclass
class ShapeSpace:
    """Shared network plus one spline encoding per shape."""

    mlp: object
    encodings: list
    config: TrainConfig

    def model_for(self, shape_index):
        return FieldModel(self.encodings[shape_index], self.mlp)


def shape_space_config(cfg: TrainConfig | None = None):
    """Shape-space defaults: K=64, C=32, M=3, no multiscale refinement."""
    base = cfg if cfg is not None else TrainConfig()
    return replace(base, k_schedule=(64,), channels=32, projections=3)


def _mlp_flat(mlp):
    parts = []
    for w, b in zip(mlp.weights, mlp.biases):
        parts.append(w.ravel())
        parts.append(b.ravel())
    return np.concatenate(parts)


def _set_mlp_flat(mlp, flat):
    pos = 0
    for i, w in enumerate(mlp.weights):
        mlp.weights[i] = flat[pos : pos + w.size].reshape(w.shape).copy()
        pos += w.size
        b = mlp.biases[i]
        mlp.biases[i] = flat[pos : pos + b.size].copy()
        pos += b.size


def train_shape_space(clouds, cfg: TrainConfig, steps_per_shape=None):
    """Joint optimization of a shared MLP and per-shape encodings.

    clouds is a list of (positions, normals) pairs, all normalized. One
    Adam instance covers the concatenated parameter vector [mlp, enc_0,
    enc_1, ...]; shapes are visited round-robin, one shape per step.
    """
    cfg = shape_space_config(cfg)
    cfg.validate()
    if len(clouds) < 2:
        raise ValueError("shape-space training needs at least 2 shapes")
    rng = np.random.default_rng(cfg.seed)
    k = cfg.k_schedule[0]

    ckpt = pretrain_sphere(replace(cfg, k_schedule=(k,)), rng=rng)
    pre_model = ckpt.build_model()
    mlp = pre_model.mlp
    encodings = []
    for _ in clouds:
        enc = make_encoder(cfg, k, rng)
        if isinstance(pre_model.encoder, SplineEncoding):
            # warm-start every shape from the sphere-pretrained encoder
            enc.weights = pre_model.encoder.weights.copy()
            enc.angles = pre_model.encoder.angles.copy()
        encodings.append(enc)

    n_mlp = _mlp_flat(mlp).size
    enc_sizes = [e.get_flat().size for e in encodings]
    offsets = np.cumsum([n_mlp] + enc_sizes)
    params = np.concatenate([_mlp_flat(mlp)] + [e.get_flat() for e in encodings])
    adam = AdamState(params.size, cfg.beta1, cfg.beta2, cfg.eps)

    if steps_per_shape is None:
        steps_per_shape = sum(cfg.stage_steps())
    total_steps = steps_per_shape * len(clouds)
    lo = -np.ones(cfg.input_dim)
    hi = np.ones(cfg.input_dim)
    log = []
    for step in range(total_steps):
        s = step % len(clouds)
        positions, normals = clouds[s]
        model = FieldModel(encodings[s], mlp)
        xs, ns, xd = sample_batches(
            np.asarray(positions, dtype=float),
            np.asarray(normals, dtype=float),
            lo, hi, cfg.batch_points, rng,
        )
        loss, terms, up = sdf_loss(model, xs, ns, xd, lam=cfg.lam, tau=cfg.tau)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"shape-space loss non-finite at step {step}")
        g_local = model.backward(up.x, up.g_value, up.g_grad, cache=up.cache)
        n_enc = enc_sizes[s]
        grads = np.zeros_like(params)
        grads[:n_mlp] = g_local[n_enc:]
        grads[offsets[s] : offsets[s + 1]] = g_local[:n_enc]
        params = adam.step(params, grads, cfg.lr)
        _set_mlp_flat(mlp, params[:n_mlp])
        encodings[s].set_flat(params[offsets[s] : offsets[s + 1]])
        log.append({"step": step, "shape": s, "loss": loss, **terms})
    return ShapeSpace(mlp=mlp, encodings=encodings, config=cfg), log


def fit_new_shape(space: ShapeSpace, positions, normals, steps=None, seed=0):
    """Optimize a fresh encoding against a new shape with the MLP frozen."""
    cfg = space.config
    rng = np.random.default_rng(seed)
    template = space.encodings[0]
    enc = SplineEncoding.random(
        degree=template.degree,
        segments=template.segments,
        channels=template.channels,
        projections=template.projections,
        input_dim=template.input_dim,
        domain_radius=template.domain_radius,
        rng=rng,
        train_directions=template.train_directions,
    )
    # start from the mean of the training encodings' weights
    enc.weights = np.mean([e.weights for e in space.encodings], axis=0)

    positions = np.asarray(positions, dtype=float)
    normals = np.asarray(normals, dtype=float)
    model = FieldModel(enc, space.mlp)
    enc_params = enc.get_flat()
    n_enc = enc_params.size
    adam = AdamState(n_enc, cfg.beta1, cfg.beta2, cfg.eps)
    if steps is None:
        steps = sum(cfg.stage_steps())
    lo = -np.ones(cfg.input_dim)
    hi = np.ones(cfg.input_dim)
    log = []
    for step in range(steps):
        xs, ns, xd = sample_batches(positions, normals, lo, hi, cfg.batch_points, rng)
        loss, terms, up = sdf_loss(model, xs, ns, xd, lam=cfg.lam, tau=cfg.tau)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"fit_new_shape loss non-finite at step {step}")
        g_local = model.backward(up.x, up.g_value, up.g_grad, cache=up.cache)
        enc_params = adam.step(enc_params, g_local[:n_enc], cfg.lr)
        enc.set_flat(enc_params)
        log.append({"step": step, "loss": loss, **terms})
    return enc, log
