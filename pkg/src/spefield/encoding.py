"""Trainable spline positional encoding plus Fourier/identity baselines.

The spline encoder projects a d-dimensional point onto M unit directions,
evaluates a C-channel uniform B-spline along each projection and sums the
M results into a single C-vector. All knot weights and the direction
angles are trainable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "bspline_basis",
    "SplineEncoding",
    "FourierEncoding",
    "IdentityEncoding",
    "EncodingGrads",
    "directions_from_angles",
    "angles_from_directions",
]

# half-width of the support of the centered B-spline basis, by degree
SUPPORT_RADIUS = {0: 0.5, 1: 1.0, 2: 1.5}


def _basis_arrays(u, degree):
    """Centered uniform B-spline basis: value, first and second derivative.

    Kink derivatives use the left-limit convention so evaluation is
    deterministic everywhere.
    """
    u = np.asarray(u, dtype=float)
    b = np.zeros_like(u)
    db = np.zeros_like(u)
    d2b = np.zeros_like(u)
    if degree == 0:
        b[np.abs(u) < 0.5] = 1.0
    elif degree == 1:
        inside = np.abs(u) <= 1.0
        b[inside] = 1.0 - np.abs(u[inside])
        db[(u > -1.0) & (u <= 0.0)] = 1.0
        db[(u > 0.0) & (u <= 1.0)] = -1.0
    elif degree == 2:
        center = np.abs(u) <= 0.5
        b[center] = 0.75 - u[center] ** 2
        db[center] = -2.0 * u[center]
        d2b[(u > -0.5) & (u <= 0.5)] = -2.0
        for sgn in (-1.0, 1.0):
            wing = (sgn * u > 0.5) & (sgn * u <= 1.5)
            b[wing] = 0.5 * (1.5 - sgn * u[wing]) ** 2
            db[wing] = -sgn * (1.5 - sgn * u[wing])
        d2b[(u > 0.5) & (u <= 1.5)] = 1.0
        d2b[(u > -1.5) & (u <= -0.5)] = 1.0
    else:
        raise ValueError(f"unsupported B-spline degree {degree}, must be 0, 1 or 2")
    return b, db, d2b


def bspline_basis(t, degree):
    """Value and first derivative of the centered B-spline basis at t."""
    b, db, _ = _basis_arrays(np.asarray(t, dtype=float), degree)
    if np.ndim(t) == 0:
        return float(b), float(db)
    return b, db


def directions_from_angles(angles):
    """Unit directions from spherical angles; (M, d-1) -> (M, d)."""
    angles = np.atleast_2d(np.asarray(angles, dtype=float))
    if angles.shape[1] == 1:
        a = angles[:, 0]
        return np.stack([np.cos(a), np.sin(a)], axis=1)
    if angles.shape[1] == 2:
        theta, phi = angles[:, 0], angles[:, 1]
        return np.stack(
            [np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)],
            axis=1,
        )
    raise ValueError("only 2D and 3D directions are supported")


def angles_from_directions(dirs):
    """Spherical angles of unit directions; (M, d) -> (M, d-1)."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    if dirs.shape[1] == 2:
        return np.arctan2(dirs[:, 1], dirs[:, 0])[:, None]
    if dirs.shape[1] == 3:
        theta = np.arccos(np.clip(dirs[:, 2], -1.0, 1.0))
        phi = np.arctan2(dirs[:, 1], dirs[:, 0])
        return np.stack([theta, phi], axis=1)
    raise ValueError("only 2D and 3D directions are supported")


def _direction_angle_jacobian(angles):
    """dD/dangle, shape (M, d-1, d)."""
    angles = np.atleast_2d(np.asarray(angles, dtype=float))
    if angles.shape[1] == 1:
        a = angles[:, 0]
        return np.stack([-np.sin(a), np.cos(a)], axis=1)[:, None, :]
    theta, phi = angles[:, 0], angles[:, 1]
    d_theta = np.stack(
        [np.cos(theta) * np.cos(phi), np.cos(theta) * np.sin(phi), -np.sin(theta)],
        axis=1,
    )
    d_phi = np.stack(
        [-np.sin(theta) * np.sin(phi), np.sin(theta) * np.cos(phi), np.zeros_like(phi)],
        axis=1,
    )
    return np.stack([d_theta, d_phi], axis=1)


@dataclass
class EncodingGrads:
    """Parameter gradients of a spline encoding; shapes mirror the fields."""

    d_weights: np.ndarray  # (M, K+1, C)
    d_angles: np.ndarray  # (M, d-1)


@dataclass
class SplineEncoding:
    degree: int
    segments: int  # K
    channels: int  # C
    angles: np.ndarray  # (M, d-1)
    weights: np.ndarray  # (M, K+1, C)
    domain_radius: float  # knots span [-R, R]
    input_dim: int
    train_directions: bool = True

    def __post_init__(self):
        if self.degree not in (0, 1, 2):
            raise ValueError(f"unsupported degree {self.degree}")
        if self.segments < 1:
            raise ValueError("segments must be >= 1")
        self.angles = np.atleast_2d(np.asarray(self.angles, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float)
        m = self.angles.shape[0]
        expected = (m, self.segments + 1, self.channels)
        if self.weights.shape != expected:
            raise ValueError(f"weights shape {self.weights.shape} != {expected}")

    # -- constructors ------------------------------------------------------

    @classmethod
    def random(cls, *, degree=1, segments=2, channels=64, projections=3,
               input_dim=3, domain_radius=None, rng=None, weight_scale=0.1,
               train_directions=True):
        """Random directions, knot weights ~ Normal(0, weight_scale^2)."""
        rng = np.random.default_rng(rng)
        if domain_radius is None:
            domain_radius = float(np.sqrt(input_dim))
        dirs = rng.standard_normal((projections, input_dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        weights = weight_scale * rng.standard_normal(
            (projections, segments + 1, channels)
        )
        return cls(
            degree=degree,
            segments=segments,
            channels=channels,
            angles=angles_from_directions(dirs),
            weights=weights,
            domain_radius=float(domain_radius),
            input_dim=input_dim,
            train_directions=train_directions,
        )

    @classmethod
    def init_from_fourier(cls, frequencies, segments, input_dim, *, degree=1,
                          domain_radius=1.0):
        """Spline encoding that reproduces an axis-aligned Fourier encoding.

        Uses one frozen projection per axis. Each projection owns a block
        of 2*len(frequencies) channels sampling sin(2*pi*f*c_i) and
        cos(2*pi*f*c_i) at the knots; the other projections' weights in
        that block are zero, so the sum over projections concatenates the
        per-axis sin/cos features.
        """
        frequencies = list(frequencies)
        if not frequencies:
            raise ValueError("frequency list must be non-empty")
        n_freq = len(frequencies)
        k = int(segments)
        block = 2 * n_freq
        channels = block * input_dim
        knots = np.linspace(-domain_radius, domain_radius, k + 1)
        weights = np.zeros((input_dim, k + 1, channels))
        for axis in range(input_dim):
            for j, f in enumerate(frequencies):
                c0 = axis * block + 2 * j
                weights[axis, :, c0] = np.sin(2.0 * np.pi * f * knots)
                weights[axis, :, c0 + 1] = np.cos(2.0 * np.pi * f * knots)
        dirs = np.eye(input_dim)
        return cls(
            degree=degree,
            segments=k,
            channels=channels,
            angles=angles_from_directions(dirs),
            weights=weights,
            domain_radius=float(domain_radius),
            input_dim=input_dim,
            train_directions=False,
        )

    # -- basic properties --------------------------------------------------

    @property
    def projections(self):
        return self.angles.shape[0]

    @property
    def directions(self):
        return directions_from_angles(self.angles)

    @property
    def delta(self):
        return 2.0 * self.domain_radius / self.segments

    @property
    def knots(self):
        return np.linspace(-self.domain_radius, self.domain_radius, self.segments + 1)

    @property
    def out_dim(self):
        return self.channels

    def param_count(self):
        m = self.projections
        return self.channels * (self.segments + 1) * m + (self.input_dim - 1) * m

    # -- evaluation --------------------------------------------------------

    def _basis_at(self, t):
        """Active-knot basis data at projected coordinates t (...,).

        Returns (idx, mask, b, db, d2b), each of shape t.shape + (n,).
        The active window is wide enough to include knots whose left-limit
        derivatives are nonzero exactly at knot planes.
        """
        s = (np.asarray(t, dtype=float) + self.domain_radius) / self.delta
        if self.degree == 0:
            idx = np.floor(s + 0.5).astype(np.int64)[..., None]
        elif self.degree == 1:
            idx = np.floor(s).astype(np.int64)[..., None] + np.arange(-1, 2)
        else:
            idx = np.floor(s).astype(np.int64)[..., None] + np.arange(-1, 3)
        u = s[..., None] - idx
        b, db, d2b = _basis_arrays(u, self.degree)
        mask = (idx >= 0) & (idx <= self.segments)
        b = np.where(mask, b, 0.0)
        db = np.where(mask, db, 0.0)
        d2b = np.where(mask, d2b, 0.0)
        idx = np.clip(idx, 0, self.segments)
        return idx, mask, b, db, d2b

    def spline_eval(self, k, t):
        """Per-channel value and derivative of projection k's spline at t."""
        if not 0 <= k < self.projections:
            raise ValueError(f"projection index {k} out of range")
        t = np.asarray(t, dtype=float)
        scalar = t.ndim == 0
        idx, _, b, db, _ = self._basis_at(np.atleast_1d(t))
        w = self.weights[k][idx]  # (N, n, C)
        value = np.einsum("nk,nkc->nc", b, w)
        deriv = np.einsum("nk,nkc->nc", db, w) / self.delta
        if scalar:
            return value[0], deriv[0]
        return value, deriv

    def _project(self, x):
        x = np.asarray(x, dtype=float)
        scalar = x.ndim == 1
        x2 = np.atleast_2d(x)
        if x2.shape[1] != self.input_dim:
            raise ValueError(f"expected points of dimension {self.input_dim}")
        return x2, x2 @ self.directions.T, scalar  # t: (N, M)

    def _gather_weights(self, idx):
        m = np.arange(self.projections)
        return self.weights[m[None, :, None], idx]  # (N, M, n, C)

    def encode(self, x):
        """Sum of per-projection spline values; (N, d) -> (N, C)."""
        _, t, scalar = self._project(x)
        idx, _, b, _, _ = self._basis_at(t)
        w = self._gather_weights(idx)
        val = np.einsum("nmk,nmkc->nc", b, w)
        return val[0] if scalar else val

    def encode_jacobian(self, x):
        """d(encode)/dx; (N, d) -> (N, C, d)."""
        _, t, scalar = self._project(x)
        idx, _, _, db, _ = self._basis_at(t)
        w = self._gather_weights(idx)
        dpsi = np.einsum("nmk,nmkc->nmc", db, w) / self.delta
        jac = np.einsum("nmc,md->ncd", dpsi, self.directions)
        return jac[0] if scalar else jac

    def encode_with_jacobian(self, x):
        """Fused value + Jacobian evaluation (single weight gather)."""
        _, t, scalar = self._project(x)
        idx, _, b, db, _ = self._basis_at(t)
        w = self._gather_weights(idx)
        val = np.einsum("nmk,nmkc->nc", b, w)
        dpsi = np.einsum("nmk,nmkc->nmc", db, w) / self.delta
        jac = np.einsum("nmc,md->ncd", dpsi, self.directions)
        if scalar:
            return val[0], jac[0]
        return val, jac

    def encode_with_jacobian_cached(self, x):
        """encode_with_jacobian plus a cache for a later encode_backward."""
        x2, t, _ = self._project(x)
        idx, _, b, db, d2b = self._basis_at(t)
        w = self._gather_weights(idx)
        val = np.einsum("nmk,nmkc->nc", b, w)
        dpsi = np.einsum("nmk,nmkc->nmc", db, w) / self.delta
        jac = np.einsum("nmc,md->ncd", dpsi, self.directions)
        cache = (t, idx, b, db, d2b, w, dpsi)
        return val, jac, cache

    def encode_backward(self, x, g_value, g_jacobian=None, cache=None):
        """Gradients of <g_value, encode(x)> + <g_jacobian, encode_jacobian(x)>
        with respect to the knot weights and direction angles, summed over
        the batch.
        """
        x2, t, _ = self._project(x)
        n, m = t.shape
        c = self.channels
        g_value = np.asarray(g_value, dtype=float).reshape(n, c)
        if g_jacobian is not None:
            g_jacobian = np.asarray(g_jacobian, dtype=float)
            if g_jacobian.shape[-2:] != (c, self.input_dim):
                raise ValueError("g_jacobian shape does not match encoding")
            g_jacobian = g_jacobian.reshape(n, c, self.input_dim)

        if cache is not None:
            t, idx, b, db, d2b, w_cached, dpsi_cached = cache
        else:
            idx, _, b, db, d2b = self._basis_at(t)
            w_cached = dpsi_cached = None
        dirs = self.directions
        delta = self.delta

        # weight gradients: scatter-add per linearized (projection, knot) row
        contrib = b[..., None] * g_value[:, None, None, :]
        if g_jacobian is not None:
            gproj = np.einsum("ncd,md->nmc", g_jacobian, dirs)  # (N, M, C)
            contrib = contrib + (db / delta)[..., None] * gproj[:, :, None, :]
        rows = (np.arange(m)[None, :, None] * (self.segments + 1) + idx).ravel()
        flat = contrib.reshape(-1, c)
        d_weights = np.zeros((m * (self.segments + 1), c))
        for ch in range(c):
            d_weights[:, ch] = np.bincount(
                rows, weights=flat[:, ch], minlength=d_weights.shape[0]
            )
        d_weights = d_weights.reshape(m, self.segments + 1, c)

        d_angles = np.zeros_like(self.angles)
        if self.train_directions:
            w = w_cached if w_cached is not None else self._gather_weights(idx)
            psi1 = (
                dpsi_cached
                if dpsi_cached is not None
                else np.einsum("nmk,nmkc->nmc", db, w) / delta
            )
            d_dirs = _direction_angle_jacobian(self.angles)  # (M, d-1, d)
            dot1 = np.einsum("nd,mjd->nmj", x2, d_dirs)
            gv_psi1 = np.einsum("nc,nmc->nm", g_value, psi1)
            acc = dot1 * gv_psi1[..., None]
            if g_jacobian is not None:
                psi2 = np.einsum("nmk,nmkc->nmc", d2b, w) / delta**2
                gp_psi2 = np.einsum("nmc,nmc->nm", gproj, psi2)
                acc = acc + dot1 * gp_psi2[..., None]
                gjd = np.einsum("ncd,mjd->nmjc", g_jacobian, d_dirs)
                acc = acc + np.einsum("nmjc,nmc->nmj", gjd, psi1)
            d_angles = acc.sum(axis=0)

        return EncodingGrads(d_weights=d_weights, d_angles=d_angles)

    # -- refinement --------------------------------------------------------

    def refine(self):
        """Double the segment count; new weights sample the old spline at
        the refined knots. Exact for degree 1."""
        new_k = 2 * self.segments
        new_knots = np.linspace(-self.domain_radius, self.domain_radius, new_k + 1)
        new_weights = np.empty((self.projections, new_k + 1, self.channels))
        for k in range(self.projections):
            value, _ = self.spline_eval(k, new_knots)
            new_weights[k] = value
        return SplineEncoding(
            degree=self.degree,
            segments=new_k,
            channels=self.channels,
            angles=self.angles.copy(),
            weights=new_weights,
            domain_radius=self.domain_radius,
            input_dim=self.input_dim,
            train_directions=self.train_directions,
        )

    def refine_to(self, target_segments):
        """Refine repeatedly (doubling) until reaching target_segments."""
        enc = self
        while enc.segments < target_segments:
            enc = enc.refine()
        if enc.segments != target_segments:
            raise ValueError(
                f"cannot reach K={target_segments} by doubling K={self.segments}"
            )
        return enc

    # -- flat parameter view -----------------------------------------------

    def get_flat(self):
        return np.concatenate([self.weights.ravel(), self.angles.ravel()])

    def set_flat(self, flat):
        nw = self.weights.size
        self.weights = flat[:nw].reshape(self.weights.shape).copy()
        self.angles = flat[nw : nw + self.angles.size].reshape(self.angles.shape).copy()

    def grads_flat(self, grads: EncodingGrads):
        d_ang = grads.d_angles if self.train_directions else np.zeros_like(self.angles)
        return np.concatenate([grads.d_weights.ravel(), d_ang.ravel()])

    def to_config(self):
        return {
            "type": "spe",
            "projections": self.projections,
            "degree": self.degree,
            "segments": self.segments,
            "channels": self.channels,
            "input_dim": self.input_dim,
            "domain_radius": self.domain_radius,
            "train_directions": self.train_directions,
        }


@dataclass
class FourierEncoding:
    """Fixed sinusoidal features: [sin(2 pi w_j.x), cos(2 pi w_j.x)]."""

    frequencies: np.ndarray  # (M_f, d)

    def __post_init__(self):
        self.frequencies = np.atleast_2d(np.asarray(self.frequencies, dtype=float))

    @classmethod
    def random(cls, *, n_frequencies=128, input_dim=3, sigma=4.0, rng=None):
        rng = np.random.default_rng(rng)
        return cls(sigma * rng.standard_normal((n_frequencies, input_dim)))

    @property
    def input_dim(self):
        return self.frequencies.shape[1]

    @property
    def out_dim(self):
        return 2 * self.frequencies.shape[0]

    def param_count(self):
        return 0

    def encode(self, x):
        x = np.asarray(x, dtype=float)
        scalar = x.ndim == 1
        phase = 2.0 * np.pi * np.atleast_2d(x) @ self.frequencies.T  # (N, M_f)
        out = np.empty((phase.shape[0], self.out_dim))
        out[:, 0::2] = np.sin(phase)
        out[:, 1::2] = np.cos(phase)
        return out[0] if scalar else out

    def encode_jacobian(self, x):
        x = np.asarray(x, dtype=float)
        scalar = x.ndim == 1
        x2 = np.atleast_2d(x)
        phase = 2.0 * np.pi * x2 @ self.frequencies.T
        jac = np.empty((x2.shape[0], self.out_dim, self.input_dim))
        two_pi_w = 2.0 * np.pi * self.frequencies
        jac[:, 0::2, :] = np.cos(phase)[..., None] * two_pi_w[None]
        jac[:, 1::2, :] = -np.sin(phase)[..., None] * two_pi_w[None]
        return jac[0] if scalar else jac

    def encode_with_jacobian(self, x):
        return self.encode(x), self.encode_jacobian(x)

    def encode_backward(self, x, g_value, g_jacobian=None):
        return None  # no trainable parameters

    def get_flat(self):
        return np.zeros(0)

    def set_flat(self, flat):
        pass

    def grads_flat(self, grads):
        return np.zeros(0)

    def to_config(self):
        return {
            "type": "fpe",
            "frequencies": self.frequencies.tolist(),
        }


@dataclass
class IdentityEncoding:
    """Pass-through encoder: the MLP sees raw coordinates."""

    input_dim: int

    @property
    def out_dim(self):
        return self.input_dim

    def param_count(self):
        return 0

    def encode(self, x):
        return np.asarray(x, dtype=float)

    def encode_jacobian(self, x):
        x = np.asarray(x, dtype=float)
        eye = np.eye(self.input_dim)
        if x.ndim == 1:
            return eye
        return np.broadcast_to(eye, (x.shape[0], self.input_dim, self.input_dim)).copy()

    def encode_with_jacobian(self, x):
        return self.encode(x), self.encode_jacobian(x)

    def encode_backward(self, x, g_value, g_jacobian=None):
        return None

    def get_flat(self):
        return np.zeros(0)

    def set_flat(self, flat):
        pass

    def grads_flat(self, grads):
        return np.zeros(0)

    def to_config(self):
        return {"type": "identity", "input_dim": self.input_dim}


def fourier_encode(fe: FourierEncoding, x):
    """Functional alias for FourierEncoding.encode."""
    return fe.encode(x)
