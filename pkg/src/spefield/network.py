"""Fully-connected field network with Softplus activations.

Provides the forward pass, the input-gradient pass, and a batched
parameter-gradient pass that also handles losses depending on the input
gradient of the field (the Eikonal and normal terms), via a
forward-over-reverse sweep with hand-derived layer rules.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoding import FourierEncoding, IdentityEncoding, SplineEncoding

__all__ = ["Mlp", "FieldModel", "Checkpoint", "init_random", "model_from_config"]


def softplus(z):
    # stabilized: max(z, 0) + log1p(exp(-|z|))
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softplus_and_sigmoid(z):
    # one exp serves both: e = exp(-|z|); softplus = max(z,0) + log1p(e),
    # sigmoid = 1/(1+e) for z >= 0 and e/(1+e) otherwise
    e = np.exp(-np.abs(z))
    sp = np.maximum(z, 0.0) + np.log1p(e)
    denom = 1.0 + e
    sg = np.where(z >= 0.0, 1.0 / denom, e / denom)
    return sp, sg


@dataclass
class Mlp:
    """Stack of linear layers; Softplus on all hidden layers, linear output."""

    weights: list  # [(out_i, in_i)]
    biases: list  # [(out_i,)]

    def __post_init__(self):
        for i in range(len(self.weights) - 1):
            if self.weights[i].shape[0] != self.weights[i + 1].shape[1]:
                raise ValueError("layer dimensions do not chain")
        for w, b in zip(self.weights, self.biases):
            if w.shape[0] != b.shape[0]:
                raise ValueError("bias shape does not match layer")

    @property
    def in_dim(self):
        return self.weights[0].shape[1]

    @property
    def out_dim(self):
        return self.weights[-1].shape[0]

    @property
    def layer_dims(self):
        return [self.in_dim] + [w.shape[0] for w in self.weights]

    def param_count(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


def init_random(layer_dims, seed=None):
    """Mlp with weights ~ Normal(0, 2/fan_in) and zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        weights.append(np.sqrt(2.0 / fan_in) * rng.standard_normal((fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Mlp(weights=weights, biases=biases)


@dataclass
class _EvalCache:
    """Forward-pass intermediates reusable by backward on the same batch."""

    x: np.ndarray
    jac: np.ndarray
    acts: list
    sigs: list
    enc_cache: object = None


class FieldModel:
    """Encoder + MLP pair with a unified flat parameter vector.

    Flat ordering: encoder weights, encoder angles, then per layer the
    weight matrix followed by the bias vector.
    """

    def __init__(self, encoder, mlp: Mlp):
        if encoder.out_dim != mlp.in_dim:
            raise ValueError(
                f"encoder output dim {encoder.out_dim} != MLP input dim {mlp.in_dim}"
            )
        self.encoder = encoder
        self.mlp = mlp

    # -- parameter vector ----------------------------------------------------

    def param_order(self):
        order = []
        if isinstance(self.encoder, SplineEncoding):
            order.append(("encoder.weights", self.encoder.weights.size))
            order.append(("encoder.angles", self.encoder.angles.size))
        for i, (w, b) in enumerate(zip(self.mlp.weights, self.mlp.biases)):
            order.append((f"mlp.w{i}", w.size))
            order.append((f"mlp.b{i}", b.size))
        return order

    def n_params(self):
        return sum(n for _, n in self.param_order())

    def get_params(self):
        parts = [self.encoder.get_flat()]
        for w, b in zip(self.mlp.weights, self.mlp.biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    def set_params(self, flat):
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.n_params():
            raise ValueError(
                f"parameter vector length {flat.size} != {self.n_params()}"
            )
        pos = self.encoder.get_flat().size
        self.encoder.set_flat(flat[:pos])
        for i, w in enumerate(self.mlp.weights):
            self.mlp.weights[i] = flat[pos : pos + w.size].reshape(w.shape).copy()
            pos += w.size
            b = self.mlp.biases[i]
            self.mlp.biases[i] = flat[pos : pos + b.size].copy()
            pos += b.size

    # -- forward passes --------------------------------------------------------

    def forward(self, x):
        """F(x) = mlp(encoder(x)); (N, d) -> (N, out) or (d,) -> (out,)."""
        x = np.asarray(x, dtype=float)
        scalar = x.ndim == 1
        feats = self.encoder.encode(np.atleast_2d(x))
        acts, _ = self._forward_trace_from(feats)
        out = acts[-1]
        return out[0] if scalar else out

    def _feature_grad(self, acts, sigs):
        """dF/dfeatures for a scalar-output model; (N, C)."""
        n = acts[0].shape[0]
        g = np.ones((n, 1))
        for i in range(len(self.mlp.weights) - 1, -1, -1):
            g = g @ self.mlp.weights[i]
            if i > 0:
                g = g * sigs[i - 1]
        return g

    def forward_with_input_grad(self, x, return_cache=False):
        """(F(x), grad_x F(x)) for scalar-output models."""
        if self.mlp.out_dim != 1:
            raise ValueError("input gradient requires a scalar-output model")
        x = np.asarray(x, dtype=float)
        scalar = x.ndim == 1
        x2 = np.atleast_2d(x)
        if hasattr(self.encoder, "encode_with_jacobian_cached"):
            feats, jac, enc_cache = self.encoder.encode_with_jacobian_cached(x2)
        else:
            feats, jac = self.encoder.encode_with_jacobian(x2)
            enc_cache = None
        acts, sigs = self._forward_trace_from(feats)
        g_feat = self._feature_grad(acts, sigs)
        grad = np.einsum("nc,ncd->nd", g_feat, jac)
        val = acts[-1][:, 0]
        if return_cache:
            cache = _EvalCache(x=x2, jac=jac, acts=acts, sigs=sigs,
                               enc_cache=enc_cache)
            return val, grad, cache
        if scalar:
            return float(val[0]), grad[0]
        return val, grad

    def _forward_trace_from(self, feats):
        acts = [np.atleast_2d(feats)]
        sigs = []
        n_layers = len(self.mlp.weights)
        h = acts[0]
        for i, (w, b) in enumerate(zip(self.mlp.weights, self.mlp.biases)):
            z = h @ w.T + b
            if i < n_layers - 1:
                h, sg = _softplus_and_sigmoid(z)
                sigs.append(sg)
            else:
                h = z
            acts.append(h)
        return acts, sigs

    # -- parameter gradients ---------------------------------------------------

    def backward(self, x, g_value, g_grad=None, cache=None):
        """Flat gradient of sum_n [ <g_value_n, F(x_n)> + <g_grad_n, grad_x F(x_n)> ].

        g_value: (N, out) upstream dL/dF. g_grad: optional (N, d) upstream
        dL/d(grad_x F), only valid for scalar-output models. The g_grad path
        runs a forward tangent sweep (directional derivative along g_grad)
        followed by a joint reverse sweep, which routes the Softplus second
        derivative where required.
        """
        x = np.asarray(x, dtype=float)
        x2 = np.atleast_2d(x)
        n = x2.shape[0]
        g_value = np.asarray(g_value, dtype=float).reshape(n, self.mlp.out_dim)
        use_grad = g_grad is not None
        if use_grad:
            if self.mlp.out_dim != 1:
                raise ValueError("g_grad requires a scalar-output model")
            g_grad = np.asarray(g_grad, dtype=float).reshape(n, x2.shape[1])

        enc_cache = None
        if cache is not None:
            acts, sigs = cache.acts, cache.sigs
            jac = cache.jac
            enc_cache = cache.enc_cache
            dfeats = (
                np.einsum("ncd,nd->nc", jac, g_grad) if use_grad else None
            )
        else:
            if use_grad:
                feats, jac = self.encoder.encode_with_jacobian(x2)
                dfeats = np.einsum("ncd,nd->nc", jac, g_grad)  # tangent input
            else:
                feats = self.encoder.encode(x2)
                dfeats = None
            acts, sigs = self._forward_trace_from(feats)

        # tangent (dotted) forward sweep
        if use_grad:
            dacts = [np.atleast_2d(dfeats)]
            dzs = []
            n_layers = len(self.mlp.weights)
            dh = dacts[0]
            for i, w in enumerate(self.mlp.weights):
                dz = dh @ w.T
                dzs.append(dz)
                if i < n_layers - 1:
                    dh = sigs[i] * dz
                else:
                    dh = dz
                dacts.append(dh)

        # reverse sweep: p = dS/da, q = dS/d(da)
        n_layers = len(self.mlp.weights)
        grad_w = [np.zeros_like(w) for w in self.mlp.weights]
        grad_b = [np.zeros_like(b) for b in self.mlp.biases]
        p = g_value
        q = np.ones((n, 1)) if use_grad else None
        for i in range(n_layers - 1, -1, -1):
            if i == n_layers - 1:
                r, s = p, q
            else:
                sg = sigs[i]
                if use_grad:
                    # d(softplus)/dz = sigmoid; d(sigmoid)/dz = sg*(1-sg)
                    r = p * sg + q * dzs[i] * sg * (1.0 - sg)
                    s = q * sg
                else:
                    r = p * sg
                    s = None
            a_prev = acts[i]
            grad_w[i] += r.T @ a_prev
            grad_b[i] += r.sum(axis=0)
            if use_grad:
                grad_w[i] += s.T @ dacts[i]
            p = r @ self.mlp.weights[i]
            if use_grad:
                q = s @ self.mlp.weights[i]

        # encoder gradients: value upstream p, jacobian upstream q x g_grad
        if isinstance(self.encoder, SplineEncoding):
            g_jac = None
            if use_grad:
                g_jac = q[:, :, None] * g_grad[:, None, :]
            enc_grads = self.encoder.encode_backward(x2, p, g_jac, cache=enc_cache)
            enc_flat = self.encoder.grads_flat(enc_grads)
        else:
            enc_flat = np.zeros(0)

        parts = [enc_flat]
        for gw, gb in zip(grad_w, grad_b):
            parts.append(gw.ravel())
            parts.append(gb.ravel())
        return np.concatenate(parts)

    def to_config(self):
        return {
            "encoder": self.encoder.to_config(),
            "mlp_dims": self.mlp.layer_dims,
        }


@dataclass
class Checkpoint:
    """Config echo plus flat parameter values and run metadata."""

    config: dict
    params: np.ndarray
    param_order: list
    meta: dict = field(default_factory=dict)

    def build_model(self):
        model = model_from_config(self.config)
        model.set_params(self.params)
        return model

    @classmethod
    def of(cls, model: FieldModel, meta=None):
        return cls(
            config=model.to_config(),
            params=model.get_params(),
            param_order=[name for name, _ in model.param_order()],
            meta=dict(meta or {}),
        )


def encoder_from_config(cfg):
    kind = cfg["type"]
    if kind == "spe":
        m = cfg["projections"]
        k = cfg["segments"]
        c = cfg["channels"]
        d = cfg["input_dim"]
        return SplineEncoding(
            degree=cfg["degree"],
            segments=k,
            channels=c,
            angles=np.zeros((m, d - 1)),
            weights=np.zeros((m, k + 1, c)),
            domain_radius=cfg["domain_radius"],
            input_dim=d,
            train_directions=cfg.get("train_directions", True),
        )
    if kind == "fpe":
        return FourierEncoding(np.asarray(cfg["frequencies"], dtype=float))
    if kind == "identity":
        return IdentityEncoding(input_dim=cfg["input_dim"])
    raise ValueError(f"unknown encoder type {kind!r}")


def model_from_config(cfg):
    """Rebuild a FieldModel skeleton from a checkpoint config echo."""
    encoder = encoder_from_config(cfg["encoder"])
    dims = list(cfg["mlp_dims"])
    mlp = Mlp(
        weights=[np.zeros((o, i)) for i, o in zip(dims[:-1], dims[1:])],
        biases=[np.zeros(o) for o in dims[1:]],
    )
    return FieldModel(encoder, mlp)
