"""Fully-connected networks with hand-written backpropagation and Adam.

Everything runs in float64 on full batches. Networks are plain containers of
weight matrices (``out_dim x in_dim``) and bias vectors; the training loop is
a thin driver around :func:`adam_step` so that composite models (the
autoencoders below) can reuse it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("elu", "linear")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

MLP_FORMAT = "candyman-mlp"
MLP_FORMAT_VERSION = 1


class InvalidArchitecture(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, message: str | None = None):
        self.epoch = epoch
        super().__init__(message or f"training diverged at epoch {epoch} (non-finite loss)")


# ---------------------------------------------------------------------------
# network container


@dataclass
class Mlp:
    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self):
        self.layer_dims = [int(d) for d in self.layer_dims]
        self.activations = list(self.activations)
        _check_architecture(self.layer_dims, self.activations)
        n = len(self.layer_dims) - 1
        if len(self.weights) != n or len(self.biases) != n:
            raise InvalidArchitecture("need one weight matrix and bias per layer gap")
        for l in range(n):
            shape = (self.layer_dims[l + 1], self.layer_dims[l])
            if self.weights[l].shape != shape:
                raise InvalidArchitecture(f"weight {l} has shape {self.weights[l].shape}, expected {shape}")
            if self.biases[l].shape != (self.layer_dims[l + 1],):
                raise InvalidArchitecture(f"bias {l} has shape {self.biases[l].shape}")

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def parameters(self) -> list[np.ndarray]:
        """Parameters as a flat list ``[W0, b0, W1, b1, ...]``."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_parameters(self, params: Sequence[np.ndarray]) -> "Mlp":
        return Mlp(list(self.layer_dims), list(params[0::2]), list(params[1::2]), list(self.activations))

    def copy(self) -> "Mlp":
        return self.with_parameters([p.copy() for p in self.parameters()])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.parameters())

    def __call__(self, x):
        return forward(self, x)


def _check_architecture(layer_dims, activations):
    if len(layer_dims) < 2 or any(d < 1 for d in layer_dims):
        raise InvalidArchitecture(f"invalid layer_dims {layer_dims}")
    if len(activations) != len(layer_dims) - 1:
        raise InvalidArchitecture(
            f"{len(layer_dims) - 1} layer gaps but {len(activations)} activation tags"
        )
    bad = [a for a in activations if a not in ACTIVATIONS]
    if bad:
        raise InvalidArchitecture(f"unknown activations {bad}")


def glorot_init(layer_dims: Sequence[int], activations: Sequence[str], seed: int) -> Mlp:
    """Glorot-uniform weights, zero biases."""
    layer_dims = [int(d) for d in layer_dims]
    _check_architecture(layer_dims, activations)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Mlp(layer_dims, weights, biases, list(activations))


def default_activations(n_gaps: int) -> list[str]:
    """elu on every hidden layer, linear output (the layout used throughout)."""
    return ["elu"] * (n_gaps - 1) + ["linear"]


def widen(layer_dims: Sequence[int], factor: float) -> list[int]:
    """Scale hidden widths by ``factor``; input, output and bottleneck ends stay."""
    dims = list(layer_dims)
    return [dims[0]] + [max(1, int(round(d * factor))) for d in dims[1:-1]] + [dims[-1]]


def count_params(layer_dims: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(layer_dims[:-1], layer_dims[1:]))


# ---------------------------------------------------------------------------
# forward / backward


def elu(z):
    return np.where(z >= 0, z, np.expm1(np.minimum(z, 0.0)))


def elu_grad(z):
    return np.where(z >= 0, 1.0, np.exp(np.minimum(z, 0.0)))


def _as_batch(mlp: Mlp, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != mlp.in_dim:
        raise ValueError(f"input has shape {x.shape}, network expects {mlp.in_dim} features")
    return X, single


def forward(mlp: Mlp, x) -> np.ndarray:
    """Evaluate the network on one vector or a batch of row vectors."""
    X, single = _as_batch(mlp, x)
    a = X
    for W, b, act in zip(mlp.weights, mlp.biases, mlp.activations):
        z = a @ W.T + b
        a = elu(z) if act == "elu" else z
    return a[0] if single else a


def forward_cached(mlp: Mlp, X: np.ndarray):
    """Forward pass keeping what backprop needs: layer inputs and activation slopes."""
    inputs, slopes = [], []
    a = X
    for W, b, act in zip(mlp.weights, mlp.biases, mlp.activations):
        inputs.append(a)
        z = a @ W.T
        z += b
        if act == "elu":
            neg = z < 0
            a = z.copy()
            a[neg] = np.expm1(z[neg])
            slope = np.ones_like(z)
            slope[neg] = a[neg] + 1.0  # d/dz (e^z - 1) = e^z
            slopes.append(slope)
        else:
            a = z
            slopes.append(None)
    return a, (inputs, slopes)


def backward(mlp: Mlp, cache, grad_out: np.ndarray, need_input_grad: bool = False):
    """Backpropagate ``dL/d(output)``; returns flat param grads and ``dL/d(input)``."""
    inputs, slopes = cache
    grads: list[np.ndarray] = [None] * (2 * len(mlp.weights))  # type: ignore[list-item]
    delta = grad_out
    grad_in = None
    for l in range(len(mlp.weights) - 1, -1, -1):
        if slopes[l] is not None:
            delta = delta * slopes[l]
        grads[2 * l] = delta.T @ inputs[l]
        grads[2 * l + 1] = delta.sum(axis=0)
        if l > 0 or need_input_grad:
            back = delta @ mlp.weights[l]
            if l > 0:
                delta = back
            else:
                grad_in = back
    return grads, grad_in


def _normalized_weights(n: int, sample_weights) -> np.ndarray:
    if sample_weights is None:
        return np.ones(n)
    w = np.asarray(sample_weights, dtype=np.float64)
    if w.shape != (n,):
        raise ValueError(f"expected {n} sample weights, got shape {w.shape}")
    if np.any(w < 0):
        raise ValueError("sample weights must be nonnegative")
    return w


def loss_weighted_mse(preds, targets, sample_weights=None) -> float:
    """``sum_i w_i |pred_i - target_i|^2 / (sum_i w_i * dim)``."""
    preds = np.atleast_2d(np.asarray(preds, dtype=np.float64))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if preds.shape != targets.shape:
        raise ValueError(f"shape mismatch {preds.shape} vs {targets.shape}")
    w = _normalized_weights(preds.shape[0], sample_weights)
    total = w.sum()
    if total <= 0:
        raise ValueError("sample weights sum to zero")
    sq = ((preds - targets) ** 2).sum(axis=1)
    return float(w @ sq / (total * preds.shape[1]))


def _mse_and_grad(preds, targets, w):
    diff = preds - targets
    denom = w.sum() * preds.shape[1]
    loss = float(w @ (diff**2).sum(axis=1) / denom)
    return loss, (2.0 / denom) * w[:, None] * diff


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def flat(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def backprop(mlp: Mlp, xs, targets, sample_weights=None) -> Gradients:
    """Exact gradient of :func:`loss_weighted_mse` with respect to every parameter."""
    X, _ = _as_batch(mlp, xs)
    Y = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if Y.shape != (X.shape[0], mlp.out_dim):
        raise ValueError(f"targets have shape {Y.shape}, expected {(X.shape[0], mlp.out_dim)}")
    w = _normalized_weights(X.shape[0], sample_weights)
    if w.sum() <= 0:
        raise ValueError("sample weights sum to zero")
    out, cache = forward_cached(mlp, X)
    _, g = _mse_and_grad(out, Y, w)
    grads, _ = backward(mlp, cache, g)
    return Gradients(grads[0::2], grads[1::2])


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, step_index: int, lr: float,
              beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2, eps: float = ADAM_EPS):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    if step_index < 1:
        raise ValueError("step_index starts at 1")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and moments differ in length")
    c1 = 1.0 - beta1**step_index
    c2 = 1.0 - beta2**step_index
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v)


@dataclass
class TrainConfig:
    epochs: int
    lr_init: float = 0.01
    decay_rate: float = 1.0
    decay_every: int = 200
    staircase: bool = True
    sample_weights: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.lr_init <= 0:
            raise ValueError("lr_init must be positive")
        if not 0 < self.decay_rate <= 1:
            raise ValueError("decay_rate must lie in (0, 1]")
        if self.decay_every < 1:
            raise ValueError("decay_every must be positive")

    def learning_rate(self, step: int) -> float:
        """Rate used for optimizer step ``step`` (counted from 0)."""
        exponent = step // self.decay_every if self.staircase else step / self.decay_every
        return self.lr_init * self.decay_rate**exponent


@dataclass
class LossReport:
    history: list[float] = field(default_factory=list)
    final: float = float("nan")


def optimize(params: list[np.ndarray], loss_and_grads: Callable, config: TrainConfig):
    """Full-batch Adam: one optimizer step per epoch."""
    params = [np.array(p, dtype=np.float64, copy=True) for p in params]
    state = AdamState.zeros_like(params)
    history = []
    for epoch in range(config.epochs):
        loss, grads = loss_and_grads(params)
        if not math.isfinite(loss):
            raise TrainingDiverged(epoch)
        history.append(loss)
        params, state = adam_step(params, grads, state, epoch + 1, config.learning_rate(epoch))
    final, _ = loss_and_grads(params)
    if not math.isfinite(final) or not all(np.all(np.isfinite(p)) for p in params):
        raise TrainingDiverged(config.epochs)
    return params, LossReport(history, final)


def train(mlp: Mlp, xs, targets, config: TrainConfig) -> tuple[Mlp, LossReport]:
    """Regress ``targets`` on ``xs``; returns a trained copy and its loss history."""
    X, _ = _as_batch(mlp, xs)
    Y = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if X.shape[0] == 0:
        raise ValueError("no training data")
    if Y.shape != (X.shape[0], mlp.out_dim):
        raise ValueError(f"targets have shape {Y.shape}, expected {(X.shape[0], mlp.out_dim)}")
    w = _normalized_weights(X.shape[0], config.sample_weights)

    def loss_and_grads(params):
        net = mlp.with_parameters(params)
        out, cache = forward_cached(net, X)
        loss, g = _mse_and_grad(out, Y, w)
        grads, _ = backward(net, cache, g)
        return loss, grads

    params, report = optimize(mlp.parameters(), loss_and_grads, config)
    return mlp.with_parameters(params), report


# ---------------------------------------------------------------------------
# autoencoders


def _ensure_batch(x, dim):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.shape[1] != dim:
        raise ValueError(f"expected {dim} features, got {X.shape[1]}")
    return X, single


class PlainAutoencoder:
    """Encoder/decoder pair of free networks."""

    kind = "plain"

    def __init__(self, encoder: Mlp, decoder: Mlp):
        if encoder.out_dim != decoder.in_dim or encoder.in_dim != decoder.out_dim:
            raise InvalidArchitecture("encoder and decoder dimensions do not chain")
        self.encoder = encoder
        self.decoder = decoder

    @property
    def latent_dim(self) -> int:
        return self.encoder.out_dim

    @property
    def ambient_dim(self) -> int:
        return self.encoder.in_dim

    @property
    def n_params(self) -> int:
        return self.encoder.n_params + self.decoder.n_params

    def encode(self, x):
        return forward(self.encoder, x)

    def decode(self, h):
        return forward(self.decoder, h)

    def reconstruct(self, x):
        return self.decode(self.encode(x))

    def networks(self) -> dict[str, Mlp]:
        return {"encoder": self.encoder, "decoder": self.decoder}

    def _loss_and_grads(self, X, w):
        n_enc = 2 * len(self.encoder.weights)

        def fn(params):
            enc = self.encoder.with_parameters(params[:n_enc])
            dec = self.decoder.with_parameters(params[n_enc:])
            h, c_enc = forward_cached(enc, X)
            out, c_dec = forward_cached(dec, h)
            loss, g = _mse_and_grad(out, X, w)
            g_dec, g_h = backward(dec, c_dec, g, need_input_grad=True)
            g_enc, _ = backward(enc, c_enc, g_h)
            return loss, g_enc + g_dec

        return fn, self.encoder.parameters() + self.decoder.parameters()

    def _rebuild(self, params):
        n_enc = 2 * len(self.encoder.weights)
        return PlainAutoencoder(self.encoder.with_parameters(params[:n_enc]),
                                self.decoder.with_parameters(params[n_enc:]))


class PcaAnchoredAutoencoder:
    """PCA projection plus learned nonlinear corrections.

    ``encode(u) = P (u - mean) + E(u - mean)`` and
    ``decode(h) = mean + P^T h + D(h)``, with ``P`` the leading ``d`` principal
    directions of the training data. ``E`` and ``D`` start with a zero output
    layer, so an untrained model is exactly the rank-``d`` PCA truncation.

    Training minimises reconstruction MSE plus ``alpha * mean(E(u - mean)**2)``.
    That penalty keeps the latent coordinates close to the PCA coordinates; it
    is this package's reading of the hybrid scheme, not a verified transcript
    of its original loss (see README).
    """

    kind = "pca_anchored"

    def __init__(self, mean, basis, enc_correction: Mlp, dec_correction: Mlp, alpha: float):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.basis = np.asarray(basis, dtype=np.float64)
        d, m = self.basis.shape
        if enc_correction.in_dim != m or enc_correction.out_dim != d:
            raise InvalidArchitecture("encoder correction must map ambient -> latent")
        if dec_correction.in_dim != d or dec_correction.out_dim != m:
            raise InvalidArchitecture("decoder correction must map latent -> ambient")
        self.enc_correction = enc_correction
        self.dec_correction = dec_correction
        self.alpha = float(alpha)

    @property
    def latent_dim(self) -> int:
        return self.basis.shape[0]

    @property
    def ambient_dim(self) -> int:
        return self.basis.shape[1]

    @property
    def n_params(self) -> int:
        return self.enc_correction.n_params + self.dec_correction.n_params

    def encode(self, x):
        X, single = _ensure_batch(x, self.ambient_dim)
        c = X - self.mean
        h = c @ self.basis.T + forward(self.enc_correction, c)
        return h[0] if single else h

    def decode(self, h):
        H, single = _ensure_batch(h, self.latent_dim)
        u = self.mean + H @ self.basis + forward(self.dec_correction, H)
        return u[0] if single else u

    def reconstruct(self, x):
        return self.decode(self.encode(x))

    def networks(self) -> dict[str, Mlp]:
        return {"enc_correction": self.enc_correction, "dec_correction": self.dec_correction}

    def _loss_and_grads(self, X, w):
        n_enc = 2 * len(self.enc_correction.weights)
        C = X - self.mean
        P = self.basis
        d = P.shape[0]
        alpha = self.alpha
        wsum = w.sum()

        def fn(params):
            E = self.enc_correction.with_parameters(params[:n_enc])
            D = self.dec_correction.with_parameters(params[n_enc:])
            e, c_e = forward_cached(E, C)
            h = C @ P.T + e
            corr, c_d = forward_cached(D, h)
            out = self.mean + h @ P + corr
            loss, g = _mse_and_grad(out, X, w)
            g_d, g_h_corr = backward(D, c_d, g, need_input_grad=True)
            g_h = g @ P.T + g_h_corr
            if alpha:
                loss += alpha * float(w @ (e**2).sum(axis=1) / (wsum * d))
                g_h = g_h + alpha * (2.0 / (wsum * d)) * w[:, None] * e
            g_e, _ = backward(E, c_e, g_h)
            return loss, g_e + g_d

        return fn, self.enc_correction.parameters() + self.dec_correction.parameters()

    def _rebuild(self, params):
        n_enc = 2 * len(self.enc_correction.weights)
        return PcaAnchoredAutoencoder(self.mean, self.basis,
                                      self.enc_correction.with_parameters(params[:n_enc]),
                                      self.dec_correction.with_parameters(params[n_enc:]),
                                      self.alpha)


def train_autoencoder(ae, data, config: TrainConfig):
    """Fit an autoencoder (either kind) to reconstruct ``data``."""
    X = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if X.shape[0] == 0:
        raise ValueError("no training data")
    w = _normalized_weights(X.shape[0], config.sample_weights)
    fn, params = ae._loss_and_grads(X, w)
    params, report = optimize(params, fn, config)
    return ae._rebuild(params), report


def pca_basis(data, d: int):
    """Mean and leading ``d`` principal directions (rows), sign-fixed."""
    X = np.asarray(data, dtype=np.float64)
    mean = X.mean(axis=0)
    _, _, vt = np.linalg.svd(X - mean, full_matrices=False)
    basis = vt[:d].copy()
    # deterministic sign: largest-magnitude component positive
    idx = np.argmax(np.abs(basis), axis=1)
    signs = np.sign(basis[np.arange(d), idx])
    signs[signs == 0] = 1.0
    return mean, basis * signs[:, None]


def _zero_last_layer(mlp: Mlp) -> Mlp:
    out = mlp.copy()
    out.weights[-1][:] = 0.0
    out.biases[-1][:] = 0.0
    return out


def pca_anchored_autoencoder(data, d: int, alpha: float, config: TrainConfig,
                             enc_dims: Sequence[int] | None = None,
                             dec_dims: Sequence[int] | None = None,
                             enc_activations: Sequence[str] | None = None,
                             dec_activations: Sequence[str] | None = None,
                             seed: int = 0):
    """Build and train a :class:`PcaAnchoredAutoencoder`.

    ``enc_dims``/``dec_dims`` give the correction network shapes and default to
    a single hidden layer of width ``2 * m``.
    """
    X = np.atleast_2d(np.asarray(data, dtype=np.float64))
    n, m = X.shape
    if d >= m:
        raise InvalidArchitecture(f"latent dimension {d} must be below ambient dimension {m}")
    if n < d + 1:
        raise ValueError(f"need at least {d + 1} samples, got {n}")
    enc_dims = list(enc_dims) if enc_dims is not None else [m, 2 * m, d]
    dec_dims = list(dec_dims) if dec_dims is not None else [d, 2 * m, m]
    if enc_dims[0] != m or enc_dims[-1] != d or dec_dims[0] != d or dec_dims[-1] != m:
        raise InvalidArchitecture("correction network shapes do not match (m, d)")
    enc_act = enc_activations or default_activations(len(enc_dims) - 1)
    dec_act = dec_activations or default_activations(len(dec_dims) - 1)
    mean, basis = pca_basis(X, d)
    E = _zero_last_layer(glorot_init(enc_dims, enc_act, seed))
    D = _zero_last_layer(glorot_init(dec_dims, dec_act, seed + 1))
    ae = PcaAnchoredAutoencoder(mean, basis, E, D, alpha)
    return train_autoencoder(ae, X, config)


# ---------------------------------------------------------------------------
# text serialisation


def mlp_to_text(mlp: Mlp) -> str:
    """Versioned plain-text dump; every float written with 17 significant digits."""
    lines = [f"{MLP_FORMAT} {MLP_FORMAT_VERSION}",
             "layer_dims " + " ".join(str(d) for d in mlp.layer_dims),
             "activations " + " ".join(mlp.activations)]
    for l, (W, b) in enumerate(zip(mlp.weights, mlp.biases)):
        lines.append(f"weight {l} {W.shape[0]} {W.shape[1]}")
        lines += [" ".join(f"{v:.17e}" for v in row) for row in W]
        lines.append(f"bias {l} {b.shape[0]}")
        lines.append(" ".join(f"{v:.17e}" for v in b))
    return "\n".join(lines) + "\n"


def mlp_from_text(text: str) -> Mlp:
    lines = text.splitlines()
    head = lines[0].split()
    if len(head) != 2 or head[0] != MLP_FORMAT:
        raise ValueError("not an MLP document")
    if int(head[1]) != MLP_FORMAT_VERSION:
        raise ValueError(f"unsupported MLP format version {head[1]}")
    dims = [int(t) for t in lines[1].split()[1:]]
    acts = lines[2].split()[1:]
    weights, biases = [], []
    i = 3
    for l in range(len(dims) - 1):
        tag, idx, rows, cols = lines[i].split()
        if tag != "weight" or int(idx) != l:
            raise ValueError(f"malformed weight header at line {i + 1}")
        rows, cols = int(rows), int(cols)
        W = np.array([[float(t) for t in lines[i + 1 + r].split()] for r in range(rows)]).reshape(rows, cols)
        i += 1 + rows
        tag, idx, size = lines[i].split()
        if tag != "bias" or int(idx) != l:
            raise ValueError(f"malformed bias header at line {i + 1}")
        b = np.array([float(t) for t in lines[i + 1].split()]).reshape(int(size))
        i += 2
        weights.append(W)
        biases.append(b)
    return Mlp(dims, weights, biases, acts)
