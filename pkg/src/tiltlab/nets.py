"""Minimal MLP with exact reverse-mode gradients and Adam.

Supports tanh hidden layers and two heads: an exponential map producing
a strictly positive scalar (guidance networks) and an identity map for
vector fields.  Besides parameter gradients, the module provides exact
input gradients of the log-output and the parameter gradient of a
directional input-gradient objective, which is what gradient-matching
regularizers need.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Mlp",
    "AdamState",
    "init_mlp",
    "mlp_forward",
    "mlp_forward_logit",
    "mlp_grad_params",
    "mlp_grad_input",
    "grad_params_of_input_grad",
    "param_count",
    "adam_init",
    "adam_step",
    "save_mlp",
    "load_mlp",
]


@dataclass
class Mlp:
    """widths[0] inputs -> tanh hidden layers -> widths[-1] outputs -> head."""

    widths: tuple[int, ...]
    weights: list[np.ndarray]  # (out, in) per layer
    biases: list[np.ndarray]  # (out,) per layer
    head: str = "exp"  # "exp" (positive scalar) or "identity"
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation != "tanh":
            raise ValueError("only tanh hidden activations are supported")
        if self.head not in ("exp", "identity"):
            raise ValueError(f"unknown head {self.head!r}")
        if self.head == "exp" and self.widths[-1] != 1:
            raise ValueError("exp head requires a single output unit")

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    @property
    def scalar_output(self) -> bool:
        return self.widths[-1] == 1


def param_count(net: Mlp) -> int:
    return sum((w.shape[1] + 1) * w.shape[0] for w in net.weights)


def init_mlp(
    widths, head: str = "exp", seed: int = 0, zero_last: bool = True
) -> Mlp:
    """Glorot-scaled random hidden layers; the last layer starts at zero by
    default so exp heads open at h = 1 and identity heads at 0."""
    widths = tuple(int(w) for w in widths)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        scale = np.sqrt(2.0 / (fan_in + fan_out))
        weights.append(rng.normal(scale=scale, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    if zero_last:
        weights[-1] = np.zeros_like(weights[-1])
    return Mlp(widths=widths, weights=weights, biases=biases, head=head)


def _as_batch(x: np.ndarray, dim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        if x.shape[0] != dim:
            raise ValueError(f"input has {x.shape[0]} features, expected {dim}")
        return x[None, :], True
    if x.ndim == 2 and x.shape[1] == dim:
        return x, False
    raise ValueError(f"input shape {x.shape} does not match in_dim {dim}")


def _forward_cache(net: Mlp, x: np.ndarray):
    """Returns hidden activations [h_0..h_{L-1}] and pre-activations [a_1..a_L]."""
    hs = [x]
    pres = []
    h = x
    n_layers = len(net.weights)
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        a = h @ w.T + b
        pres.append(a)
        if l < n_layers - 1:
            h = np.tanh(a)
            hs.append(h)
    return hs, pres


def mlp_forward_logit(net: Mlp, x: np.ndarray):
    """Pre-head output, shape (n, out_dim) (or (out_dim,) for one input)."""
    xb, squeeze = _as_batch(x, net.in_dim)
    _, pres = _forward_cache(net, xb)
    z = pres[-1]
    return z[0] if squeeze else z


def mlp_forward(net: Mlp, x: np.ndarray):
    """Deterministic forward pass.

    exp heads return a positive scalar per row, shape (n,) (or a float
    for a single input); identity heads return (n, out_dim) vectors.
    """
    xb, squeeze = _as_batch(x, net.in_dim)
    _, pres = _forward_cache(net, xb)
    z = pres[-1]
    if net.head == "exp":
        out = np.exp(z[:, 0])
        return float(out[0]) if squeeze else out
    return z[0] if squeeze else z


def mlp_grad_params(net: Mlp, x: np.ndarray, dloss_dout: np.ndarray):
    """Exact reverse-mode gradients of a scalar loss, given its gradient at
    the post-head output.  Gradients are summed over the batch.

    Returns (grad_weights, grad_biases) lists shaped like the parameters.
    """
    xb, _ = _as_batch(x, net.in_dim)
    n = xb.shape[0]
    g = np.asarray(dloss_dout, dtype=float)
    if net.head == "exp":
        g = g.reshape(n, 1)
    else:
        g = g.reshape(n, net.out_dim)
    hs, pres = _forward_cache(net, xb)
    if net.head == "exp":
        delta = g * np.exp(pres[-1])  # d out / d logit = out
    else:
        delta = g
    grad_w = [np.zeros_like(w) for w in net.weights]
    grad_b = [np.zeros_like(b) for b in net.biases]
    for l in range(len(net.weights) - 1, -1, -1):
        grad_w[l] = delta.T @ hs[l]
        grad_b[l] = delta.sum(axis=0)
        if l > 0:
            dh = delta @ net.weights[l]
            t = np.tanh(pres[l - 1])
            delta = dh * (1.0 - t * t)
    return grad_w, grad_b


def _input_grad_logit(net: Mlp, xb: np.ndarray) -> np.ndarray:
    """d logit / d input for scalar nets, shape (n, in_dim)."""
    hs, pres = _forward_cache(net, xb)
    v = np.ones((xb.shape[0], 1))
    for l in range(len(net.weights) - 1, 0, -1):
        v = v @ net.weights[l]
        t = np.tanh(pres[l - 1])
        v = v * (1.0 - t * t)
    return v @ net.weights[0]


def mlp_grad_input(net: Mlp, x: np.ndarray):
    """Gradient of log(output) with respect to the input.

    For the exp head this is exactly the input gradient of the pre-head
    logit, which never involves the (possibly huge) output value.
    """
    if not net.scalar_output:
        raise ValueError("input gradient of log output requires a scalar-output network")
    xb, squeeze = _as_batch(x, net.in_dim)
    g = _input_grad_logit(net, xb)
    if net.head == "identity":
        _, pres = _forward_cache(net, xb)
        g = g / pres[-1]
    return g[0] if squeeze else g


def grad_params_of_input_grad(net: Mlp, x: np.ndarray, direction: np.ndarray):
    """Parameter gradient of J = sum_n direction_n . grad_x logit(x_n).

    This is the exact second-order quantity consumed by gradient-matching
    losses: with residual e held fixed, d/d(params) of sum e . grad_x log h
    equals this objective's gradient.  Implemented as reverse mode over a
    forward (tangent) pass along each row's direction.
    """
    if not net.scalar_output:
        raise ValueError("directional input-gradient objective requires scalar output")
    xb, _ = _as_batch(x, net.in_dim)
    e = np.asarray(direction, dtype=float).reshape(xb.shape)
    n_layers = len(net.weights)
    # primal + tangent forward
    hs, pres = _forward_cache(net, xb)
    hdots = [e]
    adots = []
    hd = e
    for l in range(n_layers):
        ad = hd @ net.weights[l].T
        adots.append(ad)
        if l < n_layers - 1:
            t = np.tanh(pres[l])
            hd = (1.0 - t * t) * ad
            hdots.append(hd)
    # reverse pass carrying adjoints of both primal (lam) and tangent (lam_dot)
    n = xb.shape[0]
    lam = np.zeros((n, 1))
    lam_dot = np.ones((n, 1))
    grad_w = [np.zeros_like(w) for w in net.weights]
    grad_b = [np.zeros_like(b) for b in net.biases]
    for l in range(n_layers - 1, -1, -1):
        grad_w[l] = lam.T @ hs[l] + lam_dot.T @ hdots[l]
        grad_b[l] = lam.sum(axis=0)
        if l > 0:
            p = lam_dot @ net.weights[l]  # adjoint of hdot_{l-1}
            q = lam @ net.weights[l]  # adjoint of h_{l-1}
            t = np.tanh(pres[l - 1])
            dphi = 1.0 - t * t
            ddphi = -2.0 * t * dphi
            lam_dot = dphi * p
            lam = ddphi * adots[l - 1] * p + dphi * q
    return grad_w, grad_b


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_init(params: list[np.ndarray], lr: float = 1e-3) -> AdamState:
    return AdamState(
        lr=lr,
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
    )


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]):
    """Bias-corrected Adam update; mutates params and state in place."""
    for k, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(
                f"non-finite gradient in parameter block {k} at Adam step {state.step + 1}"
            )
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def net_params(net: Mlp) -> list[np.ndarray]:
    """Flat view of the trainable arrays (weights then biases per layer)."""
    out = []
    for w, b in zip(net.weights, net.biases):
        out.append(w)
        out.append(b)
    return out


def save_mlp(net: Mlp, path, header: dict | None = None) -> None:
    """Persist as JSON with row-major weight arrays as decimal floats."""
    doc = {
        "widths": list(net.widths),
        "activation": net.activation,
        "head": net.head,
        "weights": [w.tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
        "header": header or {},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_mlp(path) -> tuple[Mlp, dict]:
    with open(path) as fh:
        doc = json.load(fh)
    net = Mlp(
        widths=tuple(doc["widths"]),
        weights=[np.asarray(w, dtype=float) for w in doc["weights"]],
        biases=[np.asarray(b, dtype=float) for b in doc["biases"]],
        head=doc["head"],
        activation=doc["activation"],
    )
    return net, doc.get("header", {})
