"""Dense MLP with hand-written backprop, cross-entropy, and Adam.

Parameters of a network live in one flat float64 vector.  The layout is
layer-major and, inside each layer, the weight matrix (row-major, shape
``(out, in)``) comes before the bias.  Every per-layer array exposed by
:class:`Mlp` is a view into that vector, so optimizer steps and gossip
averaging operate on ``net.params`` directly and inner products between two
networks' gradients are well defined.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

ACTIVATIONS = ("relu", "identity")


class ConfigurationError(ValueError):
    """Raised for shape or argument mismatches in user-supplied inputs."""


class StaleCacheError(RuntimeError):
    """Raised when a backward pass is fed a cache from another network."""


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_out, fan_in))


class Mlp:
    """Fully connected network ``x -> act_k(W_k x + b_k)``.

    Parameters
    ----------
    layer_dims : sequence of int
        ``[in, h1, ..., out]``; one layer per adjacent pair.
    activations : sequence of str, optional
        One of ``"relu"`` / ``"identity"`` per layer.  Defaults to ReLU on
        every hidden layer and identity on the last.
    params : ndarray, optional
        Flat parameter vector to adopt (copied).  Zeros when omitted; use
        :meth:`init` for a random start.
    """

    def __init__(
        self,
        layer_dims: Sequence[int],
        activations: Optional[Sequence[str]] = None,
        params: Optional[np.ndarray] = None,
    ):
        dims = [int(d) for d in layer_dims]
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ConfigurationError(f"invalid layer_dims {layer_dims!r}")
        n_layers = len(dims) - 1
        if activations is None:
            activations = ["relu"] * (n_layers - 1) + ["identity"]
        activations = [a.lower() for a in activations]
        if len(activations) != n_layers:
            raise ConfigurationError(
                f"{len(activations)} activations given for {n_layers} layers"
            )
        for a in activations:
            if a not in ACTIVATIONS:
                raise ConfigurationError(f"unknown activation {a!r}")
        self.layer_dims = dims
        self.activations = activations

        self._slices: List[Tuple[slice, Tuple[int, int], slice]] = []
        offset = 0
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            w = slice(offset, offset + fan_in * fan_out)
            offset += fan_in * fan_out
            b = slice(offset, offset + fan_out)
            offset += fan_out
            self._slices.append((w, (fan_out, fan_in), b))
        self.n_params = offset

        if params is None:
            self.params = np.zeros(self.n_params)
        else:
            self.params = np.array(params, dtype=np.float64)
            if self.params.shape != (self.n_params,):
                raise ConfigurationError(
                    f"expected {self.n_params} parameters, got {self.params.shape}"
                )

    @classmethod
    def init(cls, layer_dims, rng, activations=None) -> "Mlp":
        """Glorot-uniform weights, zero biases."""
        net = cls(layer_dims, activations)
        for (w, shape, _), fan_in, fan_out in zip(
            net._slices, net.layer_dims[:-1], net.layer_dims[1:]
        ):
            net.params[w] = glorot_uniform(rng, fan_in, fan_out).ravel()
        return net

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    def weight(self, k: int) -> np.ndarray:
        w, shape, _ = self._slices[k]
        return self.params[w].reshape(shape)

    def bias(self, k: int) -> np.ndarray:
        return self.params[self._slices[k][2]]

    def layers(self):
        """Yield ``(weight, bias, activation)`` views, first layer first."""
        for k in range(self.n_layers):
            yield self.weight(k), self.bias(k), self.activations[k]

    def flatten(self) -> np.ndarray:
        return self.params.copy()

    def unflatten(self, flat: np.ndarray) -> "Mlp":
        """A new network with this architecture and parameters ``flat``."""
        return Mlp(self.layer_dims, self.activations, flat)

    def copy(self) -> "Mlp":
        return self.unflatten(self.params)

    def __repr__(self):
        return f"Mlp({self.layer_dims}, {self.activations})"


@dataclass
class ForwardCache:
    net: Mlp
    inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]
    squeezed: bool


def mlp_forward(net: Mlp, x) -> Tuple[np.ndarray, ForwardCache]:
    """Forward pass for one sample ``(in,)`` or a batch ``(batch, in)``."""
    x = np.asarray(x, dtype=np.float64)
    squeezed = x.ndim == 1
    if squeezed:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ConfigurationError(
            f"input of shape {x.shape} does not match input dim {net.input_dim}"
        )
    inputs, pre = [], []
    h = x
    for w, b, act in net.layers():
        inputs.append(h)
        z = h @ w.T + b
        pre.append(z)
        h = np.maximum(z, 0.0) if act == "relu" else z
    out = h[0] if squeezed else h
    return out, ForwardCache(net, inputs, pre, squeezed)


def mlp_backward(net: Mlp, cache: ForwardCache, output_grad, return_input_grad=False):
    """Gradient of a scalar loss w.r.t. ``net.params`` given dLoss/dOutput.

    The result follows the flat layout of ``net.params``.  With
    ``return_input_grad`` the gradient w.r.t. the network input is also
    returned, which is how a head's backward pass feeds the encoder's.
    """
    if cache.net is not net or len(cache.inputs) != net.n_layers:
        raise StaleCacheError("forward cache was produced by a different network")
    delta = np.asarray(output_grad, dtype=np.float64)
    if cache.squeezed:
        delta = delta[None, :]
    if delta.shape != cache.pre_activations[-1].shape:
        raise StaleCacheError(
            f"output_grad shape {delta.shape} does not match cached output "
            f"{cache.pre_activations[-1].shape}"
        )
    grad = np.empty(net.n_params)
    for k in range(net.n_layers - 1, -1, -1):
        if net.activations[k] == "relu":
            delta = delta * (cache.pre_activations[k] > 0.0)
        wslice, shape, bslice = net._slices[k]
        grad[wslice] = (delta.T @ cache.inputs[k]).ravel()
        grad[bslice] = delta.sum(axis=0)
        if k > 0 or return_input_grad:
            delta = delta @ net.weight(k)
    if return_input_grad:
        return grad, (delta[0] if cache.squeezed else delta)
    return grad


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, label):
    """Softmax cross-entropy and its gradient w.r.t. the logits.

    For a single ``(C,)`` logit vector and integer label this is the plain
    per-sample loss.  For a ``(batch, C)`` array and label vector the loss is
    the batch mean and the gradient is scaled by ``1/batch`` accordingly.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(label, dtype=np.int64)
    single = logits.ndim == 1
    if single:
        logits = logits[None, :]
        labels = labels.reshape(1)
    if labels.shape != (logits.shape[0],):
        raise ConfigurationError("one label per row of logits required")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(logits.shape[0])
    losses = log_norm - shifted[rows, labels]
    grad = softmax(logits)
    grad[rows, labels] -= 1.0
    if single:
        return float(losses[0]), grad[0]
    n = logits.shape[0]
    return float(losses.mean()), grad / n


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **kwargs) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), **kwargs)

    def copy(self) -> "AdamState":
        return AdamState(
            self.first_moment.copy(),
            self.second_moment.copy(),
            self.step_count,
            self.beta1,
            self.beta2,
            self.epsilon,
        )


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float) -> np.ndarray:
    """One bias-corrected Adam update; advances ``state`` and returns new params."""
    if not (params.shape == grads.shape == state.first_moment.shape == state.second_moment.shape):
        raise ConfigurationError(
            f"length mismatch: params {params.shape}, grads {grads.shape}, "
            f"moments {state.first_moment.shape}"
        )
    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    m, v = state.first_moment, state.second_moment
    m *= b1
    m += (1.0 - b1) * grads
    v *= b2
    v += (1.0 - b2) * np.square(grads)
    # m_hat / (sqrt(v_hat) + eps), written to avoid extra full-size temporaries
    denom = np.sqrt(v / (1.0 - b2**state.step_count))
    denom += state.epsilon
    step = np.divide(m, denom, out=denom)
    step *= lr / (1.0 - b1**state.step_count)
    return np.subtract(params, step, out=step)


def encoder_head_loss(encoder: Mlp, head: Mlp, x, y) -> float:
    feats, _ = mlp_forward(encoder, x)
    logits, _ = mlp_forward(head, feats)
    return cross_entropy(logits, y)[0]


def encoder_head_grads(encoder: Mlp, head: Mlp, x, y, encoder_grad=True, head_grad=True):
    """Mean cross-entropy of ``head(encoder(x))`` and the requested gradients.

    Returns ``(loss, encoder_grad_or_None, head_grad_or_None)``.
    """
    feats, enc_cache = mlp_forward(encoder, x)
    logits, head_cache = mlp_forward(head, feats)
    loss, dlogits = cross_entropy(logits, y)
    if not encoder_grad:
        g_head = mlp_backward(head, head_cache, dlogits) if head_grad else None
        return loss, None, g_head
    g_head, dfeats = mlp_backward(head, head_cache, dlogits, return_input_grad=True)
    g_enc = mlp_backward(encoder, enc_cache, dfeats)
    return loss, g_enc, (g_head if head_grad else None)
