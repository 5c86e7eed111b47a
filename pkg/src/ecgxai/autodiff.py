"""Minimal reverse-mode tensor engine sized for a small 1D CNN.

Tensors wrap float64 numpy arrays. Operations executed inside a `Trace`
context are recorded on a tape; `backward` replays the tape in exact
reverse order and accumulates gradients into every tensor flagged with
``requires_grad``. Ops accept either unbatched arrays (conv/pool:
``(L, C)``, dense: ``(N,)``) or arrays with one leading batch axis.
"""

from __future__ import annotations

import math
import warnings

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class AutodiffError(Exception):
    pass


class Tensor:
    """A float64 array plus an optional gradient buffer of the same shape."""

    __slots__ = ("values", "grad", "requires_grad")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


class Trace:
    """Tape of executed ops. Entries are (output, inputs, backward_fn).

    ``backward_fn(dout) -> [din, ...]`` returns one gradient per input,
    aligned with ``inputs``. The tape is traversed strictly in reverse
    execution order so repeated parameter uses accumulate.
    """

    def __init__(self):
        self.ops: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> None:
        self.ops.append((out, inputs, backward_fn))

    def __enter__(self) -> "Trace":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.pop()
        return False


_ACTIVE: list[Trace] = []


def _current_trace() -> Trace | None:
    return _ACTIVE[-1] if _ACTIVE else None


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    trace = _current_trace()
    if trace is not None:
        trace.record(out, inputs, backward_fn)
    return out


def backward(trace: Trace, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from `loss` over `trace`.

    Returns {tensor: gradient} for every requires_grad tensor reached and
    also accumulates into each tensor's ``.grad`` buffer.
    """
    if not trace.ops:
        raise AutodiffError("backward called before any forward op was traced")
    if not any(out is loss for out, _, _ in trace.ops):
        raise AutodiffError("loss tensor was not produced on this trace")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    leaf_grads: dict[Tensor, np.ndarray] = {}
    for out, inputs, backward_fn in reversed(trace.ops):
        dout = grads.pop(id(out), None)
        if dout is None:
            continue
        dins = backward_fn(dout)
        for inp, din in zip(inputs, dins):
            if din is None:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + din
            else:
                grads[key] = din
            if inp.requires_grad:
                # overwrite, not add: `grads` already carries the running sum
                leaf_grads[inp] = grads[key]
    for tensor, grad in leaf_grads.items():
        if tensor.grad is None:
            tensor.grad = grad.copy()
        else:
            tensor.grad = tensor.grad + grad
    return leaf_grads


def _as_batched(values: np.ndarray, core_ndim: int) -> tuple[np.ndarray, bool]:
    if values.ndim == core_ndim:
        return values[None, ...], False
    if values.ndim == core_ndim + 1:
        return values, True
    raise AutodiffError(
        f"expected array of {core_ndim} or {core_ndim + 1} dims, got shape {values.shape}"
    )


# ---------------------------------------------------------------------------
# layer ops


def conv1d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Valid cross-correlation: out[t, o] = b[o] + sum_{k,c} x[t+k, c] * K[k, c, o]."""
    if kernels.ndim != 3:
        raise AutodiffError(f"kernels must be (K, C_in, C_out), got {kernels.shape}")
    K, c_in, c_out = kernels.shape
    if bias.shape != (c_out,):
        raise AutodiffError(f"bias must be ({c_out},), got {bias.shape}")
    xv, batched = _as_batched(x.values, 2)
    B, L, C = xv.shape
    if C != c_in:
        raise AutodiffError(f"input has {C} channels, kernels expect {c_in}")
    if L < K:
        raise AutodiffError(f"input length {L} shorter than kernel {K}")
    T = L - K + 1

    # windows: (B, T, C, K) -> matmul against kernels laid out as (C*K, O)
    win = sliding_window_view(xv, K, axis=1)
    kmat = kernels.values.transpose(1, 0, 2).reshape(c_in * K, c_out)
    out_v = win.reshape(B * T, C * K) @ kmat + bias.values
    out = Tensor(out_v.reshape(B, T, c_out) if batched else out_v.reshape(T, c_out))

    def bwd(dout):
        dv = dout.reshape(B, T, c_out)
        dmat = win.reshape(B * T, C * K).T @ dv.reshape(B * T, c_out)
        dkernels = dmat.reshape(c_in, K, c_out).transpose(1, 0, 2)
        dbias = dv.sum(axis=(0, 1))
        # dx[s, c] = sum_k dout[s-k, o] K[k, c, o], via K-1 zero padding
        dpad = np.zeros((B, T + 2 * (K - 1), c_out))
        dpad[:, K - 1 : K - 1 + T] = dv
        dwin = sliding_window_view(dpad, K, axis=1)  # (B, L, O, K)
        kflip = kernels.values[::-1].transpose(0, 2, 1).reshape(K * c_out, c_in)
        dx = (dwin.transpose(0, 1, 3, 2).reshape(B * L, K * c_out) @ kflip).reshape(B, L, C)
        return [dx if batched else dx[0], dkernels, dbias]

    return _record(out, (x, kernels, bias), bwd)


def maxpool1d(x: Tensor, pool: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing remainder dropped.

    Gradient routes to each window's argmax, first occurrence on ties.
    """
    xv, batched = _as_batched(x.values, 2)
    B, L, C = xv.shape
    if L < pool:
        raise AutodiffError(f"input length {L} shorter than pool {pool}")
    P = L // pool
    xw = xv[:, : P * pool].reshape(B, P, pool, C)
    idx = xw.argmax(axis=2)
    out_v = np.take_along_axis(xw, idx[:, :, None, :], axis=2)[:, :, 0, :]
    out = Tensor(out_v if batched else out_v[0])

    def bwd(dout):
        dv = dout.reshape(B, P, C)
        dxw = np.zeros((B, P, pool, C))
        np.put_along_axis(dxw, idx[:, :, None, :], dv[:, :, None, :], axis=2)
        dx = np.zeros((B, L, C))
        dx[:, : P * pool] = dxw.reshape(B, P * pool, C)
        return [dx if batched else dx[0]]

    return _record(out, (x,), bwd)


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map out[j] = b[j] + sum_i x[i] * W[i, j]."""
    n_in, n_out = weights.shape
    if bias.shape != (n_out,):
        raise AutodiffError(f"bias must be ({n_out},), got {bias.shape}")
    xv, batched = _as_batched(x.values, 1)
    if xv.shape[1] != n_in:
        raise AutodiffError(f"input width {xv.shape[1]} != weight rows {n_in}")
    out_v = xv @ weights.values + bias.values
    out = Tensor(out_v if batched else out_v[0])

    def bwd(dout):
        dv = dout.reshape(xv.shape[0], n_out)
        dx = dv @ weights.values.T
        dw = xv.T @ dv
        db = dv.sum(axis=0)
        return [dx if batched else dx[0], dw, db]

    return _record(out, (x, weights, bias), bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0.0
    out = Tensor(np.where(mask, x.values, 0.0))

    def bwd(dout):
        return [dout * mask]

    return _record(out, (x,), bwd)


def flatten(x: Tensor) -> Tensor:
    """Collapse to a vector; a 3-dim input keeps its leading batch axis."""
    v = x.values
    if v.ndim == 3:
        out_v = v.reshape(v.shape[0], -1)
    else:
        out_v = v.reshape(-1)
    out = Tensor(out_v)

    def bwd(dout):
        return [dout.reshape(v.shape)]

    return _record(out, (x,), bwd)


def dropout(x: Tensor, rate: float, training: bool, rng) -> Tensor:
    """Inverted dropout: survivors scaled by 1/(1-rate); identity at inference."""
    if not 0.0 <= rate < 1.0:
        raise AutodiffError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        out = Tensor(x.values)
        return _record(out, (x,), lambda dout: [dout])
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    keep = rng.random(x.values.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    out = Tensor(np.where(keep, x.values * scale, 0.0))

    def bwd(dout):
        return [np.where(keep, dout * scale, 0.0)]

    return _record(out, (x,), bwd)


def softmax_cross_entropy(logits: Tensor, target_class) -> tuple[Tensor, np.ndarray]:
    """Stable softmax + negative log likelihood.

    Unbatched: ``(K,)`` logits and an int target give loss -ln p[target] with
    logit gradient p - onehot. Batched: ``(B, K)`` logits and ``(B,)`` targets
    give the mean loss. Returns (loss tensor, probabilities array).
    """
    lv, batched = _as_batched(logits.values, 1)
    B, K = lv.shape
    if K == 0:
        raise AutodiffError("zero-width logits")
    targets = np.atleast_1d(np.asarray(target_class, dtype=np.int64))
    if targets.shape != (B,):
        raise AutodiffError(f"expected {B} target(s), got shape {targets.shape}")
    if np.any((targets < 0) | (targets >= K)):
        raise AutodiffError("target class out of range")
    shifted = lv - lv.max(axis=1, keepdims=True)
    expv = np.exp(shifted)
    probs = expv / expv.sum(axis=1, keepdims=True)
    nll = -(shifted[np.arange(B), targets] - np.log(expv.sum(axis=1)))
    loss = Tensor(nll.mean())

    def bwd(dout):
        dlogits = probs.copy()
        dlogits[np.arange(B), targets] -= 1.0
        dlogits *= float(dout) / B
        return [dlogits if batched else dlogits[0]]

    _record(loss, (logits,), bwd)
    return loss, (probs if batched else probs[0])


def class_score_sum(logits: Tensor, target_class) -> Tensor:
    """Sum of the target-class logits across the batch (input-gradient probe)."""
    lv, batched = _as_batched(logits.values, 1)
    B, K = lv.shape
    targets = np.atleast_1d(np.asarray(target_class, dtype=np.int64))
    if targets.shape == (1,) and B > 1:
        targets = np.full(B, targets[0])
    if np.any((targets < 0) | (targets >= K)):
        raise AutodiffError("target class out of range")
    out = Tensor(lv[np.arange(B), targets].sum())

    def bwd(dout):
        dlogits = np.zeros_like(lv)
        dlogits[np.arange(B), targets] = float(dout)
        return [dlogits if batched else dlogits[0]]

    return _record(out, (logits,), bwd)


# ---------------------------------------------------------------------------
# optimizer


def adam_init(params: list[Tensor]) -> dict:
    return {
        "step": 0,
        "m": [np.zeros_like(p.values) for p in params],
        "v": [np.zeros_like(p.values) for p in params],
    }


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: dict,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> dict:
    """Bias-corrected Adam update, in place on ``params``.

    A non-finite gradient skips the whole step (reported via warning) so a
    single bad batch cannot poison the moment estimates.
    """
    if len(params) != len(grads):
        raise AutodiffError("params/grads length mismatch")
    for p, g in zip(params, grads):
        if g.shape != p.values.shape:
            raise AutodiffError(f"gradient shape {g.shape} != param shape {p.values.shape}")
    if any(not np.all(np.isfinite(g)) for g in grads):
        warnings.warn("non-finite gradient encountered; Adam step skipped")
        return state
    state["step"] += 1
    t = state["step"]
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.values -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state


# ---------------------------------------------------------------------------
# initializers / helpers reused by model and explainers


def he_uniform(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def conv1d_input_grad(dout: np.ndarray, kernels: np.ndarray, input_length: int) -> np.ndarray:
    """Gradient of conv1d w.r.t. its input for plain arrays (no tracing).

    Shared with the DeepLIFT multiplier propagation, which pushes multipliers
    through linear layers exactly like gradients.
    """
    K, c_in, c_out = kernels.shape
    d, batched = _as_batched(np.asarray(dout, dtype=np.float64), 2)
    B, T, _ = d.shape
    L = input_length
    if T != L - K + 1:
        raise AutodiffError("dout length inconsistent with input length and kernel")
    dpad = np.zeros((B, T + 2 * (K - 1), c_out))
    dpad[:, K - 1 : K - 1 + T] = d
    dwin = sliding_window_view(dpad, K, axis=1)
    kflip = kernels[::-1].transpose(0, 2, 1).reshape(K * c_out, c_in)
    dx = (dwin.transpose(0, 1, 3, 2).reshape(B * L, K * c_out) @ kflip).reshape(B, L, c_in)
    return dx if batched else dx[0]
