"""Attribution methods: permutation importance, KernelSHAP, gradient SHAP
(expected gradients), DeepLIFT (Rescale rule), and an exact brute-force
Shapley oracle for testing.

Every method attributes the pre-softmax logit of one target class and
produces per-timestep scores. KernelSHAP, DeepLIFT, and the exact oracle
satisfy completeness: scores sum to f(x) - f(baseline).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .model import Conv, Dense, Dropout, Flatten, MaxPool, Network, ReLU, forward_logits

METHODS = ("permutation", "kernel", "gradient", "deeplift", "exact")

DEEPLIFT_EPSILON = 1e-7


class SingularRegressionError(Exception):
    """The coalition sample cannot identify all group values."""


@dataclass
class Attribution:
    scores: np.ndarray
    target_class: int
    method: str
    baseline_id: str
    beat: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.beat = np.asarray(self.beat, dtype=np.float64)
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if len(self.scores) != len(self.beat):
            raise ValueError("scores and beat must have equal length")


@dataclass
class Baseline:
    kind: str                 # zeros | class_mean | sample_set
    data: np.ndarray

    @classmethod
    def zeros(cls, length: int = 216) -> "Baseline":
        return cls("zeros", np.zeros(length))

    @classmethod
    def class_mean(cls, beats: np.ndarray) -> "Baseline":
        beats = np.asarray(beats, dtype=np.float64)
        return cls("class_mean", beats.mean(axis=0))

    @classmethod
    def sample_set(cls, beats: np.ndarray) -> "Baseline":
        return cls("sample_set", np.asarray(beats, dtype=np.float64))

    def reference_beat(self) -> np.ndarray:
        """Collapse to one reference: a sample set is summarized by its mean."""
        if self.kind == "sample_set":
            return self.data.mean(axis=0)
        return self.data

    def describe(self) -> str:
        if self.kind == "sample_set":
            return f"sample_set[n={len(self.data)}]"
        return self.kind


def _batched_scorer(net_or_function, target_class: int):
    """Normalize net/callable into f(X: (n, L)) -> (n,) target scores."""
    if isinstance(net_or_function, Network):
        net = net_or_function
        if not 0 <= target_class < net.num_classes:
            raise ValueError(f"target class {target_class} out of range")

        def score(X: np.ndarray) -> np.ndarray:
            logits = net.forward(np.asarray(X, dtype=np.float64)[:, :, None]).values
            return logits[:, target_class]

        return score

    fn = net_or_function

    def score(X: np.ndarray) -> np.ndarray:
        return np.array([float(fn(row)) for row in np.asarray(X, dtype=np.float64)])

    return score


def target_score(net: Network, beat, target_class: int) -> float:
    """The scalar every explainer attributes: the class's pre-softmax logit."""
    logits = forward_logits(net, beat)
    if not 0 <= target_class < len(logits):
        raise ValueError(f"target class {target_class} out of range")
    return float(logits[target_class])


# --- permutation importance ----------------------------------------------------


def permutation_importance(net_or_function, beat, target_class: int,
                           background: np.ndarray, repeats: int = 10,
                           seed: int = 0) -> Attribution:
    """Mean score drop when each position is replaced by background values.

    score[i] = mean_r [ f(x) - f(x with x_i <- b_i) ], b drawn per repeat
    and position from the background set.
    """
    beat = np.asarray(beat, dtype=np.float64)
    background = np.asarray(background, dtype=np.float64)
    if background.ndim == 1:
        background = background[None, :]
    if background.size == 0:
        raise ValueError("background set must not be empty")
    if background.shape[1] != len(beat):
        raise ValueError("background beats must match the beat length")
    score = _batched_scorer(net_or_function, target_class)
    rng = np.random.default_rng(seed)
    L = len(beat)
    base = score(beat[None, :])[0]
    totals = np.zeros(L)
    for _ in range(repeats):
        draws = rng.integers(0, len(background), size=L)
        perturbed = np.tile(beat, (L, 1))
        perturbed[np.arange(L), np.arange(L)] = background[draws, np.arange(L)]
        totals += base - score(perturbed)
    return Attribution(totals / repeats, target_class, "permutation",
                       f"sample_set[n={len(background)}]", beat)


# --- Shapley machinery -----------------------------------------------------------


def contiguous_groups(length: int, group_size: int) -> list[np.ndarray]:
    if length % group_size:
        raise ValueError(f"length {length} not divisible by group size {group_size}")
    return [np.arange(i, i + group_size) for i in range(0, length, group_size)]


def _masked_beats(beat: np.ndarray, reference: np.ndarray,
                  groups: list[np.ndarray], masks: np.ndarray) -> np.ndarray:
    """Rows of `beat` where groups outside each coalition take reference values."""
    out = np.tile(reference, (len(masks), 1))
    for g, positions in enumerate(groups):
        members = masks[:, g].astype(bool)
        out[np.ix_(members, positions)] = beat[positions]
    return out


def _spread(group_values: np.ndarray, groups: list[np.ndarray], length: int) -> np.ndarray:
    scores = np.zeros(length)
    for value, positions in zip(group_values, groups):
        scores[positions] = value / len(positions)
    return scores


def exact_shapley(net_or_function, beat, target_class: int, baseline: Baseline,
                  groups: list[np.ndarray] | None = None) -> Attribution:
    """Exact Shapley values by full coalition enumeration (<= 16 groups)."""
    beat = np.asarray(beat, dtype=np.float64)
    if groups is None:
        groups = contiguous_groups(len(beat), 8)
    groups = [np.asarray(g, dtype=np.int64) for g in groups]
    M = len(groups)
    if M > 16:
        raise ValueError(f"{M} groups means 2^{M} coalitions; limit is 16")
    reference = baseline.reference_beat()
    score = _batched_scorer(net_or_function, target_class)

    masks = ((np.arange(2 ** M)[:, None] >> np.arange(M)) & 1).astype(np.float64)
    values = score(_masked_beats(beat, reference, groups, masks))

    weights = [math.factorial(s) * math.factorial(M - s - 1) / math.factorial(M)
               for s in range(M)]
    phi = np.zeros(M)
    sizes = masks.sum(axis=1).astype(np.int64)
    for g in range(M):
        without = np.flatnonzero(masks[:, g] == 0)
        with_g = without | (1 << g)
        w = np.array([weights[s] for s in sizes[without]])
        phi[g] = np.sum(w * (values[with_g] - values[without]))
    return Attribution(_spread(phi, groups, len(beat)), target_class, "exact",
                       baseline.describe(), beat)


def kernel_shap(net_or_function, beat, target_class: int, baseline: Baseline,
                group_size: int = 8, num_coalitions: int | None = None,
                seed: int = 0) -> Attribution:
    """Shapley regression over coalitions of contiguous timestep groups.

    The empty and full coalitions enter as hard constraints (intercept
    f(baseline), total f(x) - f(baseline)), so completeness is exact. When
    `num_coalitions` covers every subset, the solution equals exact Shapley
    values; otherwise coalitions are sampled with Shapley-kernel importance.
    """
    beat = np.asarray(beat, dtype=np.float64)
    groups = contiguous_groups(len(beat), group_size)
    M = len(groups)
    reference = baseline.reference_beat()
    score = _batched_scorer(net_or_function, target_class)
    f_base = score(reference[None, :])[0]
    f_full = score(beat[None, :])[0]
    delta = f_full - f_base

    if M == 1:
        return Attribution(_spread(np.array([delta]), groups, len(beat)),
                           target_class, "kernel", baseline.describe(), beat)

    if num_coalitions is None:
        num_coalitions = min(2 ** M, 4 * M + 2048)
    if num_coalitions < M + 2:
        raise SingularRegressionError(
            f"{num_coalitions} coalitions cannot identify {M} groups (need >= {M + 2})")

    enumerate_all = num_coalitions >= 2 ** M - 2
    if enumerate_all:
        masks = ((np.arange(2 ** M)[:, None] >> np.arange(M)) & 1).astype(np.float64)
        masks = masks[(masks.sum(axis=1) > 0) & (masks.sum(axis=1) < M)]
        sizes = masks.sum(axis=1)
        weights = (M - 1) / (_binom(M, sizes) * sizes * (M - sizes))
    else:
        rng = np.random.default_rng(seed)
        sizes_range = np.arange(1, M)
        size_mass = (M - 1) / (sizes_range * (M - sizes_range))
        size_prob = size_mass / size_mass.sum()
        drawn_sizes = rng.choice(sizes_range, size=num_coalitions - 2, p=size_prob)
        masks = np.zeros((num_coalitions - 2, M))
        for row, s in enumerate(drawn_sizes):
            masks[row, rng.choice(M, size=s, replace=False)] = 1.0
        weights = np.ones(len(masks))

    values = score(_masked_beats(beat, reference, groups, masks)) - f_base

    # eliminate the last group with the completeness constraint
    z_last = masks[:, -1]
    design = masks[:, :-1] - z_last[:, None]
    target = values - z_last * delta
    sw = np.sqrt(weights)
    A = design * sw[:, None]
    b = target * sw
    if np.linalg.matrix_rank(A) < M - 1:
        raise SingularRegressionError(
            "coalition sample is rank-deficient; increase num_coalitions")
    phi_head, *_ = np.linalg.lstsq(A, b, rcond=None)
    phi = np.concatenate([phi_head, [delta - phi_head.sum()]])
    return Attribution(_spread(phi, groups, len(beat)), target_class, "kernel",
                       baseline.describe(), beat)


def _binom(n: int, k: np.ndarray) -> np.ndarray:
    return np.array([math.comb(n, int(ki)) for ki in np.atleast_1d(k)], dtype=np.float64)


# --- gradient SHAP ----------------------------------------------------------------


def input_gradient(net: Network, beats: np.ndarray, target_class: int) -> np.ndarray:
    """d logit[target] / d input for each row of a (n, L) batch."""
    x = ad.Tensor(np.asarray(beats, dtype=np.float64)[:, :, None], requires_grad=True)
    with ad.Trace() as trace:
        logits = net.forward(x, training=False)
        total = ad.class_score_sum(logits, target_class)
    grads = ad.backward(trace, total)
    return grads[x][:, :, 0]


def gradient_shap(net: Network, beat, target_class: int, baseline,
                  num_samples: int = 256, seed: int = 0) -> Attribution:
    """Expected gradients: mean of (x - b) * grad f at b + u (x - b).

    `baseline` may be a Baseline or a raw (n, L) array of background beats;
    b and u ~ U[0,1] are drawn per sample.
    """
    beat = np.asarray(beat, dtype=np.float64)
    if isinstance(baseline, Baseline):
        pool = baseline.data if baseline.kind == "sample_set" else baseline.data[None, :]
        baseline_id = baseline.describe()
    else:
        pool = np.asarray(baseline, dtype=np.float64)
        if pool.ndim == 1:
            pool = pool[None, :]
        baseline_id = f"sample_set[n={len(pool)}]"
    if pool.size == 0:
        raise ValueError("baseline set must not be empty")
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    rng = np.random.default_rng(seed)
    draws = rng.integers(0, len(pool), size=num_samples)
    u = rng.random(num_samples)
    refs = pool[draws]
    points = refs + u[:, None] * (beat[None, :] - refs)
    grads = input_gradient(net, points, target_class)
    scores = ((beat[None, :] - refs) * grads).mean(axis=0)
    return Attribution(scores, target_class, "gradient", baseline_id, beat)


# --- DeepLIFT (Rescale rule) --------------------------------------------------------


def deeplift(net: Network, beat, target_class: int, baseline: Baseline,
             epsilon: float = DEEPLIFT_EPSILON) -> Attribution:
    """Multiplier propagation against a single reference activation.

    Linear layers push multipliers through their transpose; ReLU uses
    delta-out / delta-in (local gradient inside `epsilon`); maxpool routes
    through the input-forward winner, rescaled so each window's multiplier
    carries exactly its output delta. Scores satisfy summation-to-delta.
    """
    beat = np.asarray(beat, dtype=np.float64)
    if baseline.kind == "sample_set":
        raise ValueError("deeplift needs a single reference beat (zeros or class_mean)")
    reference = baseline.reference_beat()
    if reference.shape != beat.shape:
        raise ValueError("reference must match the beat length")
    if not 0 <= target_class < net.num_classes:
        raise ValueError(f"target class {target_class} out of range")

    # forward both inputs, saving every layer input
    acts_x: list[np.ndarray] = [beat[:, None]]
    acts_r: list[np.ndarray] = [reference[:, None]]
    for layer in net.layers:
        acts_x.append(_plain_forward(layer, acts_x[-1]))
        acts_r.append(_plain_forward(layer, acts_r[-1]))

    K = net.num_classes
    multiplier = np.zeros(K)
    multiplier[target_class] = 1.0
    degenerate_units = 0

    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        x_in, r_in = acts_x[i], acts_r[i]
        x_out, r_out = acts_x[i + 1], acts_r[i + 1]
        if isinstance(layer, Dense):
            multiplier = multiplier @ layer.weights.values.T
        elif isinstance(layer, Conv):
            multiplier = ad.conv1d_input_grad(multiplier, layer.kernels.values, len(x_in))
        elif isinstance(layer, Flatten):
            multiplier = multiplier.reshape(x_in.shape)
        elif isinstance(layer, Dropout):
            pass  # inference mode: identity
        elif isinstance(layer, ReLU):
            d_in = x_in - r_in
            d_out = x_out - r_out
            small = np.abs(d_in) <= epsilon
            degenerate_units += int(small.sum())
            ratio = np.where(small, (x_in > 0).astype(np.float64),
                             d_out / np.where(small, 1.0, d_in))
            multiplier = multiplier * ratio
        elif isinstance(layer, MaxPool):
            pool = layer.pool
            L, C = x_in.shape
            P = L // pool
            xw = x_in[: P * pool].reshape(P, pool, C)
            rw = r_in[: P * pool].reshape(P, pool, C)
            winners = xw.argmax(axis=1)
            d_out = x_out - r_out                             # (P, C)
            d_win = (np.take_along_axis(xw, winners[:, None, :], axis=1)
                     - np.take_along_axis(rw, winners[:, None, :], axis=1))[:, 0, :]
            small = np.abs(d_win) <= epsilon
            degenerate_units += int((small & (np.abs(d_out) > epsilon)).sum())
            factor = np.where(small, 1.0, d_out / np.where(small, 1.0, d_win))
            routed = np.zeros((P, pool, C))
            np.put_along_axis(routed, winners[:, None, :],
                              (multiplier * factor)[:, None, :], axis=1)
            expanded = np.zeros((L, C))
            expanded[: P * pool] = routed.reshape(P * pool, C)
            multiplier = expanded
        else:
            raise TypeError(f"unsupported layer {type(layer).__name__}")

    total_units = sum(a.size for a in acts_x[1:-1])
    if total_units and degenerate_units > 0.05 * total_units:
        import warnings

        warnings.warn(
            f"deeplift: {degenerate_units} of {total_units} units hit the "
            f"|delta| <= {epsilon} fallback; attributions may be unstable")

    scores = (multiplier * (beat[:, None] - reference[:, None]))[:, 0]
    return Attribution(scores, target_class, "deeplift", baseline.describe(), beat)


def _plain_forward(layer, values: np.ndarray) -> np.ndarray:
    """Inference forward of one layer on raw arrays (no tracing, no dropout)."""
    if isinstance(layer, Conv):
        return ad.conv1d(ad.Tensor(values), layer.kernels, layer.bias).values
    if isinstance(layer, ReLU):
        return np.maximum(values, 0.0)
    if isinstance(layer, MaxPool):
        pool = layer.pool
        P = values.shape[0] // pool
        return values[: P * pool].reshape(P, pool, -1).max(axis=1)
    if isinstance(layer, Dropout):
        return values
    if isinstance(layer, Flatten):
        return values.reshape(-1)
    if isinstance(layer, Dense):
        return values @ layer.weights.values + layer.bias.values
    raise TypeError(f"unsupported layer {type(layer).__name__}")


# --- export -------------------------------------------------------------------------


def attribution_to_csv(attribution: Attribution, path) -> None:
    with open(path, "w") as fh:
        fh.write("position,score\n")
        for i, s in enumerate(attribution.scores):
            fh.write(f"{i},{s:.17g}\n")


def attribution_to_json(attribution: Attribution, path=None,
                        model_checksum: str = "") -> str:
    payload = {
        "method": attribution.method,
        "target_class": attribution.target_class,
        "baseline": attribution.baseline_id,
        "scores": attribution.scores.tolist(),
        "beat": attribution.beat.tolist(),
        "model_checksum": model_checksum,
    }
    text = json.dumps(payload, indent=2, sort_keys=True)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def attribution_from_json(path) -> tuple[Attribution, str]:
    with open(path) as fh:
        payload = json.load(fh)
    attribution = Attribution(np.array(payload["scores"]), payload["target_class"],
                              payload["method"], payload["baseline"],
                              np.array(payload["beat"]))
    return attribution, payload.get("model_checksum", "")


def file_checksum(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()
