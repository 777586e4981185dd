"""Per-router MLP policy with masked softmax output, manual backprop and checkpoints."""

from __future__ import annotations

import json
import zipfile
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .simulator import ContractError, observation_width

HIDDEN = (128, 128, 128, 128, 128)
MASK_LOGIT = -1e9
CHECKPOINT_VERSION = 1


class PolicyParams:
    """Ordered (weight, bias) pairs; weights are (fan_in, fan_out)."""

    __slots__ = ("layers",)

    def __init__(self, layers: Iterable[Tuple[np.ndarray, np.ndarray]]):
        self.layers: List[Tuple[np.ndarray, np.ndarray]] = [
            (np.asarray(w, dtype=float), np.asarray(b, dtype=float)) for w, b in layers]
        for k in range(1, len(self.layers)):
            if self.layers[k][0].shape[0] != self.layers[k - 1][0].shape[1]:
                raise ValueError(f"layer {k} input width does not chain")
        for w, b in self.layers:
            if b.shape != (w.shape[1],):
                raise ValueError("bias width must match weight fan_out")

    @property
    def sizes(self) -> List[int]:
        return [self.layers[0][0].shape[0]] + [w.shape[1] for w, _ in self.layers]

    @property
    def shapes(self) -> List[Tuple[Tuple[int, int], Tuple[int]]]:
        return [(w.shape, b.shape) for w, b in self.layers]

    def copy(self) -> "PolicyParams":
        return PolicyParams((w.copy(), b.copy()) for w, b in self.layers)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for w, b in self.layers for a in (w, b)])

    def with_flat(self, vec: np.ndarray) -> "PolicyParams":
        out, pos = [], 0
        for w, b in self.layers:
            nw, nb = w.size, b.size
            out.append((vec[pos:pos + nw].reshape(w.shape), vec[pos + nw:pos + nw + nb].copy()))
            pos += nw + nb
        return PolicyParams(out)

    def zeros_like(self) -> "PolicyParams":
        return PolicyParams((np.zeros_like(w), np.zeros_like(b)) for w, b in self.layers)

    def __eq__(self, other):
        if not isinstance(other, PolicyParams) or self.shapes != other.shapes:
            return False
        return all(np.array_equal(w1, w2) and np.array_equal(b1, b2)
                   for (w1, b1), (w2, b2) in zip(self.layers, other.layers))

    def __repr__(self):
        return f"PolicyParams(sizes={self.sizes})"


GradientBundle = PolicyParams


def layer_sizes(n: int, hidden: Sequence[int] = HIDDEN) -> List[int]:
    return [observation_width(n), *hidden, n]


def init_params(n: int, rng: np.random.Generator, hidden: Sequence[int] = HIDDEN,
                sizes: Optional[Sequence[int]] = None) -> PolicyParams:
    """He-normal weights, zero biases."""
    sizes = list(sizes) if sizes is not None else layer_sizes(n, hidden)
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        layers.append((w, np.zeros(fan_out)))
    return PolicyParams(layers)


def _masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    z = np.where(mask, logits, MASK_LOGIT)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ContractError("action mask has no valid entry")
    return mask


def forward(params: PolicyParams, obs_vec: np.ndarray, mask: np.ndarray) -> np.ndarray:
    mask = _check_mask(mask)
    h = np.asarray(obs_vec, dtype=float)
    if h.shape[-1] != params.sizes[0]:
        raise ContractError(f"observation width {h.shape[-1]} != input layer {params.sizes[0]}")
    last = len(params.layers) - 1
    for k, (w, b) in enumerate(params.layers):
        h = h @ w + b
        if k < last:
            h = np.maximum(h, 0.0)
    return _masked_softmax(h, mask)


def forward_hot(params: PolicyParams, hot: Sequence[int], mask: np.ndarray) -> np.ndarray:
    """``forward`` for a 0/1 input given by the positions of its ones."""
    (w0, b0), rest = params.layers[0], params.layers[1:]
    h = np.maximum(w0[hot].sum(axis=0) + b0, 0.0)
    for w, b in rest[:-1]:
        h = np.maximum(h @ w + b, 0.0)
    w, b = rest[-1]
    return _masked_softmax(h @ w + b, mask)


def sample_action(probs: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    if idx >= len(probs):
        idx = int(np.flatnonzero(probs)[-1])
    return idx


def batch_logprob_grad(params: PolicyParams, obs: np.ndarray, masks: np.ndarray,
                       actions: Sequence[int], weights: Optional[np.ndarray] = None) -> GradientBundle:
    """Sum over rows t of weights[t] * grad log pi(actions[t] | obs[t])."""
    x = np.atleast_2d(np.asarray(obs, dtype=float))
    masks = _check_mask(np.atleast_2d(masks))
    actions = np.asarray(actions, dtype=np.int64)
    t = x.shape[0]
    weights = np.ones(t) if weights is None else np.asarray(weights, dtype=float)
    if not masks[np.arange(t), actions].all():
        raise ContractError("gradient requested for a masked action")

    acts = [x]
    last = len(params.layers) - 1
    h = x
    for k, (w, b) in enumerate(params.layers):
        h = h @ w + b
        if k < last:
            h = np.maximum(h, 0.0)
            acts.append(h)
    probs = _masked_softmax(h, masks)
    delta = -probs
    delta[np.arange(t), actions] += 1.0
    delta *= weights[:, None]

    grads: List[Tuple[np.ndarray, np.ndarray]] = [None] * len(params.layers)
    for k in range(last, -1, -1):
        w, _ = params.layers[k]
        grads[k] = (acts[k].T @ delta, delta.sum(axis=0))
        if k > 0:
            delta = (delta @ w.T) * (acts[k] > 0)
    return PolicyParams(grads)


def logprob_grad(params: PolicyParams, obs_vec: np.ndarray, mask: np.ndarray, action: int) -> GradientBundle:
    mask = np.asarray(mask, dtype=bool)
    if not mask[action]:
        raise ContractError(f"action {action} is masked")
    return batch_logprob_grad(params, obs_vec[None, :], mask[None, :], [action])


def log_prob(params: PolicyParams, obs_vec: np.ndarray, mask: np.ndarray, action: int) -> float:
    return float(np.log(forward(params, obs_vec, mask)[action]))


def apply_update(params: PolicyParams, grad: GradientBundle, step: float) -> PolicyParams:
    if params.shapes != grad.shapes:
        raise ValueError(f"shape mismatch: {params.shapes} vs {grad.shapes}")
    return PolicyParams((w + step * gw, b + step * gb)
                        for (w, b), (gw, gb) in zip(params.layers, grad.layers))


def add(a: GradientBundle, b: GradientBundle, scale: float = 1.0) -> GradientBundle:
    return apply_update(a, b, scale)


def scale(g: GradientBundle, factor: float) -> GradientBundle:
    return PolicyParams((w * factor, b * factor) for w, b in g.layers)


def grad_norm(grads: Sequence[GradientBundle]) -> float:
    return float(np.sqrt(sum(float((w * w).sum() + (b * b).sum()) for g in grads for w, b in g.layers)))


def save_checkpoint(path, policies: Sequence[PolicyParams], meta: Optional[dict] = None) -> None:
    """Write per-router parameters as a versioned ``.npz`` archive (bit-exact)."""
    arrays = {"version": np.array([CHECKPOINT_VERSION]), "routers": np.array([len(policies)])}
    for i, p in enumerate(policies):
        for k, (w, b) in enumerate(p.layers):
            arrays[f"r{i}_w{k}"] = w
            arrays[f"r{i}_b{k}"] = b
    arrays["meta"] = np.array(json.dumps(meta or {}, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> Tuple[List[PolicyParams], dict]:
    try:
        with np.load(path, allow_pickle=False) as data:
            version = int(data["version"][0])
            if version != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {version}")
            policies = []
            for i in range(int(data["routers"][0])):
                layers, k = [], 0
                while f"r{i}_w{k}" in data:
                    layers.append((data[f"r{i}_w{k}"], data[f"r{i}_b{k}"]))
                    k += 1
                policies.append(PolicyParams(layers))
            meta = json.loads(str(data["meta"]))
    except (zipfile.BadZipFile, KeyError) as exc:
        raise ValueError(f"{path}: not a policy checkpoint ({exc})") from exc
    return policies, meta
