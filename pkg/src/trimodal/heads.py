"""Dataset-specific classifier heads, per-sample loss routing, and
verb/noun marginalization for paired label spaces."""

import json
from dataclasses import dataclass, field

import numpy as np

from .nn import Linear
from .tensor import ShapeError, add, cross_entropy, dropout, mul, stack


class RoutingError(KeyError):
    """A sample references a dataset with no registered head."""


class HeadSet:
    """One linear classifier per dataset on top of the shared representation.

    Heads share no parameters; a sample's loss flows only through the head
    of its source dataset. `dropout_rates` gives optional pre-head dropout
    per dataset (train mode only).
    """

    def __init__(self, in_dim, rng, dtype=np.float32):
        self.in_dim = in_dim
        self.rng = rng
        self.dtype = dtype
        self.heads = {}
        self.dropout_rates = {}

    def add_head(self, dataset_id, n_classes, dropout_rate=0.0):
        if dataset_id in self.heads:
            raise ValueError(f"duplicate head for dataset {dataset_id!r}")
        self.heads[dataset_id] = Linear(self.in_dim, n_classes,
                                        f"heads.{dataset_id}", self.rng, self.dtype)
        self.dropout_rates[dataset_id] = dropout_rate

    def parameters(self):
        params = []
        for dataset_id in sorted(self.heads):
            params.extend(self.heads[dataset_id].parameters())
        return params

    def n_classes(self, dataset_id):
        return self.heads[dataset_id].bias.shape[0]

    def forward(self, phi, dataset_id, train=False, rng=None):
        """phi: Tensor [B, in_dim] -> logits Tensor [B, C_id]."""
        if dataset_id not in self.heads:
            raise RoutingError(f"no head registered for dataset {dataset_id!r}")
        rate = self.dropout_rates[dataset_id]
        if train and rate > 0.0:
            phi = dropout(phi, rate, rng, train=True)
        return self.heads[dataset_id](phi)


def route_loss(batch, heads, smoothing=0.0, train=False, rng=None):
    """Mean cross-entropy over a batch of (phi, label, dataset_id) triples,
    each sample scored only by its own dataset's head.

    phi entries are Tensors of shape [in_dim] (kept on their graphs, so
    gradients flow back into the trunk). Returns a scalar Tensor.
    """
    if not batch:
        raise ValueError("route_loss requires a non-empty batch")
    groups = {}
    for phi, label, dataset_id in batch:
        groups.setdefault(dataset_id, []).append((phi, label))
    total = None
    n = len(batch)
    for dataset_id in sorted(groups):
        items = groups[dataset_id]
        phis = stack([p for p, _ in items], axis=0)
        labels = np.array([l for _, l in items], dtype=np.int64)
        logits = heads.forward(phis, dataset_id, train=train, rng=rng)
        group_loss = mul(cross_entropy(logits, labels, smoothing), len(items) / n)
        total = group_loss if total is None else add(total, group_loss)
    return total


@dataclass
class PairLabelSpace:
    """Action classes that factor into (verb, noun) pairs."""
    n_verbs: int
    n_nouns: int
    actions: list = field(default_factory=list)  # action index -> (verb, noun)

    def __post_init__(self):
        for a, (v, n) in enumerate(self.actions):
            if not (0 <= v < self.n_verbs and 0 <= n < self.n_nouns):
                raise ValueError(f"action {a} maps to out-of-range pair ({v}, {n})")

    @classmethod
    def from_file(cls, path):
        """JSON format: {"n_verbs": V, "n_nouns": N,
        "actions": [[verb, noun], ...]} indexed by action id."""
        with open(path) as f:
            raw = json.load(f)
        actions = [tuple(pair) for pair in raw["actions"]]
        return cls(n_verbs=raw["n_verbs"], n_nouns=raw["n_nouns"], actions=actions)


def marginalize(action_logits, space):
    """Softmax over actions, then sum probabilities per verb and per noun.

    action_logits: array [B, A]. Returns (verb_probs [B, V], noun_probs [B, N]).
    """
    logits = np.asarray(action_logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[1] != len(space.actions):
        raise ShapeError(f"expected [B, {len(space.actions)}] logits, got {logits.shape}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(shifted)
    p /= p.sum(axis=1, keepdims=True)
    verb_probs = np.zeros((logits.shape[0], space.n_verbs))
    noun_probs = np.zeros((logits.shape[0], space.n_nouns))
    for a, (v, n) in enumerate(space.actions):
        verb_probs[:, v] += p[:, a]
        noun_probs[:, n] += p[:, a]
    return verb_probs, noun_probs
