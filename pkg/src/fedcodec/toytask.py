"""Synthetic classification task for exercising the federated pipeline.

A frozen residual network labels Gaussian inputs; the labeling teacher
differs from the broadcast base model by planted low-rank corrections on
every adapted weight. Adapter tuning therefore has measurable headroom:
the base misclassifies part of the data, and adapters of rank >= the
planted rank can recover the teacher exactly.

Adapters are subtractive: each adapted weight acts as W - A @ B, so the
server folds an aggregated factor product G with W <- W - eta * G, the
same sign convention the mechanism's apply_update uses.
"""

import dataclasses

import numpy as np

from .lora import LoraGrad

Slot = tuple[int, str]  # (layer, module_tag)


@dataclasses.dataclass(frozen=True)
class ToyTaskSpec:
    """Dimensions of the synthetic task.

    Defaults run the full pipeline, codec pretraining included, in
    minutes on one core.
    """

    n: int = 64
    r: int = 8
    layers: int = 4
    module_tags: tuple[str, ...] = ("m0", "m1", "m2", "m3")
    classes: int = 4
    clients: int = 20
    samples_per_client: int = 40
    eval_samples: int = 256
    correction_scale: float = 0.05  # entry std of each planted low-rank delta
    label_margin: float = 0.5  # minimum teacher top-2 logit gap per kept sample

    def __post_init__(self):
        object.__setattr__(self, "module_tags", tuple(self.module_tags))
        if self.classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.classes}")
        if self.n < 1 or self.r < 1 or self.r > self.n:
            raise ValueError(f"need 1 <= r <= n, got n={self.n}, r={self.r}")
        if self.layers < 1 or not self.module_tags:
            raise ValueError("need at least one layer and one module tag")
        if len(set(self.module_tags)) != len(self.module_tags):
            raise ValueError("module tags must be distinct")
        if self.clients < 1 or self.samples_per_client < 1:
            raise ValueError("need clients >= 1 and samples_per_client >= 1")
        if self.eval_samples < 1:
            raise ValueError("eval_samples must be >= 1")
        if not self.correction_scale > 0.0:
            raise ValueError("correction_scale must be positive")
        if self.label_margin < 0.0:
            raise ValueError("label_margin must be nonnegative")

    @property
    def slots(self) -> tuple[Slot, ...]:
        """Adapted weights in forward order."""
        return tuple(
            (layer, tag) for layer in range(self.layers) for tag in self.module_tags
        )

    @property
    def train_samples(self) -> int:
        return self.clients * self.samples_per_client


@dataclasses.dataclass
class ToyTask:
    """Frozen data and weights produced by make_toy_task."""

    spec: ToyTaskSpec
    base: dict[Slot, np.ndarray]  # (n, n) per adapted weight
    corrections: dict[Slot, np.ndarray]  # planted teacher deltas, rank <= r
    head: np.ndarray  # (n, classes), frozen
    shards: tuple[tuple[np.ndarray, np.ndarray], ...]  # per-client (X, y)
    eval_x: np.ndarray
    eval_y: np.ndarray


def _forward_with(
    weights: dict[Slot, np.ndarray], head: np.ndarray, spec: ToyTaskSpec, x: np.ndarray
) -> np.ndarray:
    h = x
    for slot in spec.slots:
        h = h + np.tanh(h @ weights[slot])
    return h @ head


def make_toy_task(spec: ToyTaskSpec, seed: int = 0) -> ToyTask:
    """Reproducible shards, eval split, and frozen base weights.

    Labels come from the teacher (base plus corrections); the shards
    partition the training pool disjointly by construction.
    """
    rng = np.random.default_rng([int(seed), 5])
    n, r = spec.n, spec.r

    base = {slot: rng.normal(0.0, 1.0 / np.sqrt(n), (n, n)) for slot in spec.slots}
    # U @ V with matching entry scales gives delta entries of std
    # sqrt(r) * s^2; solve s for the requested correction_scale
    s = float(np.sqrt(spec.correction_scale / np.sqrt(r)))
    corrections = {}
    for slot in spec.slots:
        u = rng.normal(0.0, s, (n, r))
        v = rng.normal(0.0, s, (r, n))
        corrections[slot] = u @ v
    head = rng.normal(0.0, 1.0 / np.sqrt(n), (n, spec.classes))

    teacher = {slot: base[slot] + corrections[slot] for slot in spec.slots}

    def draw_labeled(count: int) -> tuple[np.ndarray, np.ndarray]:
        # rejection sampling keeps only samples the teacher labels with a
        # clear top-2 logit margin; ambiguous boundary points would make
        # the labels unlearnable at this sample count
        xs, got = [], 0
        while got < count:
            x = rng.normal(0.0, 1.0, (max(count, 64) * 2, n))
            logits = _forward_with(teacher, head, spec, x)
            top2 = np.partition(logits, -2, axis=1)
            keep = x[top2[:, -1] - top2[:, -2] > spec.label_margin]
            xs.append(keep[: count - got])
            got += xs[-1].shape[0]
        x = np.concatenate(xs)
        y = np.argmax(_forward_with(teacher, head, spec, x), axis=1)
        return x, y.astype(np.int64)

    pool_x, pool_y = draw_labeled(spec.train_samples)
    shards = tuple(
        (
            pool_x[i * spec.samples_per_client : (i + 1) * spec.samples_per_client],
            pool_y[i * spec.samples_per_client : (i + 1) * spec.samples_per_client],
        )
        for i in range(spec.clients)
    )
    eval_x, eval_y = draw_labeled(spec.eval_samples)
    return ToyTask(
        spec=spec,
        base=base,
        corrections=corrections,
        head=head,
        shards=shards,
        eval_x=eval_x,
        eval_y=eval_y,
    )


class ToyModel:
    """Residual tanh network with subtractive low-rank adapters.

    Each sub-block computes h <- h + tanh(h @ (W - A @ B)). The base
    weights and classification head are frozen during local training;
    only the adapters move. The server owns one instance whose base it
    mutates by folding aggregated updates.
    """

    def __init__(self, task: ToyTask):
        self.spec = task.spec
        self.base = {slot: task.base[slot].copy() for slot in task.spec.slots}
        self.head = task.head
        self.adapters: dict[Slot, list[np.ndarray]] = {}
        self.zero_adapters()

    def zero_adapters(self):
        n, r = self.spec.n, self.spec.r
        for slot in self.spec.slots:
            self.adapters[slot] = [np.zeros((n, r)), np.zeros((r, n))]

    def init_adapters(self, rng: np.random.Generator, a_scale: float = 0.02):
        """Fresh local adapters: A random, B zero, so the initial
        product (hence the initial correction) is exactly zero."""
        n, r = self.spec.n, self.spec.r
        for slot in self.spec.slots:
            self.adapters[slot] = [rng.normal(0.0, a_scale, (n, r)), np.zeros((r, n))]

    def effective(self, slot: Slot) -> np.ndarray:
        a, b = self.adapters[slot]
        return self.base[slot] - a @ b

    def logits(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        for slot in self.spec.slots:
            h = h + np.tanh(h @ self.effective(slot))
        return h @ self.head

    def loss(self, x: np.ndarray, y: np.ndarray) -> float:
        return _xent(self.logits(x), y)[0]

    def accuracy(self, x: np.ndarray, y: np.ndarray) -> float:
        return float(np.mean(np.argmax(self.logits(x), axis=1) == y))

    def loss_and_grads(
        self, x: np.ndarray, y: np.ndarray, base_grads: bool = False
    ):
        """Mean cross-entropy and its exact adapter gradients.

        Returns (loss, grads) where grads maps slot -> (gA, gB); with
        base_grads=True returns (loss, grads, gbase) where gbase maps
        slot -> dL/dW, for full-tuning oracles.
        """
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y)
        if x.ndim != 2 or x.shape[0] != y.shape[0] or x.shape[0] == 0:
            raise ValueError("need a nonempty batch with matching labels")

        weff = {slot: self.effective(slot) for slot in self.spec.slots}
        hs = [x]  # input to each sub-block
        ts = []  # tanh activations per sub-block
        h = x
        for slot in self.spec.slots:
            t = np.tanh(h @ weff[slot])
            ts.append(t)
            h = h + t
            hs.append(h)

        loss, dlogits = _xent(h @ self.head, y)
        gh = dlogits @ self.head.T
        grads: dict[Slot, tuple[np.ndarray, np.ndarray]] = {}
        gbase: dict[Slot, np.ndarray] = {}
        for i in range(len(self.spec.slots) - 1, -1, -1):
            slot = self.spec.slots[i]
            gz = gh * (1.0 - ts[i] ** 2)
            gw = hs[i].T @ gz
            a, b = self.adapters[slot]
            grads[slot] = (-gw @ b.T, -a.T @ gw)
            if base_grads:
                gbase[slot] = gw
            gh = gh + gz @ weff[slot].T
        if base_grads:
            return loss, grads, gbase
        return loss, grads

    def sgd_adapters(self, grads: dict[Slot, tuple[np.ndarray, np.ndarray]], lr: float):
        for slot, (ga, gb) in grads.items():
            self.adapters[slot][0] -= lr * ga
            self.adapters[slot][1] -= lr * gb

    def adapter_grads_as_lora(self, epoch: int) -> dict[Slot, LoraGrad]:
        """Current adapter factors packaged as transmissible gradients."""
        return {
            (layer, tag): LoraGrad(
                a=self.adapters[(layer, tag)][0].copy(),
                b=self.adapters[(layer, tag)][1].copy(),
                layer=layer,
                module_tag=tag,
                epoch=epoch,
            )
            for layer, tag in self.spec.slots
        }

    def fold_update(self, updates: dict[Slot, np.ndarray], lr: float):
        """Server step: W <- W - lr * G per adapted weight."""
        for slot, g in updates.items():
            if g.shape != self.base[slot].shape:
                raise ValueError(f"update shape mismatch at {slot}")
            self.base[slot] = self.base[slot] - lr * g


def _xent(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its logit gradient."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    batch = y.shape[0]
    loss = float(-logp[np.arange(batch), y].mean())
    dlogits = np.exp(logp)
    dlogits[np.arange(batch), y] -= 1.0
    return loss, dlogits / batch
