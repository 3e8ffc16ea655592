"""The noised gradient release mechanism: Dec . Aggre . Noise . Clip . Enc.

Per round, each participating client encodes its factor gradient, clips
the encoding to Frobenius norm C, and adds Gaussian noise with per-entry
standard deviation 2*sigma/K (variance 4 sigma^2 / K^2, K = clients in
the round). The server decodes each noised contribution back to a factor
pair and averages the implied products in ascending client-id order.
Noise is the only random stage; everything else is deterministic.

With clipping at C = 1 the average of products moves by at most 2/K in
Frobenius norm when one client's contribution is swapped, which is the
sensitivity the accountant's sigma refers to.
"""

import dataclasses
import math
from typing import Mapping, Sequence

import numpy as np

from .codec import CodecModel, IdentityCodec
from .errors import PipelineStageError
from .lora import LoraGrad, clip_factor, lowrank_product


@dataclasses.dataclass(frozen=True)
class NoiseSpec:
    """Gaussian noise for one tensor release.

    sigma is the accountant's noise multiplier; clients is K, the round's
    participant count. Per-entry std is 2*sigma/K. The seed keys the
    generator, so equal specs reproduce the identical realization.
    """

    sigma: float
    clients: int
    seed: tuple[int, ...]

    def __post_init__(self):
        if self.sigma < 0.0 or not math.isfinite(self.sigma):
            raise ValueError(f"sigma must be finite and nonnegative, got {self.sigma}")
        if self.clients < 1:
            raise ValueError(f"clients must be >= 1, got {self.clients}")
        object.__setattr__(self, "seed", tuple(int(s) for s in self.seed))

    @property
    def per_entry_std(self) -> float:
        return 2.0 * self.sigma / self.clients


def noise_factor(x: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    """Add seeded Gaussian noise at the spec's per-entry scale.

    sigma = 0 returns an exact copy (no generator draw at all, so the
    noiseless path is bit-identical to never noising).
    """
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("noise input contains non-finite entries")
    if spec.sigma == 0.0:
        return arr.copy()
    rng = np.random.default_rng(spec.seed)
    return arr + rng.normal(0.0, spec.per_entry_std, size=arr.shape)


def aggregate(pairs: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """Average of factor products, reduced in the given order.

    Returns (1/K) * sum_i A_i @ B_i. The caller fixes the order
    (ascending client id in the pipeline) so the float reduction is
    reproducible.
    """
    if not pairs:
        raise ValueError("aggregate needs at least one contribution")
    total = None
    for a, b in pairs:
        prod = lowrank_product(a, b)
        total = prod if total is None else total + prod
    return total / len(pairs)


def apply_update(w: np.ndarray, g: np.ndarray, lr: float) -> np.ndarray:
    """Server SGD step w - lr * g."""
    w = np.asarray(w, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if w.shape != g.shape:
        raise ValueError(f"update shape {g.shape} does not match weight {w.shape}")
    if not math.isfinite(lr):
        raise ValueError("learning rate must be finite")
    return w - lr * g


@dataclasses.dataclass(frozen=True)
class MechanismPipeline:
    """Configuration for one mechanism invocation.

    codec=None releases the raw factor pair through clip and noise
    (the uncompressed baseline). aggregate_latents=True averages the
    noised latents before a single decode instead of decoding each
    client; it exists as an ablation, not the default, because the
    decoder does not commute with averaging.

    restore_norm rescales every decoded factor back to the given
    Frobenius norm. When the upload protocol pins transmitted factors
    to norm C, that norm is public, so restoring it after the lossy
    decode is plain post-processing: it undoes the amplitude shrink of
    reconstruction while leaving the privacy analysis untouched.

    Before decoding, each noised tensor is shrunk by the minimum-MSE
    linear gain C^2 / (C^2 + d * (2 sigma / K)^2), d being the tensor's
    entry count. The gain uses only public constants, so it is also
    post-processing; it keeps a nonlinear decoder inside the regime it
    was trained on instead of saturating it with noise, which would
    rectify zero-mean noise into a bias that client averaging cannot
    remove. sigma = 0 or an infinite clip leaves the gain at 1.
    """

    codec: CodecModel | IdentityCodec | None
    clip_c: float
    sigma: float
    seed: tuple[int, ...] = (0,)
    aggregate_latents: bool = False
    restore_norm: float | None = None

    def __post_init__(self):
        if not self.clip_c > 0.0:
            raise ValueError(f"clip bound must be positive, got {self.clip_c}")
        if self.sigma < 0.0:
            raise ValueError(f"sigma must be nonnegative, got {self.sigma}")
        if self.restore_norm is not None and not (
            math.isfinite(self.restore_norm) and self.restore_norm > 0.0
        ):
            raise ValueError(f"restore_norm must be finite and positive, got {self.restore_norm}")
        object.__setattr__(self, "seed", tuple(int(s) for s in self.seed))


def run_pipeline(pipe: MechanismPipeline, inputs: Mapping[int, LoraGrad]) -> np.ndarray:
    """Run the full mechanism over one round's client gradients.

    Args:
      pipe: stage configuration.
      inputs: client id -> that client's gradient for one adapted weight.

    Returns:
      The (n, n) aggregated dense update.
    """
    if not inputs:
        raise ValueError("pipeline inputs must be nonempty")
    ordered = sorted(inputs.items())
    k = len(ordered)

    released: list[tuple[int, tuple[np.ndarray, ...]]] = []
    for cid, grad in ordered:
        try:
            if pipe.codec is None:
                tensors: tuple[np.ndarray, ...] = (grad.a, grad.b)
            else:
                tensors = pipe.codec.encode_parts(grad)
        except Exception as e:
            raise PipelineStageError("encode", str(e), client_id=cid) from e
        try:
            tensors = tuple(clip_factor(t, pipe.clip_c) for t in tensors)
        except Exception as e:
            raise PipelineStageError("clip", str(e), client_id=cid) from e
        try:
            tensors = tuple(
                noise_factor(
                    t,
                    NoiseSpec(
                        sigma=pipe.sigma,
                        clients=k,
                        seed=pipe.seed + (int(cid), idx),
                    ),
                )
                for idx, t in enumerate(tensors)
            )
        except Exception as e:
            raise PipelineStageError("noise", str(e), client_id=cid) from e
        released.append((cid, tuple(_wiener_gain(pipe, k, t) * t for t in tensors)))

    try:
        if pipe.aggregate_latents:
            stacked = [
                np.mean([t[idx] for _, t in released], axis=0)
                for idx in range(len(released[0][1]))
            ]
            pairs = [_decode_one(pipe, tuple(stacked))]
        else:
            pairs = [_decode_one(pipe, tensors) for _, tensors in released]
    except PipelineStageError:
        raise
    except Exception as e:
        raise PipelineStageError("decode", str(e)) from e

    try:
        return aggregate(pairs)
    except Exception as e:
        raise PipelineStageError("aggregate", str(e)) from e


def _wiener_gain(pipe: MechanismPipeline, k: int, t: np.ndarray) -> float:
    if pipe.sigma == 0.0 or not math.isfinite(pipe.clip_c):
        return 1.0
    noise_power = t.size * (2.0 * pipe.sigma / k) ** 2
    return pipe.clip_c**2 / (pipe.clip_c**2 + noise_power)


def _decode_one(pipe: MechanismPipeline, tensors: tuple[np.ndarray, ...]):
    if pipe.codec is None:
        if len(tensors) != 2:
            raise ValueError("raw release must carry the (A, B) pair")
        pair = (tensors[0], tensors[1])
    else:
        pair = pipe.codec.decode_parts(tensors)
    if pipe.restore_norm is None:
        return pair
    return tuple(_to_norm(t, pipe.restore_norm) for t in pair)


def _to_norm(t: np.ndarray, target: float) -> np.ndarray:
    nrm = float(np.linalg.norm(t))
    if nrm == 0.0:
        return t
    return t * (target / nrm)


def sensitivity_probe(
    pairs_a: Sequence[tuple[np.ndarray, np.ndarray]],
    pairs_b: Sequence[tuple[np.ndarray, np.ndarray]],
    clip_c: float = 1.0,
) -> float:
    """Aggregate distance between two adjacent clipped contribution sets.

    The sets must have equal size K, every factor must already satisfy
    the clip bound, and exactly one position may differ. Returns
    ||aggregate(a) - aggregate(b)||_F, which the clip bound caps at
    2 * clip_c^2 / K.
    """
    if len(pairs_a) != len(pairs_b):
        raise ValueError("adjacent sets must have equal size")
    if not pairs_a:
        raise ValueError("sets must be nonempty")
    tol = 1e-9
    for label, pairs in (("first", pairs_a), ("second", pairs_b)):
        for a, b in pairs:
            for f in (a, b):
                if np.linalg.norm(f) > clip_c * (1.0 + tol):
                    raise ValueError(f"{label} set contains an unclipped factor")
    differing = [
        i
        for i, ((a1, b1), (a2, b2)) in enumerate(zip(pairs_a, pairs_b))
        if not (np.array_equal(a1, a2) and np.array_equal(b1, b2))
    ]
    if len(differing) != 1:
        raise ValueError(f"adjacent sets must differ in exactly one client, got {len(differing)}")
    diff = aggregate(pairs_a) - aggregate(pairs_b)
    return float(np.linalg.norm(diff))
