"""Gradient autoencoder trained on synthetic draws from streamed stats.

The server never sees raw client gradients. It samples surrogate factor
pairs from the per-cell (mean, std) stats, packs each pair as the n x 2r
block [A | B^T], and fits a small autoencoder to reconstruct those
blocks. The fitted halves are then split: encoders ship to clients, the
decoder stays on the server.

Profiles:
  * "mlp-desk" (default): two dense layers per half with a tanh
    bottleneck nonlinearity, latent n*2r/16 by default.
  * "conv-skeleton": a strided conv pyramid (channel chain 1,2,4,...,64)
    mirrored by transposed convs plus a final 7x7 conv. Structure-only
    stand-in for the full attention-based stack; the attention blocks
    are replaced by identity.

IdentityCodec is a separate lossless pass-through (it compresses
nothing, so it is not a CodecArch); baselines and equivalence tests
use it.
"""

import dataclasses
import json
import math
import os
from typing import Sequence

import numpy as np

from .errors import MissingArtifactError, TrainingDivergedError
from .lora import LoraGrad
from .nn import Conv2d, ConvTranspose2d, Dense, Network, Reshape, Tanh, conv_out_size
from .stats import StatsBundle

PROFILES = ("mlp-desk", "conv-skeleton")
CODEC_FORMAT = "fedcodec-codec/1"


@dataclasses.dataclass(frozen=True)
class CodecArch:
    """Architecture descriptor; fully determines both network shapes.

    per_part=False packs one (n, 2r) block [A | B^T] per gradient and
    emits a single latent. per_part=True runs the same network over A
    and B^T separately, emitting two latents whose clip/noise treatment
    then matches the factor-wise mechanism equations.
    """

    n: int
    r: int
    profile: str = "mlp-desk"
    latent_dim: int | None = None
    hidden_dim: int | None = None
    per_part: bool = False
    conv_channels: tuple[int, ...] = (1, 2, 4, 8, 16, 32, 64)

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}")
        if self.n < 1 or self.r < 1 or self.r > self.n:
            raise ValueError(f"need 1 <= r <= n, got n={self.n}, r={self.r}")
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        if self.profile == "conv-skeleton":
            if not self.conv_channels or any(c < 1 for c in self.conv_channels):
                raise ValueError("conv_channels must be positive")
        # compression is strict by contract
        if self.resolved_latent_dim() >= self.input_dim():
            raise ValueError(
                f"latent dim {self.resolved_latent_dim()} does not compress "
                f"input dim {self.input_dim()}"
            )

    def block_cols(self) -> int:
        """Columns of one network input block: 2r joint, r per part."""
        return self.r if self.per_part else 2 * self.r

    def input_dim(self) -> int:
        return self.n * self.block_cols()

    @property
    def input_shape(self) -> tuple[int, int]:
        """Shape of one stacked gradient block."""
        return (self.n, 2 * self.r)

    def conv_shape_chain(self) -> list[tuple[int, int, int]]:
        """(channels, h, w) after each encoder conv of the skeleton."""
        chain = []
        h, w = self.n, self.block_cols()
        ch = self.conv_channels
        chain.append((ch[0], conv_out_size(h, 3, 1, 1), conv_out_size(w, 3, 1, 1)))
        for c in ch[1:]:
            h_prev, w_prev = chain[-1][1], chain[-1][2]
            h2, w2 = conv_out_size(h_prev, 3, 2, 1), conv_out_size(w_prev, 3, 2, 1)
            if h2 < 1 or w2 < 1:
                raise ValueError("conv-skeleton input too small for the channel chain")
            chain.append((c, h2, w2))
        return chain

    def resolved_latent_dim(self) -> int:
        """Latent length of one emitted tensor."""
        if self.profile == "conv-skeleton":
            c, h, w = self.conv_shape_chain()[-1]
            derived = c * h * w
            if self.latent_dim is not None and self.latent_dim != derived:
                raise ValueError(
                    f"conv-skeleton latent dim is derived ({derived}); "
                    f"got {self.latent_dim}"
                )
            return derived
        if self.latent_dim is not None:
            if self.latent_dim < 1:
                raise ValueError("latent_dim must be positive")
            return self.latent_dim
        return max(1, self.input_dim() // 16)

    def resolved_hidden_dim(self) -> int:
        if self.hidden_dim is not None:
            if self.hidden_dim < 1:
                raise ValueError("hidden_dim must be positive")
            return self.hidden_dim
        return max(4, self.input_dim() // 4)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @staticmethod
    def from_dict(d: dict) -> "CodecArch":
        allowed = {f.name for f in dataclasses.fields(CodecArch)}
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown arch keys {sorted(unknown)}")
        d = dict(d)
        if "conv_channels" in d:
            d["conv_channels"] = tuple(d["conv_channels"])
        return CodecArch(**d)


def _build_mlp(arch: CodecArch, rng: np.random.Generator) -> tuple[Network, Network]:
    d, hid, lat = arch.input_dim(), arch.resolved_hidden_dim(), arch.resolved_latent_dim()
    enc = Network([Dense(d, hid, rng), Tanh(), Dense(hid, lat, rng)])
    dec = Network([Dense(lat, hid, rng), Tanh(), Dense(hid, d, rng)])
    return enc, dec


def _build_conv(arch: CodecArch, rng: np.random.Generator) -> tuple[Network, Network]:
    ch = arch.conv_channels
    chain = arch.conv_shape_chain()
    h0, w0 = arch.n, arch.block_cols()

    enc_layers: list = [Reshape((1, h0, w0))]
    enc_layers.append(Conv2d(1, ch[0], 3, 1, 1, rng))
    prev = ch[0]
    for c in ch[1:]:
        enc_layers.append(Tanh())
        enc_layers.append(Conv2d(prev, c, 3, 2, 1, rng))
        prev = c
    enc_layers.append(Reshape((arch.resolved_latent_dim(),)))

    dec_layers: list = [Reshape(chain[-1])]
    # walk the recorded encoder chain backwards so every transposed conv
    # lands exactly on the matching forward shape
    for i in range(len(chain) - 1, 0, -1):
        c_in, c_out = chain[i][0], chain[i - 1][0]
        target = (chain[i - 1][1], chain[i - 1][2])
        dec_layers.append(ConvTranspose2d(c_in, c_out, 3, 2, 1, target, rng))
        dec_layers.append(Tanh())
    dec_layers.append(ConvTranspose2d(ch[0], ch[0], 3, 1, 1, (h0, w0), rng))
    dec_layers.append(Tanh())
    dec_layers.append(Conv2d(ch[0], 1, 7, 1, 3, rng))
    dec_layers.append(Reshape((arch.input_dim(),)))
    return Network(enc_layers), Network(dec_layers)


def build_codec(arch: CodecArch, seed=0) -> "CodecModel":
    """Construct a codec with seeded initial weights."""
    rng = np.random.default_rng([int(seed), 17])
    if arch.profile == "mlp-desk":
        enc, dec = _build_mlp(arch, rng)
    else:
        enc, dec = _build_conv(arch, rng)
    return CodecModel(arch, enc, dec)


class CodecModel:
    """A trained (or freshly initialized) encoder/decoder pair.

    Two learned scales bracket the networks. input_scale standardizes
    the tiny gradient magnitudes to O(1) before the encoder and undoes
    that after the decoder. latent_scale normalizes latents on the wire
    so a typical transmitted latent has unit norm; downstream clipping
    then barely cuts, and the decoder always sees latents in the range
    it was trained on. Both are set from data during training; the
    *_rows methods work in raw network space, the *_parts methods in
    wire space.
    """

    def __init__(
        self, arch: CodecArch, encoder: Network, decoder: Network,
        input_scale: float = 1.0, latent_scale: float = 1.0,
    ):
        if not input_scale > 0.0 or not latent_scale > 0.0:
            raise ValueError("codec scales must be positive")
        self.arch = arch
        self.encoder = encoder
        self.decoder = decoder
        self.input_scale = float(input_scale)
        self.latent_scale = float(latent_scale)

    @property
    def input_shape(self) -> tuple[int, int]:
        return self.arch.input_shape

    @property
    def encoder_params(self) -> np.ndarray:
        return self.encoder.get_flat()

    @property
    def decoder_params(self) -> np.ndarray:
        return self.decoder.get_flat()

    @property
    def parts_per_grad(self) -> int:
        return 2 if self.arch.per_part else 1

    @property
    def latent_dim(self) -> int:
        """Length of one emitted latent tensor."""
        return self.arch.resolved_latent_dim()

    @property
    def total_latent_dim(self) -> int:
        return self.latent_dim * self.parts_per_grad

    def _check_grad(self, g: LoraGrad):
        if g.n != self.arch.n or g.r != self.arch.r:
            raise ValueError(
                f"gradient shape ({g.n}, {g.r}) does not match codec "
                f"arch ({self.arch.n}, {self.arch.r})"
            )

    def encode_rows(self, rows: np.ndarray) -> np.ndarray:
        return self.encoder.forward(rows / self.input_scale)

    def decode_rows(self, latents: np.ndarray) -> np.ndarray:
        return self.decoder.forward(latents) * self.input_scale

    def encode_parts(self, g: LoraGrad) -> tuple[np.ndarray, ...]:
        """Latent tensors for one gradient: one joint or an (A, B^T) pair."""
        self._check_grad(g)
        if self.arch.per_part:
            rows = np.stack([g.a.ravel(), g.b.T.ravel()])
            z = self.encode_rows(rows) / self.latent_scale
            return (z[0], z[1])
        block = np.hstack([g.a, g.b.T])
        z = self.encode_rows(block.reshape(1, -1)) / self.latent_scale
        return (z[0],)

    def decode_parts(self, latents: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
        """Invert encode_parts back to an (A, B) factor pair."""
        latents = [np.asarray(z, dtype=np.float64) for z in latents]
        if len(latents) != self.parts_per_grad:
            raise ValueError(
                f"expected {self.parts_per_grad} latent tensor(s), got {len(latents)}"
            )
        for z in latents:
            if z.shape != (self.latent_dim,):
                raise ValueError(
                    f"latent must have shape ({self.latent_dim},), got {z.shape}"
                )
        n, r = self.arch.n, self.arch.r
        if self.arch.per_part:
            out = self.decode_rows(np.stack(latents) * self.latent_scale)
            return out[0].reshape(n, r), out[1].reshape(n, r).T
        out = self.decode_rows(latents[0][None] * self.latent_scale)[0].reshape(n, 2 * r)
        return out[:, :r].copy(), out[:, r:].T.copy()

    def encode(self, g: LoraGrad) -> np.ndarray:
        """Single concatenated latent vector for one gradient."""
        return np.concatenate(self.encode_parts(g))

    def decode(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Invert encode. Rejects vectors of any other length."""
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (self.total_latent_dim,):
            raise ValueError(
                f"decoder expects shape ({self.total_latent_dim},), got {z.shape}"
            )
        if self.arch.per_part:
            return self.decode_parts((z[: self.latent_dim], z[self.latent_dim :]))
        return self.decode_parts((z,))


class IdentityCodec:
    """Lossless pass-through with the codec interface.

    Emits the raw factors (flattened) as its two "latents", so the
    downstream clip and noise stages act on each factor exactly as the
    uncompressed mechanism equations do. Not a CodecArch: it performs no
    compression, which the arch contract forbids.
    """

    def __init__(self, n: int, r: int):
        if n < 1 or r < 1 or r > n:
            raise ValueError(f"need 1 <= r <= n, got n={n}, r={r}")
        self.n, self.r = n, r

    @property
    def input_shape(self) -> tuple[int, int]:
        return (self.n, 2 * self.r)

    @property
    def parts_per_grad(self) -> int:
        return 2

    @property
    def latent_dim(self) -> int:
        return self.n * self.r

    @property
    def total_latent_dim(self) -> int:
        return 2 * self.n * self.r

    def encode_parts(self, g: LoraGrad) -> tuple[np.ndarray, np.ndarray]:
        if g.n != self.n or g.r != self.r:
            raise ValueError(
                f"gradient shape ({g.n}, {g.r}) does not match ({self.n}, {self.r})"
            )
        return g.a.ravel().copy(), g.b.ravel().copy()

    def decode_parts(self, latents: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
        latents = [np.asarray(z, dtype=np.float64) for z in latents]
        if len(latents) != 2 or any(z.shape != (self.latent_dim,) for z in latents):
            raise ValueError(f"expected two latents of shape ({self.latent_dim},)")
        return latents[0].reshape(self.n, self.r), latents[1].reshape(self.r, self.n)

    def encode(self, g: LoraGrad) -> np.ndarray:
        return np.concatenate(self.encode_parts(g))

    def decode(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (self.total_latent_dim,):
            raise ValueError(
                f"decoder expects shape ({self.total_latent_dim},), got {z.shape}"
            )
        return self.decode_parts((z[: self.latent_dim], z[self.latent_dim :]))


def encode(model, g: LoraGrad) -> np.ndarray:
    """Latent vector for one gradient under the given codec."""
    return model.encode(g)


def decode(model, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Factor pair decoded from a latent vector."""
    return model.decode(z)


# ---------------------------------------------------------------------------
# synthetic sampling


@dataclasses.dataclass
class SyntheticBatch:
    """Surrogate gradients drawn from stats, plus where they came from."""

    items: list[LoraGrad]
    source_keys: list[tuple[str, int, int]]  # (module_tag, layer, epoch) per item
    seed: int


def _cell_spots(stats: StatsBundle) -> list[tuple[str, int, int]]:
    spots = sorted({(k[1], k[2], k[3]) for k in stats.cells})
    if not spots:
        raise ValueError("stats bundle has no cells to sample from")
    return spots


def _check_cell(cell, what: str):
    if np.any(np.asarray(cell.std) < 0.0):
        raise ValueError(f"negative std in {what}")


def _draw_pair(bundle: StatsBundle, spot, n: int, r: int, rng: np.random.Generator):
    tag, layer, epoch = spot
    ca = bundle.cell("A", tag, layer, epoch)
    cb = bundle.cell("B", tag, layer, epoch)
    _check_cell(ca, f"A cell {spot}")
    _check_cell(cb, f"B cell {spot}")
    a = rng.normal(np.broadcast_to(np.asarray(ca.mean), (n, r)),
                   np.broadcast_to(np.asarray(ca.std), (n, r)))
    b = rng.normal(np.broadcast_to(np.asarray(cb.mean), (r, n)),
                   np.broadcast_to(np.asarray(cb.std), (r, n)))
    return a, b


def sample_synthetic(
    stats: StatsBundle, shape: tuple[int, int], count: int, seed: int = 0
) -> SyntheticBatch:
    """Draw count surrogate LoraGrads per (module, layer, epoch) cell group.

    Every entry of an item's A (resp. B) factor is i.i.d.
    Normal(mean, std^2) from that group's A (resp. B) cell.
    """
    n, r = shape
    if n < 1 or r < 1:
        raise ValueError("shape components must be >= 1")
    if count < 1:
        raise ValueError("count must be >= 1")
    if not stats.is_complete():
        raise ValueError("stats grid is incomplete")
    rng = np.random.default_rng([int(seed), 11])
    items, keys = [], []
    for spot in _cell_spots(stats):
        tag, layer, epoch = spot
        for _ in range(count):
            a, b = _draw_pair(stats, spot, n, r, rng)
            items.append(LoraGrad(a=a, b=b, layer=layer, module_tag=tag, epoch=epoch))
            keys.append(spot)
    return SyntheticBatch(items=items, source_keys=keys, seed=int(seed))


def _draw_blocks(
    bundles: Sequence[StatsBundle], n: int, r: int, count: int, rng: np.random.Generator
) -> np.ndarray:
    """Stacked [A | B^T] blocks from uniformly chosen cells; training feed."""
    spot_lists = [_cell_spots(b) for b in bundles]
    out = np.zeros((count, n, 2 * r))
    for i in range(count):
        bi = int(rng.integers(len(bundles))) if len(bundles) > 1 else 0
        bundle, spots = bundles[bi], spot_lists[bi]
        a, b = _draw_pair(bundle, spots[int(rng.integers(len(spots)))], n, r, rng)
        out[i, :, :r] = a
        out[i, :, r:] = b.T
    return out


def _blocks_to_inputs(arch: CodecArch, blocks: np.ndarray) -> np.ndarray:
    """Flatten stacked blocks into network rows (two rows per block when
    the codec runs per part)."""
    if blocks.ndim != 3 or blocks.shape[1:] != (arch.n, 2 * arch.r):
        raise ValueError(
            f"blocks must have shape (*, {arch.n}, {2 * arch.r}), got {blocks.shape}"
        )
    if not arch.per_part:
        return blocks.reshape(blocks.shape[0], -1)
    halves = np.concatenate([blocks[:, :, : arch.r], blocks[:, :, arch.r :]])
    return halves.reshape(halves.shape[0], -1)


# ---------------------------------------------------------------------------
# training


@dataclasses.dataclass
class CodecTrainResult:
    model: CodecModel
    initial_loss: float
    final_loss: float
    losses: list[float]
    steps: int


def reconstruction_loss(model: CodecModel, rows: np.ndarray) -> float:
    """Mean squared reconstruction error per entry over input rows."""
    out = model.decode_rows(model.encode_rows(rows))
    return float(np.mean((out - rows) ** 2))


def train_codec(
    arch: CodecArch,
    stats: StatsBundle | Sequence[StatsBundle] | None = None,
    steps: int = 2000,
    lr: float = 0.05,
    batch: int = 32,
    seed: int = 0,
    *,
    data: np.ndarray | None = None,
    holdout_size: int = 256,
    latent_noise: float = 0.0,
) -> CodecTrainResult:
    """Fit a codec with plain SGD on the squared reconstruction error.

    Training rows come from synthetic stats draws; passing `data`
    (stacked real blocks, shape (N, n, 2r)) instead trains on real
    gradients, which is the informative-prior baseline. A non-finite
    loss aborts with TrainingDivergedError carrying the last finite
    parameter state.

    latent_noise > 0 perturbs the latent during training with Gaussian
    noise of per-entry std latent_noise * rms(latent). Matching the
    ratio to the release mechanism's noise-to-signal level teaches the
    decoder to average the perturbation away instead of amplifying it;
    gradients pass through the additive noise unchanged.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if not lr > 0.0:
        raise ValueError(f"lr must be positive, got {lr}")
    if batch < 1 or holdout_size < 1:
        raise ValueError("batch and holdout_size must be >= 1")
    if latent_noise < 0.0 or not math.isfinite(latent_noise):
        raise ValueError(f"latent_noise must be finite and nonnegative, got {latent_noise}")
    if (stats is None) == (data is None):
        raise ValueError("pass exactly one of stats or data")
    if stats is not None:
        bundles = [stats] if isinstance(stats, StatsBundle) else list(stats)
        if not bundles:
            raise ValueError("need at least one stats bundle")
    else:
        data = np.asarray(data, dtype=np.float64)

    rng = np.random.default_rng([int(seed), 23])

    def draw(count: int) -> np.ndarray:
        if data is not None:
            idx = rng.integers(len(data), size=count)
            return _blocks_to_inputs(arch, data[idx])
        return _blocks_to_inputs(arch, _draw_blocks(bundles, arch.n, arch.r, count, rng))

    model = build_codec(arch, seed=seed)
    probe = draw(max(batch, 64))
    rms = float(np.sqrt(np.mean(probe**2)))
    if rms > 0.0 and math.isfinite(rms):
        model.input_scale = rms
    holdout = draw(holdout_size)
    initial_loss = reconstruction_loss(model, holdout)

    losses = []  # per-step training loss, measured in standardized space
    enc, dec = model.encoder, model.decoder
    checkpoint = (enc.get_flat(), dec.get_flat())
    for step in range(steps):
        x = draw(batch) / model.input_scale
        enc.zero_grad()
        dec.zero_grad()
        z = enc.forward(x)
        if latent_noise > 0.0:
            z_rms = float(np.sqrt(np.mean(z**2)))
            if z_rms > 0.0 and math.isfinite(z_rms):
                z = z + rng.normal(0.0, latent_noise * z_rms, size=z.shape)
        out = dec.forward(z)
        diff = out - x
        with np.errstate(over="ignore"):  # overflow to inf IS the divergence signal
            loss = float(np.mean(diff**2))
        if not math.isfinite(loss):
            raise TrainingDivergedError(
                f"reconstruction loss became non-finite at step {step}",
                step=step,
                checkpoint=checkpoint,
            )
        checkpoint = (enc.get_flat(), dec.get_flat())
        gy = 2.0 * diff / diff.size
        gz = dec.backward(gy)
        enc.backward(gz)
        dec.sgd_step(lr)
        enc.sgd_step(lr)
        losses.append(loss)

    final_loss = reconstruction_loss(model, holdout)
    if not math.isfinite(final_loss):
        raise TrainingDivergedError(
            "held-out loss became non-finite", step=steps, checkpoint=checkpoint
        )
    z = model.encode_rows(holdout)
    z_norm = float(np.mean(np.linalg.norm(z, axis=1)))
    if z_norm > 0.0 and math.isfinite(z_norm):
        model.latent_scale = z_norm
    return CodecTrainResult(
        model=model,
        initial_loss=initial_loss,
        final_loss=final_loss,
        losses=losses,
        steps=steps,
    )


# ---------------------------------------------------------------------------
# artifact split and persistence


def split_and_dispatch(model: CodecModel, fingerprint: str | None = None) -> tuple[dict, dict]:
    """Split a codec into independently shippable encoder/decoder halves."""

    def half(role: str, net: Network) -> dict:
        return {
            "format": CODEC_FORMAT,
            "role": role,
            "arch": model.arch.to_dict(),
            "fingerprint": fingerprint,
            "input_scale": model.input_scale,
            "latent_scale": model.latent_scale,
            "params": net.get_flat().tolist(),
        }

    return half("encoder", model.encoder), half("decoder", model.decoder)


def save_artifact(artifact: dict, path: str):
    with open(path, "w") as f:
        json.dump(artifact, f)


def load_artifact(path: str, expect_role: str | None = None) -> dict:
    if not os.path.exists(path):
        raise MissingArtifactError(f"codec artifact not found: {path}")
    with open(path) as f:
        try:
            artifact = json.load(f)
        except json.JSONDecodeError as e:
            raise MissingArtifactError(f"unreadable codec artifact {path}: {e}") from e
    keys = ("format", "role", "arch", "params", "fingerprint", "input_scale",
            "latent_scale")
    for key in keys:
        if key not in artifact:
            raise MissingArtifactError(f"codec artifact {path} lacks key {key!r}")
    if artifact["format"] != CODEC_FORMAT:
        raise MissingArtifactError(
            f"codec artifact {path} has format {artifact['format']!r}, "
            f"expected {CODEC_FORMAT!r}"
        )
    if expect_role is not None and artifact["role"] != expect_role:
        raise MissingArtifactError(
            f"codec artifact {path} holds a {artifact['role']}, expected {expect_role}"
        )
    return artifact


def model_from_artifacts(enc_artifact: dict, dec_artifact: dict) -> CodecModel:
    """Recompose a codec from its two halves. Parameters must match the
    arch exactly; the halves must agree on arch and fingerprint."""
    if enc_artifact["role"] != "encoder" or dec_artifact["role"] != "decoder":
        raise MissingArtifactError("artifact roles are swapped or duplicated")
    if enc_artifact["arch"] != dec_artifact["arch"]:
        raise MissingArtifactError("encoder and decoder arch descriptors disagree")
    if enc_artifact["fingerprint"] != dec_artifact["fingerprint"]:
        raise MissingArtifactError("encoder and decoder fingerprints disagree")
    for scale_key in ("input_scale", "latent_scale"):
        if enc_artifact[scale_key] != dec_artifact[scale_key]:
            raise MissingArtifactError(f"encoder and decoder {scale_key}s disagree")
    try:
        arch = CodecArch.from_dict(enc_artifact["arch"])
    except (TypeError, ValueError) as e:
        raise MissingArtifactError(f"bad arch descriptor: {e}") from e
    model = build_codec(arch, seed=0)
    model.input_scale = float(enc_artifact["input_scale"])
    model.latent_scale = float(enc_artifact["latent_scale"])
    for net, artifact, role in (
        (model.encoder, enc_artifact, "encoder"),
        (model.decoder, dec_artifact, "decoder"),
    ):
        params = np.asarray(artifact["params"], dtype=np.float64)
        if params.shape != (net.n_params,):
            raise MissingArtifactError(
                f"{role} parameter count {params.size} does not match arch "
                f"({net.n_params})"
            )
        net.set_flat(params)
    return model
