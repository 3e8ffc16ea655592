"""Federated orchestration of the private low-rank update pipeline.

One run wires everything together: Poisson client sampling, local
adapter training, the encode/clip/noise/decode/aggregate mechanism,
server folding, and dual privacy accounting. Four modes cover the
baselines:

  * "none": plain federated averaging of adapter products, no privacy
    machinery (the LoRA baseline).
  * "identity": the full mechanism with the lossless pass-through codec
    (clip and noise act directly on the factors).
  * "random-prior": codec pretrained on synthetic gradients drawn from
    transmitted statistics only.
  * "real-gradient": codec pretrained on collected real gradients (the
    informative-prior ablation; clients leak raw factors in pretraining).

Empty Poisson draws are kept as recorded no-op rounds: the model and
the privacy trace are unchanged, and the accountant advances only on
rounds that actually release data.
"""

import dataclasses
import math

import numpy as np

from .accounting import (
    DEFAULT_ORDERS,
    PrivacyParams,
    calibrate_sigma,
    gdp_epsilon_total,
    rdp_subsampled,
    rdp_to_dp,
)
from .codec import CodecArch, CodecModel, CodecTrainResult, IdentityCodec, train_codec
from .errors import MissingArtifactError
from .lora import LoraGrad
from .mechanism import MechanismPipeline, run_pipeline
from .stats import EstimatorHyper, GridShape, StatsBundle, ingest_epoch
from .toytask import Slot, ToyModel, ToyTask, ToyTaskSpec, make_toy_task

MODES = ("none", "identity", "random-prior", "real-gradient")

MODEL_FORMAT = "fedcodec-model/1"

# slack on the budget-stop comparison; calibrated sigmas reproduce the
# budget only to bisection accuracy
_BUDGET_TOL = 1e-9


class ClientFailure(Exception):
    """A client's local loss went non-finite; the round records it."""

    def __init__(self, client_id: int, loss: float):
        super().__init__(f"client {client_id} local loss is not finite ({loss})")
        self.client_id = client_id
        self.loss = loss


@dataclasses.dataclass(frozen=True)
class FedConfig:
    """Everything one simulation needs; value-identical configs give
    bitwise-identical runs.

    Exactly one noise specification applies: an explicit sigma, or an
    (eps, delta) budget that calibrate_sigma turns into sigma over
    rounds_max composition steps. Neither means sigma = 0.
    """

    task: ToyTaskSpec = dataclasses.field(default_factory=ToyTaskSpec)
    mode: str = "random-prior"
    sample_rate: float = 1.0
    rounds_max: int = 20
    clip: float = 1.0
    sigma: float | None = None
    eps: float | None = None
    delta: float | None = None
    lr_local: float = 0.05
    lr_server: float | tuple[float, ...] = 1.0
    local_epochs: int = 1
    batch_size: int = 20
    adapter_scale: float = 0.02
    normalize_transmit: bool = True
    resample_empty: bool = False
    aggregate_latents: bool = False
    pretrain_epochs: int = 4
    codec_profile: str = "mlp-desk"
    codec_latent_dim: int | None = None
    codec_hidden_dim: int | None = None
    codec_per_part: bool = False
    codec_train_steps: int = 800
    codec_lr: float = 0.5
    codec_batch: int = 32
    codec_latent_noise: float = 0.0
    estimator: EstimatorHyper = dataclasses.field(default_factory=EstimatorHyper)
    stats_elementwise: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not (0.0 < self.sample_rate <= 1.0):
            raise ValueError(f"sample_rate must lie in (0, 1], got {self.sample_rate}")
        if self.rounds_max < 1:
            raise ValueError("rounds_max must be >= 1")
        if not self.clip > 0.0:
            raise ValueError(f"clip must be positive, got {self.clip}")
        if self.sigma is not None and self.eps is not None:
            raise ValueError("give sigma or an (eps, delta) budget, not both")
        if self.sigma is not None and self.sigma < 0.0:
            raise ValueError("sigma must be nonnegative")
        if self.eps is not None and not (self.eps > 0.0 and math.isfinite(self.eps)):
            raise ValueError(
                "eps must be positive and finite (run without a budget for "
                "the non-private baseline)"
            )
        if self.delta is not None and not (0.0 < self.delta < 1.0):
            raise ValueError("delta must lie in (0, 1)")
        if self.mode == "none" and (self.eps is not None or (self.sigma or 0.0) > 0.0):
            raise ValueError("mode 'none' runs without the privacy mechanism")
        if not self.lr_local > 0.0:
            raise ValueError("lr_local must be positive")
        sched = self.server_lr_schedule()
        if not sched or any(not lr > 0.0 for lr in sched):
            raise ValueError("server learning rates must be positive")
        if self.local_epochs < 1 or self.batch_size < 1 or self.pretrain_epochs < 1:
            raise ValueError("local_epochs, batch_size, pretrain_epochs must be >= 1")
        if not self.adapter_scale > 0.0:
            raise ValueError("adapter_scale must be positive")
        if self.codec_train_steps < 1 or self.codec_batch < 1:
            raise ValueError("codec_train_steps and codec_batch must be >= 1")
        if not self.codec_lr > 0.0:
            raise ValueError("codec_lr must be positive")
        if self.codec_latent_noise < 0.0 or not math.isfinite(self.codec_latent_noise):
            raise ValueError("codec_latent_noise must be finite and nonnegative")

    def server_lr_schedule(self) -> tuple[float, ...]:
        if isinstance(self.lr_server, (int, float)):
            return (float(self.lr_server),)
        return tuple(float(x) for x in self.lr_server)

    def server_lr(self, round_index: int) -> float:
        sched = self.server_lr_schedule()
        return sched[min(round_index, len(sched) - 1)]

    def resolved_delta(self) -> float:
        if self.delta is not None:
            return self.delta
        return 1.0 / self.task.train_samples

    def resolved_sigma(self) -> float:
        if self.sigma is not None:
            return float(self.sigma)
        if self.eps is not None:
            return calibrate_sigma(
                self.eps, self.resolved_delta(), self.sample_rate, self.rounds_max
            )
        return 0.0

    def codec_arch(self) -> CodecArch:
        return CodecArch(
            n=self.task.n,
            r=self.task.r,
            profile=self.codec_profile,
            latent_dim=self.codec_latent_dim,
            hidden_dim=self.codec_hidden_dim,
            per_part=self.codec_per_part,
        )

    def privacy_params(self, rounds: int | None = None) -> PrivacyParams:
        return PrivacyParams(
            sample_rate=self.sample_rate,
            rounds=self.rounds_max if rounds is None else rounds,
            delta=self.resolved_delta(),
            eps=self.eps,
            sigma=self.resolved_sigma(),
            clip=None if math.isinf(self.clip) else self.clip,
            population=self.task.clients,
        )


@dataclasses.dataclass
class ClientState:
    """One client's shard and local model (base shared with the server)."""

    client_id: int
    x: np.ndarray
    y: np.ndarray
    model: ToyModel


@dataclasses.dataclass(frozen=True)
class RoundRecord:
    round: int
    selected: tuple[int, ...]
    failures: tuple[int, ...]
    train_loss: float | None  # mean local loss; None on empty rounds
    eval_accuracy: float
    cum_eps_gdp: float
    cum_eps_rdp: float
    payload_bytes: int


@dataclasses.dataclass(frozen=True)
class GradientLogEntry:
    """One logged factor tensor, keyed the way histograms group them."""

    layer: int
    module: str
    epoch: int
    part: str  # "a" or "b"
    values: np.ndarray


@dataclasses.dataclass
class FedRunRecord:
    """Everything a finished run reports. status is one of "completed",
    "budget-exhausted", or "diverged"."""

    status: str
    mode: str
    seed: int
    sigma: float
    delta: float
    eps_budget: float | None
    baseline_accuracy: float
    final_accuracy: float
    composition_steps: int
    rounds: list[RoundRecord]

    @property
    def final_eps_gdp(self) -> float:
        return self.rounds[-1].cum_eps_gdp if self.rounds else 0.0

    @property
    def final_eps_rdp(self) -> float:
        return self.rounds[-1].cum_eps_rdp if self.rounds else 0.0


def sample_clients(m: int, p: float, rng: np.random.Generator) -> tuple[int, ...]:
    """Poisson sampling: each of m clients enters independently with
    probability p. May be empty."""
    if m < 1:
        raise ValueError("need at least one client")
    if not (0.0 < p <= 1.0):
        raise ValueError(f"sampling probability must lie in (0, 1], got {p}")
    mask = rng.random(m) < p
    return tuple(int(i) for i in np.nonzero(mask)[0])


def local_step(
    state: ClientState, batch: tuple[np.ndarray, np.ndarray], epoch: int = 0
) -> tuple[float, dict[Slot, LoraGrad]]:
    """Exact adapter gradients of the mean local loss on one batch."""
    x, y = batch
    loss, grads = state.model.loss_and_grads(x, y)
    if not math.isfinite(loss):
        raise ClientFailure(state.client_id, loss)
    packaged = {
        slot: LoraGrad(
            a=grads[slot][0], b=grads[slot][1], layer=slot[0], module_tag=slot[1],
            epoch=epoch,
        )
        for slot in grads
    }
    return loss, packaged


@dataclasses.dataclass
class LocalResult:
    client_id: int
    mean_loss: float
    transmit: dict[Slot, LoraGrad]  # final factors, one per adapted weight
    epoch_snapshots: list[dict[Slot, LoraGrad]]


def _rescale_to_norm(g: LoraGrad, target: float) -> LoraGrad:
    """Both factors rescaled to Frobenius norm target (zeros untouched).

    The product direction is preserved; only its magnitude changes, and
    the server learning rate absorbs that. Saturating the clip bound
    this way maximizes signal under the mechanism's fixed noise floor.
    """
    na, nb = np.linalg.norm(g.a), np.linalg.norm(g.b)
    a = g.a * (target / na) if na > 0.0 else g.a
    b = g.b * (target / nb) if nb > 0.0 else g.b
    return LoraGrad(a=a, b=b, layer=g.layer, module_tag=g.module_tag, epoch=g.epoch)


def run_local_training(
    state: ClientState, cfg: FedConfig, rng: np.random.Generator, epochs: int
) -> LocalResult:
    """Fresh adapters trained for the given number of local epochs.

    The transmitted payload is the final factor pair per adapted weight
    (product = locally accumulated update, since B starts at zero);
    end-of-epoch snapshots feed the statistics stream. With
    normalize_transmit and a finite clip bound, every outgoing factor is
    rescaled to sit exactly on the clip sphere, stats included, so the
    codec always sees the distribution that is actually transmitted.
    """
    model = state.model
    model.init_adapters(rng, cfg.adapter_scale)
    losses = []
    snapshots = []
    count = state.x.shape[0]
    normalize = cfg.normalize_transmit and math.isfinite(cfg.clip) and cfg.mode != "none"
    for epoch in range(epochs):
        order = rng.permutation(count)
        for start in range(0, count, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads = local_step(state, (state.x[idx], state.y[idx]), epoch)
            losses.append(loss)
            model.sgd_adapters(
                {slot: (g.a, g.b) for slot, g in grads.items()}, cfg.lr_local
            )
        snapshot = model.adapter_grads_as_lora(epoch)
        if normalize:
            snapshot = {
                slot: _rescale_to_norm(g, cfg.clip) for slot, g in snapshot.items()
            }
        snapshots.append(snapshot)
    return LocalResult(
        client_id=state.client_id,
        mean_loss=float(np.mean(losses)),
        transmit=snapshots[-1],
        epoch_snapshots=snapshots,
    )


# ---------------------------------------------------------------------------
# pretraining: statistics collection and codec fitting


@dataclasses.dataclass
class PretrainResult:
    bundles: list[StatsBundle]
    codec: CodecModel | IdentityCodec | None
    train_result: CodecTrainResult | None
    real_blocks: np.ndarray | None  # (N, n, 2r); only the ablation keeps them


def _grad_block(g: LoraGrad) -> np.ndarray:
    return np.hstack([g.a, g.b.T])


def pretrain(task: ToyTask, cfg: FedConfig) -> PretrainResult:
    """Per-client statistics streaming plus server-side codec fitting.

    Every client trains adapters locally for pretrain_epochs epochs and
    streams scalar stats of its end-of-epoch factors. What the server
    then fits on depends on the mode: synthetic draws from the stats
    (random-prior), the collected raw factors (real-gradient), or
    nothing (identity / none).
    """
    spec = task.spec
    if cfg.mode == "none":
        return PretrainResult([], None, None, None)
    if cfg.mode == "identity":
        return PretrainResult([], IdentityCodec(spec.n, spec.r), None, None)

    shape = GridShape(
        layers=spec.layers, module_tags=spec.module_tags, epochs=cfg.pretrain_epochs
    )
    bundles = []
    blocks = []
    for cid in range(spec.clients):
        x, y = task.shards[cid]
        state = ClientState(cid, x, y, ToyModel(task))
        rng = np.random.default_rng([cfg.seed, 31, cid])
        result = run_local_training(state, cfg, rng, cfg.pretrain_epochs)
        bundle = StatsBundle(
            cfg.estimator,
            shape,
            client_id=f"client-{cid}",
            elementwise=cfg.stats_elementwise,
        )
        for snapshot in result.epoch_snapshots:
            bundle = ingest_epoch(bundle, snapshot.values())
            blocks.extend(_grad_block(g) for g in snapshot.values())
        bundles.append(bundle)

    arch = cfg.codec_arch()
    if cfg.mode == "random-prior":
        trained = train_codec(
            arch,
            stats=bundles,
            steps=cfg.codec_train_steps,
            lr=cfg.codec_lr,
            batch=cfg.codec_batch,
            seed=cfg.seed,
            latent_noise=cfg.codec_latent_noise,
        )
        return PretrainResult(bundles, trained.model, trained, None)
    real = np.stack(blocks)
    trained = train_codec(
        arch,
        data=real,
        steps=cfg.codec_train_steps,
        lr=cfg.codec_lr,
        batch=cfg.codec_batch,
        seed=cfg.seed,
        latent_noise=cfg.codec_latent_noise,
    )
    return PretrainResult(bundles, trained.model, trained, real)


# ---------------------------------------------------------------------------
# the round loop


class FedSimulator:
    """Holds one run's state; run() drives it to completion."""

    def __init__(
        self,
        cfg: FedConfig,
        task: ToyTask | None = None,
        codec: CodecModel | IdentityCodec | None = None,
        log_gradients: bool = False,
    ):
        self.cfg = cfg
        self.task = task if task is not None else make_toy_task(cfg.task, cfg.seed)
        if self.task.spec != cfg.task:
            raise ValueError("task does not match the configured task spec")
        self.sigma = cfg.resolved_sigma()
        self.delta = cfg.resolved_delta()

        if codec is None and cfg.mode in ("random-prior", "real-gradient"):
            codec = pretrain(self.task, cfg).codec
        if codec is None and cfg.mode == "identity":
            codec = IdentityCodec(cfg.task.n, cfg.task.r)
        if cfg.mode == "none":
            codec = None
        if codec is not None and codec.input_shape != (cfg.task.n, 2 * cfg.task.r):
            raise ValueError(
                f"codec input shape {codec.input_shape} does not match the "
                f"model's factor shapes ({cfg.task.n}, {2 * cfg.task.r})"
            )
        self.codec = codec

        self.server = ToyModel(self.task)
        self.clients = []
        for cid in range(cfg.task.clients):
            x, y = self.task.shards[cid]
            m = ToyModel(self.task)
            m.base = self.server.base  # broadcast by reference
            self.clients.append(ClientState(cid, x, y, m))

        # one latent (or factor) tensor count per transmitted gradient
        if self.codec is None:
            self._scalars_per_slot = 2 * cfg.task.n * cfg.task.r
        else:
            self._scalars_per_slot = self.codec.total_latent_dim
        self._orders = np.asarray(DEFAULT_ORDERS, dtype=np.float64)
        self._rho1 = None
        if self.sigma > 0.0:
            self._rho1 = np.array(
                [rdp_subsampled(a, self.sigma, cfg.sample_rate) for a in self._orders]
            )
        self.log_gradients = log_gradients
        self.gradient_log: list[GradientLogEntry] = []

    def _cum_eps(self, steps: int) -> tuple[float, float]:
        """Cumulative (gdp, rdp) epsilon after the given composition steps."""
        if steps == 0:
            return 0.0, 0.0
        if self.sigma == 0.0:
            return math.inf, math.inf
        gdp = gdp_epsilon_total(
            self.sigma,
            PrivacyParams(
                sample_rate=self.cfg.sample_rate, rounds=steps, delta=self.delta
            ),
        )
        std, imp = rdp_to_dp(steps * self._rho1, self.delta, self._orders)
        return gdp, min(std.eps, imp.eps)

    def run_round(self, t: int, steps_before: int) -> tuple[RoundRecord, int]:
        """One communication round. Returns the record row and the new
        composition step count (unchanged when the draw was empty)."""
        cfg = self.cfg
        rng_sample = np.random.default_rng([cfg.seed, 7, t])
        selected = sample_clients(cfg.task.clients, cfg.sample_rate, rng_sample)
        if cfg.resample_empty:
            while not selected:
                rng_sample = np.random.default_rng(
                    [cfg.seed, 7, t, int(rng_sample.integers(2**31))]
                )
                selected = sample_clients(cfg.task.clients, cfg.sample_rate, rng_sample)

        if not selected:
            gdp, rdp = self._cum_eps(steps_before)
            return (
                RoundRecord(
                    round=t,
                    selected=(),
                    failures=(),
                    train_loss=None,
                    eval_accuracy=self.server.accuracy(self.task.eval_x, self.task.eval_y),
                    cum_eps_gdp=gdp,
                    cum_eps_rdp=rdp,
                    payload_bytes=0,
                ),
                steps_before,
            )

        locals_ok: list[LocalResult] = []
        failures = []
        for cid in selected:
            rng = np.random.default_rng([cfg.seed, 101, t, cid])
            try:
                locals_ok.append(
                    run_local_training(self.clients[cid], cfg, rng, cfg.local_epochs)
                )
            except ClientFailure:
                failures.append(cid)

        if not locals_ok:
            # every sampled client failed: nothing is released, so the
            # accountant does not advance
            gdp, rdp = self._cum_eps(steps_before)
            return (
                RoundRecord(
                    round=t,
                    selected=selected,
                    failures=tuple(failures),
                    train_loss=None,
                    eval_accuracy=self.server.accuracy(self.task.eval_x, self.task.eval_y),
                    cum_eps_gdp=gdp,
                    cum_eps_rdp=rdp,
                    payload_bytes=0,
                ),
                steps_before,
            )

        if self.log_gradients:
            for res in locals_ok:
                for epoch, snapshot in enumerate(res.epoch_snapshots):
                    for (layer, module), grad in snapshot.items():
                        self.gradient_log.append(
                            GradientLogEntry(layer, module, epoch, "a", grad.a.copy())
                        )
                        self.gradient_log.append(
                            GradientLogEntry(layer, module, epoch, "b", grad.b.copy())
                        )

        slots = list(self.server.spec.slots)
        updates: dict[Slot, np.ndarray] = {}
        if cfg.mode == "none":
            for slot in slots:
                updates[slot] = np.mean(
                    [res.transmit[slot].product() for res in locals_ok], axis=0
                )
        else:
            # Uploads were pinned to norm C by the transmit protocol, so the
            # server may restore that public norm after the lossy decode.
            restore = (
                cfg.clip
                if cfg.normalize_transmit and math.isfinite(cfg.clip)
                else None
            )
            for si, slot in enumerate(slots):
                pipe = MechanismPipeline(
                    codec=self.codec,
                    clip_c=cfg.clip,
                    sigma=self.sigma,
                    seed=(cfg.seed, 13, t, si),
                    aggregate_latents=cfg.aggregate_latents,
                    restore_norm=restore,
                )
                inputs = {res.client_id: res.transmit[slot] for res in locals_ok}
                updates[slot] = run_pipeline(pipe, inputs)

        self.server.fold_update(updates, cfg.server_lr(t))
        steps_after = steps_before + 1
        gdp, rdp = self._cum_eps(steps_after)
        payload = len(locals_ok) * len(slots) * self._scalars_per_slot * 8
        return (
            RoundRecord(
                round=t,
                selected=selected,
                failures=tuple(failures),
                train_loss=float(np.mean([res.mean_loss for res in locals_ok])),
                eval_accuracy=self.server.accuracy(self.task.eval_x, self.task.eval_y),
                cum_eps_gdp=gdp,
                cum_eps_rdp=rdp,
                payload_bytes=payload,
            ),
            steps_after,
        )

    def run(self) -> FedRunRecord:
        cfg = self.cfg
        baseline = self.server.accuracy(self.task.eval_x, self.task.eval_y)
        rounds: list[RoundRecord] = []
        status = "completed"
        steps = 0
        for t in range(cfg.rounds_max):
            if cfg.eps is not None and self.sigma > 0.0:
                gdp_next, _ = self._cum_eps(steps + 1)
                if gdp_next > cfg.eps + _BUDGET_TOL:
                    status = "budget-exhausted"
                    break
            record, steps = self.run_round(t, steps)
            rounds.append(record)
            if not self._server_finite():
                status = "diverged"
                break
        final = self.server.accuracy(self.task.eval_x, self.task.eval_y)
        return FedRunRecord(
            status=status,
            mode=cfg.mode,
            seed=cfg.seed,
            sigma=self.sigma,
            delta=self.delta,
            eps_budget=cfg.eps,
            baseline_accuracy=baseline,
            final_accuracy=final,
            composition_steps=steps,
            rounds=rounds,
        )

    def _server_finite(self) -> bool:
        if not all(np.all(np.isfinite(w)) for w in self.server.base.values()):
            return False
        loss = self.server.loss(self.task.eval_x, self.task.eval_y)
        return math.isfinite(loss)


def run(
    cfg: FedConfig,
    task: ToyTask | None = None,
    codec: CodecModel | IdentityCodec | None = None,
    log_gradients: bool = False,
) -> FedRunRecord:
    """Build a simulator (pretraining inline when the mode needs a codec
    and none is supplied) and drive it to completion."""
    return FedSimulator(cfg, task=task, codec=codec, log_gradients=log_gradients).run()


def centralized_config(cfg: FedConfig) -> FedConfig:
    """The single-client pooled-data variant of a config: all shards in
    one client, every round selects it, no privacy machinery."""
    pooled = dataclasses.replace(
        cfg.task,
        clients=1,
        samples_per_client=cfg.task.train_samples,
    )
    return dataclasses.replace(
        cfg,
        task=pooled,
        mode="none",
        sample_rate=1.0,
        sigma=None,
        eps=None,
        clip=math.inf,
    )


# ---------------------------------------------------------------------------
# model checkpoints (same container shape the codec artifacts use)


def model_checkpoint(model: ToyModel, fingerprint: str | None = None) -> dict:
    spec = model.spec
    params = np.concatenate(
        [model.base[slot].ravel() for slot in spec.slots] + [model.head.ravel()]
    )
    arch = dataclasses.asdict(spec)
    arch["module_tags"] = list(spec.module_tags)
    return {
        "format": MODEL_FORMAT,
        "role": "server-model",
        "arch": arch,
        "fingerprint": fingerprint,
        "params": params.tolist(),
    }


def restore_model_checkpoint(artifact: dict, task: ToyTask) -> ToyModel:
    for key in ("format", "role", "arch", "params", "fingerprint"):
        if key not in artifact:
            raise MissingArtifactError(f"model checkpoint lacks key {key!r}")
    if artifact["format"] != MODEL_FORMAT:
        raise MissingArtifactError(
            f"model checkpoint has format {artifact['format']!r}, "
            f"expected {MODEL_FORMAT!r}"
        )
    arch = dict(artifact["arch"])
    arch["module_tags"] = tuple(arch.get("module_tags", ()))
    if ToyTaskSpec(**arch) != task.spec:
        raise MissingArtifactError("model checkpoint was built for a different task")
    model = ToyModel(task)
    params = np.asarray(artifact["params"], dtype=np.float64)
    n, classes = task.spec.n, task.spec.classes
    need = len(task.spec.slots) * n * n + n * classes
    if params.shape != (need,):
        raise MissingArtifactError(
            f"model checkpoint carries {params.size} parameters, expected {need}"
        )
    pos = 0
    for slot in task.spec.slots:
        model.base[slot] = params[pos : pos + n * n].reshape(n, n).copy()
        pos += n * n
    model.head = params[pos:].reshape(n, classes).copy()
    return model
