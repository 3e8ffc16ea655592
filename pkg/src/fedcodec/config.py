"""Declarative run configuration: one JSON document drives every command.

The document has optional sections; each command validates only the
sections it needs, but every key anywhere in the document must be known
(fail closed). Numeric sanity checks live on the bound dataclasses; this
module only turns the parse failures into ConfigError so the command
line can map them to one exit code.
"""

import dataclasses
import hashlib
import json
import math
import os

from .accounting import PrivacyParams
from .errors import ConfigError
from .fedsim import FedConfig
from .stats import EstimatorHyper
from .toytask import ToyTaskSpec

DELTA_MODES = ("one-over-n", "fixed")
DEFAULT_FIXED_DELTA = 1e-5
DEFAULT_EPS_GRID = (8.0, 4.0, 2.0, 1.0, 0.5, 0.25)

_TOP_KEYS = {"seed", "out_dir", "task", "federation", "estimator", "accountant", "payload"}


@dataclasses.dataclass(frozen=True)
class AccountantConfig:
    """Inputs for the calibration table.

    eps entries are the budgets to calibrate sigma for; delta is the
    fixed-delta value and population the one-over-n denominator, with
    the active convention chosen at command time via delta_mode.
    """

    eps: tuple[float, ...] = DEFAULT_EPS_GRID
    sample_rate: float = 1.0
    rounds: int = 1
    delta: float | None = None
    population: int | None = None
    clients: int | None = None
    clip: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "eps", tuple(float(e) for e in self.eps))
        if not self.eps:
            raise ValueError("eps grid must be nonempty")
        if any(not e > 0.0 for e in self.eps):
            raise ValueError("eps budgets must be positive")

    def resolved_delta(self, delta_mode: str) -> float:
        if delta_mode not in DELTA_MODES:
            raise ConfigError(f"delta mode must be one of {DELTA_MODES}, got {delta_mode!r}")
        if delta_mode == "one-over-n":
            if self.population is None:
                raise ConfigError("delta mode 'one-over-n' needs accountant.population")
            return 1.0 / self.population
        if self.delta is not None:
            return self.delta
        return DEFAULT_FIXED_DELTA

    def privacy_params(self, delta_mode: str) -> PrivacyParams:
        return PrivacyParams(
            sample_rate=self.sample_rate,
            rounds=self.rounds,
            delta=self.resolved_delta(delta_mode),
            clip=self.clip,
            clients=self.clients,
            population=self.population,
        )


@dataclasses.dataclass(frozen=True)
class PayloadSpec:
    """Transmission-count model for one fine-tuning deployment.

    Raw mode ships both factors of every adapted weight each epoch,
    stats mode ships one (mean, std) pair per factor instead.
    """

    n: int
    r: int
    modules: int
    layers: int
    epochs: int
    parts: int = 2
    bytes_per_scalar: int = 8

    def __post_init__(self):
        for name in ("n", "r", "modules", "layers", "epochs", "parts", "bytes_per_scalar"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def cells(self) -> int:
        return self.parts * self.modules * self.layers * self.epochs

    @property
    def raw_count(self) -> int:
        return self.n * self.r * self.cells

    @property
    def stats_count(self) -> int:
        return 2 * self.cells

    @property
    def ratio(self) -> float:
        return self.stats_count / self.raw_count

    def as_row(self) -> dict:
        return {
            "n": self.n,
            "r": self.r,
            "parts": self.parts,
            "modules": self.modules,
            "layers": self.layers,
            "epochs": self.epochs,
            "raw_count": self.raw_count,
            "stats_count": self.stats_count,
            "raw_bytes": self.raw_count * self.bytes_per_scalar,
            "stats_bytes": self.stats_count * self.bytes_per_scalar,
            "ratio": self.ratio,
        }


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """Bound form of the document; sections a command ignores stay None."""

    seed: int = 0
    out_dir: str = "out"
    task: ToyTaskSpec | None = None
    fed: FedConfig | None = None
    estimator: EstimatorHyper = dataclasses.field(default_factory=EstimatorHyper)
    accountant: AccountantConfig | None = None
    payload: PayloadSpec | None = None

    def require_fed(self) -> FedConfig:
        if self.fed is None:
            raise ConfigError("this command needs a 'federation' section (and its 'task')")
        return self.fed

    def require_accountant(self) -> AccountantConfig:
        if self.accountant is None:
            raise ConfigError("this command needs an 'accountant' section")
        return self.accountant

    def require_payload(self) -> PayloadSpec:
        if self.payload is None:
            raise ConfigError("this command needs a 'payload' section")
        return self.payload


def _bind(section: dict, cls, where: str, extra: dict | None = None):
    """Instantiate a dataclass from a JSON section, rejecting unknown keys."""
    if not isinstance(section, dict):
        raise ConfigError(f"{where}: expected an object, got {type(section).__name__}")
    extra = extra or {}
    allowed = {f.name for f in dataclasses.fields(cls)} - set(extra)
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    try:
        return cls(**section, **extra)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def parse_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError(f"config root must be an object, got {type(doc).__name__}")
    unknown = sorted(set(doc) - _TOP_KEYS)
    if unknown:
        raise ConfigError(f"config: unknown key(s) {unknown}")

    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError(f"seed must be an integer, got {seed!r}")
    out_dir = doc.get("out_dir", "out")
    if not isinstance(out_dir, str) or not out_dir:
        raise ConfigError("out_dir must be a nonempty string")

    estimator = EstimatorHyper()
    if "estimator" in doc:
        estimator = _bind(doc["estimator"], EstimatorHyper, "estimator")

    task = None
    if "task" in doc:
        section = dict(doc["task"]) if isinstance(doc["task"], dict) else doc["task"]
        if isinstance(section, dict) and "module_tags" in section:
            section["module_tags"] = tuple(section["module_tags"])
        task = _bind(section, ToyTaskSpec, "task")

    fed = None
    if "federation" in doc:
        if task is None:
            raise ConfigError("a 'federation' section needs a 'task' section")
        section = dict(doc["federation"]) if isinstance(doc["federation"], dict) else doc["federation"]
        if isinstance(section, dict) and isinstance(section.get("lr_server"), list):
            section["lr_server"] = tuple(section["lr_server"])
        fed = _bind(
            section,
            FedConfig,
            "federation",
            extra={"task": task, "seed": seed, "estimator": estimator},
        )

    accountant = None
    if "accountant" in doc:
        accountant = _bind(doc["accountant"], AccountantConfig, "accountant")

    payload = None
    if "payload" in doc:
        payload = _bind(doc["payload"], PayloadSpec, "payload")

    return RunConfig(
        seed=seed,
        out_dir=out_dir,
        task=task,
        fed=fed,
        estimator=estimator,
        accountant=accountant,
        payload=payload,
    )


def load_config(path: str) -> RunConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return parse_config(doc)


def apply_overrides(
    cfg: RunConfig,
    seed: int | None = None,
    out_dir: str | None = None,
    delta: float | None = None,
) -> RunConfig:
    """Command-line overrides; the flags are the only override channel."""
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
        if cfg.fed is not None:
            cfg = dataclasses.replace(cfg, fed=dataclasses.replace(cfg.fed, seed=seed))
    if out_dir is not None:
        cfg = dataclasses.replace(cfg, out_dir=out_dir)
    if delta is not None:
        if cfg.fed is not None:
            cfg = dataclasses.replace(cfg, fed=dataclasses.replace(cfg.fed, delta=delta))
        if cfg.accountant is not None:
            cfg = dataclasses.replace(
                cfg, accountant=dataclasses.replace(cfg.accountant, delta=delta)
            )
    return cfg


# ---------------------------------------------------------------------------
# artifact compatibility


def _jsonable(value):
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {f.name: _jsonable(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, float) and not math.isfinite(value):
        return repr(value)
    return value


def codec_fingerprint(fed: FedConfig) -> str:
    """Hash of every config field the pretrained artifacts depend on.

    Simulate accepts a codec only when its own config hashes to the same
    value, so a stale or foreign artifact cannot slip into a run. Fields
    that only shape the federated rounds (sigma, budget, round count,
    server schedule, sampling) stay out of scope on purpose: one codec
    legitimately serves sweeps over them.
    """
    scope = {
        "task": _jsonable(fed.task),
        "seed": fed.seed,
        "mode": fed.mode,
        "clip": _jsonable(fed.clip),
        "normalize_transmit": fed.normalize_transmit,
        "lr_local": fed.lr_local,
        "batch_size": fed.batch_size,
        "adapter_scale": fed.adapter_scale,
        "pretrain_epochs": fed.pretrain_epochs,
        "estimator": _jsonable(fed.estimator),
        "stats_elementwise": fed.stats_elementwise,
        "codec_profile": fed.codec_profile,
        "codec_latent_dim": fed.codec_latent_dim,
        "codec_hidden_dim": fed.codec_hidden_dim,
        "codec_per_part": fed.codec_per_part,
        "codec_train_steps": fed.codec_train_steps,
        "codec_lr": fed.codec_lr,
        "codec_batch": fed.codec_batch,
        "codec_latent_noise": fed.codec_latent_noise,
    }
    text = json.dumps(scope, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
