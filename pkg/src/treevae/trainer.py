"""Training loop, checkpoints and run configuration."""

from __future__ import annotations

import base64
import configparser
import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .batching import batch_loss, build_depth_schedule, decode_batch, encode_batch
from .io import atomic_write_text
from .model import WEIGHTING_SCHEMES, ModelConfig, RvnnModel, class_counts, class_weights, tree_loss
from .preprocessing import NormParams

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "treevae-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    alpha: float = 0.3
    gamma: float = 0.001
    epochs: int = 20000
    scheme: str = "uniform"
    max_height: int = 10
    epsilon: float = 0.2
    seed: int = 0
    checkpoint_interval: int = 0  # 0 disables periodic checkpoints

    def __post_init__(self):
        for name in ("batch_size", "max_height"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("lr", "epsilon"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0 or self.checkpoint_interval < 0 or self.seed < 0:
            raise ValueError("epochs, seed and checkpoint_interval must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.scheme not in WEIGHTING_SCHEMES:
            raise ValueError(f"scheme must be one of {WEIGHTING_SCHEMES}")

    @classmethod
    def profile(cls, name: str = "default", **overrides) -> "TrainConfig":
        """Named presets; ``desk`` is a short run sized for a laptop CPU."""
        if name == "default":
            base = cls()
        elif name == "desk":
            base = cls(epochs=1500, lr=1e-3, max_height=5, checkpoint_interval=0)
        else:
            raise ValueError(f"unknown profile {name!r}")
        return replace(base, **overrides)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            caster = type(getattr(cls(), f.name))
            try:
                kw[f.name] = caster(d[f.name])
            except (TypeError, ValueError):
                raise ValueError(f"bad value for {f.name}: {d[f.name]!r}") from None
        return cls(**kw)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["train"] = {k: repr(v) if isinstance(v, float) else str(v) for k, v in self.to_dict().items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str, profile: str = "default") -> "TrainConfig":
        cp = configparser.ConfigParser()
        try:
            cp.read_string(text)
        except configparser.Error as e:
            raise ValueError(f"unreadable config: {e}") from None
        if "train" not in cp:
            raise ValueError("config has no [train] section")
        values = dict(cp["train"])
        profile = values.pop("profile", profile)
        base = cls.profile(profile).to_dict()
        base.update(values)
        return cls.from_dict(base)

    @classmethod
    def read(cls, path, profile: str = "default") -> "TrainConfig":
        return cls.from_ini(Path(path).read_text(), profile)


@dataclass
class TrainState:
    model: RvnnModel
    config: TrainConfig
    norm: NormParams | None = None
    epoch: int = 0
    rng: np.random.Generator | None = None
    history: list[dict] = field(default_factory=list)


# -- checkpoints ------------------------------------------------------------


def _encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a)
    return {"dtype": a.dtype.str, "shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"].encode("ascii"), validate=True)
    return np.frombuffer(raw, dtype=np.dtype(d["dtype"])).reshape(d["shape"]).copy()


def checkpoint_text(state: TrainState) -> str:
    """Canonical JSON; identical state gives identical text."""
    ps = state.model.params.state()
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "epoch": state.epoch,
        "model_config": asdict(state.model.config),
        "dtype": state.model.dtype.str,
        "train_config": state.config.to_dict(),
        "norm": state.norm.to_dict() if state.norm else None,
        "adam_step": ps["step"],
        "params": {k: _encode_array(v) for k, v in ps["params"].items()},
        "adam_m": {k: _encode_array(v) for k, v in ps["m"].items()},
        "adam_v": {k: _encode_array(v) for k, v in ps["v"].items()},
        "rng_state": state.rng.bit_generator.state if state.rng is not None else None,
    }
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    atomic_write_text(path, checkpoint_text(state))
    return path


def load_checkpoint(path) -> TrainState:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, UnicodeDecodeError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt checkpoint {path}: {e}") from None
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {doc.get('version')!r} is not supported (expected {CHECKPOINT_VERSION})")
    try:
        model = RvnnModel(ModelConfig(**doc["model_config"]), seed=0, dtype=np.dtype(doc["dtype"]))
        model.params.load_state(
            {
                "params": {k: _decode_array(v) for k, v in doc["params"].items()},
                "m": {k: _decode_array(v) for k, v in doc["adam_m"].items()},
                "v": {k: _decode_array(v) for k, v in doc["adam_v"].items()},
                "step": doc["adam_step"],
            }
        )
        rng = None
        if doc["rng_state"] is not None:
            rng = np.random.default_rng()
            rng.bit_generator.state = doc["rng_state"]
        return TrainState(
            model=model,
            config=TrainConfig.from_dict(doc["train_config"]),
            norm=NormParams.from_dict(doc["norm"]) if doc["norm"] else None,
            epoch=int(doc["epoch"]),
            rng=rng,
        )
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"corrupt checkpoint {path}: {e}") from None


# -- training ---------------------------------------------------------------


def init_state(config: TrainConfig, norm: NormParams | None = None, dtype=ad.DEFAULT_DTYPE) -> TrainState:
    """Fresh model and RNG, both derived from ``config.seed``."""
    init_seq, run_seq = np.random.SeedSequence(config.seed).spawn(2)
    model = RvnnModel(seed=int(init_seq.generate_state(1)[0]), dtype=dtype)
    return TrainState(model=model, config=config, norm=norm, rng=np.random.default_rng(run_seq))


def _find_nonfinite(state, trees, idx, cw, names):
    cfg = state.config
    for i in idx:
        try:
            with ad.no_grad():
                tree_loss(state.model, trees[i], cw, cfg.scheme, cfg.alpha, cfg.gamma, deterministic=True)
        except ad.NonFiniteError:
            return names[i] if names else f"tree #{i}"
    return "batch " + ", ".join(names[i] if names else f"#{i}" for i in idx)


def train(
    trees,
    config: TrainConfig | None = None,
    state: TrainState | None = None,
    norm: NormParams | None = None,
    names=None,
    checkpoint_dir=None,
    on_epoch=None,
) -> TrainState:
    """Train on a normalized corpus; resumes from ``state`` when given.

    The batch loss is the mean of the per-tree objectives. One Adam step
    per mini-batch; the last partial batch is kept.
    """
    if state is None:
        state = init_state(config or TrainConfig(), norm)
    cfg = state.config
    if not trees:
        raise ValueError("empty training corpus")
    cw = class_weights(class_counts(trees))
    n = len(trees)
    while state.epoch < cfg.epochs:
        order = state.rng.permutation(n)
        sums = {"recon": 0.0, "topo": 0.0, "kl": 0.0, "total": 0.0}
        for s in range(0, n, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            batch = [trees[i] for i in idx]
            try:
                loss, parts = batch_loss(state.model, batch, cw, cfg.scheme, cfg.alpha, cfg.gamma, rng=state.rng)
                ad.backward(loss)
            except ad.NonFiniteError as e:
                culprit = _find_nonfinite(state, trees, idx, cw, names)
                raise TrainingError(f"non-finite loss at epoch {state.epoch + 1} on {culprit}: {e}") from e
            state.model.params.adam_step(cfg.lr, cfg.beta1, cfg.beta2)
            for k in sums:
                sums[k] += parts[k] * len(idx)
        state.epoch += 1
        rec = {"epoch": state.epoch, **{k: v / n for k, v in sums.items()}}
        state.history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        if checkpoint_dir and cfg.checkpoint_interval and state.epoch % cfg.checkpoint_interval == 0:
            save_checkpoint(state, Path(checkpoint_dir) / f"epoch_{state.epoch:06d}.json")
    return state


LOSS_COLUMNS = ("epoch", "recon", "topo", "kl", "total")


def write_loss_curve(history, path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOSS_COLUMNS)
    for rec in history:
        w.writerow([rec["epoch"]] + [repr(float(rec[k])) for k in LOSS_COLUMNS[1:]])
    atomic_write_text(Path(path), buf.getvalue())


def evaluate_reconstruction(model: RvnnModel, trees) -> dict:
    """Teacher-forced reconstruction at ``z = mu``.

    ``recon`` is the mean over all nodes of the squared L2 attribute error,
    ``mse`` the mean over all nodes and attributes of the squared error, and
    ``accuracy`` the fraction of nodes whose class is predicted correctly.
    """
    with ad.no_grad():
        sched = build_depth_schedule(trees)
        mu, _ = model.latent_heads(encode_batch(model, trees, sched))
        attrs_hat, logits = decode_batch(model, mu, sched)
    tree_of, node_of = sched.flat_index()
    target = np.stack([trees[b].attrs[i] for b, i in zip(tree_of, node_of)])
    classes = np.array([trees[b].node_classes()[i] for b, i in zip(tree_of, node_of)])
    err = np.sum((attrs_hat.data.astype(np.float64) - target) ** 2, axis=1)
    correct = np.argmax(logits.data, axis=1) == classes
    per_tree = np.array([correct[tree_of == b].all() for b in range(len(trees))])
    return {
        "recon": float(err.mean()),
        "mse": float(err.mean() / target.shape[1]),
        "accuracy": float(correct.mean()),
        "trees_fully_correct": int(per_tree.sum()),
        "mu": mu.data.astype(np.float64),
    }
