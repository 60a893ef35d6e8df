"""Optimization loops, evaluation metrics, and cross-validation protocols.

Pre-training enumerates every unordered subject pair each epoch, samples a
paired mini-batch per pair, expands it if augmentation is on, and minimizes
the weighted contrastive objective with Adam under a cosine-annealing
schedule with warm restarts.  Fine-tuning trains the fusion model over the
pre-trained encoders with cross-entropy plus auxiliary-head terms.  The
ten-fold protocol partitions stimuli, the LOSO protocol holds out one
subject per round; both audit that no training clip reaches the test set.
"""
from __future__ import annotations

import dataclasses
import itertools
import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .augment import AugmentPolicy, expand_batch
from .checkpoint import load_arrays, save_arrays
from .contrastive import CrossModalMap, LossWeights, Projector, cmcl_loss, tcl_batch_loss, total_loss
from .dataset import (ClipDataset, DatasetManifest, LabelSet, build_clip_dataset, four_class,
                      sample_minibatch, HIGH)
from .encoder import Encoder, EncoderConfig
from .fusion import FusionHead, ResolutionPlan, batch_ce, modality_feature


class ConfigError(Exception):
    pass


class NumericDivergenceError(Exception):
    pass


class LeakageError(Exception):
    pass


def rng_for(seed: int, *tags) -> np.random.Generator:
    """A named random stream, stable across runs and platforms."""
    keys = [int(seed)] + [zlib.crc32(str(t).encode()) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(keys))


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


# -- configuration ------------------------------------------------------------


@dataclass
class ModelConfig:
    n_views: int = 16
    embed_dim: int = 128
    n_heads: int = 4
    n_blocks: int = 2
    n_prompts: int = 4
    dropout_p: float = 0.1
    projector_hidden: int = 256
    projector_out: int = 128
    fusion_hidden: int = 256


@dataclass
class PretrainSettings:
    epochs: int = 500
    lr: float = 1e-4
    clips_per_subject: int = 8  # slots drawn per subject pair before expansion
    cycles: int = 3

    def __post_init__(self):
        if self.epochs < 1 or self.lr <= 0 or self.clips_per_subject < 2 or self.cycles < 1:
            raise ConfigError("invalid pretrain settings")


@dataclass
class FinetuneSettings:
    epochs: int = 15
    lr: float = 1e-3
    batch_size: int = 256
    cycles: int = 3
    aux_loss_weight: float = 0.5
    freeze_encoders: bool = False
    # Label scarcity: use only the first n training clip positions as
    # supervised samples (pre-training still sees all of them unlabeled).
    max_label_positions: int | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.lr <= 0 or self.batch_size < 1:
            raise ConfigError("invalid finetune settings")
        if self.max_label_positions is not None and self.max_label_positions < 1:
            raise ConfigError("max_label_positions must be >= 1 when set")


@dataclass
class DataSettings:
    baseline_seconds: float = 0.0
    truncate_last_seconds: float | None = None


@dataclass
class SplitSettings:
    # stimulus_fraction: hold out stimuli; position_fraction: hold out the
    # trailing clip positions; subject_fraction: hold out whole subjects.
    mode: str = "stimulus_fraction"
    test_fraction: float = 0.25
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.mode not in ("stimulus_fraction", "position_fraction", "subject_fraction"):
            raise ConfigError(f"unknown split mode {self.mode!r}")
        if not (0 < self.test_fraction < 1 and 0 < self.val_fraction < 1):
            raise ConfigError("split fractions must lie in (0, 1)")


@dataclass
class Toggles:
    use_tcl: bool = True
    use_da: bool = True
    use_cmcl: bool = True


@dataclass
class RunConfig:
    seed: int = 0
    task: str = "arousal"  # arousal | valence | four
    train_dtype: str = "float32"
    fusion_strategy: str = "mcp"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    loss: LossWeights = field(default_factory=LossWeights)
    resolution: ResolutionPlan = field(default_factory=ResolutionPlan)
    pretrain: PretrainSettings = field(default_factory=PretrainSettings)
    finetune: FinetuneSettings = field(default_factory=FinetuneSettings)
    data: DataSettings = field(default_factory=DataSettings)
    split: SplitSettings = field(default_factory=SplitSettings)
    toggles: Toggles = field(default_factory=Toggles)

    def __post_init__(self):
        if self.task not in ("arousal", "valence", "four"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.train_dtype not in ("float32", "float64"):
            raise ConfigError("train_dtype must be float32 or float64")

    @property
    def n_classes(self) -> int:
        return 4 if self.task == "four" else 2

    def resolutions(self) -> list:
        out = [self.resolution.t_long]
        if self.resolution.use_short:
            out.append(self.resolution.t_short)
        return out

    def apply_dtype(self) -> None:
        ad.set_default_dtype(np.float32 if self.train_dtype == "float32" else np.float64)


_SECTION_TYPES = {
    "model": ModelConfig,
    "augment": AugmentPolicy,
    "loss": LossWeights,
    "resolution": ResolutionPlan,
    "pretrain": PretrainSettings,
    "finetune": FinetuneSettings,
    "data": DataSettings,
    "split": SplitSettings,
    "toggles": Toggles,
}
_TUPLE_FIELDS = {("augment", "scale_low_range"), ("augment", "scale_high_range")}


def config_from_dict(doc: dict) -> RunConfig:
    """Build a RunConfig from a plain dict, rejecting unknown keys."""
    if not isinstance(doc, dict):
        raise ConfigError("config document must be an object")
    top_fields = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(doc) - top_fields
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in doc.items():
        if key in _SECTION_TYPES:
            cls = _SECTION_TYPES[key]
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key!r} must be an object")
            names = {f.name for f in dataclasses.fields(cls)}
            bad = set(value) - names
            if bad:
                raise ConfigError(f"unknown keys in config section {key!r}: {sorted(bad)}")
            coerced = {}
            for k, v in value.items():
                if (key, k) in _TUPLE_FIELDS and isinstance(v, list):
                    v = tuple(v)
                coerced[k] = v
            try:
                kwargs[key] = cls(**coerced)
            except (ValueError, TypeError) as e:
                raise ConfigError(f"config section {key!r}: {e}") from None
        else:
            kwargs[key] = value
    try:
        return RunConfig(**kwargs)
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from None


def config_to_dict(cfg: RunConfig) -> dict:
    doc = dataclasses.asdict(cfg)
    for section, name in _TUPLE_FIELDS:
        doc[section][name] = list(doc[section][name])
    return doc


def apply_overrides(doc: dict, overrides: list) -> dict:
    """Apply `dotted.key=value` overrides; values parse as JSON, else strings."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        dotted, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {dotted!r} descends into a non-object")
        node[parts[-1]] = value
    return doc


# -- optimizer & schedule ------------------------------------------------------


class Adam:
    """Adam with bias correction; a step with any non-finite gradient is skipped."""

    def __init__(self, params: dict, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self.t = 0
        self.skipped_steps = 0

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def step(self, lr: float | None = None) -> bool:
        lr = self.lr if lr is None else lr
        grads = {}
        for k, t in self.params.items():
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            if not np.all(np.isfinite(g)):
                self.skipped_steps += 1
                return False
            grads[k] = g
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, t in self.params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            m_hat = self.m[k] / c1
            v_hat = self.v[k] / c2
            t.data = t.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return True


def lr_at(epoch: int, total_epochs: int, base_lr: float, cycles: int = 3) -> float:
    """Cosine annealing with warm restarts over equal-length cycles.

    Falls back to a constant rate when the cycles would be shorter than
    three epochs (tiny fine-tuning budgets).
    """
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside schedule of {total_epochs}")
    if cycles < 1 or cycles > total_epochs / 3:
        return base_lr
    cycle_len = total_epochs // cycles
    cycle_idx = min(epoch // cycle_len, cycles - 1)
    this_len = cycle_len if cycle_idx < cycles - 1 else total_epochs - cycle_len * (cycles - 1)
    t = epoch - cycle_idx * cycle_len
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * t / this_len))


# -- metrics -------------------------------------------------------------------


@dataclass
class Metrics:
    accuracy: float
    f1: float
    confusion: np.ndarray


def compute_metrics(y_true, y_pred, n_classes: int) -> Metrics:
    """Accuracy, F1 (positive-class for binary, macro otherwise), confusion matrix."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0:
        raise ValueError("cannot evaluate an empty split")
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (y_true, y_pred), 1)
    accuracy = float(np.trace(confusion) / confusion.sum())

    def class_f1(c: int) -> float:
        tp = confusion[c, c]
        fp = confusion[:, c].sum() - tp
        fn = confusion[c, :].sum() - tp
        denom = 2 * tp + fp + fn
        return float(2 * tp / denom) if denom > 0 else 0.0

    f1 = class_f1(1) if n_classes == 2 else float(np.mean([class_f1(c) for c in range(n_classes)]))
    return Metrics(accuracy=accuracy, f1=f1, confusion=confusion)


def label_of(labels: LabelSet, task: str) -> int:
    if task == "arousal":
        return 1 if labels.arousal_bin == HIGH else 0
    if task == "valence":
        return 1 if labels.valence_bin == HIGH else 0
    if task == "four":
        return labels.four_class
    raise ValueError(f"unknown task {task!r}")


def resolution_label(t_seconds: float) -> str:
    return f"{t_seconds:g}s"


# -- pre-training --------------------------------------------------------------


class ContrastiveModel:
    """Encoders + projectors for both modalities at one resolution, plus the shared cross-modal map."""

    def __init__(self, cfg: RunConfig, input_dims: dict, t_seconds: float):
        if len(input_dims) != 2:
            raise ValueError("pre-training expects exactly two modalities")
        self.cfg = cfg
        self.t_seconds = t_seconds
        self.modalities = tuple(input_dims)
        mc = cfg.model
        self.encoders = {}
        self.projectors = {}
        label = resolution_label(t_seconds)
        for mod, dim in input_dims.items():
            enc_cfg = EncoderConfig(
                input_dim=dim, n_views=mc.n_views, embed_dim=mc.embed_dim,
                n_heads=mc.n_heads, n_blocks=mc.n_blocks, n_prompts=mc.n_prompts,
                dropout_p=mc.dropout_p)
            self.encoders[mod] = Encoder(enc_cfg, rng_for(cfg.seed, "init", "enc", mod, label))
            self.projectors[mod] = Projector(
                mc.embed_dim, rng_for(cfg.seed, "init", "proj", mod, label),
                hidden_dim=mc.projector_hidden, out_dim=mc.projector_out,
                dropout_p=mc.dropout_p)
        self.cross_modal = CrossModalMap(mc.projector_out, rng_for(cfg.seed, "init", "cm", label))

    def named_params(self) -> dict:
        label = resolution_label(self.t_seconds)
        out = {}
        for mod in self.modalities:
            out.update({f"enc_{mod}_{label}.{k}": v for k, v in self.encoders[mod].named_params().items()})
            out.update({f"proj_{mod}_{label}.{k}": v for k, v in self.projectors[mod].named_params().items()})
        out.update({f"cm_{label}.{k}": v for k, v in self.cross_modal.named_params().items()})
        return out

    def named_arrays(self) -> dict:
        label = resolution_label(self.t_seconds)
        out = {}
        for mod in self.modalities:
            out.update({f"enc_{mod}_{label}.{k}": v for k, v in self.encoders[mod].named_arrays().items()})
            out.update({f"proj_{mod}_{label}.{k}": v for k, v in self.projectors[mod].named_arrays().items()})
        out.update({f"cm_{label}.{k}": v for k, v in self.cross_modal.named_arrays().items()})
        return out

    def load_state(self, arrays: dict) -> None:
        label = resolution_label(self.t_seconds)
        for mod in self.modalities:
            self.encoders[mod].load_arrays(arrays, prefix=f"enc_{mod}_{label}.")
            self.projectors[mod].load_arrays(arrays, prefix=f"proj_{mod}_{label}.")
        self.cross_modal.load_arrays(arrays, prefix=f"cm_{label}.")

    def embeddings(self, batch, train: bool = False, rng=None) -> dict:
        """Projected embeddings per (modality, subject) as [M, d] tensors."""
        m = batch.m
        dtype = ad.default_dtype()
        out = {}
        for mod in self.modalities:
            xa = batch.stacked(mod, batch.subjects[0], dtype)
            xb = batch.stacked(mod, batch.subjects[1], dtype)
            x = np.concatenate([xa, xb])
            h = self.encoders[mod].encode(x, train=train, rng=rng)
            z = self.projectors[mod].project(h, train=train, rng=rng)
            out[(mod, batch.subjects[0])] = ad.slice_rows(z, 0, m)
            out[(mod, batch.subjects[1])] = ad.slice_rows(z, m, 2 * m)
        return out

    def loss(self, batch, train: bool = True, rng=None):
        """Weighted total contrastive loss for one paired mini-batch."""
        cfg = self.cfg
        z = self.embeddings(batch, train=train, rng=rng)
        mod_a, mod_b = self.modalities
        subj_a, subj_b = batch.subjects
        l_first = l_second = l_cc = None
        if cfg.toggles.use_tcl:
            l_first = tcl_batch_loss(z[(mod_a, subj_a)], z[(mod_a, subj_b)],
                                     cfg.loss.tau, cfg.loss.exclude_positive_in_s3)
            l_second = tcl_batch_loss(z[(mod_b, subj_a)], z[(mod_b, subj_b)],
                                      cfg.loss.tau, cfg.loss.exclude_positive_in_s3)
        if cfg.toggles.use_cmcl:
            cm = self.cross_modal.apply
            l_cc = cmcl_loss(cm(z[(mod_a, subj_a)]), cm(z[(mod_a, subj_b)]),
                             cm(z[(mod_b, subj_a)]), cm(z[(mod_b, subj_b)]),
                             cfg.loss.tau, cfg.loss.exclude_positive_in_s3)
        return total_loss(l_first, l_second, l_cc, cfg.loss)


def _input_dims(ds: ClipDataset) -> dict:
    dims = {}
    for mod in ds.modalities:
        subj = ds.subjects[0]
        stim, pos = ds.slots_for(subj)[0]
        clip = ds.clip(mod, subj, stim, pos)
        dims[mod] = clip.n_channels * clip.n_samples
    return dims


def pretrain(cfg: RunConfig, datasets: dict, out_dir, tag: str = "") -> dict:
    """Pre-train one contrastive model per resolution.

    `datasets` maps t_seconds -> (train ClipDataset, val ClipDataset).
    Writes loss curves and best-validation checkpoints; returns
    {t_seconds: checkpoint path}.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not (cfg.toggles.use_tcl or cfg.toggles.use_cmcl):
        raise ConfigError("pre-training needs at least one contrastive loss enabled")
    checkpoints = {}
    for t_seconds, (train_ds, val_ds) in datasets.items():
        label = resolution_label(t_seconds)
        if len(train_ds.subjects) < 2:
            raise ValueError("pre-training needs at least two subjects")
        model = ContrastiveModel(cfg, _input_dims(train_ds), t_seconds)
        opt = Adam(model.named_params(), cfg.pretrain.lr,
                   cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        policy = cfg.augment if cfg.toggles.use_da else dataclasses.replace(cfg.augment, expansion=1)

        rng_sample = rng_for(cfg.seed, tag, "pretrain", label, "sample")
        rng_aug = rng_for(cfg.seed, tag, "pretrain", label, "augment")
        rng_drop = rng_for(cfg.seed, tag, "pretrain", label, "dropout")
        rng_pairs = rng_for(cfg.seed, tag, "pretrain", label, "pairs")
        rng_val = rng_for(cfg.seed, tag, "pretrain", label, "val")

        # Fixed validation batches: one per subject pair, reused every epoch.
        val_batches = []
        for a, b in itertools.combinations(val_ds.subjects, 2):
            k_val = min(cfg.pretrain.clips_per_subject, len(val_ds.common_slots(a, b)))
            if k_val < 2:
                continue
            vb = sample_minibatch(val_ds, a, b, k_val, rng_val)
            val_batches.append(expand_batch(vb, policy, rng_val))
        if not val_batches:
            raise ValueError("validation split yields no usable subject pairs")

        pairs = list(itertools.combinations(train_ds.subjects, 2))
        history = []
        best_val = math.inf
        best_state = model.named_arrays()
        for epoch in range(cfg.pretrain.epochs):
            lr = lr_at(epoch, cfg.pretrain.epochs, cfg.pretrain.lr, cfg.pretrain.cycles)
            order = list(pairs)
            rng_pairs.shuffle(order)
            step_losses = []
            for a, b in order:
                mb = sample_minibatch(train_ds, a, b, cfg.pretrain.clips_per_subject, rng_sample)
                mb = expand_batch(mb, policy, rng_aug)
                loss = model.loss(mb, train=True, rng=rng_drop)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericDivergenceError(
                        f"pre-training loss diverged at epoch {epoch}, pair ({a}, {b}), "
                        f"resolution {label}: {value}")
                opt.zero_grad()
                loss.backward()
                opt.step(lr)
                step_losses.append(value)
            train_loss = float(np.mean(step_losses))
            val_loss = float(np.mean([model.loss(vb, train=False).item() for vb in val_batches]))
            if not math.isfinite(val_loss):
                raise NumericDivergenceError(f"validation loss diverged at epoch {epoch} ({label})")
            history.append((epoch, train_loss, val_loss))
            if val_loss < best_val:
                best_val = val_loss
                best_state = model.named_arrays()
        write_csv(out_dir / f"loss_pretrain_{label}.csv",
                  ["epoch", "train_loss", "val_loss"], history)
        ckpt = out_dir / f"pretrain_{label}.ckpt"
        save_arrays(ckpt, best_state)
        checkpoints[t_seconds] = ckpt
    return checkpoints


# -- fine-tuning ---------------------------------------------------------------


class FinetuneModel:
    """Long (and optionally short) encoders per modality plus the fusion head."""

    def __init__(self, cfg: RunConfig, input_dims_long: dict, input_dims_short: dict | None):
        self.cfg = cfg
        self.plan = cfg.resolution
        self.modalities = tuple(input_dims_long)
        mc = cfg.model
        label_long = resolution_label(self.plan.t_long)

        def build(mod, dim, label):
            enc_cfg = EncoderConfig(
                input_dim=dim, n_views=mc.n_views, embed_dim=mc.embed_dim,
                n_heads=mc.n_heads, n_blocks=mc.n_blocks, n_prompts=mc.n_prompts,
                dropout_p=mc.dropout_p)
            return Encoder(enc_cfg, rng_for(cfg.seed, "init", "enc", mod, label))

        self.enc_long = {m: build(m, d, label_long) for m, d in input_dims_long.items()}
        self.enc_short = {}
        if self.plan.use_short:
            label_short = resolution_label(self.plan.t_short)
            self.enc_short = {m: build(m, d, label_short) for m, d in input_dims_short.items()}
        self.head = FusionHead(
            self.plan.feature_dim(mc.embed_dim), cfg.n_classes, cfg.fusion_strategy,
            rng_for(cfg.seed, "init", "fusion"), hidden_dim=mc.fusion_hidden,
            modalities=self.modalities)

    def load_pretrained(self, checkpoints: dict) -> None:
        """Load encoder weights from per-resolution pre-training archives."""
        arrays = load_arrays(checkpoints[self.plan.t_long], dtype=ad.default_dtype())
        label = resolution_label(self.plan.t_long)
        for mod, enc in self.enc_long.items():
            enc.load_arrays(arrays, prefix=f"enc_{mod}_{label}.")
        if self.plan.use_short:
            arrays = load_arrays(checkpoints[self.plan.t_short], dtype=ad.default_dtype())
            label = resolution_label(self.plan.t_short)
            for mod, enc in self.enc_short.items():
                enc.load_arrays(arrays, prefix=f"enc_{mod}_{label}.")

    def _modality_features(self, x_long: dict, x_short: dict | None, train: bool, rng):
        frozen = self.cfg.finetune.freeze_encoders
        enc_train = train and not frozen
        feats = {}
        for mod in self.modalities:
            h_long = self.enc_long[mod].encode(x_long[mod], train=enc_train, rng=rng)
            if frozen:
                h_long = h_long.detach()
            shorts = None
            if self.plan.use_short:
                xs = x_short[mod]
                batch, n_short = xs.shape[0], xs.shape[1]
                h_s = self.enc_short[mod].encode(xs.reshape(batch * n_short, -1),
                                                 train=enc_train, rng=rng)
                if frozen:
                    h_s = h_s.detach()
                h_s = ad.reshape(h_s, (batch, n_short, h_s.shape[-1]))
                shorts = [ad.take_index(h_s, j, axis=1) for j in range(n_short)]
            feats[mod] = modality_feature(h_long, shorts, self.plan)
        return feats

    def forward(self, x_long: dict, x_short: dict | None, train: bool = False, rng=None):
        feats = self._modality_features(x_long, x_short, train, rng)
        return self.head.fuse_and_classify(feats[self.modalities[0]], feats[self.modalities[1]])

    def named_params(self) -> dict:
        out = {f"fusion.{k}": v for k, v in self.head.named_params().items()}
        if not self.cfg.finetune.freeze_encoders:
            label = resolution_label(self.plan.t_long)
            for mod, enc in self.enc_long.items():
                out.update({f"enc_{mod}_{label}.{k}": v for k, v in enc.named_params().items()})
            if self.plan.use_short:
                label_s = resolution_label(self.plan.t_short)
                for mod, enc in self.enc_short.items():
                    out.update({f"enc_{mod}_{label_s}.{k}": v for k, v in enc.named_params().items()})
        return out

    def named_arrays(self) -> dict:
        out = {f"fusion.{k}": v for k, v in self.head.named_arrays().items()}
        label = resolution_label(self.plan.t_long)
        for mod, enc in self.enc_long.items():
            out.update({f"enc_{mod}_{label}.{k}": v for k, v in enc.named_arrays().items()})
        if self.plan.use_short:
            label_s = resolution_label(self.plan.t_short)
            for mod, enc in self.enc_short.items():
                out.update({f"enc_{mod}_{label_s}.{k}": v for k, v in enc.named_arrays().items()})
        return out

    def load_state(self, arrays: dict) -> None:
        self.head.load_arrays(arrays, prefix="fusion.")
        label = resolution_label(self.plan.t_long)
        for mod, enc in self.enc_long.items():
            enc.load_arrays(arrays, prefix=f"enc_{mod}_{label}.")
        if self.plan.use_short:
            label_s = resolution_label(self.plan.t_short)
            for mod, enc in self.enc_short.items():
                enc.load_arrays(arrays, prefix=f"enc_{mod}_{label_s}.")


def _assemble_supervised(ds_long: ClipDataset, plan: ResolutionPlan, task: str, dtype):
    """Flatten a long-resolution dataset into supervised training arrays.

    Short-resolution inputs are carved out of the long clips so the two views
    cover exactly the same samples.
    """
    samples = ds_long.all_samples()
    if not samples:
        raise ValueError("empty supervised split")
    labels = np.array([label_of(ds_long.labels[(s, v)], task) for s, v, _ in samples],
                      dtype=np.int64)
    x_long, x_short = {}, {}
    for mod in ds_long.modalities:
        blocks = [ds_long.clip(mod, s, v, p).data for s, v, p in samples]
        arr = np.stack(blocks).astype(dtype)  # [N, C, S]
        n, c, s_pts = arr.shape
        x_long[mod] = arr.reshape(n, c * s_pts)
        if plan.use_short:
            n_short = plan.n_short
            step = s_pts // n_short
            shorts = arr.reshape(n, c, n_short, step).transpose(0, 2, 1, 3)
            x_short[mod] = shorts.reshape(n, n_short, c * step)
    return samples, labels, x_long, (x_short if plan.use_short else None)


def _batched_probs(model: FinetuneModel, x_long, x_short, batch_size: int) -> np.ndarray:
    n = next(iter(x_long.values())).shape[0]
    outs = []
    for start in range(0, n, batch_size):
        sl = slice(start, start + batch_size)
        xb_long = {m: x[sl] for m, x in x_long.items()}
        xb_short = {m: x[sl] for m, x in x_short.items()} if x_short else None
        probs, _ = model.forward(xb_long, xb_short, train=False)
        outs.append(probs.data)
    return np.concatenate(outs)


def finetune(cfg: RunConfig, train_ds: ClipDataset, val_ds: ClipDataset,
             checkpoints: dict | None, out_dir, tag: str = "") -> FinetuneModel:
    """Supervised fine-tuning; returns the best-validation-loss model.

    `checkpoints` of None fine-tunes from randomly initialized encoders.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    plan = cfg.resolution
    dtype = ad.default_dtype()
    samples, y_train, xl_train, xs_train = _assemble_supervised(train_ds, plan, cfg.task, dtype)
    _, y_val, xl_val, xs_val = _assemble_supervised(val_ds, plan, cfg.task, dtype)

    dims_long = {m: x.shape[1] for m, x in xl_train.items()}
    dims_short = {m: x.shape[2] for m, x in xs_train.items()} if xs_train else None
    model = FinetuneModel(cfg, dims_long, dims_short)
    if checkpoints is not None:
        missing = [t for t in cfg.resolutions() if t not in checkpoints]
        if missing:
            raise FileNotFoundError(f"missing pre-training checkpoints for resolutions {missing}")
        model.load_pretrained(checkpoints)

    opt = Adam(model.named_params(), cfg.finetune.lr,
               cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    rng_shuffle = rng_for(cfg.seed, tag, "finetune", "shuffle")
    rng_drop = rng_for(cfg.seed, tag, "finetune", "dropout")
    aux_w = cfg.finetune.aux_loss_weight

    n = len(samples)
    history = []
    best_val = math.inf
    best_state = model.named_arrays()
    label = resolution_label(plan.t_long)
    for epoch in range(cfg.finetune.epochs):
        lr = lr_at(epoch, cfg.finetune.epochs, cfg.finetune.lr, cfg.finetune.cycles)
        order = rng_shuffle.permutation(n)
        epoch_losses = []
        for start in range(0, n, cfg.finetune.batch_size):
            idx = order[start:start + cfg.finetune.batch_size]
            if idx.size < 2:
                continue  # batch-norm needs at least two rows in train mode
            xb_long = {m: x[idx] for m, x in xl_train.items()}
            xb_short = {m: x[idx] for m, x in xs_train.items()} if xs_train else None
            probs, aux = model.forward(xb_long, xb_short, train=True, rng=rng_drop)
            loss = batch_ce(probs, y_train[idx])
            for aux_probs in aux.values():
                loss = ad.add(loss, ad.scale(batch_ce(aux_probs, y_train[idx]), aux_w))
            value = loss.item()
            if not math.isfinite(value):
                raise NumericDivergenceError(f"fine-tuning loss diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            epoch_losses.append(value)
        val_probs = _batched_probs(model, xl_val, xs_val, cfg.finetune.batch_size)
        val_loss = float(np.mean(-np.log(np.maximum(val_probs[np.arange(len(y_val)), y_val], 1e-12))))
        history.append((epoch, float(np.mean(epoch_losses)), val_loss))
        if val_loss < best_val:
            best_val = val_loss
            best_state = model.named_arrays()
    write_csv(out_dir / f"loss_finetune_{label}.csv", ["epoch", "train_loss", "val_loss"], history)
    model.load_state(best_state)
    save_arrays(out_dir / "model.ckpt", model.named_arrays())
    return model


def evaluate(model: FinetuneModel, ds_long: ClipDataset, task: str,
             batch_size: int = 256) -> Metrics:
    """Eval-mode metrics of a fine-tuned model on one long-resolution dataset."""
    dtype = ad.default_dtype()
    _, y, x_long, x_short = _assemble_supervised(ds_long, model.plan, task, dtype)
    probs = _batched_probs(model, x_long, x_short, batch_size)
    n_classes = 4 if task == "four" else 2
    return compute_metrics(y, probs.argmax(axis=1), n_classes)


# -- protocols -----------------------------------------------------------------


def audit_no_leakage(train_ids: set, test_ids: set) -> None:
    overlap = train_ids & test_ids
    if overlap:
        sample = sorted(overlap)[:5]
        raise LeakageError(f"{len(overlap)} clips shared between train and test, e.g. {sample}")


@dataclass
class FoldResult:
    name: str
    metrics: Metrics
    audit_clips_train: int
    audit_clips_test: int


def _run_split(cfg: RunConfig, manifest: DatasetManifest, out_dir, *,
               train_stimuli, val_stimuli, test_stimuli,
               train_subjects=None, test_subjects=None, tag: str = "") -> FoldResult:
    """Pre-train + fine-tune on the train/val selections, evaluate on the test one."""
    out_dir = Path(out_dir)
    data = cfg.data
    train_subjects = train_subjects or manifest.subjects
    test_subjects = test_subjects or manifest.subjects

    pre_datasets = {}
    train_ids: set = set()
    for t in cfg.resolutions():
        full = build_clip_dataset(manifest, t, baseline_seconds=data.baseline_seconds,
                                  truncate_last_seconds=data.truncate_last_seconds)
        tr = full.subset(subjects=train_subjects, stimuli=train_stimuli)
        va = full.subset(subjects=train_subjects, stimuli=val_stimuli)
        pre_datasets[t] = (tr, va)
        train_ids |= tr.clip_ids() | va.clip_ids()

    do_pretrain = cfg.toggles.use_tcl or cfg.toggles.use_cmcl
    checkpoints = pretrain(cfg, pre_datasets, out_dir, tag=tag) if do_pretrain else None

    long_full = pre_datasets[cfg.resolution.t_long][0]
    long_val = pre_datasets[cfg.resolution.t_long][1]
    test_ds = build_clip_dataset(manifest, cfg.resolution.t_long,
                                 baseline_seconds=data.baseline_seconds,
                                 truncate_last_seconds=data.truncate_last_seconds
                                 ).subset(subjects=test_subjects, stimuli=test_stimuli)
    audit_no_leakage(train_ids, test_ds.clip_ids())

    model = finetune(cfg, long_full, long_val, checkpoints, out_dir, tag=tag)
    metrics = evaluate(model, test_ds, cfg.task, cfg.finetune.batch_size)
    return FoldResult(name=out_dir.name, metrics=metrics,
                      audit_clips_train=len(train_ids), audit_clips_test=len(test_ds.clip_ids()))


def _write_protocol_outputs(cfg: RunConfig, results: list, out_dir: Path) -> dict:
    rows = [(r.name, r.metrics.accuracy, r.metrics.f1) for r in results]
    accs = np.array([r.metrics.accuracy for r in results], dtype=np.float64)
    f1s = np.array([r.metrics.f1 for r in results], dtype=np.float64)
    rows.append(("mean", float(accs.mean()), float(f1s.mean())))
    rows.append(("std", float(accs.std()), float(f1s.std())))
    write_csv(out_dir / f"metrics_{cfg.task}.csv", ["fold", "accuracy", "f1"], rows)
    confusion = np.sum([r.metrics.confusion for r in results], axis=0)
    write_csv(out_dir / f"confusion_{cfg.task}.csv",
              [f"pred_{c}" for c in range(confusion.shape[1])],
              [list(map(int, row)) for row in confusion])
    return {
        "accuracy_mean": float(accs.mean()), "accuracy_std": float(accs.std()),
        "f1_mean": float(f1s.mean()), "f1_std": float(f1s.std()),
        "per_fold": [{"name": r.name, "accuracy": r.metrics.accuracy, "f1": r.metrics.f1}
                     for r in results],
    }


def _tenfold_fold_job(args):
    cfg, manifest_path, fold_idx, train_stims, val_stims, test_stims, out_dir = args
    from .dataset import load_manifest
    cfg.apply_dtype()
    manifest = load_manifest(manifest_path)
    return _run_split(cfg, manifest, out_dir, train_stimuli=train_stims,
                      val_stimuli=val_stims, test_stimuli=test_stims,
                      tag=f"fold{fold_idx}")


def stimulus_folds(stimuli: list, n_folds: int, seed: int) -> list:
    """Shuffle stimuli and partition them into n_folds nearly equal test sets."""
    if len(stimuli) < n_folds:
        raise ValueError(f"fold protocol needs >= {n_folds} stimuli, got {len(stimuli)}")
    order = list(stimuli)
    rng_for(seed, "cv10").shuffle(order)
    return [list(chunk) for chunk in np.array_split(np.array(order), n_folds)]


def tenfold_cv(cfg: RunConfig, manifest: DatasetManifest, out_dir, jobs: int = 1,
               n_folds: int = 10) -> dict:
    """Stimulus-partitioned cross-validation: pre-train and fine-tune per fold."""
    out_dir = Path(out_dir)
    stimuli = manifest.stimuli
    folds = stimulus_folds(stimuli, n_folds, cfg.seed)
    order = [s for fold in folds for s in fold]

    job_args = []
    for i, test_stims in enumerate(folds):
        train_pool = [s for s in order if s not in set(test_stims)]
        n_val = max(1, round(cfg.split.val_fraction * len(train_pool)))
        val_rng = rng_for(cfg.seed, "cv10", "val", i)
        val_idx = val_rng.choice(len(train_pool), size=n_val, replace=False)
        val_stims = [train_pool[j] for j in sorted(val_idx)]
        train_stims = [s for s in train_pool if s not in set(val_stims)]
        job_args.append((cfg, str(manifest.root / "manifest.json"), i,
                         train_stims, val_stims, test_stims, out_dir / f"fold_{i}"))

    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_tenfold_fold_job, job_args))
    else:
        results = [_tenfold_fold_job(a) for a in job_args]
    return _write_protocol_outputs(cfg, results, out_dir)


def _loso_round_job(args):
    cfg, manifest_path, held_out, train_stims, val_stims, out_dir = args
    from .dataset import load_manifest
    cfg.apply_dtype()
    manifest = load_manifest(manifest_path)
    train_subjects = [s for s in manifest.subjects if s != held_out]
    return _run_split(cfg, manifest, out_dir,
                      train_stimuli=train_stims, val_stimuli=val_stims,
                      test_stimuli=manifest.stimuli,
                      train_subjects=train_subjects, test_subjects=[held_out],
                      tag=f"loso_{held_out}")


def loso_cv(cfg: RunConfig, manifest: DatasetManifest, out_dir, jobs: int = 1) -> dict:
    """Leave-one-subject-out: each round trains on the rest, tests on one subject."""
    out_dir = Path(out_dir)
    subjects = manifest.subjects
    if len(subjects) < 2:
        raise ValueError("LOSO needs at least two subjects")
    stimuli = manifest.stimuli
    n_val = max(1, round(cfg.split.val_fraction * len(stimuli)))
    val_rng = rng_for(cfg.seed, "loso", "val")
    val_idx = val_rng.choice(len(stimuli), size=n_val, replace=False)
    val_stims = [stimuli[j] for j in sorted(val_idx)]
    train_stims = [s for s in stimuli if s not in set(val_stims)]

    job_args = [(cfg, str(manifest.root / "manifest.json"), subj,
                 train_stims, val_stims, out_dir / f"round_{subj}")
                for subj in subjects]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_loso_round_job, job_args))
    else:
        results = [_loso_round_job(a) for a in job_args]
    return _write_protocol_outputs(cfg, results, out_dir)
