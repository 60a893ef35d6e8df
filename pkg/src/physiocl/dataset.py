"""Portable multimodal signal container, preprocessing, and mini-batch sampling.

Container layout: a `manifest.json` describing subjects, trials, and rating
scale, plus one headerless binary file per (trial, modality) holding
little-endian float32 samples, row-major `[channel][sample]`, at
`<modality>/<subject>_<stimulus>.bin` relative to the manifest.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


class DatasetError(Exception):
    """Base class for container and preprocessing failures."""


class ManifestNotFoundError(DatasetError):
    pass


class ManifestSchemaError(DatasetError):
    pass


class TrialDataError(DatasetError):
    """A trial's binary file is missing or has the wrong byte length."""


LOW = "low"
HIGH = "high"

# kind -> (scale min, scale max, threshold); "deap" labels high at >= threshold,
# "dreamer" labels high strictly above it.
RATING_RULES = {
    "deap": (1.0, 9.0, 5.0),
    "dreamer": (1.0, 5.0, 3.0),
}


@dataclass(frozen=True)
class ModalityDescriptor:
    id: str
    channels: int


@dataclass(frozen=True)
class RatingScale:
    minimum: float
    maximum: float
    threshold: float
    kind: str


@dataclass(frozen=True)
class TrialDescriptor:
    subject: str
    stimulus: str
    duration_seconds: float
    ratings: dict
    files: dict


@dataclass
class DatasetManifest:
    name: str
    sample_rate_hz: int
    modalities: list
    subjects: list
    trials: list
    rating_scale: RatingScale
    root: Path

    def modality(self, modality_id: str) -> ModalityDescriptor:
        for m in self.modalities:
            if m.id == modality_id:
                return m
        raise KeyError(modality_id)

    @property
    def modality_ids(self) -> list:
        return [m.id for m in self.modalities]

    @property
    def stimuli(self) -> list:
        return sorted({t.stimulus for t in self.trials})


@dataclass
class Clip:
    """One t-second multichannel segment: the unit of pairing and encoding."""

    data: np.ndarray  # [channels, samples]
    modality: str
    subject: str
    stimulus: str
    position: int
    variant: int
    t_seconds: float

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)


@dataclass(frozen=True)
class LabelSet:
    arousal_bin: str
    valence_bin: str

    @property
    def four_class(self) -> int:
        return four_class(self.arousal_bin, self.valence_bin)


@dataclass(frozen=True)
class SlotKey:
    stimulus: str
    position: int
    variant: int = 0


@dataclass
class MiniBatch:
    """Paired clips for two subjects, indexed by slot and modality."""

    subjects: tuple
    modalities: tuple
    slots: list  # list[SlotKey], length m
    clips: dict  # (slot index, subject, modality) -> Clip
    t_seconds: float

    @property
    def m(self) -> int:
        return len(self.slots)

    def stacked(self, modality: str, subject: str, dtype=np.float64) -> np.ndarray:
        """Flattened clip matrix [m, channels*samples] in slot order."""
        rows = [self.clips[(i, subject, modality)].flat() for i in range(self.m)]
        return np.stack(rows).astype(dtype)


# -- manifest ---------------------------------------------------------------


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ManifestSchemaError(message)


def load_manifest(path) -> DatasetManifest:
    """Load and eagerly validate a dataset container manifest.

    `path` may be the manifest file or a directory containing manifest.json.
    """
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise ManifestNotFoundError(f"manifest not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestSchemaError(f"{path}: not valid JSON ({e})") from None

    for key in ("name", "sample_rate_hz", "rating_scale", "modalities", "subjects", "trials"):
        _require(key in raw, f"manifest missing key {key!r}")
    fs = raw["sample_rate_hz"]
    _require(isinstance(fs, int) and fs > 0, "sample_rate_hz must be a positive integer")

    rs = raw["rating_scale"]
    for key in ("min", "max", "threshold", "kind"):
        _require(key in rs, f"rating_scale missing key {key!r}")
    _require(rs["kind"] in RATING_RULES, f"unknown rating_scale kind {rs['kind']!r}")
    scale = RatingScale(float(rs["min"]), float(rs["max"]), float(rs["threshold"]), rs["kind"])
    _require(scale.minimum < scale.maximum, "rating_scale min must be below max")
    _require(scale.minimum <= scale.threshold <= scale.maximum, "rating threshold outside scale")

    modalities = []
    for m in raw["modalities"]:
        _require(isinstance(m.get("id"), str) and m["id"], "modality id must be a nonempty string")
        _require(isinstance(m.get("channels"), int) and m["channels"] > 0,
                 f"modality {m.get('id')!r}: channels must be a positive integer")
        modalities.append(ModalityDescriptor(m["id"], m["channels"]))
    _require(len({m.id for m in modalities}) == len(modalities), "duplicate modality ids")
    mod_by_id = {m.id: m for m in modalities}

    subjects = raw["subjects"]
    _require(isinstance(subjects, list) and subjects, "subjects must be a nonempty list")

    root = path.parent
    trials = []
    seen_pairs = set()
    for i, t in enumerate(raw["trials"]):
        where = f"trials[{i}]"
        for key in ("subject", "stimulus", "duration_seconds", "ratings", "files"):
            _require(key in t, f"{where} missing key {key!r}")
        _require(t["subject"] in subjects, f"{where}: unknown subject {t['subject']!r}")
        pair = (t["subject"], t["stimulus"])
        _require(pair not in seen_pairs, f"{where}: duplicate (subject, stimulus) {pair}")
        seen_pairs.add(pair)
        duration = float(t["duration_seconds"])
        _require(duration > 0, f"{where}: duration must be positive")
        n_samples = duration * fs
        _require(abs(n_samples - round(n_samples)) < 1e-9,
                 f"{where}: duration * sample rate must be an integer sample count")
        ratings = {k: float(v) for k, v in t["ratings"].items()}
        for dim in ("arousal", "valence"):
            _require(dim in ratings, f"{where}: ratings missing {dim!r}")
            _require(scale.minimum <= ratings[dim] <= scale.maximum,
                     f"{where}: {dim} rating {ratings[dim]} outside scale")
        files = dict(t["files"])
        _require(set(files) == set(mod_by_id), f"{where}: files must cover exactly the declared modalities")
        trials.append(TrialDescriptor(t["subject"], t["stimulus"], duration, ratings, files))

    manifest = DatasetManifest(raw["name"], fs, modalities, list(subjects), trials, scale, root)

    for t in manifest.trials:
        for mod_id, rel in t.files.items():
            fp = root / rel
            if not fp.exists():
                raise TrialDataError(f"trial ({t.subject}, {t.stimulus}) {mod_id}: missing file {fp}")
            expected = mod_by_id[mod_id].channels * round(t.duration_seconds * fs) * 4
            actual = fp.stat().st_size
            if actual != expected:
                raise TrialDataError(
                    f"trial ({t.subject}, {t.stimulus}) {mod_id}: {fp} has {actual} bytes, expected {expected}")
    return manifest


def load_trial(manifest: DatasetManifest, trial: TrialDescriptor, modality_id: str) -> np.ndarray:
    """Read one trial's signal as float32 [channels, samples]."""
    channels = manifest.modality(modality_id).channels
    fp = manifest.root / trial.files[modality_id]
    flat = np.fromfile(fp, dtype="<f4")
    return flat.reshape(channels, -1)


def write_container(out_dir, name: str, sample_rate_hz: int, rating_scale: RatingScale,
                    modalities: list, trials: list, signals) -> Path:
    """Write a container to disk; `signals(trial, modality_id)` yields [C, S] arrays.

    Returns the manifest path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trial_entries = []
    for t in trials:
        files = {}
        for m in modalities:
            rel = f"{m.id}/{t.subject}_{t.stimulus}.bin"
            fp = out_dir / rel
            fp.parent.mkdir(parents=True, exist_ok=True)
            data = np.ascontiguousarray(signals(t, m.id), dtype="<f4")
            if data.shape[0] != m.channels:
                raise DatasetError(f"signal for {t.subject}/{t.stimulus}/{m.id} has {data.shape[0]} channels, "
                                   f"declared {m.channels}")
            data.tofile(fp)
            files[m.id] = rel
        trial_entries.append({
            "subject": t.subject,
            "stimulus": t.stimulus,
            "duration_seconds": t.duration_seconds,
            "ratings": t.ratings,
            "files": files,
        })
    doc = {
        "name": name,
        "sample_rate_hz": sample_rate_hz,
        "rating_scale": {"min": rating_scale.minimum, "max": rating_scale.maximum,
                         "threshold": rating_scale.threshold, "kind": rating_scale.kind},
        "modalities": [{"id": m.id, "channels": m.channels} for m in modalities],
        "subjects": sorted({t.subject for t in trials}),
        "trials": trial_entries,
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return manifest_path


# -- preprocessing ------------------------------------------------------------


def baseline_correct(signal: np.ndarray, baseline_seconds: float, sample_rate: int,
                     ref_seconds: float = 1.0) -> np.ndarray:
    """Average the leading baseline into a reference window and subtract it.

    The first `baseline_seconds` are averaged over their `ref_seconds`-long
    chunks into one reference, which is tiled and subtracted from the rest.
    """
    base_len = baseline_seconds * sample_rate
    ref_len = ref_seconds * sample_rate
    if abs(base_len - round(base_len)) > 1e-9 or abs(ref_len - round(ref_len)) > 1e-9:
        raise ValueError("baseline and reference windows must span whole samples")
    base_len, ref_len = round(base_len), round(ref_len)
    if base_len % ref_len != 0:
        raise ValueError("baseline length must be a multiple of the reference window")
    channels, total = signal.shape
    if total < base_len + ref_len:
        raise DatasetError(
            f"trial of {total} samples is shorter than baseline + one reference window "
            f"({base_len + ref_len})")
    chunks = base_len // ref_len
    ref = signal[:, :base_len].reshape(channels, chunks, ref_len).mean(axis=1)
    emotion = signal[:, base_len:]
    reps = -(-emotion.shape[1] // ref_len)  # ceil
    tiled = np.tile(ref, (1, reps))[:, :emotion.shape[1]]
    return emotion - tiled


def truncate_last(signal: np.ndarray, seconds: float, sample_rate: int) -> np.ndarray:
    """Keep only the final `seconds` of the signal."""
    n = round(seconds * sample_rate)
    if signal.shape[1] < n:
        raise DatasetError(f"trial of {signal.shape[1]} samples shorter than requested {n}")
    return signal[:, -n:]


def segment_trial(signal: np.ndarray, t_seconds: float, sample_rate: int, *,
                  modality: str, subject: str, stimulus: str) -> list:
    """Cut a trial into non-overlapping t-second clips in temporal order.

    The trailing remainder shorter than one clip is discarded.
    """
    s_pts = t_seconds * sample_rate
    if abs(s_pts - round(s_pts)) > 1e-9:
        raise ValueError(f"t_seconds * sample_rate must be an integer, got {s_pts}")
    s_pts = round(s_pts)
    n = signal.shape[1] // s_pts
    if n == 0:
        raise ValueError(f"clip length {t_seconds}s exceeds trial length")
    clips = []
    for pos in range(n):
        clips.append(Clip(
            data=signal[:, pos * s_pts:(pos + 1) * s_pts].copy(),
            modality=modality, subject=subject, stimulus=stimulus,
            position=pos, variant=0, t_seconds=t_seconds,
        ))
    return clips


def binarize_rating(rating: float, kind: str, scale: RatingScale | None = None) -> str:
    """Map a rating to {low, high} under the dataset's threshold rule."""
    if scale is None:
        if kind not in RATING_RULES:
            raise ValueError(f"unknown rating kind {kind!r}")
        lo, hi, thr = RATING_RULES[kind]
        scale = RatingScale(lo, hi, thr, kind)
    if not scale.minimum <= rating <= scale.maximum:
        raise ValueError(f"rating {rating} outside scale [{scale.minimum}, {scale.maximum}]")
    if kind == "deap":
        return HIGH if rating >= scale.threshold else LOW
    if kind == "dreamer":
        return HIGH if rating > scale.threshold else LOW
    raise ValueError(f"unknown rating kind {kind!r}")


_FOUR_CLASS = {(HIGH, HIGH): 0, (LOW, HIGH): 1, (HIGH, LOW): 2, (LOW, LOW): 3}


def four_class(arousal_bin: str, valence_bin: str) -> int:
    return _FOUR_CLASS[(arousal_bin, valence_bin)]


# -- clip dataset -------------------------------------------------------------


class ClipDataset:
    """All clips of one duration, indexed by (modality, subject, stimulus, position).

    Positions are original clip indices within the trial; subsetting by
    position keeps the original numbering so pairing and leakage audits stay
    meaningful.
    """

    def __init__(self, t_seconds: float, sample_rate: int, modalities: tuple,
                 clips: dict, labels: dict, positions: dict | None = None):
        self.t_seconds = t_seconds
        self.sample_rate = sample_rate
        self.modalities = modalities
        self._clips = clips  # (modality, subject, stimulus) -> [n_rows, C, S]
        self._positions = positions or {
            key: tuple(range(block.shape[0])) for key, block in clips.items()}
        self.labels = labels  # (subject, stimulus) -> LabelSet
        self.subjects = sorted({s for (_, s, _) in clips})
        self.stimuli = sorted({v for (_, _, v) in clips})

    def positions(self, subject: str, stimulus: str) -> tuple:
        return self._positions[(self.modalities[0], subject, stimulus)]

    def clip(self, modality: str, subject: str, stimulus: str, position: int) -> Clip:
        key = (modality, subject, stimulus)
        row = self._positions[key].index(position)
        return Clip(self._clips[key][row], modality, subject, stimulus, position, 0, self.t_seconds)

    def slots_for(self, subject: str) -> list:
        out = []
        for stim in self.stimuli:
            key = (self.modalities[0], subject, stim)
            if key in self._clips:
                out.extend((stim, pos) for pos in self._positions[key])
        return out

    def common_slots(self, subject_a: str, subject_b: str) -> list:
        slots_b = set(self.slots_for(subject_b))
        return [s for s in self.slots_for(subject_a) if s in slots_b]

    def clip_ids(self) -> set:
        """Identity tuples (modality, subject, stimulus, position, t) of every clip."""
        ids = set()
        for key in self._clips:
            mod, subj, stim = key
            for pos in self._positions[key]:
                ids.add((mod, subj, stim, pos, self.t_seconds))
        return ids

    def subset(self, subjects=None, stimuli=None, positions=None) -> "ClipDataset":
        """Restrict to the given subjects, stimuli, and/or original clip positions."""
        keep_subj = set(subjects) if subjects is not None else None
        keep_stim = set(stimuli) if stimuli is not None else None
        keep_pos = set(positions) if positions is not None else None
        clips, pos_map = {}, {}
        for key, block in self._clips.items():
            mod, subj, stim = key
            if keep_subj is not None and subj not in keep_subj:
                continue
            if keep_stim is not None and stim not in keep_stim:
                continue
            if keep_pos is not None:
                rows = [r for r, p in enumerate(self._positions[key]) if p in keep_pos]
                if not rows:
                    continue
                clips[key] = block[rows]
                pos_map[key] = tuple(self._positions[key][r] for r in rows)
            else:
                clips[key] = block
                pos_map[key] = self._positions[key]
        labels = {k: v for k, v in self.labels.items()
                  if (keep_subj is None or k[0] in keep_subj)
                  and (keep_stim is None or k[1] in keep_stim)}
        return ClipDataset(self.t_seconds, self.sample_rate, self.modalities, clips, labels, pos_map)

    def all_samples(self) -> list:
        """Deterministically ordered (subject, stimulus, position) triples."""
        out = []
        for subj in self.subjects:
            for stim, pos in self.slots_for(subj):
                out.append((subj, stim, pos))
        return out


def build_clip_dataset(manifest: DatasetManifest, t_seconds: float, *,
                       baseline_seconds: float = 0.0,
                       truncate_last_seconds: float | None = None,
                       dtype=np.float32) -> ClipDataset:
    """Load, preprocess, and segment every trial of the container."""
    fs = manifest.sample_rate_hz
    clips: dict = {}
    labels: dict = {}
    kind = manifest.rating_scale.kind
    for trial in manifest.trials:
        labels[(trial.subject, trial.stimulus)] = LabelSet(
            binarize_rating(trial.ratings["arousal"], kind, manifest.rating_scale),
            binarize_rating(trial.ratings["valence"], kind, manifest.rating_scale),
        )
        for mod in manifest.modality_ids:
            sig = load_trial(manifest, trial, mod).astype(dtype)
            if baseline_seconds > 0:
                sig = baseline_correct(sig, baseline_seconds, fs)
            if truncate_last_seconds is not None:
                sig = truncate_last(sig, truncate_last_seconds, fs)
            segs = segment_trial(sig, t_seconds, fs, modality=mod,
                                 subject=trial.subject, stimulus=trial.stimulus)
            clips[(mod, trial.subject, trial.stimulus)] = np.stack([c.data for c in segs])
    return ClipDataset(t_seconds, fs, tuple(manifest.modality_ids), clips, labels)


def sample_minibatch(dataset: ClipDataset, subject_a: str, subject_b: str, k: int,
                     rng: np.random.Generator) -> MiniBatch:
    """Draw k (stimulus, position) slots without replacement, paired across two subjects."""
    if subject_a == subject_b:
        raise ValueError("mini-batch subjects must differ")
    slots = dataset.common_slots(subject_a, subject_b)
    if len(slots) < k:
        raise ValueError(f"only {len(slots)} paired clips available, need k={k}")
    chosen_idx = rng.choice(len(slots), size=k, replace=False)
    chosen = [slots[i] for i in chosen_idx]
    clips = {}
    for i, (stim, pos) in enumerate(chosen):
        for subj in (subject_a, subject_b):
            for mod in dataset.modalities:
                clips[(i, subj, mod)] = dataset.clip(mod, subj, stim, pos)
    return MiniBatch(
        subjects=(subject_a, subject_b),
        modalities=dataset.modalities,
        slots=[SlotKey(stim, pos) for stim, pos in chosen],
        clips=clips,
        t_seconds=dataset.t_seconds,
    )
