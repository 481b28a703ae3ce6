"""Synthetic multi-domain dialect corpora, manifests and experiment plans.

A corpus is a directory of DIDF feature files plus ``manifest.csv``. Each
class has a mean vector shared by every domain; each utterance adds its own
offset and AR(1)-smoothed frame noise, and each domain then applies its own
seeded affine channel ``x -> A_d x + delta_d``. With ``channel_strength`` 0
the channel is the identity, so domains differ only in their class counts.
"""

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import featext

SPLITS = ("train", "dev", "test")
MANIFEST_HEADER = ["utt_id", "path", "dialect", "domain", "split"]
DEFAULT_LABELS = ["EGY", "GLF", "LEV", "MSA", "NOR"]
N_DIMS = featext.N_CEPS


class ManifestError(ValueError):
    pass


class ProtocolError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Manifest


@dataclass(frozen=True)
class ManifestRow:
    utt_id: str
    path: str
    dialect: str
    domain: str
    split: str


@dataclass
class Manifest:
    rows: list
    base_dir: Path = field(default_factory=Path, compare=False)

    def __post_init__(self):
        seen = set()
        for row in self.rows:
            if row.utt_id in seen:
                raise ManifestError(f"duplicate utt_id {row.utt_id!r}")
            seen.add(row.utt_id)
            if row.split not in SPLITS:
                raise ManifestError(f"{row.utt_id}: unknown split {row.split!r}")

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def resolve(self, row):
        p = Path(row.path)
        return p if p.is_absolute() else self.base_dir / p

    def select(self, split=None, domains=None):
        if isinstance(split, str):
            split = (split,)
        rows = [
            r for r in self.rows
            if (split is None or r.split in split) and (domains is None or r.domain in domains)
        ]
        return Manifest(rows, self.base_dir)

    def domains(self):
        return list(dict.fromkeys(r.domain for r in self.rows))

    def dialects(self):
        return list(dict.fromkeys(r.dialect for r in self.rows))

    def missing_files(self):
        return [r.utt_id for r in self.rows if not self.resolve(r).is_file()]


def read_manifest(path):
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ManifestError(f"{path}:1: empty manifest (missing header)") from None
    if header != MANIFEST_HEADER:
        raise ManifestError(f"{path}:1: header must be {','.join(MANIFEST_HEADER)}, got {','.join(header)}")
    rows, seen = [], {}
    for lineno, fields in enumerate(reader, start=2):
        if not fields:
            continue
        if len(fields) != len(MANIFEST_HEADER):
            raise ManifestError(f"{path}:{lineno}: expected 5 fields, got {len(fields)}")
        row = ManifestRow(*fields)
        if not row.utt_id:
            raise ManifestError(f"{path}:{lineno}: empty utt_id")
        if row.utt_id in seen:
            raise ManifestError(
                f"{path}:{lineno}: duplicate utt_id {row.utt_id!r} (first on line {seen[row.utt_id]})"
            )
        if row.split not in SPLITS:
            raise ManifestError(f"{path}:{lineno}: split {row.split!r} not in {SPLITS}")
        seen[row.utt_id] = lineno
        rows.append(row)
    return Manifest(rows, path.parent)


def write_manifest(path, manifest):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MANIFEST_HEADER)
    for r in manifest.rows:
        w.writerow([r.utt_id, r.path, r.dialect, r.domain, r.split])
    Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="")


# ---------------------------------------------------------------------------
# Corpus description


@dataclass
class DomainSpec:
    name: str
    train_per_class: list
    dev_per_class: list
    test_per_class: list
    channel_strength: float = 1.0
    noise: float = 1.0
    min_frames: int = 40
    max_frames: int = 80


@dataclass
class CorpusSpec:
    labels: list = field(default_factory=lambda: list(DEFAULT_LABELS))
    domains: list = field(default_factory=list)
    separation: float = 1.0
    utterance_spread: float = 1.5
    smoothing: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.domains = [d if isinstance(d, DomainSpec) else DomainSpec(**d) for d in self.domains]
        self.validate()

    @property
    def n_classes(self):
        return len(self.labels)

    def validate(self):
        L = len(self.labels)
        if L < 2:
            raise ValueError("corpus needs at least 2 classes")
        if len(set(self.labels)) != L:
            raise ValueError("class labels must be unique")
        if len(self.domains) < 2:
            raise ValueError("corpus needs at least 2 domains")
        if len({d.name for d in self.domains}) != len(self.domains):
            raise ValueError("domain names must be unique")
        if self.separation <= 0:
            raise ValueError("separation must be > 0")
        if not 0 <= self.smoothing < 1:
            raise ValueError("smoothing must lie in [0, 1)")
        for d in self.domains:
            for split in SPLITS:
                counts = getattr(d, f"{split}_per_class")
                if len(counts) != L:
                    raise ValueError(f"domain {d.name}: {split}_per_class needs {L} entries")
                if any(int(c) < 1 for c in counts):
                    raise ValueError(f"domain {d.name}: all {split} counts must be >= 1")
            if d.min_frames < 1 or d.max_frames < d.min_frames:
                raise ValueError(f"domain {d.name}: bad frame range")
            if d.noise < 0 or d.channel_strength < 0:
                raise ValueError(f"domain {d.name}: noise and channel strength must be >= 0")

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def default_spec(seed=0, n_domains=2):
    """Five dialects over two (or three) channel domains.

    Domain A is balanced like a broadcast corpus; domain B is larger and
    skewed like a crawled web corpus; the optional domain C is a second
    balanced broadcast-like condition.
    """
    doms = [
        DomainSpec("A", [60] * 5, [30] * 5, [60] * 5),
        DomainSpec("B", [90, 90, 140, 40, 50], [30] * 5, [60] * 5),
        DomainSpec("C", [60] * 5, [30] * 5, [60] * 5),
    ]
    return CorpusSpec(domains=doms[:n_domains], seed=seed)


# ---------------------------------------------------------------------------
# Generation


def _channel(rng, strength):
    a = np.eye(N_DIMS) + strength * rng.normal(size=(N_DIMS, N_DIMS)) / np.sqrt(N_DIMS)
    delta = strength * rng.normal(size=N_DIMS)
    return a, delta


def _utterance(rng, mean, n_frames, spread, noise, rho):
    offset = spread * rng.normal(size=N_DIMS)
    eps = rng.normal(size=(n_frames, N_DIMS))
    e = np.empty_like(eps)
    e[0] = eps[0]
    gain = np.sqrt(1.0 - rho * rho)
    for t in range(1, n_frames):
        e[t] = rho * e[t - 1] + gain * eps[t]
    return mean + offset + noise * e


def generate_arrays(spec):
    """Yield (utt_id, dialect, domain, split, frames) in a fixed order."""
    rng = np.random.default_rng(spec.seed)
    means = spec.separation * rng.normal(size=(spec.n_classes, N_DIMS))
    channels = {d.name: _channel(rng, d.channel_strength) for d in spec.domains}
    for d in spec.domains:
        a, delta = channels[d.name]
        for split in SPLITS:
            counts = getattr(d, f"{split}_per_class")
            for c, label in enumerate(spec.labels):
                for i in range(int(counts[c])):
                    n = int(rng.integers(d.min_frames, d.max_frames + 1))
                    z = _utterance(rng, means[c], n, spec.utterance_spread, d.noise, spec.smoothing)
                    x = z @ a.T + delta
                    yield f"{d.name}-{split}-{label}-{i:04d}", label, d.name, split, x


def generate(spec, out_dir):
    """Write features and ``manifest.csv`` under ``out_dir``; return the Manifest."""
    out_dir = Path(out_dir)
    feat_dir = out_dir / "features"
    try:
        feat_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create corpus directory {out_dir}: {exc}") from None
    rows = []
    for utt_id, label, dom, split, x in generate_arrays(spec):
        rel = f"features/{utt_id}.didf"
        featext.write_features(out_dir / rel, featext.FeatureMatrix(x, utt_id))
        rows.append(ManifestRow(utt_id, rel, label, dom, split))
    manifest = Manifest(rows, out_dir)
    write_manifest(out_dir / "manifest.csv", manifest)
    (out_dir / "corpus_spec.json").write_text(spec.to_json())
    return manifest


def synth_audio(out_dir, labels=DEFAULT_LABELS, domains=("A", "B"), per_class=2,
                seconds=1.0, seed=0, split="train"):
    """Small WAV corpus (class-specific tone pairs plus noise) for the MFCC path.

    Domains differ by a fixed spectral tilt and noise level.
    """
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n = int(seconds * featext.SAMPLE_RATE)
    t = np.arange(n) / featext.SAMPLE_RATE
    rows = []
    for di, dom in enumerate(domains):
        for c, label in enumerate(labels):
            f0 = 250.0 * (c + 1)
            for i in range(per_class):
                sig = 0.3 * np.sin(2 * np.pi * f0 * t) + 0.15 * np.sin(2 * np.pi * 2.7 * f0 * t)
                sig = sig + (0.02 + 0.03 * di) * rng.normal(size=n)
                if di % 2:
                    sig = np.concatenate([[sig[0]], sig[1:] - 0.9 * sig[:-1]])
                sig = 0.9 * sig / max(1e-9, np.max(np.abs(sig)))
                utt_id = f"{dom}-{split}-{label}-{i:04d}"
                rel = f"wav/{utt_id}.wav"
                featext.write_wav(out_dir / rel, featext.AudioClip(sig, utt_id=utt_id))
                rows.append(ManifestRow(utt_id, rel, label, dom, split))
    manifest = Manifest(rows, out_dir)
    write_manifest(out_dir / "manifest.csv", manifest)
    return manifest


# ---------------------------------------------------------------------------
# Protocols


def protocol(condition, domains, unseen_domain=None):
    """Experiment plan (JSON-serialisable dict) for the seen/unseen conditions.

    seen: every domain trains a system and is tested.
    unseen: ``unseen_domain`` (default: the first domain) is removed from all
    training sets but still tested.
    """
    domains = list(domains)
    if condition not in ("seen", "unseen"):
        raise ProtocolError(f"condition must be 'seen' or 'unseen', got {condition!r}")
    if condition == "seen":
        if len(domains) < 2:
            raise ProtocolError("seen condition needs >= 2 domains")
        train_domains, unseen = list(domains), []
    else:
        if len(domains) < 2:
            raise ProtocolError("unseen condition needs >= 2 domains")
        held = unseen_domain if unseen_domain is not None else domains[0]
        if held not in domains:
            raise ProtocolError(f"unknown domain {held!r}")
        train_domains, unseen = [d for d in domains if d != held], [held]

    systems = [
        {"id": d, "kind": "single", "train_domains": [d], "width_multiplier": 1}
        for d in train_domains
    ]
    singles = [s["id"] for s in systems]
    if len(train_domains) >= 2:
        systems.append({
            "id": "+".join(train_domains),
            "kind": "multi",
            "train_domains": list(train_domains),
            # capacity grows with the number of pooled domains
            "width_multiplier": len(train_domains),
        })
        for d in train_domains:
            systems.append({
                "id": f"LR({d})", "kind": "lr_fusion", "bases": singles, "calibration_domain": d,
            })
        systems.append({"id": "fusion-layer", "kind": "fusion_layer", "bases": singles})
        systems.append({"id": "attentive-a", "kind": "attentive", "variant": "output", "bases": singles})
        systems.append({"id": "attentive-b", "kind": "attentive", "variant": "hidden", "bases": singles})
    return {
        "condition": condition,
        "domains": domains,
        "train_domains": train_domains,
        "unseen_domains": unseen,
        "test_domains": domains,
        "systems": systems,
    }


def plan_to_json(plan):
    return json.dumps(plan, indent=2, sort_keys=True) + "\n"
