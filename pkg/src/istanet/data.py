"""Loading, validation, resampling and splitting of interactive skeleton
sequences in the unified (C, T, J, E) layout.

The on-disk `.iskel` text format:
    line 1: magic "ISKEL 1"
    line 2: five integers "C T J E label"
    then C*T*J*E decimal floats, whitespace separated, index order
    t outermost, then j, then e, then c innermost.
Manifests list one sample per line: "relative/path.iskel <label> <tag>",
'#' starts a comment. Tags are either split names (train/val/test) or fold
tags (fold0, fold1, ...).
"""

import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .engine import ConfigurationError


class ParseError(ValueError):
    """Malformed .iskel or manifest content; carries the offending line."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(ValueError):
    """Structurally valid input that violates a dataset-level invariant."""


@dataclass
class SkeletonSequence:
    """One interactive action sample: data is (C,T,J,E), C in {2,3}."""

    data: np.ndarray
    label: int
    valid_frames: int = 0
    source_id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 4:
            raise ValidationError(f"skeleton data must be rank 4 (C,T,J,E), got rank {self.data.ndim}")
        c, t, j, e = self.data.shape
        if c not in (2, 3):
            raise ValidationError(f"coordinate dimension C must be 2 or 3, got {c}")
        if min(t, j, e) < 1:
            raise ValidationError(f"axes T,J,E must all be >= 1, got shape {self.data.shape}")
        if self.label < 0:
            raise ValidationError(f"label must be >= 0, got {self.label}")
        if self.valid_frames <= 0:
            self.valid_frames = t
        if self.valid_frames > t:
            raise ValidationError(f"valid_frames {self.valid_frames} exceeds T={t}")
        if not np.isfinite(self.data).all():
            raise ValidationError("skeleton data contains non-finite values")

    @property
    def shape(self):
        return self.data.shape


_MAGIC = "ISKEL 1"


def parse_iskel(raw, source_id=""):
    """Parse `.iskel` bytes or text into a SkeletonSequence."""
    if isinstance(raw, bytes):
        raw = raw.decode("utf-8")
    lines = raw.split("\n")
    if not lines or lines[0].strip() != _MAGIC:
        raise ParseError(f"bad magic, expected {_MAGIC!r}", line=1)
    if len(lines) < 2:
        raise ParseError("missing header line", line=2)
    header = lines[1].split()
    if len(header) != 5:
        raise ParseError(f"header must be 'C T J E label', got {lines[1]!r}", line=2)
    try:
        c, t, j, e, label = (int(v) for v in header)
    except ValueError:
        raise ParseError(f"non-integer header field in {lines[1]!r}", line=2) from None
    if c not in (2, 3):
        raise ParseError(f"coordinate dimension C must be 2 or 3, got {c}", line=2)
    if min(t, j, e) < 1 or label < 0:
        raise ParseError(f"invalid header dims/label {header}", line=2)

    expected = c * t * j * e
    tokens = "\n".join(lines[2:]).split()
    if len(tokens) != expected:
        raise ParseError(f"expected {expected} values, found {len(tokens)}", line=3)
    try:
        values = np.array([float(v) for v in tokens], dtype=np.float64)
    except ValueError:
        raise ParseError("non-numeric coordinate value", line=3) from None
    if not np.isfinite(values).all():
        raise ParseError("non-finite coordinate value", line=3)

    # stored order: t outermost, then j, then e, then c innermost
    data = values.reshape(t, j, e, c).transpose(3, 0, 1, 2)
    return SkeletonSequence(data=data, label=label, source_id=source_id)


def serialize_iskel(seq):
    """Render a SkeletonSequence back to `.iskel` text (parse fixed point)."""
    c, t, j, e = seq.data.shape
    flat = seq.data.transpose(1, 2, 3, 0).reshape(-1)
    lines = [_MAGIC, f"{c} {t} {j} {e} {seq.label}"]
    lines.extend(" ".join(repr(float(v)) for v in row) for row in flat.reshape(t, -1))
    return "\n".join(lines) + "\n"


def resample_frames(seq, target_t):
    """Linearly resample the valid-frame range to exactly target_t frames."""
    if target_t < 1:
        raise ConfigurationError(f"target frame count must be >= 1, got {target_t}")
    n = seq.valid_frames
    valid = seq.data[:, :n]
    if n == 1:
        out = np.repeat(valid, target_t, axis=1)
    else:
        pos = np.linspace(0.0, n - 1.0, target_t)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n - 1)
        frac = (pos - lo).reshape(1, -1, 1, 1)
        out = valid[:, lo] * (1.0 - frac) + valid[:, hi] * frac
    return SkeletonSequence(data=out, label=seq.label, valid_frames=target_t,
                            source_id=seq.source_id)


def center_sequence(seq):
    """Subtract the mean joint position of the first valid frame.

    Removes absolute position; relative geometry and motion are untouched.
    """
    center = seq.data[:, 0].mean(axis=(1, 2)).reshape(-1, 1, 1, 1)
    return SkeletonSequence(data=seq.data - center, label=seq.label,
                            valid_frames=seq.valid_frames, source_id=seq.source_id)


def compute_padding(n, w):
    """Amount to pad axis of length n so the window length w divides it."""
    if w <= 0:
        raise ConfigurationError(f"window length must be >= 1, got {w}")
    if n < 1:
        raise ConfigurationError(f"axis length must be >= 1, got {n}")
    return (w - n % w) % w


def pad_to_windows(data, window):
    """Wrap-replicate along T/J/E so each axis divides its window length.

    Pad content is copied from the start of the axis, so padded windows stay
    motion-plausible instead of going artificially still.
    """
    c, t, j, e = data.shape
    out = data
    for ax, (n, w) in enumerate(zip((t, j, e), window), start=1):
        pad = compute_padding(n, w)
        if pad:
            idx = np.arange(n + pad) % n
            out = np.take(out, idx, axis=ax)
    return out


@dataclass
class ManifestEntry:
    path: str
    label: int
    tag: str


@dataclass
class DatasetManifest:
    samples: list
    num_classes: int
    class_names: list = field(default_factory=list)
    root: str = "."

    def __post_init__(self):
        if not self.class_names:
            self.class_names = [f"class_{i}" for i in range(self.num_classes)]

    def split(self, tag):
        return [s for s in self.samples if s.tag == tag]

    def fold_tags(self):
        tags = sorted({s.tag for s in self.samples if s.tag.startswith("fold")})
        return tags

    def folds(self):
        """Yield (train_entries, test_entries) per fold tag; partitions are
        disjoint and exhaustive by construction."""
        for tag in self.fold_tags():
            test = [s for s in self.samples if s.tag == tag]
            train = [s for s in self.samples if s.tag != tag]
            yield train, test

    def load(self, entry):
        path = os.path.join(self.root, entry.path)
        with open(path, "r", encoding="utf-8") as f:
            seq = parse_iskel(f.read(), source_id=entry.path)
        if seq.label != entry.label:
            raise ValidationError(
                f"{entry.path}: file label {seq.label} != manifest label {entry.label}")
        return seq


def load_manifest(path, num_classes=None):
    """Parse a manifest file; sample order follows the file deterministically."""
    root = os.path.dirname(os.path.abspath(path))
    entries = []
    seen = set()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ParseError(f"manifest line must be 'path label tag', got {line!r}",
                                 line=lineno)
            rel, label_s, tag = parts
            try:
                label = int(label_s)
            except ValueError:
                raise ParseError(f"non-integer label {label_s!r}", line=lineno) from None
            full = os.path.join(root, rel)
            if not os.path.exists(full):
                raise ValidationError(f"manifest references missing file: {full}")
            if rel in seen:
                warnings.warn(f"manifest lists {rel} more than once; loading it twice")
            seen.add(rel)
            entries.append(ManifestEntry(path=rel, label=label, tag=tag))

    inferred = max((e.label for e in entries), default=-1) + 1
    if num_classes is None:
        num_classes = max(inferred, 2)
    for e in entries:
        if e.label >= num_classes:
            raise ValidationError(
                f"{e.path}: label {e.label} >= num_classes {num_classes}")
    return DatasetManifest(samples=entries, num_classes=num_classes, root=root)
