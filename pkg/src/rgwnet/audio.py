"""Audio ingestion, segmentation, and the synthetic rotor-sound generator.

Recordings are read from PCM WAV files (16- or 24-bit signed LPCM, channel 0
of multichannel files), split into fixed-length non-overlapping segments, and
standardized to mean 0 / std 1 per segment.  A parametric generator produces
drone-like harmonic signatures from rotor specifications (RPM band, blade
count), which stands in for field recordings in desk-scale experiments:
light high-RPM platforms get bright fast-decaying harmonic stacks, heavy
platforms get strong low-frequency content.
"""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, InvalidParameterError

SILENCE_STD = 1e-12


@dataclass
class Segment:
    """One standardized fixed-length frame: the unit of training/inference."""

    samples: np.ndarray
    label: int
    source: str
    sample_rate: int


@dataclass
class SynthRecipe:
    """Rotor-sound generator parameters for one synthetic recording."""

    rotor_rpm_range: tuple[float, float]
    blades_per_rotor: int = 2
    rotors: int = 4
    harmonics: int = 8
    harmonic_decay: float = 0.7
    snr_db: float = math.inf
    duration_s: float = 1.0
    seed: int = 0

    def __post_init__(self):
        low, high = self.rotor_rpm_range
        if low > high:
            raise InvalidParameterError(f"rpm range {low}..{high} has low > high")
        if low <= 0:
            raise InvalidParameterError("rpm must be positive")
        for name in ("blades_per_rotor", "rotors", "harmonics"):
            if getattr(self, name) < 1:
                raise InvalidParameterError(f"{name} must be positive")
        if self.duration_s <= 0:
            raise InvalidParameterError("duration_s must be positive")


@dataclass
class ManifestEntry:
    """One audio source bound to a class label."""

    kind: str                      # "wav" | "synth" | "noise"
    label: str
    path: str | None = None
    recipe: SynthRecipe | None = None
    duration_s: float | None = None   # noise entries
    seed: int | None = None           # noise entries
    ident: str = ""


@dataclass
class DatasetManifest:
    """Catalog binding audio sources to class labels and segmentation rules."""

    entries: list[ManifestEntry]
    class_names: list[str]
    sample_rate: int
    segment_ms: int = 100
    seed: int = 0

    def __post_init__(self):
        if not self.class_names:
            raise DataError("manifest declares no classes")
        have = {e.label for e in self.entries}
        missing = [c for c in self.class_names if c not in have]
        if missing:
            raise DataError(f"classes without entries: {missing}")
        unknown = [e.label for e in self.entries if e.label not in self.class_names]
        if unknown:
            raise DataError(f"entries with undeclared classes: {sorted(set(unknown))}")

    @property
    def segment_length(self) -> int:
        return int(round(self.sample_rate * self.segment_ms / 1000.0))


# rotor specifications of the platforms used throughout; decay encodes
# timbre (ultralight high-RPM airframes sound brighter, so their harmonic
# stack decays slower; heavy platforms concentrate energy in low harmonics)
@dataclass(frozen=True)
class Platform:
    rotors: int
    blades: int
    rpm: tuple[float, float]
    decay: float
    harmonics: int


PLATFORMS = {
    "mavic_pro": Platform(4, 2, (5000.0, 7800.0), 0.80, 8),
    "mavic_pro_2": Platform(4, 2, (5000.0, 7800.0), 0.76, 8),
    "mavic_mini": Platform(4, 2, (6000.0, 8500.0), 0.90, 8),
    "mavic_3_pro": Platform(4, 2, (4800.0, 7200.0), 0.85, 8),
    "avata_2": Platform(4, 3, (9000.0, 12000.0), 0.88, 6),
    "matrice_30t": Platform(4, 2, (2500.0, 4200.0), 0.65, 12),
}


def platform_recipe(name: str, sample_rate: int, duration_s: float,
                    snr_db: float, seed: int, harmonics: int | None = None) -> SynthRecipe:
    """Recipe for a named platform, capping harmonics to the Nyquist guard."""
    spec = PLATFORMS[name]
    bpf_max = spec.rpm[1] / 60.0 * spec.blades
    cap = int(sample_rate / (2.0 * bpf_max * 1.1))  # 10% headroom for drift
    wanted = spec.harmonics if harmonics is None else harmonics
    return SynthRecipe(
        rotor_rpm_range=spec.rpm, blades_per_rotor=spec.blades,
        rotors=spec.rotors, harmonics=max(1, min(wanted, cap)),
        harmonic_decay=spec.decay, snr_db=snr_db, duration_s=duration_s,
        seed=seed,
    )


def load_wav(path):
    """Read a PCM WAV file as (samples scaled to [-1, 1), sample_rate).

    Supports 16- and 24-bit signed LPCM; multichannel files contribute
    channel 0 only.
    """
    try:
        with wave.open(str(path), "rb") as handle:
            channels = handle.getnchannels()
            width = handle.getsampwidth()
            rate = handle.getframerate()
            frames = handle.getnframes()
            raw = handle.readframes(frames)
    except wave.Error as exc:
        raise FormatError(f"{path}: not a PCM WAV file ({exc})") from exc
    if width not in (2, 3):
        raise FormatError(f"{path}: unsupported sample width {8 * width} bits")
    if len(raw) < frames * channels * width:
        raise OSError(f"{path}: truncated file "
                      f"({len(raw)} bytes < {frames * channels * width})")

    if width == 2:
        data = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    else:
        as_bytes = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3)
        data = (as_bytes[:, 0].astype(np.int32)
                | (as_bytes[:, 1].astype(np.int32) << 8)
                | (as_bytes[:, 2].astype(np.int32) << 16))
        data = np.where(data >= 1 << 23, data - (1 << 24), data).astype(np.float64)
    data = data.reshape(-1, channels)[:, 0]
    return data / float(1 << (8 * width - 1)), rate


def write_wav(path, samples, sample_rate: int, bits: int = 16) -> None:
    """Write mono PCM WAV; samples are clipped to [-1, 1] and quantized."""
    if bits not in (16, 24):
        raise FormatError(f"unsupported bit depth {bits}")
    full = 1 << (bits - 1)
    quantized = np.rint(np.asarray(samples, dtype=float) * full)
    quantized = np.clip(quantized, -full, full - 1).astype(np.int32)
    if bits == 16:
        payload = quantized.astype("<i2").tobytes()
    else:
        unsigned = np.where(quantized < 0, quantized + (1 << 24), quantized)
        triple = np.empty((quantized.size, 3), dtype=np.uint8)
        triple[:, 0] = unsigned & 0xFF
        triple[:, 1] = (unsigned >> 8) & 0xFF
        triple[:, 2] = (unsigned >> 16) & 0xFF
        payload = triple.tobytes()
    with wave.open(str(path), "wb") as handle:
        handle.setnchannels(1)
        handle.setsampwidth(bits // 8)
        handle.setframerate(sample_rate)
        handle.writeframes(payload)


def segment_signal(signal, sample_rate: int, segment_ms: int = 100,
                   label: int = -1, source: str = "") -> list[Segment]:
    """Non-overlapping fixed-length windows, each standardized to mean 0 / std 1.

    The trailing partial window is dropped; windows with std below 1e-12
    (silence / constants) are emitted as all zeros.
    """
    sig = np.asarray(signal, dtype=float).reshape(-1)
    length = int(round(sample_rate * segment_ms / 1000.0))
    count = sig.size // length
    if count < 1:
        raise DataError(
            f"signal of {sig.size} samples shorter than one {segment_ms} ms "
            f"segment ({length} samples at {sample_rate} Hz)")
    segments = []
    for i in range(count):
        window = sig[i * length:(i + 1) * length]
        mean = window.mean()
        std = window.std()
        if std < SILENCE_STD:
            samples = np.zeros(length)
        else:
            samples = (window - mean) / std
        segments.append(Segment(samples, label, f"{source}@{i * length}", sample_rate))
    return segments


def peak_normalize(signal: np.ndarray) -> np.ndarray:
    peak = np.max(np.abs(signal)) if signal.size else 0.0
    return signal / peak if peak > 0 else signal


def add_noise_snr(signal: np.ndarray, snr_db: float, rng) -> np.ndarray:
    """White Gaussian noise scaled so 10 log10(P_signal/P_noise) = snr_db."""
    if not np.isfinite(snr_db):
        return signal
    power = float(np.mean(signal * signal))
    sigma = math.sqrt(power / 10.0 ** (snr_db / 10.0))
    return signal + sigma * np.random.default_rng(rng).standard_normal(signal.size)


def synthesize(recipe: SynthRecipe, sample_rate: int) -> np.ndarray:
    """Drone-like harmonic signature from rotor specifications.

    Per rotor the generator draws an RPM uniformly from the recipe range and a
    slow linear RPM drift (at most 2% per second), then sums the blade-pass
    fundamental and its harmonics with per-harmonic random phase and geometric
    amplitude decay.  White noise is added at the requested SNR (snr_db=inf
    disables it) and the output is peak-normalized to [-1, 1].

    The draw order per rotor is fixed (rpm, drift, then one phase per
    harmonic) so the signal is reproducible from the recipe seed.
    """
    low, high = recipe.rotor_rpm_range
    bpf_max = high / 60.0 * recipe.blades_per_rotor
    if sample_rate < 2.0 * recipe.harmonics * bpf_max:
        raise InvalidParameterError(
            f"sample rate {sample_rate} below Nyquist bound "
            f"{2.0 * recipe.harmonics * bpf_max:.0f} Hz for "
            f"{recipe.harmonics} harmonics of BPF {bpf_max:.1f} Hz")
    rng = np.random.default_rng(recipe.seed)
    count = int(round(recipe.duration_s * sample_rate))
    t = np.arange(count) / float(sample_rate)
    signal = np.zeros(count)
    for _rotor in range(recipe.rotors):
        rpm = rng.uniform(low, high)
        drift = rng.uniform(-0.02, 0.02)  # fractional RPM ramp per second
        # phase(t) = 2 pi integral of bpf(t'); linear ramp integrates in closed form
        base_phase = (2.0 * math.pi * recipe.blades_per_rotor / 60.0
                      * rpm * (t + 0.5 * drift * t * t))
        for h in range(1, recipe.harmonics + 1):
            phase0 = rng.uniform(0.0, 2.0 * math.pi)
            signal += recipe.harmonic_decay ** (h - 1) * np.sin(h * base_phase + phase0)
    if np.isfinite(recipe.snr_db):
        power = float(np.mean(signal * signal))
        sigma = math.sqrt(power / 10.0 ** (recipe.snr_db / 10.0))
        signal = signal + sigma * rng.standard_normal(count)
    return peak_normalize(signal)


def white_noise(duration_s: float, sample_rate: int, seed: int) -> np.ndarray:
    """Peak-normalized white Gaussian noise (the noise-only source kind)."""
    count = int(round(duration_s * sample_rate))
    return peak_normalize(np.random.default_rng(seed).standard_normal(count))


def _render_entry(entry: ManifestEntry, manifest: DatasetManifest):
    if entry.kind == "wav":
        signal, rate = load_wav(entry.path)
        if rate != manifest.sample_rate:
            raise DataError(
                f"sample rate {rate} Hz does not match manifest "
                f"{manifest.sample_rate} Hz (resampling is unsupported)")
        return signal
    if entry.kind == "synth":
        return synthesize(entry.recipe, manifest.sample_rate)
    if entry.kind == "noise":
        return white_noise(entry.duration_s, manifest.sample_rate, entry.seed)
    raise DataError(f"unknown entry kind {entry.kind!r}")


def build_dataset(manifest: DatasetManifest) -> list[Segment]:
    """Load/synthesize every entry, segment, label, and shuffle deterministically."""
    if not manifest.entries:
        raise DataError("manifest has no entries")
    segments: list[Segment] = []
    for index, entry in enumerate(manifest.entries):
        ident = entry.ident or f"{entry.kind}:{index}"
        try:
            signal = _render_entry(entry, manifest)
            label = manifest.class_names.index(entry.label)
            segments.extend(segment_signal(
                signal, manifest.sample_rate, manifest.segment_ms,
                label=label, source=ident))
        except (DataError, FormatError, InvalidParameterError, OSError) as exc:
            raise type(exc)(f"{ident}: {exc}") from exc
    order = np.random.default_rng(manifest.seed).permutation(len(segments))
    return [segments[i] for i in order]


# ---------------------------------------------------------------------------
# manifest files: line records, documented in the README
#
#   sample_rate 8000
#   segment_ms 100
#   seed 42
#   class noise
#   class drone
#   noise noise duration_s=4.0 seed=7
#   synth drone rpm=4800:7200 rotors=4 blades=2 harmonics=8 decay=0.75 \
#         snr_db=5 duration_s=4.0 seed=12
#   wav drone clips/pass_01.wav
# ---------------------------------------------------------------------------

_HEADER_KEYS = ("sample_rate", "segment_ms", "seed")


def _parse_kv(tokens, lineno):
    out = {}
    for token in tokens:
        if "=" not in token:
            raise DataError(f"line {lineno}: expected key=value, got {token!r}")
        key, value = token.split("=", 1)
        out[key] = value
    return out


def _float_or_inf(text):
    return math.inf if text in ("inf", "+inf") else float(text)


def _recipe_from_kv(kv, lineno) -> SynthRecipe:
    try:
        low, high = kv["rpm"].split(":")
        return SynthRecipe(
            rotor_rpm_range=(float(low), float(high)),
            blades_per_rotor=int(kv.get("blades", 2)),
            rotors=int(kv.get("rotors", 4)),
            harmonics=int(kv.get("harmonics", 8)),
            harmonic_decay=float(kv.get("decay", 0.7)),
            snr_db=_float_or_inf(kv.get("snr_db", "inf")),
            duration_s=float(kv.get("duration_s", 1.0)),
            seed=int(kv.get("seed", 0)),
        )
    except (KeyError, ValueError) as exc:
        raise DataError(f"line {lineno}: bad synth record ({exc})") from exc


def parse_manifest(path) -> DatasetManifest:
    path = Path(path)
    header = {"segment_ms": 100, "seed": 0}
    class_names: list[str] = []
    entries: list[ManifestEntry] = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            head = tokens[0]
            if head in _HEADER_KEYS:
                if len(tokens) != 2:
                    raise DataError(f"line {lineno}: {head} takes one value")
                header[head] = int(tokens[1])
            elif head == "class":
                if len(tokens) != 2:
                    raise DataError(f"line {lineno}: class takes one name")
                class_names.append(tokens[1])
            elif head == "wav":
                if len(tokens) != 3:
                    raise DataError(f"line {lineno}: expected 'wav <class> <path>'")
                wav_path = Path(tokens[2])
                if not wav_path.is_absolute():
                    wav_path = path.parent / wav_path
                entries.append(ManifestEntry(
                    "wav", tokens[1], path=str(wav_path),
                    ident=f"wav:{tokens[2]}"))
            elif head == "synth":
                if len(tokens) < 3:
                    raise DataError(f"line {lineno}: expected 'synth <class> k=v...'")
                kv = _parse_kv(tokens[2:], lineno)
                entries.append(ManifestEntry(
                    "synth", tokens[1], recipe=_recipe_from_kv(kv, lineno),
                    ident=kv.get("id", f"synth:{lineno}")))
            elif head == "noise":
                if len(tokens) < 3:
                    raise DataError(f"line {lineno}: expected 'noise <class> k=v...'")
                kv = _parse_kv(tokens[2:], lineno)
                entries.append(ManifestEntry(
                    "noise", tokens[1],
                    duration_s=float(kv.get("duration_s", 1.0)),
                    seed=int(kv.get("seed", 0)),
                    ident=kv.get("id", f"noise:{lineno}")))
            else:
                raise DataError(f"line {lineno}: unknown record {head!r}")
    if "sample_rate" not in header:
        raise DataError(f"{path}: manifest missing sample_rate")
    return DatasetManifest(entries, class_names, header["sample_rate"],
                           header["segment_ms"], header["seed"])


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    lines = [
        f"sample_rate {manifest.sample_rate}",
        f"segment_ms {manifest.segment_ms}",
        f"seed {manifest.seed}",
    ]
    lines += [f"class {name}" for name in manifest.class_names]
    for entry in manifest.entries:
        if entry.kind == "wav":
            rel = Path(entry.path)
            try:
                rel = rel.relative_to(path.parent)
            except ValueError:
                pass
            lines.append(f"wav {entry.label} {rel}")
        elif entry.kind == "synth":
            r = entry.recipe
            snr = "inf" if not np.isfinite(r.snr_db) else repr(float(r.snr_db))
            lines.append(
                f"synth {entry.label} rpm={r.rotor_rpm_range[0]:g}:{r.rotor_rpm_range[1]:g} "
                f"rotors={r.rotors} blades={r.blades_per_rotor} "
                f"harmonics={r.harmonics} decay={r.harmonic_decay!r} "
                f"snr_db={snr} duration_s={r.duration_s!r} seed={r.seed}")
        else:
            lines.append(f"noise {entry.label} duration_s={entry.duration_s!r} "
                         f"seed={entry.seed}")
    path.write_text("\n".join(lines) + "\n")
