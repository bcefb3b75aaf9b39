"""Dataset ingestion, preprocessing, and the synthetic recording generator.

Sensor windows carry three 3-axis kinds per IMU position, in a fixed order:
gravity estimate, gyroscope, linear acceleration. Gravity is separated from
raw acceleration by a zero-phase low-pass unless the source already provides
a gravity stream, and linear acceleration is the literal remainder, so
gravity + linear reconstructs the accelerometer bit-exactly.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import signal as sps

from .errors import ConfigError, IngestionError, PreprocessingError

KIND_GRAV, KIND_GYRO, KIND_LACC = 0, 1, 2
KIND_NAMES = ("grav", "gyro", "lacc")

BUTTER_ORDER = 3
BUTTER_CUTOFF_HZ = 0.3


@dataclass
class ImuStreams:
    """Raw triaxial streams of one IMU position."""
    accel: np.ndarray            # [3, T]
    gyro: np.ndarray             # [3, T]
    grav: np.ndarray | None = None


@dataclass
class RawRecording:
    """One continuous multi-IMU recording of a single activity."""
    subject_id: str
    activity_label: str
    sample_rate_hz: float
    imus: list
    trial_id: str = "t0"

    def __post_init__(self):
        if self.sample_rate_hz <= 0:
            raise ConfigError("sample_rate_hz must be positive")
        lengths = set()
        for imu in self.imus:
            lengths.add(imu.accel.shape[1])
            lengths.add(imu.gyro.shape[1])
            if imu.grav is not None:
                lengths.add(imu.grav.shape[1])
        if len(lengths) > 1:
            raise IngestionError(
                f"streams of one recording must share length, got {sorted(lengths)}")

    @property
    def length(self) -> int:
        return self.imus[0].accel.shape[1]


@dataclass
class SensorWindow:
    """One segmented sample: data[P, K=3 kinds, 3 axes, L]."""
    data: np.ndarray
    label: int
    subject_id: str
    trial_id: str
    sample_rate_hz: float


@dataclass
class ZNormStats:
    """Per-sensor-kind pooled mean/std from the training split."""
    mean: np.ndarray             # [K]
    std: np.ndarray              # [K]


# ----------------------------------------------------------------------
# preprocessing


def butterworth_gravity_split(accel: np.ndarray, sample_rate_hz: float):
    """Split acceleration into (gravity, linear) with a zero-phase low-pass.

    Order-3 Butterworth at 0.3 Hz, applied forward-backward. The linear part
    is the complement of the gravity estimate, re-paired so that
    gravity + linear == accel holds bit-exactly wherever float64 permits it
    (whenever the exact difference accel - gravity is representable, which
    covers every sample with |linear| <= |accel| and in practice everything
    but deep zero crossings of the total signal). Off that set the sum is
    still within one spacing of |gravity| + |linear|, and the complement
    identity linear == accel - gravity holds everywhere by construction.
    """
    accel = np.asarray(accel, dtype=np.float64)
    if sample_rate_hz <= 2 * BUTTER_CUTOFF_HZ:
        raise PreprocessingError(
            f"sample rate {sample_rate_hz} Hz too low for a "
            f"{BUTTER_CUTOFF_HZ} Hz cutoff")
    if accel.shape[-1] <= 6 * BUTTER_ORDER:
        raise PreprocessingError(
            f"signal of length {accel.shape[-1]} too short to filter")
    b, a = sps.butter(BUTTER_ORDER, BUTTER_CUTOFF_HZ / (sample_rate_hz / 2.0))
    gravity = sps.filtfilt(b, a, accel, axis=-1)
    # re-pair to the fixed point of complementing; moves gravity by <= 1 ulp
    linear = accel - gravity
    gravity = accel - linear
    linear = accel - gravity
    return gravity, linear


def segment(recording: RawRecording, window: int, overlap: int, label: int = -1):
    """Slide a window of `window` samples with `window - overlap` stride.

    Emits SensorWindow items with the (grav, gyro, lacc) kind stack per IMU;
    the gravity estimate comes from the recording's own gravity stream when
    present, otherwise from the Butterworth split. Trailing partial windows
    are dropped; a window longer than the recording yields an empty list
    with a warning.
    """
    if window < 1 or overlap < 0 or overlap >= window:
        raise PreprocessingError(
            f"need 0 <= overlap < window, got window={window} overlap={overlap}")
    T = recording.length
    if window > T:
        warnings.warn(
            f"window {window} exceeds recording length {T}; no windows emitted",
            stacklevel=2)
        return []

    kinds = []
    for imu in recording.imus:
        if imu.grav is not None:
            grav = np.asarray(imu.grav, dtype=np.float64)
            lacc = imu.accel - grav
        else:
            grav, lacc = butterworth_gravity_split(
                imu.accel, recording.sample_rate_hz)
        kinds.append(np.stack([grav, np.asarray(imu.gyro, np.float64), lacc]))
    stacked = np.stack(kinds)                      # [P, K, 3, T]

    stride = window - overlap
    count = (T - window) // stride + 1
    out = []
    for i in range(count):
        start = i * stride
        out.append(SensorWindow(
            data=stacked[:, :, :, start:start + window].copy(),
            label=label,
            subject_id=recording.subject_id,
            trial_id=recording.trial_id,
            sample_rate_hz=recording.sample_rate_hz,
        ))
    return out


def build_windows(recordings, window: int, overlap: int, class_names=None):
    """Segment many recordings; labels indexed into sorted activity names."""
    if class_names is None:
        class_names = sorted({r.activity_label for r in recordings})
    index = {name: i for i, name in enumerate(class_names)}
    windows = []
    for rec in recordings:
        if rec.activity_label not in index:
            raise IngestionError(f"unknown activity {rec.activity_label!r}")
        windows.extend(segment(rec, window, overlap, index[rec.activity_label]))
    return windows, list(class_names)


def znormalize(dataset):
    """Standardize per sensor kind, pooled over windows/IMUs/axes/time.

    Returns (normalized windows, ZNormStats). Statistics must come from the
    training split only; apply them to held-out data with apply_znormalize.
    """
    if not dataset:
        raise PreprocessingError("cannot normalize an empty dataset")
    stacked = np.stack([w.data for w in dataset])  # [n, P, K, 3, L]
    if not np.all(np.isfinite(stacked)):
        raise PreprocessingError("non-finite values in windows")
    axes = (0, 1, 3, 4)
    mean = stacked.mean(axis=axes)
    std = np.maximum(stacked.std(axis=axes), 1e-8)
    stats = ZNormStats(mean=mean, std=std)
    return apply_znormalize(dataset, stats), stats


def apply_znormalize(dataset, stats: ZNormStats):
    mu = stats.mean[None, :, None, None]
    sigma = stats.std[None, :, None, None]
    out = []
    for w in dataset:
        out.append(SensorWindow(
            data=(w.data - mu) / sigma,
            label=w.label, subject_id=w.subject_id, trial_id=w.trial_id,
            sample_rate_hz=w.sample_rate_hz))
    return out


def resample_linear(stream: np.ndarray, from_hz: float, to_hz: float):
    """Linear interpolation from one uniform grid to another.

    Both grids share the origin t=0; the target has round(T * to/from)
    samples and clamps at the source's right edge.
    """
    stream = np.asarray(stream, dtype=np.float64)
    if from_hz <= 0 or to_hz <= 0:
        raise ConfigError("rates must be positive")
    T = stream.shape[-1]
    if T < 2:
        raise PreprocessingError("need at least 2 samples to resample")
    T_out = int(round(T * to_hz / from_hz))
    t_src = np.arange(T) / from_hz
    t_dst = np.arange(T_out) / to_hz
    flat = stream.reshape(-1, T)
    out = np.stack([np.interp(t_dst, t_src, row) for row in flat])
    return out.reshape(stream.shape[:-1] + (T_out,))


# ----------------------------------------------------------------------
# synthetic generator


@dataclass
class ClassSpec:
    """One synthetic activity: an oscillation plus a posture profile."""
    name: str
    freq_hz: float               # dominant motion frequency
    amplitude: float             # oscillation amplitude, m/s^2
    tilt_deg: tuple = (0.0, 0.0)  # mean (roll, pitch) posture
    wobble_hz: float = 0.08      # slow posture sway (must survive the 0.3 Hz LP)
    wobble_amp_rad: float = 0.06
    vib_amp_rad: float = 0.03    # small angular jitter at freq_hz (feeds gyro)


@dataclass
class SyntheticSpec:
    """Recipe for the desk-scale synthetic dataset."""
    classes: list
    grav_noise: float = 0.40     # gravimeter error std (jitter + wander)
    gyro_noise: float = 0.10     # gyro random-walk std (low-frequency path)
    accel_noise: float = 0.12    # accelerometer white-noise std, fixed
    subjects: int = 3
    trials_per_subject: int = 10
    sample_rate_hz: float = 32.0
    duration_s: float = 12.0
    window: int = 128
    overlap: int = 64
    imus: int = 1
    noise_spread: float = 0.75   # per-recording level multiplier in 1 +- spread

    def validate(self):
        nyquist = self.sample_rate_hz / 2.0
        for c in self.classes:
            if c.freq_hz >= nyquist:
                raise ConfigError(
                    f"class {c.name!r} frequency {c.freq_hz} Hz >= Nyquist "
                    f"{nyquist} Hz")
        if self.subjects < 1 or self.trials_per_subject < 1 or self.imus < 1:
            raise ConfigError("subjects, trials and imus must be positive")
        if not (0.0 <= self.noise_spread < 1.0):
            raise ConfigError("noise_spread must be in [0, 1)")


def default_synthetic_spec(**overrides) -> SyntheticSpec:
    """Four activities separated by frequency band and posture profile.

    jog and march are motion twins on purpose: identical oscillation
    spectra, told apart only by stance. The stance cues (a few degrees
    of mean tilt, plus sway that differs in speed and size) live in the
    sub-0.5 Hz band of the posture sensors, so per-recording noise makes
    one source or the other unreliable and the fusion has to earn its
    keep instead of coasting on the motion spectrum.
    """
    classes = [
        ClassSpec("sway", freq_hz=1.0, amplitude=1.2, tilt_deg=(0.0, 0.0),
                  wobble_hz=0.10, wobble_amp_rad=0.10),
        ClassSpec("walk", freq_hz=2.5, amplitude=2.0, tilt_deg=(8.0, -5.0),
                  wobble_hz=0.16, wobble_amp_rad=0.08),
        ClassSpec("jog", freq_hz=5.0, amplitude=3.5, tilt_deg=(-10.0, 12.0),
                  wobble_hz=0.22, wobble_amp_rad=0.12),
        ClassSpec("march", freq_hz=5.0, amplitude=3.5, tilt_deg=(-7.0, 9.0),
                  wobble_hz=0.28, wobble_amp_rad=0.05),
    ]
    spec = SyntheticSpec(classes=classes)
    for key, value in overrides.items():
        if not hasattr(spec, key):
            raise ConfigError(f"unknown synthetic field {key!r}")
        setattr(spec, key, value)
    return spec


G = 9.81


def _gravity_from_angles(roll, pitch):
    """Rotate the rest-frame gravity vector by (roll, pitch)."""
    gx = -G * np.sin(pitch)
    gy = G * np.sin(roll) * np.cos(pitch)
    gz = G * np.cos(roll) * np.cos(pitch)
    return np.stack([gx, gy, gz])


def _unit_std(x):
    x = x - x.mean(axis=-1, keepdims=True)
    scale = x.std(axis=-1, keepdims=True)
    return x / np.maximum(scale, 1e-12)


def band_noise(band: str, shape, sample_rate_hz: float, rng):
    """Unit-std noise confined to one half of the spectrum.

    "high" is white noise high-passed at a quarter of the sample rate,
    matching gravimeter jitter; "low" is integrated white noise low-passed
    at 0.5 Hz, matching gyro drift. Rows come back with exactly unit std
    so callers scale to the level they want.
    """
    raw = rng.standard_normal(shape)
    if band == "high":
        # cutoff is relative to Nyquist: fs/4 == 0.5
        b, a = sps.butter(BUTTER_ORDER, 0.5, btype="highpass")
        shaped = sps.filtfilt(b, a, raw, axis=-1)
    elif band == "low":
        cutoff = 0.5 / (sample_rate_hz / 2.0)
        b, a = sps.butter(BUTTER_ORDER, cutoff, btype="lowpass")
        shaped = sps.filtfilt(b, a, np.cumsum(raw, axis=-1), axis=-1)
    else:
        raise ConfigError(f"unknown noise band {band!r}")
    return _unit_std(shaped)


def generate_synthetic(spec: SyntheticSpec, seed: int):
    """Pure function of (spec, seed) producing RawRecordings.

    Per recording: posture angles = class tilt + slow wobble + a small
    angular vibration at the class frequency; true gravity is the rotated
    constant-g vector; the gyroscope is the analytic angle derivative plus
    integrated-white (low-frequency) noise; the accelerometer is gravity +
    the class oscillation + a small fixed white noise. Each IMU also ships
    an explicit gravimeter stream, the way phone OS fusion stacks expose
    one: true gravity plus an error made of high-band jitter and half as
    much low-band wander (a struggling fusion shows both at once), summed
    then renormalized so its std is exactly grav_noise. Noise streams are
    normalized to unit std, then scaled by the configured level times a
    per-recording multiplier in 1 +- noise_spread, so two specs differing
    only in a noise level produce outputs differing by exactly that level
    times a fixed unit-variance stream. Because the gravimeter stream is
    present, the windowing stage uses it verbatim and derives linear
    acceleration as accel - grav.
    """
    spec.validate()
    root = np.random.SeedSequence(seed)
    subject_seqs = root.spawn(spec.subjects)

    T = int(round(spec.duration_s * spec.sample_rate_hz))
    t = np.arange(T) / spec.sample_rate_hz
    recordings = []

    for s, subj_seq in enumerate(subject_seqs):
        subj_rng = np.random.default_rng(subj_seq)
        amp_gain = subj_rng.uniform(0.85, 1.15)
        tilt_jitter = subj_rng.uniform(-3.0, 3.0, size=2)
        imu_gains = subj_rng.uniform(0.8, 1.2, size=spec.imus)
        rec_seqs = iter(subj_seq.spawn(
            len(spec.classes) * spec.trials_per_subject))

        for c in spec.classes:
            for trial in range(spec.trials_per_subject):
                rng = np.random.default_rng(next(rec_seqs))
                grav_mult = 1.0 + spec.noise_spread * rng.uniform(-1, 1)
                gyro_mult = 1.0 + spec.noise_spread * rng.uniform(-1, 1)

                imus = []
                for p in range(spec.imus):
                    phase = rng.uniform(0, 2 * np.pi, size=6)
                    w = 2 * np.pi
                    roll = (np.deg2rad(c.tilt_deg[0] + tilt_jitter[0])
                            + c.wobble_amp_rad * np.sin(w * c.wobble_hz * t + phase[0])
                            + c.vib_amp_rad * np.sin(w * c.freq_hz * t + phase[1]))
                    pitch = (np.deg2rad(c.tilt_deg[1] + tilt_jitter[1])
                             + c.wobble_amp_rad * np.sin(w * c.wobble_hz * t + phase[2])
                             + c.vib_amp_rad * np.sin(w * c.freq_hz * t + phase[3]))
                    droll = (c.wobble_amp_rad * w * c.wobble_hz
                             * np.cos(w * c.wobble_hz * t + phase[0])
                             + c.vib_amp_rad * w * c.freq_hz
                             * np.cos(w * c.freq_hz * t + phase[1]))
                    dpitch = (c.wobble_amp_rad * w * c.wobble_hz
                              * np.cos(w * c.wobble_hz * t + phase[2])
                              + c.vib_amp_rad * w * c.freq_hz
                              * np.cos(w * c.freq_hz * t + phase[3]))

                    gravity = _gravity_from_angles(roll, pitch)
                    amp = c.amplitude * amp_gain * imu_gains[p]
                    osc = amp * np.stack([
                        np.sin(w * c.freq_hz * t + phase[4]),
                        0.6 * np.sin(w * c.freq_hz * t + phase[5]),
                        0.3 * np.sin(2 * w * c.freq_hz * t + phase[4]),
                    ])

                    accel_white = _unit_std(rng.standard_normal((3, T)))
                    gyro_drift = _unit_std(
                        np.cumsum(rng.standard_normal((3, T)), axis=-1))
                    grav_err = _unit_std(
                        band_noise("high", (3, T), spec.sample_rate_hz, rng)
                        + 0.5 * band_noise("low", (3, T),
                                           spec.sample_rate_hz, rng))

                    accel = gravity + osc + spec.accel_noise * accel_white
                    gyro = (np.stack([droll, dpitch, np.zeros(T)])
                            + spec.gyro_noise * gyro_mult * gyro_drift)
                    grav = gravity + spec.grav_noise * grav_mult * grav_err
                    imus.append(ImuStreams(accel=accel, gyro=gyro, grav=grav))

                recordings.append(RawRecording(
                    subject_id=f"s{s + 1:02d}",
                    activity_label=c.name,
                    sample_rate_hz=spec.sample_rate_hz,
                    imus=imus,
                    trial_id=f"t{trial:02d}",
                ))
    return recordings


# ----------------------------------------------------------------------
# CSV ingestion


@dataclass
class ColumnMap:
    """Column-name schema for ingested CSV files."""
    subject: str = "subject"
    trial: str = "trial"
    activity: str = "activity"
    timestamp: str = "timestamp_s"
    imu: str = "imu_id"
    accel: tuple = ("acc_x", "acc_y", "acc_z")
    gyro: tuple = ("gyr_x", "gyr_y", "gyr_z")
    grav: tuple = ("grav_x", "grav_y", "grav_z")

    def required(self):
        return ([self.subject, self.trial, self.activity, self.timestamp,
                 self.imu] + list(self.accel) + list(self.gyro))


def _parse_float(value, column, row_number):
    try:
        parsed = float(value)
    except (TypeError, ValueError) as exc:
        raise IngestionError(
            f"row {row_number}: column {column!r} is not numeric: {value!r}"
        ) from exc
    if math.isnan(parsed) or math.isinf(parsed):
        raise IngestionError(f"row {row_number}: column {column!r} is {value}")
    return parsed


def load_csv(path, schema: ColumnMap = None, sample_rate_hz: float = None):
    """Read recordings from the documented flat CSV layout.

    Rows are grouped by (subject, trial, activity); each group may contain
    several IMU ids, all of equal length. Timestamps must be strictly
    increasing within each (group, imu) stream. Gravity columns are used
    verbatim when the header declares them, which skips the low-pass split
    later. The sample rate is the manifest's value when given, otherwise
    the median timestamp step.
    """
    schema = schema or ColumnMap()
    groups = {}          # (subject, trial, activity) -> imu_id -> row list
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise IngestionError("empty file: missing header row")
        missing = [c for c in schema.required() if c not in reader.fieldnames]
        if missing:
            raise IngestionError(f"missing columns: {', '.join(missing)}")
        has_grav = all(c in reader.fieldnames for c in schema.grav)

        for row_number, row in enumerate(reader, start=2):
            key = (row[schema.subject], row[schema.trial], row[schema.activity])
            imu_id = row[schema.imu]
            ts = _parse_float(row[schema.timestamp], schema.timestamp, row_number)
            acc = [_parse_float(row[c], c, row_number) for c in schema.accel]
            gyr = [_parse_float(row[c], c, row_number) for c in schema.gyro]
            grv = ([_parse_float(row[c], c, row_number) for c in schema.grav]
                   if has_grav else None)
            stream = groups.setdefault(key, {}).setdefault(imu_id, [])
            if stream and ts <= stream[-1][0]:
                raise IngestionError(
                    f"row {row_number}: timestamp {ts} not increasing for "
                    f"subject={key[0]} trial={key[1]} activity={key[2]} "
                    f"imu={imu_id}")
            stream.append((ts, acc, gyr, grv))

    if not groups:
        raise IngestionError("no data rows")

    recordings = []
    for (subject, trial, activity), by_imu in groups.items():
        lengths = {len(rows) for rows in by_imu.values()}
        if len(lengths) > 1:
            raise IngestionError(
                f"IMU streams of subject={subject} trial={trial} "
                f"activity={activity} differ in length: {sorted(lengths)}")
        imus = []
        timestamps = None
        for imu_id in sorted(by_imu):
            rows = by_imu[imu_id]
            timestamps = np.array([r[0] for r in rows])
            accel = np.array([r[1] for r in rows]).T
            gyro = np.array([r[2] for r in rows]).T
            grav = (np.array([r[3] for r in rows]).T if has_grav else None)
            imus.append(ImuStreams(accel=accel, gyro=gyro, grav=grav))
        if sample_rate_hz is not None:
            rate = float(sample_rate_hz)
        elif len(timestamps) > 1:
            rate = 1.0 / float(np.median(np.diff(timestamps)))
        else:
            raise IngestionError(
                f"cannot infer sample rate from a single row "
                f"(subject={subject} trial={trial} activity={activity})")
        recordings.append(RawRecording(
            subject_id=subject, activity_label=activity,
            sample_rate_hz=rate, imus=imus, trial_id=trial))
    recordings.sort(key=lambda r: (r.subject_id, r.activity_label, r.trial_id))
    return recordings


def write_csv(path, recordings, float_format="%.12g"):
    """Emit recordings in the same CSV layout load_csv reads."""
    grav_flags = {imu.grav is not None
                  for rec in recordings for imu in rec.imus}
    if len(grav_flags) > 1:
        raise IngestionError("cannot mix recordings with and without gravity")
    include_grav = grav_flags == {True}
    header = ["subject", "trial", "activity", "timestamp_s", "imu_id",
              "acc_x", "acc_y", "acc_z", "gyr_x", "gyr_y", "gyr_z"]
    if include_grav:
        header += ["grav_x", "grav_y", "grav_z"]
    fmt = lambda v: float_format % v
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for rec in recordings:
            for p, imu in enumerate(rec.imus):
                for i in range(imu.accel.shape[1]):
                    row = [rec.subject_id, rec.trial_id, rec.activity_label,
                           fmt(i / rec.sample_rate_hz), f"imu{p}"]
                    row += [fmt(v) for v in imu.accel[:, i]]
                    row += [fmt(v) for v in imu.gyro[:, i]]
                    if include_grav:
                        row += [fmt(v) for v in imu.grav[:, i]]
                    writer.writerow(row)


def save_windows(path, windows, class_names):
    """Freeze segmented windows to one .npz for later training runs.

    Every window must share the tensor shape; the class name list is the
    label index the windows were built against.
    """
    if not windows:
        raise IngestionError("no windows to save")
    shapes = {w.data.shape for w in windows}
    if len(shapes) > 1:
        raise IngestionError(
            f"windows must share one shape, got {sorted(shapes)}")
    arrays = {
        "data": np.stack([w.data for w in windows]),
        "labels": np.array([w.label for w in windows], dtype=np.int64),
        "subjects": np.array([w.subject_id for w in windows]),
        "trials": np.array([w.trial_id for w in windows]),
        "rates": np.array([w.sample_rate_hz for w in windows]),
        "class_names": np.array("\n".join(class_names)),
    }
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_windows(path):
    """Inverse of save_windows; returns (windows, class_names)."""
    with np.load(path, allow_pickle=False) as data:
        for key in ("data", "labels", "subjects", "trials", "rates",
                    "class_names"):
            if key not in data.files:
                raise IngestionError(f"window archive misses {key!r}")
        windows = [
            SensorWindow(data=data["data"][i],
                         label=int(data["labels"][i]),
                         subject_id=str(data["subjects"][i]),
                         trial_id=str(data["trials"][i]),
                         sample_rate_hz=float(data["rates"][i]))
            for i in range(data["data"].shape[0])
        ]
        text = str(data["class_names"][()])
        class_names = text.split("\n") if text else []
    return windows, class_names
