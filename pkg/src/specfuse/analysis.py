"""Interpretability studies: noise response, edge weights, route spectra.

All studies run at inference on a trained model and emit tidy tables; a
row-oriented CSV helper with 12-significant-digit floats keeps every
emitted file round-trippable through read_table.
"""

from __future__ import annotations

import csv
import dataclasses

import numpy as np

from .datapipe import KIND_NAMES, SensorWindow, apply_znormalize, band_noise
from .errors import ContractError, DimensionError
from .model import node_modality, tsf_forward
from .training import confusion_matrix, stack_windows, weighted_f1

NOISE_KINDS = ("grav_hf", "gyro_lf")
DEFAULT_LEVELS = (0.0, 0.5, 1.0, 2.0)
HIST_BINS = 40


@dataclasses.dataclass
class AnalysisReport:
    kind: str
    parameters: dict
    tables: list


# ----------------------------------------------------------------------
# tiny table io (CSV with %.12g floats, round-trip safe)

def format_cell(value) -> str:
    if isinstance(value, float):
        return "%.12g" % value
    return str(value)


def write_table(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_cell(v) for v in row])


def read_table(path):
    """(header, rows) with every cell kept as text."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ContractError(f"{path} is empty") from None
        return header, [row for row in reader]


# ----------------------------------------------------------------------
# noise injection

def make_band_noise(kind: str, shape, sample_rate_hz: float, rng):
    """Unit-std noise stream confined to the band the study targets.

    grav_hf: white noise high-passed at fs/4. gyro_lf: integrated white
    noise (random walk) low-passed at 0.5 Hz. Rows are normalized to
    exactly unit std, so scaling by a level gives that std exactly. The
    shaping itself is shared with the synthetic generator.
    """
    if kind not in NOISE_KINDS:
        raise ContractError(f"unknown noise kind {kind!r}")
    band = "high" if kind == "grav_hf" else "low"
    return band_noise(band, shape, sample_rate_hz, rng)


def inject_noise(windows, kind: str, level: float, seed: int):
    """Add band-limited noise of exactly `level` std, in physical units.

    grav_hf perturbs the gravity streams, gyro_lf the gyroscope streams.
    Level 0 returns byte-identical copies, so the clean row of a study
    reproduces the clean score exactly.
    """
    if level < 0:
        raise ContractError(f"noise level must be >= 0, got {level}")
    target = KIND_NAMES.index("grav" if kind == "grav_hf" else "gyro")
    out = []
    for i, w in enumerate(windows):
        data = w.data.copy()
        if level > 0:
            rng = np.random.default_rng(
                np.random.SeedSequence([seed, i]))
            noise = make_band_noise(kind, data[:, target].shape,
                                    w.sample_rate_hz, rng)
            data[:, target] = data[:, target] + level * noise
        out.append(SensorWindow(
            data=data, label=w.label, subject_id=w.subject_id,
            trial_id=w.trial_id, sample_rate_hz=w.sample_rate_hz))
    return out


# ----------------------------------------------------------------------
# batched diagnostics

def collect_diagnostics(model, x, batch_size: int = 128):
    """Inference predictions + pooled attention means + routes + edges.

    Returns (pred_labels, mean_attention [2], routes [n, levels],
    adjacency list of [B, L', N, N] arrays or None).
    """
    model.set_training(False)
    rng = np.random.default_rng(0)
    preds, attn_sums, routes, adjacency = [], [], [], []
    count = 0
    for start in range(0, x.shape[0], batch_size):
        bx = x[start:start + batch_size]
        logits, diag = tsf_forward(bx, model, rng, with_diagnostics=True)
        preds.append(logits.data.argmax(axis=1))
        attn = diag["attention"]               # [B, P, 2, L]
        attn_sums.append(attn.mean(axis=(1, 3)).sum(axis=0))
        count += attn.shape[0]
        routes.append(diag["routes"])
        if diag["adjacency"] is not None:
            adjacency.append(diag["adjacency"].data)
    mean_attn = np.sum(attn_sums, axis=0) / count
    return (np.concatenate(preds), mean_attn,
            np.concatenate(routes, axis=0),
            adjacency if adjacency else None)


# ----------------------------------------------------------------------
# study 1: noise vs score and sensor attention

def noise_study(model, stats, windows, kinds=NOISE_KINDS,
                levels=DEFAULT_LEVELS, seed: int = 0):
    """Rows of (noise_kind, level, wf1, mean_attn_grav, mean_attn_gyro)."""
    if not windows:
        raise ContractError("noise study needs a non-empty dataset")
    classes = model.config.classes
    rows = []
    for kind in kinds:
        for level in levels:
            noisy = inject_noise(windows, kind, float(level), seed)
            normed = apply_znormalize(noisy, stats)
            x, y = stack_windows(normed)
            preds, mean_attn, _, _ = collect_diagnostics(model, x)
            cm = confusion_matrix(y, preds, classes)
            rows.append((kind, float(level), weighted_f1(cm),
                         float(mean_attn[0]), float(mean_attn[1])))
    return rows


# ----------------------------------------------------------------------
# study 2: intra/inter edge weight histograms

def edge_kind(i: int, j: int, imus: int) -> str:
    """intra: same modality on different IMUs; inter: across modalities."""
    if i == j:
        raise DimensionError("self loops carry no edge label")
    if node_modality(i, imus) == node_modality(j, imus):
        return "intra"
    return "inter"


def edge_histograms(model, stats, windows, class_names,
                    bins: int = HIST_BINS):
    """Per-activity histograms of adjacency entries, split intra/inter.

    Bin edges span exactly [-1, 1]. With one IMU there are no intra
    edges, so those rows carry zero counts.
    """
    if model.config.graph_mode != "adaptive":
        raise ContractError("edge study needs the dynamic graph enabled")
    edges = np.linspace(-1.0, 1.0, bins + 1)
    by_label = {}
    for w in windows:
        by_label.setdefault(w.label, []).append(w)

    rows = []
    for label in sorted(by_label):
        subset = apply_znormalize(by_label[label], stats)
        x, _ = stack_windows(subset)
        _, _, _, adjacency = collect_diagnostics(model, x)
        n_nodes = adjacency[0].shape[-1]
        imus = n_nodes // 2
        values = {"intra": [], "inter": []}
        for block in adjacency:
            for i in range(n_nodes):
                for j in range(n_nodes):
                    if i == j:
                        continue
                    values[edge_kind(i, j, imus)].append(
                        block[..., i, j].reshape(-1))
        for kind in ("intra", "inter"):
            flat = (np.concatenate(values[kind])
                    if values[kind] else np.empty(0))
            counts, _ = np.histogram(flat, bins=edges)
            name = class_names[label]
            for b in range(bins):
                rows.append((name, kind, float(edges[b]),
                             float(edges[b + 1]), int(counts[b])))
    return rows


# ----------------------------------------------------------------------
# study 3: spectra of the samples grouped by wavelet route

def route_label(bits) -> str:
    if len(bits) == 0:
        return "full"
    return "".join("LH"[int(b)] for b in bits)


def route_spectra(model, stats, windows):
    """Rows of (route, freq_bin_hz, mean_magnitude, sample_count).

    The spectrum is the averaged magnitude of the real FFT of the first
    linear-acceleration axis on the first IMU; groups are the per-sample
    route bit strings at inference.
    """
    if not windows:
        raise ContractError("route study needs a non-empty dataset")
    rate = windows[0].sample_rate_hz
    normed = apply_znormalize(windows, stats)
    x, _ = stack_windows(normed)
    _, _, routes, _ = collect_diagnostics(model, x)

    lacc_axis = x[:, 0, KIND_NAMES.index("lacc"), 0, :]   # [n, L]
    spectra = np.abs(np.fft.rfft(lacc_axis, axis=-1))
    freqs = np.fft.rfftfreq(lacc_axis.shape[-1], d=1.0 / rate)

    labels = np.array([route_label(row) for row in routes])
    rows = []
    for route in sorted(set(labels)):
        mask = labels == route
        mean_mag = spectra[mask].mean(axis=0)
        count = int(mask.sum())
        for f, m in zip(freqs, mean_mag):
            rows.append((route, float(f), float(m), count))
    return rows
