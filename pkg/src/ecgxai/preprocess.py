"""Pan-Tompkins filtering and R-peak detection, beat segmentation, dataset assembly.

The detection chain is the classic one: zero-phase Butterworth band-pass
(5-15 Hz), five-point derivative, squaring, 150 ms moving-window integration,
then adaptive dual-threshold peak picking with a 200 ms refractory period and
RR-driven search-back. Beats are cut from the *filtered* signal, 200 ms before
to 400 ms after the R sample (216 samples at 360 Hz).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import butter, find_peaks, sosfiltfilt

from .signal_io import BeatAnnotation, EcgRecord

BAND_LOW_HZ = 5.0
BAND_HIGH_HZ = 15.0
FILTER_ORDER = 2
INTEGRATION_WINDOW_S = 0.150
PRE_R_S = 0.2
POST_R_S = 0.4
SEGMENT_LENGTH = 216
REFRACTORY_S = 0.2
SEARCHBACK_RR_FACTOR = 1.66
PEAK_REFINE_S = 0.05
THRESHOLD_GAIN = 0.125
INIT_WINDOW_S = 2.0


class PreprocessError(Exception):
    pass


@dataclass
class BeatSegment:
    samples: np.ndarray        # 216 band-passed amplitudes
    label: str
    source_record: str
    r_peak_index: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if len(self.samples) != SEGMENT_LENGTH:
            raise PreprocessError(
                f"beat segment must hold {SEGMENT_LENGTH} samples, got {len(self.samples)}")


@dataclass
class DatasetSplit:
    train: list[BeatSegment]
    validation: list[BeatSegment]
    class_index: dict[str, int]
    seed: int = 0
    source_records: list[str] = field(default_factory=list)
    fingerprint: str = ""


def bandpass_sos(sampling_rate_hz: int):
    return butter(FILTER_ORDER, [BAND_LOW_HZ, BAND_HIGH_HZ], btype="bandpass",
                  fs=sampling_rate_hz, output="sos")


def bandpass_filter(signal, sampling_rate_hz: int) -> np.ndarray:
    """Zero-phase 5-15 Hz Butterworth band-pass, same length as the input."""
    signal = np.asarray(signal, dtype=np.float64)
    if sampling_rate_hz < 100:
        raise PreprocessError(f"sampling rate {sampling_rate_hz} Hz too low (need >= 100)")
    if not np.all(np.isfinite(signal)):
        raise PreprocessError("signal contains non-finite samples")
    sos = bandpass_sos(sampling_rate_hz)
    if len(signal) <= 3 * (2 * sos.shape[0] + 1):
        raise PreprocessError(f"signal too short to filter ({len(signal)} samples)")
    return sosfiltfilt(sos, signal)


def bandpass_gain(frequency_hz: float, sampling_rate_hz: int) -> float:
    """Analytic magnitude response of the *applied* (forward-backward) filter."""
    from scipy.signal import sosfreqz

    sos = bandpass_sos(sampling_rate_hz)
    _, h = sosfreqz(sos, worN=[frequency_hz], fs=sampling_rate_hz)
    return float(np.abs(h[0]) ** 2)


def pt_feature_signal(filtered, sampling_rate_hz: int) -> np.ndarray:
    """Derivative -> squaring -> 150 ms moving-window integration.

    Five-point derivative (2x[n] + x[n-1] - x[n-3] - 2x[n-4]) / 8 with the
    4-sample warm-up reflect-padded; the integration window is a mean, so a
    unit-slope ramp settles at 1.25^2 = 1.5625.
    """
    x = np.asarray(filtered, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise PreprocessError("signal contains non-finite samples")
    if len(x) < 5:
        raise PreprocessError("signal shorter than the derivative support")
    padded = np.concatenate([x[4:0:-1], x])
    deriv = (2.0 * padded[4:] + padded[3:-1] - padded[1:-3] - 2.0 * padded[:-4]) / 8.0
    squared = deriv * deriv
    window = max(1, round(INTEGRATION_WINDOW_S * sampling_rate_hz))
    cumsum = np.concatenate([[0.0], np.cumsum(squared)])
    n = len(squared)
    idx = np.arange(n)
    counts = np.minimum(idx + 1, window)
    return (cumsum[idx + 1] - cumsum[np.maximum(idx + 1 - window, 0)]) / counts


def detect_r_peaks(filtered, sampling_rate_hz: int) -> np.ndarray:
    """Adaptive dual-threshold QRS detection on the integrated feature signal.

    Running signal/noise peak estimates update with 0.125/0.875 weights;
    candidates within the 200 ms refractory window are noise; when the gap
    since the last beat exceeds 1.66x the running RR average, the skipped
    stretch is re-searched at half threshold. Returned indices are refined to
    the band-passed signal's local maximum within +/-50 ms.
    """
    x = np.asarray(filtered, dtype=np.float64)
    fs = sampling_rate_hz
    init_len = round(INIT_WINDOW_S * fs)
    if len(x) < init_len:
        raise PreprocessError(
            f"signal shorter than the {INIT_WINDOW_S:.0f} s threshold initialization window")
    mwi = pt_feature_signal(x, fs)
    refractory = round(REFRACTORY_S * fs)
    candidates, _ = find_peaks(mwi, distance=refractory)
    if candidates.size == 0:
        return np.array([], dtype=np.int64)

    spki = 0.25 * float(mwi[:init_len].max())
    npki = 0.5 * float(mwi[:init_len].mean())
    threshold1 = npki + 0.25 * (spki - npki)

    accepted: list[int] = []
    rr_intervals: list[int] = []
    rr_average = None

    def accept(peak: int, value: float, searchback: bool) -> None:
        nonlocal spki, npki, threshold1, rr_average
        if accepted:
            rr_intervals.append(peak - accepted[-1])
            rr_average = float(np.mean(rr_intervals[-8:]))
        accepted.append(peak)
        gain = 2 * THRESHOLD_GAIN if searchback else THRESHOLD_GAIN
        spki = gain * value + (1.0 - gain) * spki
        threshold1 = npki + 0.25 * (spki - npki)

    pending_noise: list[int] = []
    for peak in candidates:
        value = float(mwi[peak])
        if accepted and peak - accepted[-1] < refractory:
            npki = THRESHOLD_GAIN * value + (1.0 - THRESHOLD_GAIN) * npki
            threshold1 = npki + 0.25 * (spki - npki)
            continue
        if value > threshold1:
            # search-back: a long silent gap may hide a beat below threshold1
            if accepted and rr_average and peak - accepted[-1] > SEARCHBACK_RR_FACTOR * rr_average:
                window = [c for c in pending_noise
                          if accepted[-1] + refractory <= c <= peak - refractory]
                if window:
                    best = max(window, key=lambda c: mwi[c])
                    if mwi[best] > 0.5 * threshold1:
                        accept(int(best), float(mwi[best]), searchback=True)
            accept(int(peak), value, searchback=False)
            pending_noise = []
        else:
            npki = THRESHOLD_GAIN * value + (1.0 - THRESHOLD_GAIN) * npki
            threshold1 = npki + 0.25 * (spki - npki)
            pending_noise.append(int(peak))

    # map MWI fiducial marks back onto the band-passed waveform
    window = max(1, round(INTEGRATION_WINDOW_S * fs))
    lag = window + 4
    refine = round(PEAK_REFINE_S * fs)
    refined = []
    for peak in accepted:
        lo = max(0, peak - lag)
        rough = lo + int(np.argmax(x[lo : peak + 1]))
        lo2 = max(0, rough - refine)
        hi2 = min(len(x), rough + refine + 1)
        refined.append(lo2 + int(np.argmax(x[lo2:hi2])))
    result = []
    for idx in sorted(set(refined)):
        if not result or idx - result[-1] >= refractory:
            result.append(idx)
    return np.array(result, dtype=np.int64)


def resample_to_segment_length(samples, target: int = SEGMENT_LENGTH) -> np.ndarray:
    """Linear resampling that preserves both endpoints exactly."""
    samples = np.asarray(samples, dtype=np.float64)
    n = len(samples)
    if n == target:
        return samples.copy()
    if n < 2:
        raise PreprocessError("cannot resample fewer than 2 samples")
    return np.interp(np.linspace(0.0, n - 1, target), np.arange(n), samples)


def segment_beats(filtered, peaks_or_annotations, labels, sampling_rate_hz: int,
                  source_record: str = "") -> tuple[list[BeatSegment], int]:
    """Cut [r - round(0.2 fs), r + round(0.4 fs)) windows around each index.

    Windows that cross the record boundary are skipped; the skip count is
    returned alongside. Windows whose native length is not 216 (fs != 360)
    are linearly resampled to 216.
    """
    x = np.asarray(filtered, dtype=np.float64)
    indices = [int(i) for i in peaks_or_annotations]
    labels = list(labels)
    if len(indices) != len(labels):
        raise PreprocessError("peak indices and labels must align")
    if any(b > a for a, b in zip(indices[1:], indices)):
        raise PreprocessError("peak indices must be sorted")
    pre = round(PRE_R_S * sampling_rate_hz)
    post = round(POST_R_S * sampling_rate_hz)
    segments = []
    skipped = 0
    for r, label in zip(indices, labels):
        lo, hi = r - pre, r + post
        if lo < 0 or hi > len(x):
            skipped += 1
            continue
        window = x[lo:hi]
        if len(window) != SEGMENT_LENGTH:
            window = resample_to_segment_length(window)
        segments.append(BeatSegment(window, label, source_record, r))
    return segments, skipped


def build_dataset(segments: list[BeatSegment], min_class_count: int = 2000,
                  split: float = 0.8, seed: int = 0) -> DatasetSplit:
    """Drop classes below `min_class_count`, then stratified seeded 80/20 split."""
    if not segments:
        raise PreprocessError("no segments to build a dataset from")
    by_class: dict[str, list[BeatSegment]] = {}
    for seg in segments:
        by_class.setdefault(seg.label, []).append(seg)
    kept = {label: segs for label, segs in by_class.items() if len(segs) >= min_class_count}
    if not kept:
        raise PreprocessError(
            f"no class reaches {min_class_count} samples "
            f"(counts: { {k: len(v) for k, v in sorted(by_class.items())} })")
    class_index = {label: i for i, label in enumerate(sorted(kept))}

    rng = np.random.default_rng(seed)
    train: list[BeatSegment] = []
    validation: list[BeatSegment] = []
    for label in sorted(kept):
        segs = kept[label]
        order = rng.permutation(len(segs))
        n_train = round(split * len(segs))
        train += [segs[i] for i in order[:n_train]]
        validation += [segs[i] for i in order[n_train:]]
    # interleave classes so mini-batches are mixed even before epoch shuffling
    train = [train[i] for i in rng.permutation(len(train))]
    validation = [validation[i] for i in rng.permutation(len(validation))]
    sources = sorted({seg.source_record for seg in segments if seg.source_record})
    return DatasetSplit(train, validation, class_index, seed=seed, source_records=sources)


def segments_from_record(record: EcgRecord, annotations: list[BeatAnnotation],
                         lead: int = 0) -> tuple[list[BeatSegment], int]:
    """Band-pass lead `lead` and segment on the annotated beat positions."""
    filtered = bandpass_filter(record.lead(lead), record.sampling_rate_hz)
    return segment_beats(filtered,
                         [a.sample_index for a in annotations],
                         [a.symbol for a in annotations],
                         record.sampling_rate_hz,
                         source_record=record.record_id)


def config_fingerprint(**overrides) -> str:
    """Hash of the preprocessing configuration, stored in datasets/checkpoints."""
    config = {
        "band_low_hz": BAND_LOW_HZ,
        "band_high_hz": BAND_HIGH_HZ,
        "filter_order": FILTER_ORDER,
        "integration_window_s": INTEGRATION_WINDOW_S,
        "pre_r_s": PRE_R_S,
        "post_r_s": POST_R_S,
        "segment_length": SEGMENT_LENGTH,
    }
    config.update(overrides)
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


# --- dataset container --------------------------------------------------------
# .npz holding (label_index, 216 float64) rows for both splits, per-beat
# provenance, and a JSON manifest. Determinism given seed is the contract;
# bit-exact layout is not.


def save_dataset(dataset: DatasetSplit, path) -> None:
    def pack(segs: list[BeatSegment]):
        X = np.stack([s.samples for s in segs]) if segs else np.zeros((0, SEGMENT_LENGTH))
        y = np.array([dataset.class_index[s.label] for s in segs], dtype=np.int64)
        r = np.array([s.r_peak_index for s in segs], dtype=np.int64)
        rec = np.array([s.source_record for s in segs], dtype="U16")
        return X, y, r, rec

    Xt, yt, rt, rec_t = pack(dataset.train)
    Xv, yv, rv, rec_v = pack(dataset.validation)
    counts = {label: int((yt == i).sum() + (yv == i).sum())
              for label, i in dataset.class_index.items()}
    manifest = {
        "class_index": dataset.class_index,
        "seed": dataset.seed,
        "source_records": dataset.source_records,
        "counts": counts,
        "fingerprint": dataset.fingerprint or config_fingerprint(),
    }
    np.savez_compressed(path, train_x=Xt, train_y=yt, train_r=rt, train_rec=rec_t,
                        val_x=Xv, val_y=yv, val_r=rv, val_rec=rec_v,
                        manifest=np.frombuffer(json.dumps(manifest).encode("utf-8"), dtype=np.uint8))


def load_dataset(path) -> DatasetSplit:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        manifest = json.loads(bytes(data["manifest"]).decode("utf-8"))
        index_to_label = {i: label for label, i in manifest["class_index"].items()}

        def unpack(prefix: str) -> list[BeatSegment]:
            X, y = data[f"{prefix}_x"], data[f"{prefix}_y"]
            r, rec = data[f"{prefix}_r"], data[f"{prefix}_rec"]
            return [BeatSegment(X[i], index_to_label[int(y[i])], str(rec[i]), int(r[i]))
                    for i in range(len(y))]

        return DatasetSplit(unpack("train"), unpack("val"),
                            {k: int(v) for k, v in manifest["class_index"].items()},
                            seed=manifest["seed"],
                            source_records=list(manifest["source_records"]),
                            fingerprint=manifest["fingerprint"])


def synthetic_pulse_train(duration_s: float, sampling_rate_hz: int, pulse_hz: float = 1.0,
                          amplitude_mv: float = 1.0, width_s: float = 0.025,
                          noise_mv: float = 0.0, seed: int = 0):
    """Gaussian pulse train with known centers — the detector's ground-truth oracle."""
    n = round(duration_s * sampling_rate_hz)
    t = np.arange(n) / sampling_rate_hz
    period = 1.0 / pulse_hz
    centers = np.arange(period / 2, duration_s, period)
    signal = np.zeros(n)
    for c in centers:
        signal += amplitude_mv * np.exp(-0.5 * ((t - c) / width_s) ** 2)
    if noise_mv:
        signal += np.random.default_rng(seed).normal(0.0, noise_mv, size=n)
    true_indices = np.round(centers * sampling_rate_hz).astype(np.int64)
    return signal, true_indices
