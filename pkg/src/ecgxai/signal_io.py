"""WFDB record ingestion: header text, format-212 signals, binary annotations.

Only signal format 212 (two 12-bit two's-complement samples packed into
3 bytes) is supported — the format the MIT-BIH arrhythmia recordings use.
ADC counts are converted to millivolts as ``(adc - baseline) / gain`` with
the gain/baseline declared per channel in the header. Writers for all three
file kinds are provided so round-trips can be tested without external data.

A generic CSV ingestion hook (``label,s0,s1,...``) covers pre-mapped beat
files from other sources; symbol mapping to the MIT-BIH alphabet is the
caller's responsibility.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class WfdbError(Exception):
    """Base class for WFDB parsing failures."""


class UnsupportedFormatError(WfdbError):
    pass


class TruncatedSignalError(WfdbError):
    pass


class AnnotationError(WfdbError):
    pass


class CsvBeatError(Exception):
    pass


# Annotation type codes from the WFDB annotation code table. Codes 59-63 are
# the structural atoms (SKIP/NUM/SUB/CHAN/AUX), not annotation types.
ANNOTATION_SYMBOLS = {
    1: "N", 2: "L", 3: "R", 4: "a", 5: "V", 6: "F", 7: "J", 8: "A", 9: "S",
    10: "E", 11: "j", 12: "/", 13: "Q", 14: "~", 16: "|", 18: "s", 19: "T",
    20: "*", 21: "D", 22: '"', 23: "=", 24: "p", 25: "B", 26: "^", 27: "t",
    28: "+", 29: "u", 30: "?", 31: "!", 32: "[", 33: "]", 34: "e", 35: "n",
    36: "@", 37: "x", 38: "f", 39: "(", 40: ")", 41: "r",
}
SYMBOL_CODES = {sym: code for code, sym in ANNOTATION_SYMBOLS.items()}

# Beat annotations per the PhysioNet annotation alphabet; everything else
# (rhythm changes, signal-quality flags, comments) is dropped at read time.
BEAT_SYMBOLS = frozenset("NLRBAaJSVrFejnE/fQ")

_SKIP, _NUM, _SUB, _CHAN, _AUX = 59, 60, 61, 62, 63


@dataclass
class Channel:
    lead_name: str
    samples: np.ndarray        # millivolts
    adc: np.ndarray            # raw ADC counts
    gain: float                # adu per millivolt
    baseline: int              # ADC value mapping to 0 mV


@dataclass
class EcgRecord:
    record_id: str
    sampling_rate_hz: int
    channels: list[Channel]
    length: int

    def lead(self, index: int = 0) -> np.ndarray:
        return self.channels[index].samples


@dataclass(frozen=True)
class BeatAnnotation:
    sample_index: int
    symbol: str


@dataclass
class CsvBeat:
    label: str
    samples: np.ndarray

    @property
    def needs_resample(self) -> bool:
        return len(self.samples) != 216


# --- header ------------------------------------------------------------------


@dataclass
class _SignalSpec:
    file_name: str
    fmt: int
    gain: float
    baseline: int
    description: str


@dataclass
class _Header:
    record_id: str
    n_signals: int
    sampling_rate_hz: int
    n_samples: int            # 0 when the header omits the count
    signals: list[_SignalSpec]


def _parse_header(header_path: Path) -> _Header:
    lines = []
    for raw in header_path.read_text().splitlines():
        line = raw.strip()
        if line and not line.startswith("#"):
            lines.append(line)
    if not lines:
        raise WfdbError(f"{header_path}: empty header")

    rec = lines[0].split()
    if len(rec) < 2:
        raise WfdbError(f"{header_path}: malformed record line {lines[0]!r}")
    record_id = rec[0].split("/")[0]
    if "/" in rec[0]:
        raise UnsupportedFormatError(f"{header_path}: multi-segment records not supported")
    n_signals = int(rec[1])
    fs = 250
    if len(rec) >= 3:
        fs = int(float(rec[2].split("/")[0]))
    n_samples = int(rec[3]) if len(rec) >= 4 else 0
    if fs <= 0:
        raise WfdbError(f"{header_path}: non-positive sampling rate {fs}")

    signals = []
    for line in lines[1 : 1 + n_signals]:
        fields = line.split()
        if len(fields) < 2:
            raise WfdbError(f"{header_path}: malformed signal line {line!r}")
        fmt_field = fields[1]
        for marker in ("x", ":", "+"):
            if marker in fmt_field:
                raise UnsupportedFormatError(
                    f"{header_path}: format modifiers ({fmt_field!r}) not supported")
        fmt = int(fmt_field)
        gain, baseline_override = 200.0, None
        if len(fields) >= 3:
            gain_field = fields[2].split("/")[0]
            if "(" in gain_field:
                gain_part, base_part = gain_field.split("(")
                baseline_override = int(base_part.rstrip(")"))
                gain_field = gain_part
            gain = float(gain_field)
            if gain == 0.0:
                gain = 200.0
        adc_zero = int(fields[4]) if len(fields) >= 5 else 0
        baseline = baseline_override if baseline_override is not None else adc_zero
        description = " ".join(fields[8:]) if len(fields) >= 9 else f"sig{len(signals)}"
        signals.append(_SignalSpec(fields[0], fmt, gain, baseline, description))
    if len(signals) != n_signals:
        raise WfdbError(f"{header_path}: expected {n_signals} signal lines, found {len(signals)}")
    return _Header(record_id, n_signals, fs, n_samples, signals)


# --- format 212 --------------------------------------------------------------


def _unpack_212(raw: np.ndarray, n_values: int) -> np.ndarray:
    """Decode packed 12-bit pairs: byte0 + low nibble of byte1 form sample 1,
    high nibble of byte1 + byte2 form sample 2; both two's complement."""
    n_groups = (n_values + 1) // 2
    if raw.size < n_groups * 3:
        raise TruncatedSignalError(
            f"need {n_groups * 3} bytes for {n_values} samples, file has {raw.size}")
    groups = raw[: n_groups * 3].reshape(-1, 3).astype(np.int64)
    first = groups[:, 0] | ((groups[:, 1] & 0x0F) << 8)
    second = groups[:, 2] | ((groups[:, 1] & 0xF0) << 4)
    values = np.empty(n_groups * 2, dtype=np.int64)
    values[0::2] = first
    values[1::2] = second
    values = values[:n_values]
    values[values >= 2048] -= 4096
    return values


def _pack_212(values: np.ndarray) -> bytes:
    values = np.asarray(values, dtype=np.int64)
    if values.size and (values.min() < -2048 or values.max() > 2047):
        raise ValueError("format 212 holds 12-bit samples in [-2048, 2047]")
    if values.size % 2:
        values = np.concatenate([values, [0]])
    u = np.where(values < 0, values + 4096, values)
    first, second = u[0::2], u[1::2]
    out = np.empty((first.size, 3), dtype=np.uint8)
    out[:, 0] = first & 0xFF
    out[:, 1] = ((first >> 8) & 0x0F) | (((second >> 8) & 0x0F) << 4)
    out[:, 2] = second & 0xFF
    return out.tobytes()


def read_wfdb_record(header_path) -> EcgRecord:
    """Read a .hea/.dat pair into an EcgRecord with millivolt channels."""
    header_path = Path(header_path)
    if not header_path.exists():
        raise FileNotFoundError(f"header file not found: {header_path}")
    header = _parse_header(header_path)

    for spec in header.signals:
        if spec.fmt != 212:
            raise UnsupportedFormatError(
                f"{header_path}: signal format {spec.fmt} not supported (only 212)")
    dat_names = {spec.file_name for spec in header.signals}
    if len(dat_names) != 1:
        raise UnsupportedFormatError(
            f"{header_path}: signals split across multiple .dat files not supported")
    dat_path = header_path.parent / header.signals[0].file_name
    if not dat_path.exists():
        raise FileNotFoundError(f"signal file not found: {dat_path}")

    raw = np.fromfile(dat_path, dtype=np.uint8)
    n_sig = header.n_signals
    if header.n_samples:
        n_samples = header.n_samples
        expected = math.ceil(n_samples * n_sig / 2) * 3
        if raw.size != expected:
            raise TruncatedSignalError(
                f"{dat_path}: {raw.size} bytes, but header declares {n_samples} "
                f"samples x {n_sig} signals ({expected} bytes)")
    else:
        n_samples = (raw.size // 3) * 2 // n_sig
    interleaved = _unpack_212(raw, n_samples * n_sig)
    adc = interleaved.reshape(n_samples, n_sig).T

    channels = []
    for i, spec in enumerate(header.signals):
        mv = (adc[i] - spec.baseline) / spec.gain
        channels.append(Channel(spec.description, mv, adc[i].copy(), spec.gain, spec.baseline))
    return EcgRecord(header.record_id, header.sampling_rate_hz, channels, n_samples)


def write_wfdb_record(directory, record_id: str, sampling_rate_hz: int,
                      adc: np.ndarray, gains, baselines, lead_names) -> Path:
    """Write a format-212 .hea/.dat pair from raw ADC counts (n_sig, n_samples)."""
    directory = Path(directory)
    adc = np.asarray(adc, dtype=np.int64)
    if adc.ndim != 2:
        raise ValueError("adc must be (n_signals, n_samples)")
    n_sig, n_samples = adc.shape
    header_path = directory / f"{record_id}.hea"
    dat_name = f"{record_id}.dat"
    lines = [f"{record_id} {n_sig} {sampling_rate_hz} {n_samples}"]
    for i in range(n_sig):
        lines.append(f"{dat_name} 212 {gains[i]:g}({int(baselines[i])}) 12 "
                     f"{int(baselines[i])} 0 0 0 {lead_names[i]}")
    header_path.write_text("\n".join(lines) + "\n")
    (directory / dat_name).write_bytes(_pack_212(adc.T.reshape(-1)))
    return header_path


# --- annotations ---------------------------------------------------------------


def _read_annotation_atoms(path: Path) -> list[tuple[int, int]]:
    """Decode the annotation byte-pair stream into (sample_index, type_code)."""
    raw = np.fromfile(path, dtype=np.uint8).astype(np.int64)
    if raw.size % 2:
        raise AnnotationError(f"{path}: odd byte count in annotation stream")
    pairs = raw.reshape(-1, 2)
    atoms = []
    time = 0
    i = 0
    n = pairs.shape[0]
    while i < n:
        code = pairs[i, 1] >> 2
        delta = pairs[i, 0] | ((pairs[i, 1] & 0x03) << 8)
        if code == 0 and delta == 0:
            break  # end of stream
        if code == _SKIP:
            if i + 2 >= n:
                raise AnnotationError(f"{path}: truncated SKIP atom")
            interval = ((pairs[i + 1, 0] << 16) | (pairs[i + 1, 1] << 24)
                        | pairs[i + 2, 0] | (pairs[i + 2, 1] << 8))
            if interval >= 1 << 31:
                interval -= 1 << 32
            time += interval
            i += 3
            continue
        if code in (_NUM, _SUB, _CHAN):
            i += 1
            continue
        if code == _AUX:
            i += 1 + math.ceil(delta / 2)
            continue
        time += delta
        atoms.append((time, int(code)))
        i += 1
    return atoms


def read_wfdb_annotations(annotation_path, record: EcgRecord) -> list[BeatAnnotation]:
    """Beat annotations with absolute sample indices; non-beat atoms dropped."""
    annotation_path = Path(annotation_path)
    if not annotation_path.exists():
        raise FileNotFoundError(f"annotation file not found: {annotation_path}")
    beats = []
    for sample, code in _read_annotation_atoms(annotation_path):
        symbol = ANNOTATION_SYMBOLS.get(code)
        if symbol is None or symbol not in BEAT_SYMBOLS:
            continue
        if sample < 0 or sample >= record.length:
            raise AnnotationError(
                f"{annotation_path}: beat at sample {sample} beyond record length {record.length}")
        beats.append(BeatAnnotation(int(sample), symbol))
    for prev, cur in zip(beats, beats[1:]):
        if cur.sample_index <= prev.sample_index:
            raise AnnotationError(
                f"{annotation_path}: beat indices not strictly increasing at {cur.sample_index}")
    return beats


def write_wfdb_annotations(path, annotations: list[tuple[int, str]]) -> Path:
    """Write (sample_index, symbol) pairs as a WFDB binary annotation stream."""
    path = Path(path)
    out = bytearray()
    time = 0
    for sample, symbol in annotations:
        code = SYMBOL_CODES.get(symbol)
        if code is None:
            raise AnnotationError(f"unknown annotation symbol {symbol!r}")
        delta = sample - time
        if delta < 0:
            raise AnnotationError("annotation samples must be non-decreasing")
        if delta > 1023:
            out += bytes([0, _SKIP << 2])
            out += bytes([(delta >> 16) & 0xFF, (delta >> 24) & 0xFF,
                          delta & 0xFF, (delta >> 8) & 0xFF])
            delta = 0
        out += bytes([delta & 0xFF, (code << 2) | ((delta >> 8) & 0x03)])
        time = sample
    out += bytes([0, 0])
    path.write_bytes(bytes(out))
    return path


# --- CSV beats -----------------------------------------------------------------


def read_csv_beats(csv_path) -> list[CsvBeat]:
    """Parse ``label,s0,s1,...`` rows; rows whose width differs from the first
    row are rejected with their row number. Labels must be MIT-BIH beat symbols."""
    csv_path = Path(csv_path)
    if not csv_path.exists():
        raise FileNotFoundError(f"CSV beat file not found: {csv_path}")
    beats = []
    width = None
    with open(csv_path, newline="") as fh:
        for row_num, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            label = row[0].strip()
            if label not in BEAT_SYMBOLS:
                raise CsvBeatError(f"{csv_path}:{row_num}: unknown beat label {label!r}")
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise CsvBeatError(
                    f"{csv_path}:{row_num}: row has {len(row) - 1} samples, expected {width - 1}")
            try:
                samples = np.array([float(cell) for cell in row[1:]], dtype=np.float64)
            except ValueError as exc:
                raise CsvBeatError(f"{csv_path}:{row_num}: non-numeric sample cell ({exc})")
            beats.append(CsvBeat(label, samples))
    return beats


MITBIH_RECORD_IDS = (
    "100", "101", "102", "103", "104", "105", "106", "107", "108", "109",
    "111", "112", "113", "114", "115", "116", "117", "118", "119", "121",
    "122", "123", "124", "200", "201", "202", "203", "205", "207", "208",
    "209", "210", "212", "213", "214", "215", "217", "219", "220", "221",
    "222", "223", "228", "230", "231", "232", "233", "234",
)
