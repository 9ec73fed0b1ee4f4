from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal

from app.radar_dsp import Framing

logger = logging.getLogger(__name__)

MIN_PPG_FS_HZ = 25.0
PULSE_BAND_HZ = (0.5, 5.0)
REFRACTORY_S = 0.25
PROMINENCE_FRACTION = 0.5
FLAT_BLOCK_S = 5.0
FLAT_PTP = 1e-6

PRV_CONTEXT_S = 30.0
MIN_BEATS = 3
RATE_RANGE_BPM = (30.0, 220.0)

TACHO_FS_HZ = 4.0
SPECTRAL_WINDOW_S = 120.0
SPECTRAL_MIN_BEATS = 20
SPECTRAL_CHUNK = 2048
LF_BAND_HZ = (0.04, 0.15)
HF_BAND_HZ = (0.15, 0.4)
HF_EPS_MS2 = 1e-3
TF_BAND_EDGES_HZ = np.round(np.arange(0.0, 0.5001, 0.05), 3)

DESAT_DROP_PCT = 3.0
DESAT_MIN_S = 10.0
SPO2_BASELINE_S = 120.0


@dataclass
class PulseBeats:
    times_s: np.ndarray
    masked: np.ndarray
    fs: float

    @property
    def n_beats(self) -> int:
        return int(self.times_s.size)


@dataclass(frozen=True)
class Desaturation:
    start_s: float
    duration_s: float
    depth_pct: float


@dataclass
class SpO2Analysis:
    desaturations: list[Desaturation]
    odi_events_per_h: float
    mean_pct: float
    lowest_pct: float
    frame_mean_pct: np.ndarray
    frame_min_pct: np.ndarray
    frame_drop_pct: np.ndarray


@dataclass
class PpgFeatureSeries:
    framing: Framing
    pulse_rate_bpm: np.ndarray
    prv_sdnn_ms: np.ndarray
    prv_rmssd_ms: np.ndarray
    lf_power: np.ndarray
    hf_power: np.ndarray
    lf_hf_ratio: np.ndarray
    tf_spectrum: np.ndarray
    spo2: SpO2Analysis
    time_masked: np.ndarray
    freq_masked: np.ndarray
    signal_masked: np.ndarray
    tf_band_edges_hz: np.ndarray = field(default_factory=lambda: TF_BAND_EDGES_HZ.copy())

    def __post_init__(self) -> None:
        n = self.framing.n_frames
        arrays = {
            "pulse_rate_bpm": self.pulse_rate_bpm,
            "prv_sdnn_ms": self.prv_sdnn_ms,
            "prv_rmssd_ms": self.prv_rmssd_ms,
            "lf_power": self.lf_power,
            "hf_power": self.hf_power,
            "lf_hf_ratio": self.lf_hf_ratio,
            "tf_spectrum": self.tf_spectrum,
            "spo2_mean_pct": self.spo2.frame_mean_pct,
            "spo2_min_pct": self.spo2.frame_min_pct,
            "time_masked": self.time_masked,
            "freq_masked": self.freq_masked,
            "signal_masked": self.signal_masked,
        }
        bad = {name: len(arr) for name, arr in arrays.items() if len(arr) != n}
        if bad:
            raise ValueError(f"frame count mismatch (expected {n}): {bad}")

    @property
    def n_frames(self) -> int:
        return self.framing.n_frames

    @property
    def odi_events_per_h(self) -> float:
        return self.spo2.odi_events_per_h

    def crop(self, n_frames: int) -> "PpgFeatureSeries":
        n = min(n_frames, self.n_frames)
        spo2 = SpO2Analysis(
            desaturations=self.spo2.desaturations,
            odi_events_per_h=self.spo2.odi_events_per_h,
            mean_pct=self.spo2.mean_pct,
            lowest_pct=self.spo2.lowest_pct,
            frame_mean_pct=self.spo2.frame_mean_pct[:n],
            frame_min_pct=self.spo2.frame_min_pct[:n],
            frame_drop_pct=self.spo2.frame_drop_pct[:n],
        )
        return PpgFeatureSeries(
            framing=self.framing.crop(n),
            pulse_rate_bpm=self.pulse_rate_bpm[:n],
            prv_sdnn_ms=self.prv_sdnn_ms[:n],
            prv_rmssd_ms=self.prv_rmssd_ms[:n],
            lf_power=self.lf_power[:n],
            hf_power=self.hf_power[:n],
            lf_hf_ratio=self.lf_hf_ratio[:n],
            tf_spectrum=self.tf_spectrum[:n],
            spo2=spo2,
            time_masked=self.time_masked[:n],
            freq_masked=self.freq_masked[:n],
            signal_masked=self.signal_masked[:n],
            tf_band_edges_hz=self.tf_band_edges_hz,
        )

    def to_frame(self) -> pd.DataFrame:
        table = pd.DataFrame(
            {
                "time_s": self.framing.frame_centers(),
                "pulse_rate_bpm": self.pulse_rate_bpm,
                "prv_sdnn_ms": self.prv_sdnn_ms,
                "prv_rmssd_ms": self.prv_rmssd_ms,
                "lf_power": self.lf_power,
                "hf_power": self.hf_power,
                "lf_hf_ratio": self.lf_hf_ratio,
                "spo2_mean_pct": self.spo2.frame_mean_pct,
                "spo2_min_pct": self.spo2.frame_min_pct,
                "spo2_drop_pct": self.spo2.frame_drop_pct,
                "time_masked": self.time_masked.astype(int),
                "freq_masked": self.freq_masked.astype(int),
            }
        )
        lows = self.tf_band_edges_hz[:-1]
        bands = pd.DataFrame(self.tf_spectrum, columns=[f"tf_{low:.2f}hz" for low in lows])
        return pd.concat([table, bands], axis=1)


def _flat_samples(x: np.ndarray, fs: float) -> np.ndarray:
    block = max(1, int(round(FLAT_BLOCK_S * fs)))
    flat = np.zeros(x.size, dtype=bool)
    for begin in range(0, x.size, block):
        seg = x[begin : begin + block]
        if np.ptp(seg) < FLAT_PTP:
            flat[begin : begin + block] = True
    return flat


def _refine_peaks(x: np.ndarray, peaks: np.ndarray) -> np.ndarray:
    """三点抛物线插值，得到亚采样点峰位置。"""
    inner = (peaks > 0) & (peaks < x.size - 1)
    refined = peaks.astype(float)
    p = peaks[inner]
    left, mid, right = x[p - 1], x[p], x[p + 1]
    denom = left - 2.0 * mid + right
    with np.errstate(divide="ignore", invalid="ignore"):
        offset = np.where(np.abs(denom) > 1e-12, 0.5 * (left - right) / denom, 0.0)
    refined[inner] = p + np.clip(offset, -0.5, 0.5)
    return refined


def detect_pulses(ppg: np.ndarray, fs: float) -> PulseBeats:
    if fs < MIN_PPG_FS_HZ:
        raise ValueError(f"PPG sample rate must be >= {MIN_PPG_FS_HZ} Hz, got {fs}")
    x = np.asarray(ppg, dtype=float)
    if x.size == 0:
        raise ValueError("empty PPG series")
    flat = _flat_samples(x, fs)
    if flat.all():
        logger.warning("ppg_unanalyzable | samples=%d | reason=flat", x.size)
        return PulseBeats(times_s=np.empty(0), masked=flat, fs=fs)

    sos = signal.butter(2, list(PULSE_BAND_HZ), btype="bandpass", fs=fs, output="sos")
    band = signal.sosfiltfilt(sos, x)
    live = band[~flat]
    spread = float(np.percentile(live, 95) - np.percentile(live, 5))
    if spread <= FLAT_PTP:
        logger.warning("ppg_unanalyzable | samples=%d | reason=no_pulsatility", x.size)
        return PulseBeats(times_s=np.empty(0), masked=np.ones(x.size, dtype=bool), fs=fs)

    peaks, _ = signal.find_peaks(
        band,
        distance=max(1, int(round(REFRACTORY_S * fs))),
        prominence=PROMINENCE_FRACTION * spread,
    )
    peaks = peaks[~flat[peaks]]
    if flat.any():
        logger.warning("ppg_masked_segments | masked_s=%.1f", flat.sum() / fs)
    return PulseBeats(times_s=_refine_peaks(band, peaks) / fs, masked=flat, fs=fs)


def _window_sum(cumsum: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    return cumsum[hi] - cumsum[lo]


def time_features(beats: PulseBeats, framing: Framing, context_s: float = PRV_CONTEXT_S) -> dict[str, np.ndarray]:
    """帧中心 ±context_s 内的脉率、SDNN、RMSSD，不足 3 拍或脉率越界时屏蔽（NaN）。"""
    n = framing.n_frames
    centers = framing.frame_centers()
    times = np.asarray(beats.times_s, dtype=float)
    rate = np.full(n, np.nan)
    sdnn = np.full(n, np.nan)
    rmssd = np.full(n, np.nan)
    masked = np.ones(n, dtype=bool)
    if times.size < MIN_BEATS or n == 0:
        return {"pulse_rate_bpm": rate, "prv_sdnn_ms": sdnn, "prv_rmssd_ms": rmssd, "masked": masked}

    ibi = np.diff(times)
    ibi_end = times[1:]
    # 以全局均值为中心再累加，恒定间期时方差严格为 0
    centered = ibi - ibi.mean()
    s1 = np.concatenate([[0.0], np.cumsum(centered)])
    s2 = np.concatenate([[0.0], np.cumsum(centered**2)])
    succ = np.diff(ibi)
    d2 = np.concatenate([[0.0], np.cumsum(succ**2)])

    beat_lo = np.searchsorted(times, centers - context_s, side="left")
    beat_hi = np.searchsorted(times, centers + context_s, side="right")
    n_beats = beat_hi - beat_lo
    # 区间 j 由拍 j、j+1 构成，两拍都在窗内才计入
    lo = beat_lo
    hi = np.maximum(beat_hi - 1, lo)
    n_ibi = hi - lo

    ok = (n_beats >= MIN_BEATS) & (n_ibi >= 2)
    k = n_ibi[ok].astype(float)
    sum1 = _window_sum(s1, lo[ok], hi[ok])
    sum2 = _window_sum(s2, lo[ok], hi[ok])
    mean_centered = sum1 / k
    mean_ibi = mean_centered + ibi.mean()
    var = np.maximum((sum2 - k * mean_centered**2) / (k - 1.0), 0.0)
    succ_sum = d2[hi[ok] - 1] - d2[lo[ok]]

    rate[ok] = 60.0 / mean_ibi
    sdnn[ok] = np.sqrt(var) * 1000.0
    rmssd[ok] = np.sqrt(np.maximum(succ_sum, 0.0) / (k - 1.0)) * 1000.0

    in_range = (rate >= RATE_RANGE_BPM[0]) & (rate <= RATE_RANGE_BPM[1])
    masked = ~(ok & in_range)
    rate[masked] = np.nan
    sdnn[masked] = np.nan
    rmssd[masked] = np.nan
    return {"pulse_rate_bpm": rate, "prv_sdnn_ms": sdnn, "prv_rmssd_ms": rmssd, "masked": masked}


def _windowed_psd(series: np.ndarray, centers: np.ndarray, window_s: float = SPECTRAL_WINDOW_S):
    """逐帧 120 s 窗的周期图（线性去趋势 + Hann），按块产出 (slice, freqs, psd)。"""
    width = int(round(window_s * TACHO_FS_HZ))
    taper = signal.get_window("hann", width)
    norm = TACHO_FS_HZ * np.sum(taper**2)
    freqs = np.fft.rfftfreq(width, d=1.0 / TACHO_FS_HZ)
    padded = np.pad(series, (width, width), mode="edge")
    views = sliding_window_view(padded, width)
    starts = np.round(centers * TACHO_FS_HZ).astype(int) - width // 2 + width
    starts = np.clip(starts, 0, views.shape[0] - 1)
    for begin in range(0, centers.size, SPECTRAL_CHUNK):
        segs = signal.detrend(views[starts[begin : begin + SPECTRAL_CHUNK]], axis=1, type="linear")
        psd = np.abs(np.fft.rfft(segs * taper, axis=1)) ** 2 / norm
        psd[:, 1:] *= 2.0
        yield slice(begin, begin + segs.shape[0]), freqs, psd


def _band_power(freqs: np.ndarray, psd: np.ndarray, low: float, high: float) -> np.ndarray:
    sel = (freqs >= low) & (freqs < high)
    df = freqs[1] - freqs[0]
    return psd[:, sel].sum(axis=1) * df


def _tachogram(beats: PulseBeats, framing: Framing) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    times = np.asarray(beats.times_s, dtype=float)
    end_s = framing.n_frames * framing.hop_s + framing.frame_len_s
    grid = np.arange(0.0, end_s, 1.0 / TACHO_FS_HZ)
    ibi = np.diff(times)
    ibi_ms = np.interp(grid, times[1:], ibi * 1000.0)
    rate_bpm = np.interp(grid, times[1:], 60.0 / ibi)
    return grid, ibi_ms, rate_bpm


def _spectral_mask(beats: PulseBeats, framing: Framing) -> np.ndarray:
    centers = framing.frame_centers()
    half = SPECTRAL_WINDOW_S / 2.0
    lo = np.searchsorted(beats.times_s, centers - half, side="left")
    hi = np.searchsorted(beats.times_s, centers + half, side="right")
    return (hi - lo) < SPECTRAL_MIN_BEATS


def freq_features(beats: PulseBeats, framing: Framing) -> dict[str, np.ndarray]:
    """插值间期序列的 LF [0.04, 0.15) / HF [0.15, 0.4) 功率 (ms²)。"""
    n = framing.n_frames
    lf = np.zeros(n)
    hf = np.zeros(n)
    ratio = np.full(n, np.nan)
    if beats.n_beats < 4 or n == 0:
        return {"lf_power": lf, "hf_power": hf, "lf_hf_ratio": ratio, "masked": np.ones(n, dtype=bool)}

    _, ibi_ms, _ = _tachogram(beats, framing)
    for sl, freqs, psd in _windowed_psd(ibi_ms, framing.frame_centers()):
        lf[sl] = _band_power(freqs, psd, *LF_BAND_HZ)
        hf[sl] = _band_power(freqs, psd, *HF_BAND_HZ)
    masked = _spectral_mask(beats, framing)
    lf[masked] = 0.0
    hf[masked] = 0.0
    valid = ~masked & (hf > HF_EPS_MS2)
    ratio[valid] = lf[valid] / hf[valid]
    return {"lf_power": lf, "hf_power": hf, "lf_hf_ratio": ratio, "masked": masked}


def tf_spectrum(beats: PulseBeats, framing: Framing) -> np.ndarray:
    """瞬时脉率序列的短时谱，0–0.5 Hz 按 0.05 Hz 分 10 个频带 (bpm²)。"""
    n = framing.n_frames
    n_bands = TF_BAND_EDGES_HZ.size - 1
    out = np.zeros((n, n_bands))
    if beats.n_beats < 4 or n == 0:
        return out
    _, _, rate_bpm = _tachogram(beats, framing)
    for sl, freqs, psd in _windowed_psd(rate_bpm, framing.frame_centers()):
        for b in range(n_bands):
            out[sl, b] = _band_power(freqs, psd, TF_BAND_EDGES_HZ[b], TF_BAND_EDGES_HZ[b + 1] + (1e-9 if b == n_bands - 1 else 0.0))
    out[_spectral_mask(beats, framing)] = 0.0
    return out


def _runs(flags: np.ndarray) -> list[tuple[int, int]]:
    padded = np.concatenate([[False], flags, [False]]).astype(int)
    edges = np.flatnonzero(np.diff(padded))
    return list(zip(edges[0::2], edges[1::2]))


def spo2_analysis(spo2: np.ndarray, fs: float, framing: Framing) -> SpO2Analysis:
    """相对前 120 s 滚动最大值下降 ≥3% 且持续 ≥10 s 记为一次氧降。"""
    values = pd.Series(np.asarray(spo2, dtype=float))
    if values.empty:
        raise ValueError("empty SpO2 series")
    window = max(1, int(round(SPO2_BASELINE_S * fs)))
    baseline = values.rolling(window, min_periods=1).max().shift(1)
    baseline = baseline.fillna(values)
    drop = (baseline - values).clip(lower=0.0).to_numpy()

    min_len = max(1, int(round(DESAT_MIN_S * fs)))
    desats: list[Desaturation] = []
    for begin, end in _runs(drop >= DESAT_DROP_PCT - 1e-9):
        if end - begin >= min_len:
            desats.append(
                Desaturation(
                    start_s=begin / fs,
                    duration_s=(end - begin) / fs,
                    depth_pct=float(drop[begin:end].max()),
                )
            )
    analyzed_h = values.size / fs / 3600.0
    raw = values.to_numpy()
    return SpO2Analysis(
        desaturations=desats,
        odi_events_per_h=len(desats) / analyzed_h,
        mean_pct=float(np.nanmean(raw)),
        lowest_pct=float(np.nanmin(raw)),
        frame_mean_pct=framing.frame_mean(raw, fs) if framing.n_frames else np.empty(0),
        frame_min_pct=framing.frame_min(raw, fs) if framing.n_frames else np.empty(0),
        frame_drop_pct=framing.windows(drop, fs).max(axis=1) if framing.n_frames else np.empty(0),
    )


def extract_ppg_features(
    ppg: np.ndarray,
    ppg_fs: float,
    spo2: np.ndarray,
    spo2_fs: float,
    framing: Framing,
) -> PpgFeatureSeries:
    beats = detect_pulses(ppg, ppg_fs)
    timed = time_features(beats, framing)
    spectral = freq_features(beats, framing)
    signal_masked = (
        framing.frame_mean(beats.masked.astype(float), ppg_fs) > 0.5
        if framing.n_frames
        else np.zeros(0, dtype=bool)
    )
    logger.info(
        "ppg_features | beats=%d | time_masked=%d | freq_masked=%d",
        beats.n_beats,
        int(timed["masked"].sum()),
        int(spectral["masked"].sum()),
    )
    return PpgFeatureSeries(
        framing=framing,
        pulse_rate_bpm=timed["pulse_rate_bpm"],
        prv_sdnn_ms=timed["prv_sdnn_ms"],
        prv_rmssd_ms=timed["prv_rmssd_ms"],
        lf_power=spectral["lf_power"],
        hf_power=spectral["hf_power"],
        lf_hf_ratio=spectral["lf_hf_ratio"],
        tf_spectrum=tf_spectrum(beats, framing),
        spo2=spo2_analysis(spo2, spo2_fs, framing),
        time_masked=timed["masked"],
        freq_masked=spectral["masked"],
        signal_masked=signal_masked,
    )
