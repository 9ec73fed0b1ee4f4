from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft as scipy_fft
from scipy import signal
from scipy.ndimage import median_filter, uniform_filter1d

logger = logging.getLogger(__name__)

DEFAULT_WAVELENGTH_M = 0.005
MOVEMENT_CUTOFF_HZ = 2.5
EFFORT_BAND_HZ = (0.1, 1.0)
EFFORT_SMOOTH_S = 3.0
RESP_BAND_HZ = (0.1, 1.0)

DOPPLER_FS_HZ = 5.0
DOPPLER_WINDOW_S = 10.0
DOPPLER_NFFT = 200
DOPPLER_MAX_HZ = 2.0
DOPPLER_CHUNK = 8192
# 0.05 mm 幅度对应的功率，低于此视为无呼吸
DOPPLER_NOISE_FLOOR = 0.05**2
FLOW_SEARCH_HZ = 0.05

BASELINE_WINDOW_S = 120.0
LOW_CONFIDENCE_RATIO = 0.5
_EPS = 1e-12


@dataclass(frozen=True)
class Framing:
    """帧 k 覆盖 [k*hop, k*hop + frame_len)，各通道共用同一帧网格。"""

    frame_len_s: float = 1.0
    hop_s: float = 0.5
    n_frames: int = 0

    def __post_init__(self) -> None:
        if self.frame_len_s <= 0 or self.hop_s <= 0:
            raise ValueError("frame_len_s and hop_s must be positive")
        if self.n_frames < 0:
            raise ValueError("n_frames must be >= 0")

    @classmethod
    def for_duration(cls, duration_s: float, frame_len_s: float = 1.0, hop_s: float = 0.5) -> "Framing":
        return cls(frame_len_s=frame_len_s, hop_s=hop_s, n_frames=int(math.floor(duration_s / hop_s + 1e-9)))

    def frame_starts(self) -> np.ndarray:
        return np.arange(self.n_frames) * self.hop_s

    def frame_centers(self) -> np.ndarray:
        return self.frame_starts() + self.frame_len_s / 2.0

    def frames_per_epoch(self, epoch_len_s: float = 30.0) -> int:
        return int(round(epoch_len_s / self.hop_s))

    def frame_index(self, t_s: float) -> int:
        return int(min(max(0, math.floor(t_s / self.hop_s)), max(0, self.n_frames - 1)))

    def crop(self, n_frames: int) -> "Framing":
        return Framing(self.frame_len_s, self.hop_s, min(self.n_frames, n_frames))

    def windows(self, x: np.ndarray, fs: float) -> np.ndarray:
        """(n_frames, L) 的逐帧样本视图，末尾不足时用边界值补齐。"""
        if self.n_frames == 0:
            raise ValueError("empty framing")
        x = np.asarray(x, dtype=float)
        width = max(1, int(round(self.frame_len_s * fs)))
        starts = np.round(self.frame_starts() * fs).astype(int)
        need = int(starts[-1]) + width
        if x.size == 0:
            raise ValueError("empty signal")
        if x.size < need:
            x = np.pad(x, (0, need - x.size), mode="edge")
        return sliding_window_view(x, width)[starts]

    def frame_mean(self, x: np.ndarray, fs: float) -> np.ndarray:
        return self.windows(x, fs).mean(axis=1)

    def frame_min(self, x: np.ndarray, fs: float) -> np.ndarray:
        return self.windows(x, fs).min(axis=1)


@dataclass
class FeatureFrameSeries:
    framing: Framing
    movement_power: np.ndarray
    effort: np.ndarray
    doppler: np.ndarray
    doppler_freqs: np.ndarray
    doppler_peak_hz: np.ndarray
    flow_proxy: np.ndarray
    effort_ratio: np.ndarray
    flow_ratio: np.ndarray
    low_confidence: np.ndarray

    def __post_init__(self) -> None:
        n = self.framing.n_frames
        per_frame = {
            "movement_power": self.movement_power,
            "effort": self.effort,
            "doppler": self.doppler,
            "doppler_peak_hz": self.doppler_peak_hz,
            "flow_proxy": self.flow_proxy,
            "effort_ratio": self.effort_ratio,
            "flow_ratio": self.flow_ratio,
            "low_confidence": self.low_confidence,
        }
        bad = {name: len(arr) for name, arr in per_frame.items() if len(arr) != n}
        if bad:
            raise ValueError(f"frame count mismatch (expected {n}): {bad}")
        if self.doppler.shape[1] != len(self.doppler_freqs):
            raise ValueError("doppler bins do not match doppler_freqs")

    @property
    def n_frames(self) -> int:
        return self.framing.n_frames

    def crop(self, n_frames: int) -> "FeatureFrameSeries":
        n = min(n_frames, self.n_frames)
        return FeatureFrameSeries(
            framing=self.framing.crop(n),
            movement_power=self.movement_power[:n],
            effort=self.effort[:n],
            doppler=self.doppler[:n],
            doppler_freqs=self.doppler_freqs,
            doppler_peak_hz=self.doppler_peak_hz[:n],
            flow_proxy=self.flow_proxy[:n],
            effort_ratio=self.effort_ratio[:n],
            flow_ratio=self.flow_ratio[:n],
            low_confidence=self.low_confidence[:n],
        )

    def to_frame(self) -> pd.DataFrame:
        table = pd.DataFrame(
            {
                "time_s": self.framing.frame_centers(),
                "movement_power": self.movement_power,
                "effort": self.effort,
                "effort_ratio": self.effort_ratio,
                "doppler_peak_hz": self.doppler_peak_hz,
                "flow_proxy": self.flow_proxy,
                "flow_ratio": self.flow_ratio,
                "low_confidence": self.low_confidence.astype(int),
            }
        )
        bins = pd.DataFrame(self.doppler, columns=[f"doppler_{f:.3f}hz" for f in self.doppler_freqs])
        return pd.concat([table, bins], axis=1)


def select_range_bin(iq: np.ndarray) -> int:
    """多距离单元输入时选相位方差最大的一列（慢时间 × 距离单元）。"""
    iq = np.asarray(iq)
    if iq.ndim != 2 or iq.shape[1] == 0:
        raise ValueError("expected a 2-D slow-time x range-bin IQ matrix")
    phase = np.unwrap(np.angle(iq), axis=0)
    return int(np.argmax(phase.var(axis=0)))


def demodulate_phase(iq: np.ndarray, wavelength_m: float = DEFAULT_WAVELENGTH_M) -> np.ndarray:
    """反正切相位 → 2π 解缠 → 线性去趋势 → 乘 λ/4π，输出位移 (mm)。"""
    iq = np.asarray(iq)
    if iq.ndim == 2:
        iq = iq[:, select_range_bin(iq)]
    if iq.size == 0:
        raise ValueError("empty IQ series")
    phase = np.unwrap(np.angle(iq).astype(float))
    phase = signal.detrend(phase, type="linear")
    return phase * (wavelength_m * 1000.0) / (4.0 * np.pi)


def low_confidence_samples(iq: np.ndarray, ratio: float = LOW_CONFIDENCE_RATIO) -> np.ndarray:
    magnitude = np.abs(np.asarray(iq))
    if magnitude.ndim == 2:
        magnitude = magnitude.max(axis=1)
    floor = ratio * float(np.median(magnitude)) if magnitude.size else 0.0
    return magnitude < floor


def movement_power(displacement: np.ndarray, fs: float, framing: Framing) -> np.ndarray:
    if framing.n_frames == 0:
        raise ValueError("empty framing")
    sos = signal.butter(4, MOVEMENT_CUTOFF_HZ, btype="highpass", fs=fs, output="sos")
    high = signal.sosfiltfilt(sos, np.asarray(displacement, dtype=float))
    return framing.frame_mean(high**2, fs)


def breathing_effort(displacement: np.ndarray, fs: float, framing: Framing) -> np.ndarray:
    if framing.n_frames == 0:
        raise ValueError("empty framing")
    x = np.asarray(displacement, dtype=float)
    sos = signal.butter(2, list(EFFORT_BAND_HZ), btype="bandpass", fs=fs, output="sos")
    band = signal.sosfiltfilt(sos, x)
    envelope = np.abs(signal.hilbert(band, N=scipy_fft.next_fast_len(band.size))[: band.size])
    envelope = uniform_filter1d(envelope, size=max(1, int(round(EFFORT_SMOOTH_S * fs))), mode="nearest")
    return framing.frame_mean(envelope, fs)


def doppler_frequencies() -> np.ndarray:
    n_bins = int(round(DOPPLER_MAX_HZ * DOPPLER_NFFT / DOPPLER_FS_HZ)) + 1
    return np.fft.rfftfreq(DOPPLER_NFFT, d=1.0 / DOPPLER_FS_HZ)[:n_bins]


def breathing_doppler(displacement: np.ndarray, fs: float, framing: Framing) -> tuple[np.ndarray, np.ndarray]:
    """以帧中心为中心的 10 s 周期 Hann 窗短时谱，返回 (功率 mm², 频率)。"""
    if framing.n_frames == 0:
        raise ValueError("empty framing")
    ratio = Fraction(DOPPLER_FS_HZ / fs).limit_denominator(1000)
    x = signal.resample_poly(np.asarray(displacement, dtype=float), ratio.numerator, ratio.denominator)
    width = int(round(DOPPLER_WINDOW_S * DOPPLER_FS_HZ))
    window = signal.get_window("hann", width)
    scale = 2.0 / window.sum()
    freqs = doppler_frequencies()

    pad = width
    mode = "reflect" if x.size > pad else "edge"
    padded = np.pad(x, (pad, pad + width), mode=mode)
    views = sliding_window_view(padded, width)
    starts = np.round(framing.frame_centers() * DOPPLER_FS_HZ).astype(int) - width // 2 + pad
    starts = np.clip(starts, 0, views.shape[0] - 1)

    power = np.empty((framing.n_frames, freqs.size))
    for begin in range(0, framing.n_frames, DOPPLER_CHUNK):
        segs = views[starts[begin : begin + DOPPLER_CHUNK]]
        segs = segs - segs.mean(axis=1, keepdims=True)
        spectrum = np.fft.rfft(segs * window, n=DOPPLER_NFFT, axis=1)[:, : freqs.size]
        power[begin : begin + DOPPLER_CHUNK] = (np.abs(spectrum) * scale) ** 2
    return power, freqs


def _resp_band(freqs: np.ndarray) -> np.ndarray:
    return (freqs >= RESP_BAND_HZ[0] - 1e-9) & (freqs <= RESP_BAND_HZ[1] + 1e-9)


def doppler_peak_hz(power: np.ndarray, freqs: np.ndarray) -> np.ndarray:
    band = np.flatnonzero(_resp_band(freqs))
    return freqs[band[np.argmax(power[:, band], axis=1)]]


def flow_proxy(power: np.ndarray, freqs: np.ndarray, peak_hz: np.ndarray) -> np.ndarray:
    """呼吸二次谐波附近（2f ± 0.05 Hz）的最大幅度，阻塞时塌陷。"""
    amplitude = np.sqrt(power)
    near = np.abs(freqs[None, :] - 2.0 * peak_hz[:, None]) <= FLOW_SEARCH_HZ + 1e-9
    return np.where(near, amplitude, 0.0).max(axis=1)


def estimate_breath_period(power: np.ndarray, freqs: Optional[np.ndarray] = None) -> float:
    freqs = doppler_frequencies() if freqs is None else freqs
    if power.size == 0:
        raise ValueError("no respiratory signal")
    band = np.flatnonzero(_resp_band(freqs))
    idx = band[np.argmax(power[:, band], axis=1)]
    peak_power = power[np.arange(power.shape[0]), idx]
    confident = peak_power > DOPPLER_NOISE_FLOOR
    if not confident.any():
        raise ValueError("no respiratory signal")
    confident &= peak_power >= 0.25 * float(np.median(peak_power[confident]))
    return float(np.median(1.0 / freqs[idx[confident]]))


def local_ratio(values: np.ndarray, hop_s: float, window_s: float = BASELINE_WINDOW_S) -> np.ndarray:
    """相对 120 s 滑动中位数基线的比值。"""
    size = int(round(window_s / hop_s)) | 1
    baseline = median_filter(np.asarray(values, dtype=float), size=size, mode="nearest")
    return values / np.maximum(baseline, _EPS)


def extract_radar_features(
    iq: np.ndarray,
    fs: float,
    wavelength_m: float = DEFAULT_WAVELENGTH_M,
    framing: Optional[Framing] = None,
) -> FeatureFrameSeries:
    iq = np.asarray(iq)
    if iq.size == 0:
        raise ValueError("empty IQ series")
    framing = framing or Framing.for_duration(iq.shape[0] / fs)
    displacement = demodulate_phase(iq, wavelength_m)
    movement = movement_power(displacement, fs, framing)
    effort = breathing_effort(displacement, fs, framing)
    power, freqs = breathing_doppler(displacement, fs, framing)
    peak = doppler_peak_hz(power, freqs)
    flow = flow_proxy(power, freqs, peak)
    low_conf = framing.frame_mean(low_confidence_samples(iq).astype(float), fs) > 0.5
    if low_conf.any():
        logger.warning("radar_low_confidence | frames=%d/%d", int(low_conf.sum()), framing.n_frames)
    return FeatureFrameSeries(
        framing=framing,
        movement_power=movement,
        effort=effort,
        doppler=power,
        doppler_freqs=freqs,
        doppler_peak_hz=peak,
        flow_proxy=flow,
        effort_ratio=local_ratio(effort, framing.hop_s),
        flow_ratio=local_ratio(flow, framing.hop_s),
        low_confidence=low_conf,
    )
