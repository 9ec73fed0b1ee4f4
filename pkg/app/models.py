from __future__ import annotations

from enum import Enum
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class SleepStage(str, Enum):
    WAKE = "Wake"
    N1 = "N1"
    N2 = "N2"
    N3 = "N3"
    REM = "REM"


# 5 分类输出头的固定顺序
STAGE_ORDER: tuple[SleepStage, ...] = (
    SleepStage.WAKE,
    SleepStage.N1,
    SleepStage.N2,
    SleepStage.N3,
    SleepStage.REM,
)


class EventKind(str, Enum):
    OBSTRUCTIVE_APNEA = "ObstructiveApnea"
    CENTRAL_APNEA = "CentralApnea"
    MIXED_APNEA = "MixedApnea"
    OBSTRUCTIVE_HYPOPNEA = "ObstructiveHypopnea"


OBSTRUCTIVE_KINDS = frozenset(
    {EventKind.OBSTRUCTIVE_APNEA, EventKind.MIXED_APNEA, EventKind.OBSTRUCTIVE_HYPOPNEA}
)


class Severity(str, Enum):
    HEALTHY = "healthy"
    MILD = "mild"
    MODERATE = "moderate"
    SEVERE = "severe"


# OAHI 分级区间 (lower, upper]，healthy 下界为 0 且闭区间
SEVERITY_BANDS: dict[Severity, tuple[float, float]] = {
    Severity.HEALTHY: (0.0, 1.0),
    Severity.MILD: (1.0, 5.0),
    Severity.MODERATE: (5.0, 10.0),
    Severity.SEVERE: (10.0, float("inf")),
}


class StageScheme(str, Enum):
    WS = "WS"
    WRLD = "WRLD"
    WRNN = "WRNN"


class SubjectProfile(BaseModel):
    subject_id: str
    age_years: float = Field(ge=1.0, le=18.0)
    severity_class: Severity
    target_oahi: float = Field(ge=0.0)
    seed: int = Field(ge=0, lt=2**64)

    @model_validator(mode="after")
    def _target_inside_band(self) -> "SubjectProfile":
        low, high = SEVERITY_BANDS[self.severity_class]
        if self.severity_class == Severity.HEALTHY:
            inside = low <= self.target_oahi <= high
        else:
            inside = low < self.target_oahi <= high
        if not inside:
            raise ValueError(
                f"target_oahi={self.target_oahi} outside {self.severity_class.value} band ({low}, {high}]"
            )
        return self


class Hypnogram(BaseModel):
    epoch_len_s: float = Field(default=30.0, gt=0)
    stages: list[SleepStage] = Field(min_length=1)

    @property
    def n_epochs(self) -> int:
        return len(self.stages)

    @property
    def duration_s(self) -> float:
        return self.n_epochs * self.epoch_len_s

    def stage_indices(self) -> list[int]:
        lookup = {stage: idx for idx, stage in enumerate(STAGE_ORDER)}
        return [lookup[stage] for stage in self.stages]

    def is_sleep(self) -> list[bool]:
        return [stage != SleepStage.WAKE for stage in self.stages]


class RespiratoryEvent(BaseModel):
    kind: EventKind
    start_s: float = Field(ge=0.0)
    duration_s: float = Field(gt=0.0)
    desat_depth_pct: float = Field(default=0.0, ge=0.0)

    @property
    def end_s(self) -> float:
        return self.start_s + self.duration_s

    @model_validator(mode="after")
    def _hypopnea_needs_desat(self) -> "RespiratoryEvent":
        # 允许浮点误差，3% 门限按闭区间处理
        if self.kind == EventKind.OBSTRUCTIVE_HYPOPNEA and self.desat_depth_pct < 3.0 - 1e-9:
            raise ValueError("obstructive hypopnea requires desat_depth_pct >= 3")
        return self


class StageVitals(BaseModel):
    model_config = ConfigDict(extra="forbid")

    chest_amp_mm: float = Field(gt=0.0)
    resp_rate_bpm: float = Field(gt=0.0)
    resp_rate_sd_bpm: float = Field(default=0.0, ge=0.0)
    pulse_rate_bpm: float = Field(gt=0.0)
    pulse_rate_sd_bpm: float = Field(default=0.0, ge=0.0)
    pulse_lf_bpm: float = Field(default=0.0, ge=0.0)
    pulse_hf_bpm: float = Field(default=0.0, ge=0.0)
    movement_rate_per_h: float = Field(default=0.0, ge=0.0)


def _default_stage_vitals() -> dict[SleepStage, StageVitals]:
    return {
        SleepStage.WAKE: StageVitals(
            chest_amp_mm=2.5, resp_rate_bpm=26.0, resp_rate_sd_bpm=3.0,
            pulse_rate_bpm=105.0, pulse_rate_sd_bpm=3.0, pulse_lf_bpm=3.0, pulse_hf_bpm=1.5,
            movement_rate_per_h=150.0,
        ),
        SleepStage.N1: StageVitals(
            chest_amp_mm=2.0, resp_rate_bpm=23.0, resp_rate_sd_bpm=1.5,
            pulse_rate_bpm=95.0, pulse_rate_sd_bpm=1.5, pulse_lf_bpm=2.0, pulse_hf_bpm=2.0,
            movement_rate_per_h=8.0,
        ),
        SleepStage.N2: StageVitals(
            chest_amp_mm=2.0, resp_rate_bpm=21.0, resp_rate_sd_bpm=0.8,
            pulse_rate_bpm=84.0, pulse_rate_sd_bpm=1.0, pulse_lf_bpm=1.5, pulse_hf_bpm=2.5,
            movement_rate_per_h=3.0,
        ),
        SleepStage.N3: StageVitals(
            chest_amp_mm=2.5, resp_rate_bpm=19.0, resp_rate_sd_bpm=0.3,
            pulse_rate_bpm=76.0, pulse_rate_sd_bpm=0.5, pulse_lf_bpm=0.5, pulse_hf_bpm=3.0,
            movement_rate_per_h=1.0,
        ),
        SleepStage.REM: StageVitals(
            chest_amp_mm=1.5, resp_rate_bpm=24.0, resp_rate_sd_bpm=2.0,
            pulse_rate_bpm=92.0, pulse_rate_sd_bpm=2.0, pulse_lf_bpm=3.0, pulse_hf_bpm=1.5,
            movement_rate_per_h=2.0,
        ),
    }


class PhysioConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    radar_wavelength_m: float = Field(default=0.005, gt=0.0)
    stage_vitals: dict[SleepStage, StageVitals] = Field(default_factory=_default_stage_vitals)
    # 气流在胸壁波形上留下的二次谐波幅度（相对基波），阻塞时塌陷
    flow_harmonic_ratio: float = Field(default=0.3, ge=0.0)
    cardiac_amp_mm: float = Field(default=0.03, ge=0.0)
    breath_jitter_bpm: float = Field(default=0.5, ge=0.0)
    desat_lag_s: float = Field(default=15.0, ge=0.0)
    desat_recovery_tau_s: float = Field(default=20.0, gt=0.0)
    spo2_baseline_pct: float = Field(default=97.0, ge=70.0, le=100.0)
    spo2_noise_pct: float = Field(default=0.0, ge=0.0)
    event_pulse_drop_bpm: float = Field(default=3.0, ge=0.0)
    arousal_pulse_rise_bpm: float = Field(default=4.0, ge=0.0)
    radar_rate_hz: float = Field(default=20.0, gt=0.0)
    ppg_rate_hz: float = Field(default=50.0, gt=0.0)
    spo2_rate_hz: float = Field(default=1.0, gt=0.0)
    # None 表示无噪声
    radar_snr_db: Optional[float] = None
    ppg_noise_std: float = Field(default=0.0, ge=0.0)
    age_adjust: bool = True

    @field_validator("stage_vitals")
    @classmethod
    def _all_stages_present(cls, value: dict[SleepStage, StageVitals]) -> dict[SleepStage, StageVitals]:
        missing = [stage.value for stage in SleepStage if stage not in value]
        if missing:
            raise ValueError(f"stage_vitals missing stages: {missing}")
        return value


class EventThresholds(BaseModel):
    model_config = ConfigDict(extra="forbid")

    enter: float = Field(default=0.6, ge=0.0, le=1.0)
    exit: float = Field(default=0.4, ge=0.0, le=1.0)
    min_cycles: float = Field(default=2.0, gt=0.0)
    merge_cycles: float = Field(default=0.5, ge=0.0)
    central_effort_ratio: float = 0.1
    persisting_effort_ratio: float = 0.5
    apnea_flow_drop: float = 0.9
    hypopnea_flow_drop: float = 0.3
    desat_pct: float = 3.0

    @model_validator(mode="after")
    def _hysteresis_order(self) -> "EventThresholds":
        if self.exit > self.enter:
            raise ValueError("exit threshold must not exceed enter threshold")
        return self


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_channels: int = Field(default=46, ge=1)
    conv_widths: list[int] = Field(default_factory=lambda: [24, 32, 32], min_length=1)
    kernel_size: int = Field(default=5, ge=1)
    pools: list[int] = Field(default_factory=lambda: [2, 2, 3], min_length=1)
    hidden_size: int = Field(default=32, ge=1)
    dropout: float = Field(default=0.1, ge=0.0, lt=1.0)
    n_stages: int = Field(default=5, ge=1)
    frames_per_epoch: int = Field(default=60, ge=1)
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check_shapes(self) -> "ModelConfig":
        if len(self.pools) != len(self.conv_widths):
            raise ValueError("pools and conv_widths must have the same length")
        if any(width < 1 for width in self.conv_widths) or any(p < 1 for p in self.pools):
            raise ValueError("conv widths and pools must be >= 1")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if self.frames_per_epoch % self.downsample != 0:
            raise ValueError("product of pools must divide frames_per_epoch")
        return self

    @property
    def downsample(self) -> int:
        factor = 1
        for pool in self.pools:
            factor *= pool
        return factor


class TrainSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    learning_rate: float = Field(default=0.01, gt=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    optimizer: Literal["sgd", "adam"] = "sgd"
    batch_size: int = Field(default=4, ge=1)
    max_epochs: int = Field(default=30, ge=1)
    max_iterations: Optional[int] = Field(default=None, ge=1)
    stage_weight: float = Field(default=1.0, ge=0.0)
    event_weight: float = Field(default=1.0, ge=0.0)
    patience: int = Field(default=5, ge=1)
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _some_weight(self) -> "TrainSpec":
        if self.stage_weight == 0 and self.event_weight == 0:
            raise ValueError("at least one loss weight must be positive")
        return self


class StageMetrics(BaseModel):
    tst_h: float
    time_in_bed_h: float
    sleep_efficiency_pct: float
    sleep_latency_min: float
    stage_pct: dict[str, float]
    wake_epochs: int


class SleepReport(BaseModel):
    subject_id: str
    source: Literal["truth", "oracle", "model"]
    oahi: float = Field(ge=0.0)
    cai: float = Field(ge=0.0)
    odi: float = Field(ge=0.0)
    tst_h: float = Field(ge=0.0)
    time_in_bed_h: float = Field(gt=0.0)
    sleep_efficiency_pct: float = Field(ge=0.0, le=100.0)
    sleep_latency_min: float = Field(ge=0.0)
    stage_pct: dict[str, float]
    wake_epochs: int = Field(ge=0)
    severity: Severity
    event_counts: dict[str, int] = Field(default_factory=dict)
    spo2_mean_pct: Optional[float] = None
    spo2_lowest_pct: Optional[float] = None
    breath_period_s: Optional[float] = None


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    cohort_size: int = Field(default=24, ge=1)
    severity_mix: dict[Severity, float] = Field(
        default_factory=lambda: {
            Severity.HEALTHY: 1 / 3,
            Severity.MILD: 1 / 3,
            Severity.MODERATE: 0.0,
            Severity.SEVERE: 1 / 3,
        }
    )
    duration_h: float = Field(default=8.0, ge=1.0, le=12.0)
    seed: int = Field(default=20231101, ge=0)
    mode: Literal["oracle", "model"] = "oracle"
    checkpoint: Optional[str] = None
    k_folds: int = Field(default=4, ge=2)
    out_dir: str = "runs/default"
    plots: bool = True
    jobs: int = Field(default=1, ge=1)
    interval_method: Literal["wald", "wilson"] = "wald"

    @field_validator("severity_mix")
    @classmethod
    def _mix_is_distribution(cls, value: dict[Severity, float]) -> dict[Severity, float]:
        if any(weight < 0 for weight in value.values()):
            raise ValueError("severity_mix weights must be non-negative")
        total = sum(value.values())
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"severity_mix must sum to 1, got {total:.6f}")
        return value

    @model_validator(mode="after")
    def _cohort_covers_folds(self) -> "ExperimentConfig":
        if self.cohort_size < self.k_folds:
            raise ValueError(f"cohort_size={self.cohort_size} smaller than k_folds={self.k_folds}")
        return self


class Settings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    log_level: str = "INFO"
    experiment: ExperimentConfig = Field(default_factory=ExperimentConfig)
    physio: PhysioConfig = Field(default_factory=PhysioConfig)
    thresholds: EventThresholds = Field(default_factory=EventThresholds)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainSpec = Field(default_factory=TrainSpec)
    server_host: str = "127.0.0.1"
    server_port: int = 8000


class IntervalEstimate(BaseModel):
    value: float
    ci_low: float
    ci_high: float

    @model_validator(mode="after")
    def _ordered(self) -> "IntervalEstimate":
        if not self.ci_low <= self.value + 1e-12 or not self.value <= self.ci_high + 1e-12:
            raise ValueError(f"interval ({self.ci_low}, {self.ci_high}) does not contain {self.value}")
        return self


class IccResult(IntervalEstimate):
    method: Literal["f", "bootstrap", "exact"] = "f"
    n: int = Field(ge=2)


class RateEstimate(IntervalEstimate):
    n: int = Field(ge=0)


class BlandAltmanResult(BaseModel):
    n: int = Field(ge=2)
    bias: float
    sd: float = Field(ge=0.0)
    loa_low: float
    loa_high: float
    within_fraction: float = Field(ge=0.0, le=1.0)


class QuantityAgreement(BaseModel):
    quantity: str
    icc: IccResult
    bland_altman: BlandAltmanResult


class CutoffPerformance(BaseModel):
    cutoff: float
    tp: int = Field(ge=0)
    fn: int = Field(ge=0)
    tn: int = Field(ge=0)
    fp: int = Field(ge=0)
    sensitivity: Optional[RateEstimate] = None
    specificity: Optional[RateEstimate] = None
    auc: Optional[IntervalEstimate] = None
    roc_fpr: list[float] = Field(default_factory=list)
    roc_tpr: list[float] = Field(default_factory=list)


class StagingPerformance(BaseModel):
    scheme: StageScheme
    labels: list[str]
    confusion: list[list[int]]
    accuracy: float
    kappa: float
    recall: dict[str, Optional[float]]
    precision: dict[str, Optional[float]]
    macro_recall: float
    macro_precision: float


class EventDetection(BaseModel):
    n_truth: int = Field(ge=0)
    n_detected: int = Field(ge=0)
    matched: int = Field(ge=0)
    recall: float
    precision: float


class SubjectResult(BaseModel):
    subject_id: str
    fold: int
    planted_severity: Severity
    truth: SleepReport
    predicted: SleepReport
    events: EventDetection


class AgreementReport(BaseModel):
    source: Literal["oracle", "model"]
    seed: int
    k_folds: int
    n_subjects: int = Field(ge=0)
    agreement: list[QuantityAgreement] = Field(default_factory=list)
    diagnostic: list[CutoffPerformance] = Field(default_factory=list)
    staging: list[StagingPerformance] = Field(default_factory=list)
    events: Optional[EventDetection] = None
    severity_agreement: int = 0
    failures: dict[str, str] = Field(default_factory=dict)
    subjects: list[SubjectResult] = Field(default_factory=list)

    def quantity(self, name: str) -> QuantityAgreement:
        for item in self.agreement:
            if item.quantity == name:
                return item
        raise KeyError(name)
