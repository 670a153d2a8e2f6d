"""Train/test pipeline auditing for positional-embedding variance shift.

A pipeline config lists the augmentation ops of each phase. ``audit`` pushes
a variance multiplier through each phase analytically (product of per-op
factors), compares the image-to-embedding variance ratio across phases and
recommends the embedding rescale. ``verify_empirically`` runs the same ops on
synthetic N(0, 1) images to check the product model.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Annotated, Callable, Literal, Mapping, Optional, Union

import numpy as np
from pydantic import AliasChoices, BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import augment
from .augment import EraseMode, NormStats
from .interp import Dims, Method, resample_axis, upsample_grid
from .tensor import SeededRng
from .varcal import REFERENCE_K

CONSISTENCY_TOL = math.log(1.05)
EMPIRICAL_TOL = 0.03
ERASE_REFERENCE_SHAPE = (224, 224)
UNIT_STATS_PRESETS = {"default_imagenet", "custom"}

KTable = Mapping[tuple[Method, Dims], float]


class ConfigError(ValueError):
    """Schema violation in a pipeline config; ``offending`` lists key paths."""

    def __init__(self, message: str, offending: list[str] | None = None):
        super().__init__(message)
        self.offending = offending or []


class UnknownMultiplierError(ValueError):
    pass


class _Op(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True, frozen=True)

    stream: int = Field(0, ge=0, description="RNG stream id used when the op is executed")


class _MixingOp(_Op):
    lam: Optional[float] = Field(None, alias="lambda", gt=0, lt=1)
    alpha: Optional[float] = Field(None, gt=0, validation_alias=AliasChoices("alpha", "mixup_alpha"))
    prob: float = Field(1.0, ge=0, le=1)

    @model_validator(mode="after")
    def _one_ratio_source(self):
        if (self.lam is None) == (self.alpha is None):
            raise ValueError("give exactly one of 'lambda' (fixed ratio) or 'alpha' (Beta(alpha, alpha))")
        return self

    def draw_lambda(self, g: np.random.Generator) -> float:
        if self.lam is not None:
            return self.lam
        return float(np.clip(g.beta(self.alpha, self.alpha), 1e-6, 1 - 1e-6))


class MixupOp(_MixingOp):
    op: Literal["mixup"]


class CutmixOp(_MixingOp):
    op: Literal["cutmix"]


class ExtendedMixupOp(_Op):
    op: Literal["extended_mixup"]
    lambda_i: float
    lambda_j: float


class EraseOp(_Op):
    op: Literal["random_erase"]
    mode: EraseMode = EraseMode.PIXEL
    prob: float = Field(0.25, ge=0, le=1)
    area_range: tuple[float, float] = augment.DEFAULT_AREA_RANGE
    aspect_range: tuple[float, float] = augment.DEFAULT_ASPECT_RANGE
    fraction: Optional[float] = Field(None, gt=0, lt=1, description="expected erased area fraction override")
    var_multiplier: Optional[float] = Field(None, gt=0, description="measured fallback multiplier")


class ResizeOp(_Op):
    op: Literal["resize"]
    method: Method = Method.BICUBIC
    scale: float = Field(2.0, ge=1)
    dims: Dims = Dims.TWO_D


class CropOp(_Op):
    op: Literal["crop"]


class ResizeCropOp(_Op):
    op: Literal["resize_crop"]
    method: Method = Method.BICUBIC
    scale: float = Field(2.0, ge=1)
    dims: Dims = Dims.TWO_D
    center: bool = False


class NormalizeOp(_Op):
    op: Literal["normalize"]
    norm: Union[str, "CustomNorm"] = "default_imagenet"
    var_multiplier: Optional[float] = Field(None, gt=0, description="measured fallback multiplier")


class CustomNorm(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    mean: tuple[float, float, float]
    std: tuple[float, float, float]


AugmentOp = Annotated[
    Union[MixupOp, CutmixOp, ExtendedMixupOp, EraseOp, ResizeOp, CropOp, ResizeCropOp, NormalizeOp],
    Field(discriminator="op"),
]


class PEUpsample(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    method: Method = Method.BICUBIC
    in_test: bool = False
    dims: Dims = Dims.TWO_D
    rescale: float = Field(1.0, gt=0, description="factor already applied to the upsampled embedding")


class PipelineConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    scenario: Literal["classification", "segmentation"] = "classification"
    norm: Union[str, CustomNorm] = "default_imagenet"
    pe_upsample: PEUpsample = PEUpsample()
    train: list[AugmentOp] = Field(min_length=1)
    test: list[AugmentOp] = Field(min_length=1)

    @model_validator(mode="after")
    def _known_norm(self):
        resolve_norm(self.norm)
        return self


NormalizeOp.model_rebuild()


def resolve_norm(norm) -> NormStats:
    if isinstance(norm, CustomNorm):
        return NormStats(norm.mean, norm.std, "custom")
    return NormStats.named(norm)


def parse_config(data: dict) -> PipelineConfig:
    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as exc:
        offending = sorted({".".join(str(p) for p in err["loc"]) for err in exc.errors()})
        raise ConfigError(f"invalid pipeline config: {exc.error_count()} error(s)", offending) from exc


def config_schema() -> dict:
    return PipelineConfig.model_json_schema(by_alias=True)


def _k(k_table: KTable, method: Method, dims: Dims) -> float:
    try:
        return float(k_table[(Method(method), Dims(dims))])
    except KeyError:
        raise UnknownMultiplierError(f"no variance ratio for {method.value} {dims.value} upsampling") from None


@lru_cache(maxsize=64)
def _erase_fraction(shape, area_range, aspect_range) -> float:
    return augment.expected_erase_fraction(shape, area_range, aspect_range)


def op_multiplier(
    op,
    k_table: KTable,
    *,
    erase_shape=ERASE_REFERENCE_SHAPE,
    rand_as_pixel: bool = False,
) -> tuple[float, list[str]]:
    """Analytic variance multiplier of one op (zero-mean unit-variance input) plus findings."""
    findings: list[str] = []
    if isinstance(op, MixupOp):
        if op.lam is not None:
            m = augment.mixup_variance_factor(op.lam)
        else:
            m = augment.beta_mixup_variance_factor(op.alpha)
        m = 1.0 - op.prob + op.prob * m
        findings.append(f"Mixup decreases variance (x{m:.4f})")
        return m, findings
    if isinstance(op, CutmixOp):
        return 1.0, findings
    if isinstance(op, ExtendedMixupOp):
        m = op.lambda_i**2 + op.lambda_j**2
        s = op.lambda_i + op.lambda_j
        if abs(m - 1.0) > 1e-12:
            findings.append(f"extended Mixup changes variance (x{m:.4f})")
        if abs(s - 1.0) > 1e-12:
            findings.append(f"extended Mixup scales the mean by {s:.4f}")
        return m, findings
    if isinstance(op, EraseOp):
        if op.var_multiplier is not None:
            return op.var_multiplier, findings
        if op.mode is EraseMode.PIXEL:
            return 1.0, findings
        if op.mode is EraseMode.RAND and not rand_as_pixel:
            raise UnknownMultiplierError(
                "rand-mode erase has no analytic variance multiplier; supply 'var_multiplier'"
            )
        if op.mode is EraseMode.RAND:
            findings.append("rand-mode erase fills one shared value; analytic value assumes pixel mode")
            return 1.0, findings
        f = op.fraction if op.fraction is not None else _erase_fraction(
            tuple(erase_shape), tuple(op.area_range), tuple(op.aspect_range)
        )
        m = 1.0 - op.prob * f
        findings.append(f"const-mode erase reduces variance (x{m:.4f})")
        return m, findings
    if isinstance(op, (ResizeOp, ResizeCropOp)):
        if op.scale == 1.0:
            return 1.0, findings
        return _k(k_table, op.method, op.dims), findings
    if isinstance(op, CropOp):
        return 1.0, findings
    if isinstance(op, NormalizeOp):
        if op.var_multiplier is not None:
            return op.var_multiplier, findings
        stats = resolve_norm(op.norm)
        if stats.name in UNIT_STATS_PRESETS:
            return 1.0, findings
        raise UnknownMultiplierError(
            f"normalize with {stats.name} stats has no analytic multiplier; supply 'var_multiplier'"
        )
    raise TypeError(f"unsupported op {op!r}")


def _propagate(ops, k_table: KTable, **kw) -> tuple[float, list[str]]:
    total, findings = 1.0, []
    for op in ops:
        m, f = op_multiplier(op, k_table, **kw)
        total *= m
        findings.extend(f)
    return total, findings


def propagate(ops, k_table: KTable | None = None) -> float:
    """Product of per-op variance multipliers for one phase."""
    return _propagate(ops, REFERENCE_K if k_table is None else k_table)[0]


@dataclass
class AuditReport:
    var_mult_img_train: float
    var_mult_img_test: float
    var_mult_pe_train: float
    var_mult_pe_test: float
    ratio_train: float
    ratio_test: float
    consistent: bool
    recommended_rescale: float
    findings: list[str] = field(default_factory=list)
    mean_findings: list[str] = field(default_factory=list)
    measured: bool = False

    def as_dict(self) -> dict:
        return asdict(self)


def _report(img_train, img_test, pe_train, pe_test, findings, mean_findings, measured=False) -> AuditReport:
    ratio_train = img_train / pe_train
    ratio_test = img_test / pe_test
    consistent = abs(math.log(ratio_train / ratio_test)) <= CONSISTENCY_TOL
    findings = list(findings)
    if not consistent:
        findings.append(f"variance shift detected: train ratio {ratio_train:.4f} vs test ratio {ratio_test:.4f}")
    return AuditReport(
        var_mult_img_train=img_train,
        var_mult_img_test=img_test,
        var_mult_pe_train=pe_train,
        var_mult_pe_test=pe_test,
        ratio_train=ratio_train,
        ratio_test=ratio_test,
        consistent=consistent,
        recommended_rescale=math.sqrt(pe_train / pe_test),
        findings=findings,
        mean_findings=mean_findings,
        measured=measured,
    )


def _pe_test_multiplier(cfg: PipelineConfig, k_table: KTable) -> tuple[float, list[str]]:
    pe = cfg.pe_upsample
    if not pe.in_test:
        return 1.0, []
    k = _k(k_table, pe.method, pe.dims)
    m = k * pe.rescale**2
    findings = []
    if abs(m - 1.0) > 1e-9:
        findings.append(
            f"positional embedding upsampled ({pe.method.value}, {pe.dims.value}) in test: variance x{m:.4f}"
        )
    return m, findings


def _norm_findings(cfg: PipelineConfig) -> tuple[list[str], list[str]]:
    findings, mean_findings = [], []
    stats = resolve_norm(cfg.norm)
    if stats.name in UNIT_STATS_PRESETS:
        return findings, mean_findings
    mean_findings.append(f"{stats.name} normalization does not give zero-mean unit-variance inputs")
    erases = [op for op in (*cfg.train, *cfg.test) if isinstance(op, EraseOp) and op.mode is EraseMode.PIXEL]
    if erases:
        findings.append("non-unit input stats break pixel-mode erase conservation")
    return findings, mean_findings


def _phase_findings(cfg: PipelineConfig) -> list[str]:
    out = []
    if any(isinstance(op, (CropOp, ResizeCropOp)) for op in cfg.test):
        if cfg.scenario == "segmentation":
            out.append("test phase crops; segmentation pipelines usually resize without cropping")
        else:
            out.append("crop present in test phase (variance-neutral, informational)")
    return out


def audit(cfg: PipelineConfig, k_table: KTable | None = None, *, _kw=None) -> AuditReport:
    k_table = REFERENCE_K if k_table is None else k_table
    kw = _kw or {}
    img_train, f_train = _propagate(cfg.train, k_table, **kw)
    img_test, f_test = _propagate(cfg.test, k_table, **kw)
    pe_test, f_pe = _pe_test_multiplier(cfg, k_table)
    f_norm, mean_findings = _norm_findings(cfg)
    findings = [f"train: {f}" for f in f_train] + [f"test: {f}" for f in f_test]
    findings += f_pe + f_norm + _phase_findings(cfg)
    return _report(img_train, img_test, 1.0, pe_test, findings, mean_findings)


def apply_fix(cfg: PipelineConfig, report: AuditReport) -> PipelineConfig:
    """Config with the recommended rescale folded into the embedding upsampling."""
    pe = cfg.pe_upsample.model_copy(update={"rescale": cfg.pe_upsample.rescale * report.recommended_rescale})
    return cfg.model_copy(update={"pe_upsample": pe})


# ---------------------------------------------------------------- empirical


def run_op(op, x: np.ndarray, g: np.random.Generator, partner: Callable[[], np.ndarray], input_hw) -> np.ndarray:
    """Execute one config op on an ``[H, W, C]`` image."""
    if isinstance(op, MixupOp):
        if g.random() >= op.prob:
            return x
        return augment.mixup(x, partner(), op.draw_lambda(g))
    if isinstance(op, CutmixOp):
        if g.random() >= op.prob:
            return x
        mask = augment.sample_cutmix_mask(x.shape[:2], op.draw_lambda(g), g)
        return augment.cutmix(x, partner(), mask)
    if isinstance(op, ExtendedMixupOp):
        return augment.extended_mixup(x, partner(), op.lambda_i, op.lambda_j)
    if isinstance(op, EraseOp):
        return augment.random_erase(x, op.mode, op.prob, op.area_range, op.aspect_range, g)
    if isinstance(op, ResizeOp):
        h, w = x.shape[:2]
        if op.dims is Dims.ONE_D:
            return resample_axis(x, 0, int(round(h * op.scale)), op.method)
        return upsample_grid(x, (int(round(h * op.scale)), int(round(w * op.scale))), op.method, axes=(0, 1))
    if isinstance(op, ResizeCropOp):
        if op.dims is Dims.ONE_D:
            h = x.shape[0]
            up = resample_axis(x, 0, int(round(h * op.scale)), op.method)
            top = (up.shape[0] - h) // 2 if op.center else int(g.integers(0, up.shape[0] - h + 1))
            return up[top:top + h]
        return augment.random_resize_crop(x, (op.scale, op.scale), x.shape[:2], op.method, g, center=op.center)
    if isinstance(op, CropOp):
        h, w = x.shape[:2]
        th, tw = input_hw if (h > input_hw[0] and w > input_hw[1]) else (max(1, 3 * h // 4), max(1, 3 * w // 4))
        top, left = int(g.integers(0, h - th + 1)), int(g.integers(0, w - tw + 1))
        return x[top:top + th, left:left + tw]
    if isinstance(op, NormalizeOp):
        return augment.normalize(x, resolve_norm(op.norm))
    raise TypeError(f"unsupported op {op!r}")


def run_pipeline(ops, x: np.ndarray, g: np.random.Generator) -> np.ndarray:
    base_shape = x.shape
    input_hw = base_shape[:2]
    for i, op in enumerate(ops):
        def partner(prefix=ops[:i]):
            return run_pipeline(prefix, g.standard_normal(base_shape), g)
        x = run_op(op, x, g, partner, input_hw)
    return x


def _measure_phase(ops, rng: SeededRng, trials: int, shape) -> float:
    ratios = []
    for t in range(trials):
        g = rng.substream(t).generator()
        img = g.standard_normal(shape)
        out = run_pipeline(ops, img, g)
        ratios.append(out.var() / img.var())
    return float(np.mean(ratios))


def _measure_pe(cfg: PipelineConfig, rng: SeededRng, trials: int, grid=(32, 32), dim: int = 4) -> float:
    pe = cfg.pe_upsample
    if not pe.in_test:
        return 1.0
    ratios = []
    for t in range(trials):
        g = rng.substream(t).generator()
        p = g.standard_normal((*grid, dim))
        if pe.dims is Dims.ONE_D:
            up = resample_axis(p, 0, 2 * grid[0], pe.method)
        else:
            up = upsample_grid(p, (2 * grid[0], 2 * grid[1]), pe.method, axes=(0, 1))
        ratios.append(up.var() / p.var())
    return float(np.mean(ratios)) * pe.rescale**2


def verify_empirically(
    cfg: PipelineConfig,
    rng: SeededRng | None = None,
    trials: int = 200,
    k_table: KTable | None = None,
    image_shape=(32, 32, 3),
) -> AuditReport:
    """Measure the four multipliers on synthetic N(0, 1) images.

    The returned report carries measured multipliers; any that differ from
    the analytic model by more than ``EMPIRICAL_TOL`` adds a divergence finding.
    """
    if trials < 100:
        raise ValueError(f"need at least 100 trials, got {trials}")
    rng = rng if rng is not None else SeededRng(0)
    k_table = REFERENCE_K if k_table is None else k_table
    analytic = audit(cfg, k_table, _kw={"erase_shape": image_shape[:2], "rand_as_pixel": True})
    measured = {
        "var_mult_img_train": _measure_phase(cfg.train, rng.substream(1), trials, image_shape),
        "var_mult_img_test": _measure_phase(cfg.test, rng.substream(2), trials, image_shape),
        "var_mult_pe_train": 1.0,
        "var_mult_pe_test": _measure_pe(cfg, rng.substream(3), trials),
    }
    findings = list(analytic.findings)
    for name, value in measured.items():
        expected = getattr(analytic, name)
        if abs(value - expected) > EMPIRICAL_TOL:
            findings.append(f"divergence: measured {name} {value:.4f} vs analytic {expected:.4f}")
    return _report(
        measured["var_mult_img_train"],
        measured["var_mult_img_test"],
        measured["var_mult_pe_train"],
        measured["var_mult_pe_test"],
        [f for f in findings if not f.startswith("variance shift detected")],
        analytic.mean_findings,
        measured=True,
    )


def divergences(report: AuditReport) -> list[str]:
    return [f for f in report.findings if f.startswith("divergence:")]
