"""``embshift`` command-line interface.

Exit codes: 0 ok/consistent, 1 I/O or data error, 2 usage or schema error,
3 variance shift detected, 4 property check failed.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from pydantic import TypeAdapter, ValidationError

from . import auditor, varcal, vitfront
from .interp import Dims, Method, UpsampleSpec
from .tensor import SeededRng, VSPEFormatError, load_vspe, save_vspe, stats

EXIT_OK, EXIT_DATA, EXIT_USAGE, EXIT_SHIFT, EXIT_PROPERTY = 0, 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_DATA):
        super().__init__(message)
        self.code = code


@dataclass
class ReportRecord:
    command: str
    inputs: dict
    results: dict
    findings: list[str] = field(default_factory=list)
    seed: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ReportRecord":
        return cls(**json.loads(text))

    def to_text(self) -> str:
        lines = [f"{self.command} (seed {self.seed})"]
        for key, value in self.inputs.items():
            lines.append(f"  input  {key}: {_fmt(value)}")
        for key, value in self.results.items():
            lines.append(f"  result {key}: {_fmt(value)}")
        lines.extend(f"  - {f}" for f in self.findings)
        return "\n".join(lines)


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    if isinstance(value, dict):
        return ", ".join(f"{k}={_fmt(v)}" for k, v in value.items())
    return str(value)


def _stats_dict(t) -> dict:
    s = stats(t)
    return {"mean": s.mean, "variance": s.variance, "count": s.count}


def _load(path) -> np.ndarray:
    try:
        return load_vspe(path)
    except (OSError, VSPEFormatError) as exc:
        raise CliError(f"cannot read {path}: {exc}") from exc


def _save(path, t) -> None:
    try:
        save_vspe(path, t)
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> tuple[ReportRecord, int]:
    g = SeededRng(args.seed).generator()
    params = args.params
    need = {"normal": 2, "uniform": 2, "constant": 1}[args.dist]
    if len(params) != need:
        raise CliError(f"{args.dist} takes {need} parameter(s), got {len(params)}", EXIT_USAGE)
    if args.dist == "normal":
        if params[1] < 0:
            raise CliError("normal sigma must be non-negative", EXIT_USAGE)
        t = g.normal(params[0], params[1], size=args.shape)
    elif args.dist == "uniform":
        t = g.uniform(params[0], params[1], size=args.shape)
    else:
        t = np.full(args.shape, params[0])
    _save(args.out, t)
    rec = ReportRecord(
        "gen",
        {"shape": list(args.shape), "dist": args.dist, "params": params, "out": str(args.out)},
        _stats_dict(t),
        seed=args.seed,
    )
    return rec, EXIT_OK


def cmd_stats(args) -> tuple[ReportRecord, int]:
    t = _load(args.file)
    res = _stats_dict(t)
    res["shape"] = list(t.shape)
    return ReportRecord("stats", {"file": str(args.file)}, res), EXIT_OK


def cmd_measure_k(args) -> tuple[ReportRecord, int]:
    try:
        est = varcal.measure_k(args.method, args.dims, args.scale, args.size, args.trials, SeededRng(args.seed))
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE) from exc
    res = {"k": est.k, "K": est.K, "rescale": est.rescale, "std_error": est.std_error}
    ref = varcal.REFERENCE_K[(est.method, est.dims)]
    rec = ReportRecord(
        "measure-k",
        {"method": args.method, "dims": args.dims, "scale": args.scale, "size": args.size, "trials": args.trials},
        res,
        [f"reference k for {args.method} {args.dims}: {ref:.4f}"],
        seed=args.seed,
    )
    return rec, EXIT_OK


def cmd_rescale_pe(args) -> tuple[ReportRecord, int]:
    pe = _load(args.input)
    cls_tokens = args.cls_tokens
    if pe.ndim == 3:
        if cls_tokens:
            raise CliError("an [H, W, D] grid file cannot carry leading tokens; use --cls-tokens 0")
        cls, grid = np.zeros((0, pe.shape[2])), pe
    elif pe.ndim == 2:
        hw = args.grid
        if hw is None:
            side = math.isqrt(pe.shape[0] - cls_tokens) if pe.shape[0] > cls_tokens else 0
            if side * side != pe.shape[0] - cls_tokens or side == 0:
                raise CliError(f"{pe.shape[0]} tokens minus {cls_tokens} leading is not a square grid; pass --grid")
            hw = (side, side)
        try:
            cls, grid = varcal.split_cls_token(pe, tuple(hw), cls_tokens)
        except ValueError as exc:
            raise CliError(str(exc)) from exc
    else:
        raise CliError(f"expected a [N, D] token table or [H, W, D] grid, got shape {pe.shape}")

    target = tuple(args.target)
    src_hw = grid.shape[:2]
    findings = []
    if target == src_hw:
        k, factor, out_grid = 1.0, 1.0, grid
        findings.append("target equals source grid; embedding copied unchanged")
    else:
        if target[0] < src_hw[0] or target[1] < src_hw[1]:
            raise CliError(f"target grid {target} is smaller than source {src_hw}", EXIT_USAGE)
        if args.k == "auto":
            k = varcal.measure_k_grid(args.method, src_hw, target, rng=SeededRng(args.seed)).k
        elif args.k == "canonical":
            k = varcal.measure_k(args.method, Dims.TWO_D, rng=SeededRng(args.seed)).k
        elif args.k == "empirical":
            k = varcal.empirical_k(grid, UpsampleSpec(args.method, target, Dims.TWO_D))
        else:
            k = float(args.k)
        factor = 1.0 / math.sqrt(k)
        out_grid = varcal.rescale_pe(grid, UpsampleSpec(args.method, target, Dims.TWO_D), k)
    if pe.ndim == 2:
        out = np.concatenate([cls, out_grid.reshape(-1, out_grid.shape[-1])])
    else:
        out = out_grid
    _save(args.output, out)
    pre, post = stats(grid).variance, stats(out_grid).variance
    rec = ReportRecord(
        "rescale-pe",
        {
            "input": str(args.input),
            "output": str(args.output),
            "method": args.method,
            "source_grid": list(src_hw),
            "target_grid": list(target),
            "k_source": args.k,
            "cls_tokens": cls_tokens,
        },
        {"k": k, "factor": factor, "var_before": pre, "var_after": post, "var_ratio": post / pre if pre else 1.0},
        findings,
        seed=args.seed,
    )
    return rec, EXIT_OK


def _read_config(path) -> auditor.PipelineConfig:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"{path} is not valid JSON: {exc}", EXIT_USAGE) from exc
    try:
        return auditor.parse_config(data)
    except auditor.ConfigError as exc:
        raise CliError(f"{exc}; offending keys: {', '.join(exc.offending)}", EXIT_USAGE) from exc


def cmd_audit(args) -> tuple[ReportRecord, int]:
    cfg = _read_config(args.config)
    try:
        if args.empirical:
            report = auditor.verify_empirically(cfg, SeededRng(args.seed), args.empirical)
        else:
            report = auditor.audit(cfg)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE) from exc
    res = report.as_dict()
    findings = res.pop("findings") + [f"mean: {f}" for f in res.pop("mean_findings")]
    rec = ReportRecord(
        "audit",
        {"config": str(args.config), "empirical_trials": args.empirical},
        res,
        findings,
        seed=args.seed,
    )
    return rec, EXIT_OK if report.consistent else EXIT_SHIFT


_OP_ADAPTER = TypeAdapter(auditor.AugmentOp)


def cmd_augment(args) -> tuple[ReportRecord, int]:
    spec = args.op
    if spec.startswith("@"):
        try:
            spec = Path(spec[1:]).read_text()
        except OSError as exc:
            raise CliError(f"cannot read op spec: {exc}") from exc
    try:
        op = _OP_ADAPTER.validate_json(spec)
    except ValidationError as exc:
        keys = sorted({".".join(str(p) for p in e["loc"]) for e in exc.errors()})
        raise CliError(f"invalid op spec; offending keys: {', '.join(keys)}", EXIT_USAGE) from exc
    x = _load(args.input)
    partner = _load(args.partner) if args.partner else None

    def get_partner():
        if partner is None:
            raise CliError(f"{op.op} needs --partner")
        return partner

    g = SeededRng(args.seed, op.stream).generator()
    try:
        y = auditor.run_op(op, x, g, get_partner, x.shape[:2])
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    _save(args.out, y)
    pre, post = _stats_dict(x), _stats_dict(y)
    res = {"before": pre, "after": post}
    if pre["variance"] > 0:
        res["variance_ratio"] = post["variance"] / pre["variance"]
    if y.shape == x.shape:
        res["changed_fraction"] = float(np.mean(y != x))
    rec = ReportRecord(
        "augment",
        {"input": str(args.input), "op": op.model_dump(mode="json", by_alias=True), "out": str(args.out)},
        res,
        seed=args.seed,
    )
    return rec, EXIT_OK


def simulate(seed: int, scale_factors=(2.0, 5.0, 10.0), dim: int = 32) -> ReportRecord:
    """Bundled front-end checks: LN Jacobian, gradient decay, dropout placement, PatchDropout."""
    root = SeededRng(seed)
    results, findings = {}, []

    # analytic LN Jacobian vs central differences
    worst = 0.0
    for i in range(20):
        g = root.substream(i).generator()
        d = int(g.integers(4, 33))
        x, p = g.standard_normal(d), 0.5 * g.standard_normal(d)
        jac = vitfront.ln_grad_wrt_p(x, p)
        fd = vitfront.finite_difference_jacobian(lambda q: vitfront.layer_norm(x + q), p)
        worst = max(worst, float(np.max(np.abs(jac - fd)) / np.max(np.abs(jac))))
    results["ln_jacobian_max_rel_error"] = worst
    results["ln_jacobian_pass"] = worst <= 1e-4

    # gradient decay with patch-embedding scale
    g = root.substream(100).generator()
    x = g.standard_normal(dim)
    p = g.normal(0.0, vitfront.PE_INIT_STD, dim)
    base = np.linalg.norm(vitfront.ln_grad_wrt_p(x, p))
    decay = {}
    for c in scale_factors:
        ratio = float(np.linalg.norm(vitfront.ln_grad_wrt_p(c * x, p)) / base)
        decay[f"{c:g}"] = {"norm_ratio": ratio, "expected": 1.0 / c, "pass": 0.95 / c <= ratio <= 1.05 / c}
    results["gradient_decay"] = decay

    # dropout on x alone vs on the sum
    comps = [
        vitfront.dropout_sum_vs_single(
            root.substream(200 + i).generator().standard_normal(4096),
            root.substream(300 + i).generator().standard_normal(4096),
            0.5,
            root.substream(400 + i),
        )
        for i in range(100)
    ]
    single = float(np.mean([c.ratio_single / c.ratio_before for c in comps]))
    joint = float(np.mean([c.ratio_joint / c.ratio_before for c in comps]))
    results["dropout_single_ratio"] = single
    results["dropout_joint_ratio"] = joint
    results["dropout_pass"] = abs(joint - 1.0) <= 0.05 and abs(single / 2.0 - 1.0) <= 0.10

    # PatchDropout keeps stats
    ratios = []
    for i in range(100):
        tokens = root.substream(500 + i).generator().standard_normal((1024, 16))
        kept = vitfront.patch_dropout(tokens, 0.5, root.substream(600 + i))
        ratios.append(stats(kept).variance / stats(tokens).variance)
    results["patch_dropout_var_ratio"] = float(np.mean(ratios))
    results["patch_dropout_pass"] = abs(results["patch_dropout_var_ratio"] - 1.0) <= 0.05

    checks = {
        "ln_jacobian": results["ln_jacobian_pass"],
        **{f"gradient_decay_x{c}": v["pass"] for c, v in decay.items()},
        "dropout_sum_vs_single": results["dropout_pass"],
        "patch_dropout": results["patch_dropout_pass"],
    }
    findings = [f"{'PASS' if ok else 'FAIL'} {name}" for name, ok in checks.items()]
    results["all_pass"] = all(checks.values())
    return ReportRecord("simulate", {"scale_factors": list(scale_factors)}, results, findings, seed=seed)


def cmd_simulate(args) -> tuple[ReportRecord, int]:
    rec = simulate(args.seed, tuple(args.scale_factors))
    return rec, EXIT_OK if rec.results["all_pass"] else EXIT_PROPERTY


def cmd_schema(args) -> tuple[ReportRecord, int]:
    print(json.dumps(auditor.config_schema(), indent=2, sort_keys=True))
    return None, EXIT_OK


# ---------------------------------------------------------------- parsing


def _shape(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(v) for v in text.replace("x", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}") from None
    if not 1 <= len(dims) <= 4 or any(d < 1 for d in dims):
        raise argparse.ArgumentTypeError(f"shape needs 1-4 positive dims, got {text!r}")
    return dims


def _scale(text: str) -> float:
    v = float(text)
    if not v > 1.0:
        raise argparse.ArgumentTypeError(f"scale must exceed 1 (upsampling only), got {text}")
    return v


def _k_source(text: str) -> str:
    if text in ("auto", "canonical", "empirical"):
        return text
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--k takes auto, canonical, empirical or a positive number, got {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError(f"--k must be positive, got {text}")
    return text


def _float_list(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad list {text!r}") from None
    if not vals or any(v <= 0 for v in vals):
        raise argparse.ArgumentTypeError(f"need positive values, got {text!r}")
    return vals


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--json", action="store_true", help="emit the report as JSON")

    parser = argparse.ArgumentParser(prog="embshift", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    methods = [m.value for m in Method]

    p = sub.add_parser("gen", parents=[common], help="write a random tensor file")
    p.add_argument("shape", type=_shape)
    p.add_argument("dist", choices=["normal", "uniform", "constant"])
    p.add_argument("params", type=float, nargs="*")
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("stats", parents=[common], help="mean/variance of a tensor file")
    p.add_argument("file", type=Path)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("measure-k", parents=[common], help="estimate variance/mean ratios of upsampling")
    p.add_argument("--method", choices=methods, default="bicubic")
    p.add_argument("--dims", choices=[d.value for d in Dims], default="2d")
    p.add_argument("--scale", type=_scale, default=varcal.CANONICAL_SCALE)
    p.add_argument("--size", type=int, default=varcal.CANONICAL_SIZE)
    p.add_argument("--trials", type=int, default=varcal.CANONICAL_TRIALS)
    p.set_defaults(func=cmd_measure_k)

    p = sub.add_parser("rescale-pe", parents=[common], help="upsample a positional embedding and undo its variance drop")
    p.add_argument("input", type=Path)
    p.add_argument("output", type=Path)
    p.add_argument("--method", choices=methods, default="bicubic")
    p.add_argument("--target", type=int, nargs=2, required=True, metavar=("H", "W"))
    p.add_argument("--grid", type=int, nargs=2, metavar=("H", "W"), help="source grid (default: square)")
    p.add_argument("--k", type=_k_source, default="auto", help="auto: noise at this grid geometry; canonical: 64x64 x2 protocol; "
        "empirical: from the embedding itself; or a number")
    p.add_argument("--cls-tokens", type=int, choices=[0, 1], default=1)
    p.set_defaults(func=cmd_rescale_pe)

    p = sub.add_parser("audit", parents=[common], help="check a train/test pipeline config for variance shift")
    p.add_argument("config", type=Path)
    p.add_argument("--empirical", type=int, metavar="TRIALS", help="cross-check by Monte-Carlo")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("augment", parents=[common], help="apply one augmentation op to a tensor file")
    p.add_argument("input", type=Path)
    p.add_argument("--op", required=True, help="op JSON, or @file")
    p.add_argument("--partner", type=Path, help="second image for mixup/cutmix")
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("simulate", parents=[common], help="run the ViT front-end property checks")
    p.add_argument("--scale-factors", type=_float_list, default=[2.0, 5.0, 10.0])
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("schema", help="print the pipeline config JSON schema")
    p.set_defaults(func=cmd_schema, json=False)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        rec, code = args.func(args)
    except CliError as exc:
        print(f"embshift {args.command}: {exc}", file=sys.stderr)
        return exc.code
    if rec is not None:
        print(rec.to_json() if args.json else rec.to_text())
    return code


if __name__ == "__main__":
    sys.exit(main())
