"""
명령줄 도구 (CLI)

하위 명령:
    correlations   자유 페르미온 g1/g2 와 공분산+Wick 정답 비교 CSV
    tfi            TFI 자화와 자화율 χ_m(h) 스윕 CSV, 최대점 요약
    verify         불변식 검증 (--level fast|full)
    variational    변분 최소화 에너지 기록 CSV + 체크포인트
    dump-circuit   회로 교환 형식 JSON

종료 코드: 0 성공, 1 검증 실패, 2 사용법/설정 오류
"""

import argparse
import json
import logging
import platform
import sys
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import scipy
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from contraction_engine import ContractionEngine
from free_fermion_oracle import bdg_solution, dense_spin_diagonalization
from models import (
    ModelError,
    ModelKind,
    ModelSpec,
    build_model,
    correlation_experiment,
    hamiltonian_terms,
    oracle_correlations,
    susceptibility_peak,
    susceptibility_sweep,
)
from qfft_circuit import (
    CircuitError,
    apply_momentum_offset,
    build_qfft_1d,
    build_qfft_2d,
    circuit_from_json,
    circuit_to_json,
    variant_layer_order,
)
from settings import SETTINGS, configure_logging
from spectral_state import StateError
from variational import OptimizationConfig, OptimizationError, bond_grow, minimize_energy
from verification import LEVELS, run_verification

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2
CORRELATION_COLUMNS = ["g1_re", "g1_im", "g2", "oracle_g1_re", "oracle_g1_im", "oracle_g2", "abs_err"]


class ConfigError(ValueError):
    """설정 파일 오류"""


# ==================== 설정 ====================

class CorrelationSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    cut: str = Field("axis", description="2D 절단 방향 axis (Δ,0) | diagonal (Δ,Δ)")
    site0: int = Field(0, ge=0, description="기준 사이트")


class TfiSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n: int = Field(1024, description="사슬 길이 (2의 거듭제곱)")
    h_min: float = Field(0.2, description="스윕 시작 h")
    h_max: float = Field(1.8, description="스윕 끝 h (포함)")
    h_step: float = Field(0.02, gt=0, description="스윕 간격")
    h_grid: Optional[List[float]] = Field(None, description="명시적 h 목록 (주면 범위 설정 대신 사용)")
    dh: float = Field(1e-2, gt=0, description="중앙 차분 간격")
    richardson: bool = Field(False, description="Richardson 보정 도함수")
    average: bool = Field(True, description="⟨Ẑ⟩ 사이트 평균")
    cross_check: bool = Field(True, description="n ≤ 14 이면 dense 스핀 대각화와 비교")

    @field_validator("n")
    @classmethod
    def _check_n(cls, n: int) -> int:
        if n < 2 or n & (n - 1):
            raise ValueError(f"TFI chain length must be a power of two >= 2, got {n}")
        return n

    def grid(self) -> List[float]:
        if self.h_grid is not None:
            return [float(h) for h in self.h_grid]
        count = int(np.floor((self.h_max - self.h_min) / self.h_step + 1e-9)) + 1
        return [round(self.h_min + i * self.h_step, 12) for i in range(max(count, 0))]


class VariationalSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    optimization: OptimizationConfig = Field(default_factory=OptimizationConfig)
    bond_factor: int = Field(1, ge=1, description="인접 사이트 병합 배수")
    checkpoint: str = Field("checkpoint.json", description="출력 폴더 안 체크포인트 파일 이름")


class ExperimentConfig(BaseModel):
    """실험 설정 파일 (JSON). 모르는 키는 거부한다."""
    model_config = ConfigDict(extra="forbid")

    model: Optional[ModelSpec] = Field(None, description="모델 사양")
    tolerance: float = Field(SETTINGS.tolerance, gt=0, description="정답 비교 허용 오차")
    stats: bool = Field(False, description="엔진 계측 출력")
    threads: int = Field(SETTINGS.threads, ge=1, description="엔진 스레드 수")
    output: str = Field(SETTINGS.output_dir, description="출력 폴더")
    seed: int = Field(0, description="무작위 시드 (메타데이터에 기록)")
    correlations: CorrelationSection = Field(default_factory=CorrelationSection)
    tfi: TfiSection = Field(default_factory=TfiSection)
    variational: VariationalSection = Field(default_factory=VariationalSection)


def load_config(path: Optional[str]) -> ExperimentConfig:
    """
    Raises:
        ConfigError: 파일 없음, JSON 오류, 검증 실패
    """
    if path is None:
        return ExperimentConfig()
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    try:
        return ExperimentConfig(**doc)
    except (ValidationError, TypeError) as e:
        raise ConfigError(f"invalid config {path}: {e}") from e


# ==================== CSV ====================

def run_metadata(cfg: ExperimentConfig, command: str) -> Dict:
    return {
        "command": command,
        "timestamp": datetime.now().isoformat(),
        "seed": cfg.seed,
        "model": cfg.model.model_dump(mode="json") if cfg.model else None,
        "versions": {"python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__, "pandas": pd.__version__},
    }


def write_csv(frame: pd.DataFrame, path: Path, metadata: Dict) -> Path:
    """'#' 메타데이터 줄 + 17 유효숫자 CSV 본문"""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        for key, value in metadata.items():
            f.write(f"# {key}: {json.dumps(value, default=str)}\n")
        frame.to_csv(f, index=False, float_format="%.17g")
    logger.info("wrote %s (%d rows)", path, len(frame))
    return path


def read_csv(path: Path) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")


# ==================== 명령 ====================

def _require_model(cfg: ExperimentConfig, kinds: Sequence[ModelKind], command: str) -> ModelSpec:
    if cfg.model is None:
        raise ConfigError(f"{command} needs a 'model' section")
    if cfg.model.kind not in kinds:
        raise ConfigError(f"{command} supports {[k.value for k in kinds]}, got {cfg.model.kind.value}")
    return cfg.model


def cmd_correlations(cfg: ExperimentConfig, out: Path) -> int:
    """엔진 g1/g2 와 정답 비교 CSV"""
    spec = _require_model(cfg, (ModelKind.FREE_FERMION_1D, ModelKind.FREE_FERMION_2D, ModelKind.XX_CHAIN),
                          "correlations")
    section = cfg.correlations
    metadata = run_metadata(cfg, "correlations")
    metadata["cut"] = section.cut
    metadata["site0"] = section.site0
    axes = ["delta"] if len(spec.dims) == 1 else ["dx", "dy"]
    path = out / f"correlations_{spec.kind.value}_{'x'.join(map(str, spec.dims))}_N{spec.particles}.csv"

    # 1) 빈 상태: ν = 0 이면 정규화가 정의되지 않는다
    if spec.particles == 0:
        metadata["status"] = "density is zero (nu=0): normalized correlations are undefined"
        write_csv(pd.DataFrame(columns=axes + CORRELATION_COLUMNS), path, metadata)
        print(f"correlations: {metadata['status']} -> {path}")
        return EXIT_OK

    # 2) 엔진과 정답
    _, state = build_model(spec)
    engine = ContractionEngine(state, cfg.threads)
    g1, g2 = correlation_experiment(spec, section.cut, section.site0, engine=engine)
    o1, o2 = oracle_correlations(spec, state, section.cut, section.site0)

    # 3) 표
    offsets = [o if isinstance(o, tuple) else (o,) for o in g1.offsets]
    frame = pd.DataFrame({axis: [o[i] for o in offsets] for i, axis in enumerate(axes)})
    frame["g1_re"], frame["g1_im"] = g1.values.real, g1.values.imag
    frame["g2"] = np.real(g2.values)
    frame["oracle_g1_re"], frame["oracle_g1_im"] = o1.values.real, o1.values.imag
    frame["oracle_g2"] = np.real(o2.values)
    frame["abs_err"] = np.maximum(np.abs(g1.values - o1.values), np.abs(g2.values - o2.values))
    worst = float(frame["abs_err"].max())
    metadata.update({"density": g1.normalization["density"], "mean_spacing": g1.normalization["mean_spacing"],
                     "max_abs_err": worst, "status": "ok" if worst <= cfg.tolerance else "oracle mismatch"})
    if cfg.stats:
        metadata["engine_stats"] = engine.stats.as_dict()
        print(f"engine stats: {engine.stats.as_dict()}")
    write_csv(frame, path, metadata)
    print(f"correlations: {spec.kind.value} dims={spec.dims} N={spec.particles} "
          f"max abs_err={worst:.3e} -> {path}")
    if worst > cfg.tolerance:
        logger.warning("engine correlations deviate from the oracle by %.3e (tolerance %.1e)",
                       worst, cfg.tolerance)
        return EXIT_FAILED
    return EXIT_OK


def cmd_tfi(cfg: ExperimentConfig, out: Path) -> int:
    """TFI ⟨Ẑ⟩ 와 χ_m 스윕, 최대점 요약"""
    section = cfg.tfi
    grid = section.grid()
    if not grid:
        raise ConfigError("TFI h grid is empty")
    frame = susceptibility_sweep(section.n, grid, section.dh, section.richardson,
                                 section.average, cfg.threads)
    status = "ok"
    if section.cross_check and section.n <= 14:
        dense = [dense_spin_diagonalization(section.n, h, "even").z for h in grid]
        frame["dense_z"] = [float(np.mean(z)) if section.average else float(z[0]) for z in dense]
        frame["abs_err"] = np.abs(frame["z"] - frame["dense_z"])
        if frame["abs_err"].max() > max(cfg.tolerance, 1e-8):
            status = "dense mismatch"
    peak = susceptibility_peak(frame)
    metadata = run_metadata(cfg, "tfi")
    metadata.update({"n": section.n, "h_grid": grid, "dh": section.dh,
                     "richardson": section.richardson, "average": section.average,
                     "peak_h": peak, "status": status})
    if cfg.stats:
        metadata["engine_stats"] = frame.attrs["engine_stats"]
        print(f"engine stats: {frame.attrs['engine_stats']}")
    path = write_csv(frame, out / f"tfi_n{section.n}.csv", metadata)
    print(f"tfi: n={section.n} {len(grid)} points, susceptibility peak at h={peak:.6g} -> {path}")
    return EXIT_OK if status == "ok" else EXIT_FAILED


def cmd_verify(level: str, seed: int, out: Path) -> int:
    result = run_verification(level, seed)
    out.mkdir(parents=True, exist_ok=True)
    report = out / f"verify_{level}.json"
    report.write_text(json.dumps({"passed": result.passed, "flags": result.flags, "level": result.level,
                                  "timestamp": result.timestamp, "details": result.details},
                                 indent=1, default=str), encoding="utf-8")
    print(result.summary())
    return EXIT_OK if result.passed else EXIT_FAILED


def _oracle_energy(spec: ModelSpec, ham) -> Optional[float]:
    """정확한 바닥 에너지 (작은 TFI는 dense 짝수 섹터, 나머지는 BdG 또는 단일 입자 준위 합)"""
    if spec.kind == ModelKind.TFI:
        if spec.dims[0] <= 14:
            return float(dense_spin_diagonalization(spec.dims[0], float(spec.h), "even").energy)
        return bdg_solution(ham, 0.5).ground_energy
    if spec.species != 1 or spec.kind == ModelKind.FREE_FERMION_2D:
        return None
    levels = np.sort(np.linalg.eigvalsh(ham.dense()[0]))
    return float(ham.constant + np.sum(levels[:spec.particles]))


def cmd_variational(cfg: ExperimentConfig, out: Path) -> int:
    """변분 최소화 에너지 기록 + 체크포인트"""
    spec = _require_model(cfg, (ModelKind.FREE_FERMION_1D, ModelKind.XX_CHAIN, ModelKind.TFI), "variational")
    if spec.species != 1:
        raise ConfigError("variational runs use single-species chains")
    section = cfg.variational
    ham, state = build_model(spec)
    terms = hamiltonian_terms(ham, state.wire_space)
    if section.bond_factor > 1:
        grown = bond_grow(state, section.bond_factor)
        state, terms = grown.state, grown.terms(terms)
    checkpoint = out / section.checkpoint
    optimized, trace = minimize_energy(state, terms, section.optimization, checkpoint)
    oracle = _oracle_energy(spec, ham)
    if oracle is not None:
        trace["relative_error"] = np.abs(trace["energy"] - oracle) / max(abs(oracle), 1e-300)
    metadata = run_metadata(cfg, "variational")
    metadata.update({"optimization": section.optimization.model_dump(mode="json"),
                     "bond_factor": section.bond_factor, "oracle_energy": oracle,
                     "converged": trace.attrs["converged"], "checkpoint": str(checkpoint)})
    if cfg.stats:
        metadata["engine_stats"] = trace.attrs["engine_stats"]
        print(f"engine stats: {trace.attrs['engine_stats']}")
    path = write_csv(trace, out / f"variational_{spec.kind.value}_n{spec.dims[0]}.csv", metadata)
    final = float(trace["energy"].iloc[-1])
    summary = f"variational: E={final:.12f} after {trace.attrs['sweeps']} sweeps"
    if oracle is not None:
        summary += f", relative error {abs(final - oracle) / max(abs(oracle), 1e-300):.3e}"
    print(f"{summary} -> {path}")
    return EXIT_OK


def cmd_dump_circuit(args: argparse.Namespace, out: Path) -> int:
    """회로를 교환 형식으로 쓰고 다시 읽어 바이트 단위로 비교"""
    if args.n is not None:
        circuit = build_qfft_1d(args.n, args.species)
        if args.schedule != "dit":
            circuit = variant_layer_order(circuit, args.schedule)
        circuit = apply_momentum_offset(circuit, args.offset)
        name = f"circuit_n{args.n}_{args.schedule}.json"
    elif args.nx is not None and args.ny is not None:
        circuit = build_qfft_2d(args.nx, args.ny, args.species)
        name = f"circuit_{args.nx}x{args.ny}.json"
    else:
        raise ConfigError("dump-circuit needs --n or both --nx and --ny")
    text = circuit_to_json(circuit)
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(text, encoding="utf-8")
    reparsed = circuit_to_json(circuit_from_json(path.read_text(encoding="utf-8")))
    if reparsed != text:
        logger.error("circuit %s does not round-trip through the parser", path)
        print(f"dump-circuit: round-trip mismatch for {path}")
        return EXIT_FAILED
    print(f"dump-circuit: {circuit.gate_count(2)} two-body gates, depth {circuit.two_body_depth()} -> {path}")
    return EXIT_OK


# ==================== 진입점 ====================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stn", description="spectral tensor network experiments")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--stats", action="store_true", help="print engine instrumentation")
    common.add_argument("--threads", type=int, help="engine thread count (overrides config)")
    common.add_argument("--out", help="output directory (overrides config)")
    common.add_argument("--log-level", help="logging level (default from STN_LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("correlations", parents=[common], help="g1/g2 vs covariance oracle")
    sub.add_parser("tfi", parents=[common], help="TFI susceptibility sweep")
    verify = sub.add_parser("verify", parents=[common], help="invariant suites")
    verify.add_argument("--level", choices=LEVELS, default="fast")
    sub.add_parser("variational", parents=[common], help="variational energy minimization")
    dump = sub.add_parser("dump-circuit", parents=[common], help="write a circuit in the interchange format")
    dump.add_argument("--n", type=int, help="1D chain length")
    dump.add_argument("--nx", type=int, help="2D lattice size along x")
    dump.add_argument("--ny", type=int, help="2D lattice size along y")
    dump.add_argument("--species", type=int, default=1)
    dump.add_argument("--schedule", choices=("dit", "dif", "perm_top"), default="dit")
    dump.add_argument("--offset", type=float, default=0.0, help="momentum offset 0 or 0.5 (1D)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    configure_logging(args.log_level)

    try:
        cfg = load_config(args.config)
        updates = {"stats": cfg.stats or args.stats}
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError(f"--threads must be positive, got {args.threads}")
            updates["threads"] = args.threads
        if args.out is not None:
            updates["output"] = args.out
        cfg = cfg.model_copy(update=updates)
        out = Path(cfg.output)

        if args.command == "correlations":
            return cmd_correlations(cfg, out)
        if args.command == "tfi":
            return cmd_tfi(cfg, out)
        if args.command == "verify":
            return cmd_verify(args.level, cfg.seed, out)
        if args.command == "variational":
            return cmd_variational(cfg, out)
        return cmd_dump_circuit(args, out)
    except (ConfigError, ModelError, OptimizationError, CircuitError, StateError, ValidationError) as e:
        logger.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
