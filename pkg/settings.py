"""
환경 설정 (Settings)

.env 파일 또는 환경 변수에서 수치 허용오차, 스레드 수, 출력 경로를 읽는다.
"""

import logging
import os
from dataclasses import dataclass

from dotenv import load_dotenv

load_dotenv()


@dataclass(frozen=True)
class Settings:
    """런타임 기본값"""
    tolerance: float
    unitary_tolerance: float
    threads: int
    output_dir: str
    log_level: str
    dense_max_modes: int


def load_settings() -> Settings:
    """환경 변수에서 Settings 생성 (없으면 기본값)"""
    return Settings(
        tolerance=float(os.getenv('STN_TOLERANCE', '1e-10')),
        unitary_tolerance=float(os.getenv('STN_UNITARY_TOLERANCE', '1e-12')),
        threads=int(os.getenv('STN_THREADS', '1')),
        output_dir=os.getenv('STN_OUTPUT_DIR', 'outputs'),
        log_level=os.getenv('STN_LOG_LEVEL', 'INFO').upper(),
        dense_max_modes=int(os.getenv('STN_DENSE_MAX_MODES', '16')),
    )


SETTINGS = load_settings()


def configure_logging(level: str = None) -> None:
    """루트 로거 설정 (CLI 전용)"""
    logging.basicConfig(
        level=getattr(logging, (level or SETTINGS.log_level), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
