# app/config.py


from dotenv import load_dotenv
from pathlib import Path
from typing import Literal
from pydantic_settings import BaseSettings, SettingsConfigDict

load_dotenv()  # .env 파일 먼저 읽기

BASE_DIR = Path(__file__).resolve().parent.parent

class Settings(BaseSettings):
    # 환경 구분
    app_env: str = "local"

    # 연산 설정
    n2uq_threads: int = 1                                   # N2UQ_THREADS (BLAS / joblib worker 수)
    n2uq_precision: Literal["float32", "float64"] = "float32"  # 학습 그래프 기본 정밀도
    n2uq_log_level: str = "INFO"

    # 데이터 / 산출물 경로
    n2uq_data_dir: Path = BASE_DIR / "data"
    n2uq_show_progress: bool = False                        # tqdm 진행바 (metrics 출력 안정성 때문에 기본 off)

    model_config = SettingsConfigDict(
        env_file=str(BASE_DIR / ".env"),  # 루트 .env 절대경로
        env_file_encoding="utf-8",
        extra="ignore",                   # 필요 없는 env 무시
    )

settings = Settings()

if __name__ == "__main__":
    print("BASE_DIR:", BASE_DIR)
    print("N2UQ_THREADS:", settings.n2uq_threads)
    print("N2UQ_PRECISION:", settings.n2uq_precision)
    print("N2UQ_DATA_DIR:", settings.n2uq_data_dir)
