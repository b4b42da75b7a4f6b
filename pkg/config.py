import os
from dotenv import load_dotenv
from pydantic_settings import BaseSettings, SettingsConfigDict

load_dotenv()

BASE_DIR = os.path.dirname(os.path.abspath(__file__))
DATA_DIR = os.path.join(BASE_DIR, 'data')
OUTPUT_DIR = os.path.join(BASE_DIR, 'output')

ARTIFACT_VERSION = "1.0.0"

# --- 內建情境的 SCM 規格與執行清單 ---
SCHEMA_DIR = os.path.join(DATA_DIR, 'schemas')
SCM_DIR = os.path.join(DATA_DIR, 'scm')
MANIFEST_DIR = os.path.join(DATA_DIR, 'manifests')
LOAN_SCHEMA_PATH = os.path.join(SCHEMA_DIR, 'loan.json')
SCHOOL_SCHEMA_PATH = os.path.join(SCHEMA_DIR, 'law_school.json')
LOAN_SCM_SPEC_PATH = os.path.join(SCM_DIR, 'loan.json')
SCHOOL_SCM_SPEC_PATH = os.path.join(SCM_DIR, 'law_school.json')
LOAN_MANIFEST_PATH = os.path.join(MANIFEST_DIR, 'loan.json')
MANIFEST_SCHEMA_PATH = os.path.join(MANIFEST_DIR, 'manifest.schema.json')


class AuditSettings(BaseSettings):
    """執行期設定，可由環境變數 (CST_*) 或 .env 覆寫。"""
    model_config = SettingsConfigDict(env_prefix="CST_", env_file=".env", extra="ignore")

    n_jobs: int = 1
    log_level: str = "INFO"
    output_dir: str = OUTPUT_DIR
    cache_distances: bool = False
    default_seed: int = 2023


settings = AuditSettings()
