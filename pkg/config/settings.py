import os
from pathlib import Path
from dotenv import load_dotenv

load_dotenv()

REPO_ROOT = Path(__file__).resolve().parent.parent


class Settings:
    @staticmethod
    def _get(key, default=None):
        # Process environment (a .env file in the working directory is merged in above)
        return os.getenv(key, default)

    @staticmethod
    def _flag(value) -> bool:
        return str(value).strip().lower() not in ("0", "false", "no", "off", "")

    RUNS_DIR = Path(_get.__func__("ACTLLM_RUNS_DIR", "runs"))
    DATA_DIR = Path(_get.__func__("ACTLLM_DATA_DIR", "data/datasets"))
    TEMPLATE_PATH = Path(_get.__func__("ACTLLM_TEMPLATE_PATH", str(REPO_ROOT / "data" / "task_templates.json")))

    NUM_WORKERS = int(_get.__func__("ACTLLM_NUM_WORKERS", 1))
    SHOW_PROGRESS = _flag.__func__(_get.__func__("ACTLLM_SHOW_PROGRESS", "1"))
    VERBOSE = _flag.__func__(_get.__func__("ACTLLM_VERBOSE", "1"))
    # opt-in learning checks in test_learning.py (minutes to hours of CPU)
    SLOW_TESTS = _flag.__func__(_get.__func__("ACTLLM_SLOW_TESTS", "0"))

    @classmethod
    def validate(cls):
        problems = []
        if cls.NUM_WORKERS < 1:
            problems.append("ACTLLM_NUM_WORKERS must be >= 1")
        if not cls.TEMPLATE_PATH.exists():
            problems.append(f"ACTLLM_TEMPLATE_PATH does not exist: {cls.TEMPLATE_PATH}")
        if problems:
            raise ValueError(f"Invalid settings: {'; '.join(problems)}")
        return True


settings = Settings()
settings.validate()
