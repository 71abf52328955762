"""
Environment-driven defaults

Read at call time (after main.py runs load_dotenv), never at import.
"""
import os

from pydantic import BaseModel, Field, ValidationError as PydanticValidationError, model_validator

from errors import ValidationError


class Settings(BaseModel):
    max_iter: int = Field(200, ge=1)
    n_starts: int = Field(3, ge=1)
    eig_floor: float = Field(1e-4, gt=0)
    eig_cap: float = Field(1e4, gt=0)
    inner_tol: float = Field(1e-6, gt=0)
    inner_max_iter: int = Field(100, ge=1)
    error_log_dir: str = "_error-logs"

    @model_validator(mode="after")
    def _check_interval(self):
        if self.eig_floor >= self.eig_cap:
            raise ValueError("PMMN_EIG_FLOOR must be below PMMN_EIG_CAP")
        return self


_ENV_KEYS = {
    "max_iter": "PMMN_MAX_ITER",
    "n_starts": "PMMN_STARTS",
    "eig_floor": "PMMN_EIG_FLOOR",
    "eig_cap": "PMMN_EIG_CAP",
    "inner_tol": "PMMN_INNER_TOL",
    "inner_max_iter": "PMMN_INNER_MAX_ITER",
    "error_log_dir": "PMMN_ERROR_LOG_DIR",
}


def get_settings() -> Settings:
    """Build settings from PMMN_* environment variables"""
    raw = {field: os.getenv(env) for field, env in _ENV_KEYS.items()}
    try:
        return Settings(**{k: v for k, v in raw.items() if v not in (None, "")})
    except PydanticValidationError as e:
        raise ValidationError(f"Invalid environment configuration: {e}") from e
