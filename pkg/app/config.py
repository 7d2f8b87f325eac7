from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Runtime defaults, overridable through ELSSA_* environment variables or .env"""

    model_config = SettingsConfigDict(
        env_prefix="ELSSA_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    # Decomposition
    default_k: int = 50
    mssa_k: int = 20
    n_cells: int = 150
    log_floor: float = 1e-6

    # Lanczos bidiagonalization
    lanczos_tol: float = 1e-8
    lanczos_seed: int = 0
    dense_guard: int = 10_000_000

    # ESPRIT
    rank_floor: float = 1e-4
    pairing_tol: float = 1e-2
    pairing_gamma: float = 0.5347302871

    # Applications
    refine: int = 4
    band_margin: float = 0.3
    charlen_eps: float = 1e-3

    threads: int = 1
    log_level: str = "INFO"


# Global settings instance
settings = Settings()
