import logging
import os
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()

logger = logging.getLogger(__name__)


def _env_float(name: str, default: str) -> float:
    raw = os.getenv(name, default).strip()
    try:
        return float(raw)
    except ValueError:
        logger.warning("ConfigDiag: %s=%r is not a number, using %s", name, raw, default)
        return float(default)


def _env_int(name: str, default: str) -> int:
    raw = os.getenv(name, default).strip()
    try:
        return int(raw)
    except ValueError:
        logger.warning("ConfigDiag: %s=%r is not an integer, using %s", name, raw, default)
        return int(default)


# =========================
# DIRECTORIES
# =========================
BASE_DIR = Path(__file__).resolve().parent
LOG_DIR = Path(os.getenv("KVFLOW_LOG_DIR", str(BASE_DIR / "logs")).strip())
OUT_DIR = Path(os.getenv("KVFLOW_OUT_DIR", str(BASE_DIR / "out")).strip())
LOG_LEVEL = os.getenv("KVFLOW_LOG_LEVEL", "INFO").strip().upper()

# =========================
# LINEAR ALGEBRA
# =========================
# Above this many degrees of freedom only extremal eigenpairs are computed.
DENSE_THRESHOLD = _env_int("KVFLOW_DENSE_THRESHOLD", "8192")
KERNEL_TOL_FACTOR = _env_float("KVFLOW_KERNEL_TOL_FACTOR", "10")
# Weight of the third-difference block in the discrete deformation energy.
STABILIZATION_WEIGHT = _env_float("KVFLOW_STABILIZATION_WEIGHT", str(1.0 / 64.0))
EIGEN_RESIDUAL_TOL = _env_float("KVFLOW_EIGEN_RESIDUAL_TOL", "1e-8")

# =========================
# POISSON / LERAY PROJECTION
# =========================
CG_RTOL = _env_float("KVFLOW_CG_RTOL", "1e-10")
CG_MAXITER = _env_int("KVFLOW_CG_MAXITER", "20000")

# =========================
# FLOW DEFAULTS
# =========================
DEFAULT_INTEGRATOR = os.getenv("KVFLOW_INTEGRATOR", "rk4").strip().lower()
DEFAULT_DT_SAFETY = _env_float("KVFLOW_DT_SAFETY", "0.5")
DEFAULT_K_MAX = _env_int("KVFLOW_K_MAX", "2")
DEFAULT_MONITOR_STRIDE = _env_int("KVFLOW_MONITOR_STRIDE", "100")
# E(t_end) must fall below this fraction of E(0) before Err is trusted.
ERR_CONVERGENCE_RATIO = _env_float("KVFLOW_ERR_CONVERGENCE_RATIO", "1e-6")

if DEFAULT_INTEGRATOR not in ("euler", "rk4"):
    logger.warning("ConfigDiag: unknown KVFLOW_INTEGRATOR=%s, fallback to rk4", DEFAULT_INTEGRATOR)
    DEFAULT_INTEGRATOR = "rk4"


def log_settings() -> None:
    logger.info("CONFIG LOADED:")
    logger.info("   log dir: %s (level %s)", LOG_DIR, LOG_LEVEL)
    logger.info("   out dir: %s", OUT_DIR)
    logger.info("   dense eigen threshold: %d dofs", DENSE_THRESHOLD)
    logger.info("   kernel tol factor: %g, stabilization weight: %g", KERNEL_TOL_FACTOR, STABILIZATION_WEIGHT)
    logger.info("   CG: rtol=%g maxiter=%d", CG_RTOL, CG_MAXITER)
    logger.info(
        "   flow defaults: integrator=%s dt_safety=%g k_max=%d monitor_stride=%d",
        DEFAULT_INTEGRATOR,
        DEFAULT_DT_SAFETY,
        DEFAULT_K_MAX,
        DEFAULT_MONITOR_STRIDE,
    )
