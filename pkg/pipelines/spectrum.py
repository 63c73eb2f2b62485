import logging
from dataclasses import dataclass
from pathlib import Path

from services.manifold import ManifoldData, build_manifold
from services.operator import (
    KillingBasis,
    SpectralDecomposition,
    assemble,
    eigendecompose,
    kernel_distance,
    killing_kernel,
    lambda_max_estimate,
    spectral_gap,
    symmetry_defect,
)
from services.run_config import RunConfig, killing_rotation
from services.snapshot import write_csv, write_key_values, write_snapshot

logger = logging.getLogger(__name__)


@dataclass
class SpectrumOutcome:
    manifold: ManifoldData
    spectrum: SpectralDecomposition
    basis: KillingBasis
    summary: dict


def run_spectrum_pipeline(config: RunConfig) -> SpectrumOutcome:
    manifold = build_manifold(config.manifold)
    op = assemble(manifold)
    spectrum = eigendecompose(op, count=config.spectrum.count)
    basis = killing_kernel(spectrum, config.flow.kernel_tol)

    summary = {
        "kind": manifold.kind,
        "resolution": "x".join(str(n) for n in manifold.grid.shape),
        "dofs": op.n_dofs,
        "eigenpairs": len(spectrum.eigenvalues),
        "complete": spectrum.complete,
        "max_residual": spectrum.max_residual,
        "kernel_dim": basis.dim,
        "kernel_tol": basis.kernel_tol,
        "symmetry_defect": symmetry_defect(op),
        "lambda_max_estimate": lambda_max_estimate(op),
    }
    try:
        summary["spectral_gap"] = spectral_gap(spectrum, basis)
    except RuntimeError as exc:
        logger.warning("Spectral gap unavailable: %s", exc)
    if manifold.kind in ("unit_sphere_s2", "flat_torus_t2", "unit_sphere_s3"):
        rotation = killing_rotation(manifold)
        summary["rotation_kernel_distance"] = kernel_distance(rotation, basis) if basis.dim else 1.0
    logger.info(
        "SpecDiag: kernel_dim=%d gap=%s",
        basis.dim,
        summary.get("spectral_gap", "n/a"),
    )
    return SpectrumOutcome(manifold=manifold, spectrum=spectrum, basis=basis, summary=summary)


def emit_spectrum(outcome: SpectrumOutcome, out_dir: Path, kernel_snapshots: bool) -> Path:
    out_dir = Path(out_dir)
    write_csv(out_dir / "spectrum.csv", ("index", "eigenvalue"), enumerate(outcome.spectrum.eigenvalues))
    if kernel_snapshots:
        for k, v in enumerate(outcome.basis.vectors):
            write_snapshot(out_dir / f"kernel_{k}.kvf", v, outcome.manifold)
    return write_key_values(out_dir / "spectrum_summary.txt", outcome.summary)
