import logging
from pathlib import Path

import numpy as np

from services.snapshot import read_csv, write_csv

logger = logging.getLogger(__name__)

# u_k and v_k also get their time derivatives
DERIVATIVE_COLUMNS = ("u0", "u1", "u2", "v0", "v1", "v2")


def write_plotdata(monitor_csv: Path, out_dir: Path) -> list[Path]:
    """One two-column (t, value) file per monitor quantity."""
    header, table = read_csv(monitor_csv)
    if "t" not in header:
        raise ValueError(f"{monitor_csv}: no 't' column")
    t = table[:, header.index("t")]
    written = []
    for idx, name in enumerate(header):
        if name == "t":
            continue
        values = table[:, idx]
        written.append(write_csv(out_dir / f"{name}.dat", ("t", name), zip(t, values)))
        if name in DERIVATIVE_COLUMNS and len(t) >= 2 and np.all(np.isfinite(values)):
            rate = np.gradient(values, t)
            written.append(write_csv(out_dir / f"{name}_dot.dat", ("t", f"d{name}/dt"), zip(t, rate)))
    logger.info("PlotDiag: %d files in %s", len(written), out_dir)
    return written
