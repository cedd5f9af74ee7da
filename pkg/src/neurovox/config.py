"""INI pipeline configuration.

Flat sectioned key-value text: diffable, and its bytes hash into the run
provenance.  The seed is mandatory; it may come from the file or the command
line, but if both are given they must agree.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DomainError

METHODS = ("REF-MR", "BASE-CT", "CTSEG-CT")

# method -> (image modality, intensity profile)
METHOD_TABLE = {
    "REF-MR": ("mr", "mr"),
    "BASE-CT": ("ct", "mr"),
    "CTSEG-CT": ("ct", "ct"),
}


@dataclass
class PipelineConfig:
    seed: int
    out_dir: Path
    config_hash: str = ""
    input_mode: str = "phantom"  # phantom | directory
    data_dir: Path | None = None
    atlas_path: Path | None = None
    methods: tuple[str, ...] = METHODS
    jobs: int = 1
    # cohort
    n_subjects: int = 10
    dims: int = 64
    spacing: float = 3.0
    sex_effect: float = 0.06
    scale_jitter: float = 0.03
    rot_deg: float = 3.0
    trans_mm: float = 4.0
    warp_amp_mm: float = 3.0
    warp_smooth_mm: float = 20.0
    ct_noise_sd: float = 2.0
    mr_noise_sd: float = 4.0
    # segmentation
    alternations: int = 2
    em_max_iter: int = 30
    reg_bins: int = 64
    reg_levels: int = 2
    reg_max_evals: int = 600
    nonlin_levels: int = 3
    nonlin_iterations: int = 40
    # metrics / stats
    hu_threshold: float = 20.0
    # prediction
    folds: int = 10
    feature_fwhm_mm: float = 8.0


def _get(cp, section, key, cast, default):
    if cp.has_option(section, key):
        raw = cp.get(section, key).strip()
        try:
            return cast(raw)
        except ValueError:
            raise DomainError(f"config [{section}] {key}: cannot parse {raw!r}")
    return default


def load_config(path, cli_seed: int | None = None, cli_out: str | None = None,
                cli_jobs: int | None = None) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise DomainError(f"config file not found: {path}")
    raw = path.read_bytes()
    cp = configparser.ConfigParser()
    cp.read_string(raw.decode("utf-8"))

    file_seed = _get(cp, "pipeline", "seed", int, None)
    if file_seed is not None and cli_seed is not None and file_seed != cli_seed:
        raise DomainError(
            f"seed given twice and different: config has {file_seed}, --seed {cli_seed}")
    seed = file_seed if file_seed is not None else cli_seed
    if seed is None:
        raise DomainError("a seed is mandatory: set [pipeline] seed or pass --seed")

    out = cli_out if cli_out is not None else _get(cp, "pipeline", "out", str, None)
    if out is None:
        raise DomainError("an output directory is mandatory: set [pipeline] out or pass --out")

    methods = tuple(
        m.strip() for m in
        _get(cp, "pipeline", "methods", str, ",".join(METHODS)).split(",") if m.strip()
    )
    unknown = [m for m in methods if m not in METHOD_TABLE]
    if unknown:
        raise DomainError(f"unknown methods {unknown}; known: {sorted(METHOD_TABLE)}")

    mode = _get(cp, "pipeline", "mode", str, "phantom")
    if mode not in ("phantom", "directory"):
        raise DomainError(f"input mode must be phantom or directory, got {mode!r}")
    data_dir = _get(cp, "pipeline", "data", str, None)
    if mode == "directory" and data_dir is None:
        raise DomainError("directory mode needs [pipeline] data")
    atlas = _get(cp, "pipeline", "atlas", str, None)

    jobs = cli_jobs if cli_jobs is not None else _get(cp, "pipeline", "jobs", int, 1)
    if jobs < 1:
        raise DomainError(f"jobs must be >= 1, got {jobs}")

    return PipelineConfig(
        seed=seed,
        out_dir=Path(out),
        config_hash=hashlib.sha256(raw).hexdigest(),
        input_mode=mode,
        data_dir=Path(data_dir) if data_dir else None,
        atlas_path=Path(atlas) if atlas else None,
        methods=methods,
        jobs=jobs,
        n_subjects=_get(cp, "cohort", "n", int, 10),
        dims=_get(cp, "cohort", "dims", int, 64),
        spacing=_get(cp, "cohort", "spacing", float, 3.0),
        sex_effect=_get(cp, "cohort", "sex_effect", float, 0.06),
        scale_jitter=_get(cp, "cohort", "scale_jitter", float, 0.03),
        rot_deg=_get(cp, "cohort", "rot_deg", float, 3.0),
        trans_mm=_get(cp, "cohort", "trans_mm", float, 4.0),
        warp_amp_mm=_get(cp, "cohort", "warp_amp_mm", float, 3.0),
        warp_smooth_mm=_get(cp, "cohort", "warp_smooth_mm", float, 20.0),
        ct_noise_sd=_get(cp, "cohort", "ct_noise_sd", float, 2.0),
        mr_noise_sd=_get(cp, "cohort", "mr_noise_sd", float, 4.0),
        alternations=_get(cp, "segment", "alternations", int, 2),
        em_max_iter=_get(cp, "segment", "em_max_iter", int, 30),
        reg_bins=_get(cp, "segment", "reg_bins", int, 64),
        reg_levels=_get(cp, "segment", "reg_levels", int, 3),
        reg_max_evals=_get(cp, "segment", "reg_max_evals", int, 1800),
        nonlin_levels=_get(cp, "segment", "nonlin_levels", int, 2),
        nonlin_iterations=_get(cp, "segment", "nonlin_iterations", int, 30),
        hu_threshold=_get(cp, "metrics", "hu_threshold", float, 20.0),
        folds=_get(cp, "predict", "folds", int, 10),
        feature_fwhm_mm=_get(cp, "predict", "fwhm_mm", float, 8.0),
    )
