"""Pipeline stages behind the CLI.

Every stage reads its inputs from the output directory (or the configured
data directory), writes CSV tables and NIfTI volumes, and is deterministic
given the config and seed — with the single exception of measured runtimes,
which therefore live in their own table (runtimes.csv) so that everything
else can be compared byte for byte between runs.
"""

from __future__ import annotations

import csv
import time
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from . import metrics, nifti, stats
from .atlasgmm import Atlas, SegmentOpts, intracranial_mask, segment
from .config import METHOD_TABLE, PipelineConfig
from .errors import DegenerateInputError, DomainError, NeurovoxError
from .phantom import CohortVariation, PhantomSpec, make_atlas, make_cohort
from .predict import build_features, kfold_cv, linear_kernel, roc_points
from .register import (
    DeformationField,
    NonlinearOpts,
    RegistrationOpts,
    apply_deformation,
    jacobian_determinant,
    modulate,
)
from .volume import BinaryMask, TissueMaps, Units, Volume, VoxelGrid, binarise
from .volumetry import brain_volumes

TISSUE_TRIO = ("gm", "wm", "csf")
CT_METHODS = ("BASE-CT", "CTSEG-CT")


# ---------------------------------------------------------------------------
# Small I/O helpers


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".10g")
    return str(x)


def write_csv(path: Path, header: list[str], rows: list[list]):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise DomainError(f"missing {path.name}; run the {stage!r} stage first")
    return path


def cohort_dir(cfg: PipelineConfig) -> Path:
    if cfg.input_mode == "directory":
        return cfg.data_dir
    return cfg.out_dir / "cohort"


def atlas_file(cfg: PipelineConfig) -> Path:
    return cfg.atlas_path if cfg.atlas_path else cohort_dir(cfg) / "atlas.nii"


def seg_dir(cfg: PipelineConfig) -> Path:
    return cfg.out_dir / "seg"


def manifest_ids(cfg: PipelineConfig) -> list[str]:
    rows = read_csv(_require(cohort_dir(cfg) / "manifest.csv", "phantom-gen"))
    return sorted(r["subject_id"] for r in rows)


def _save_field(field: DeformationField, base: Path):
    nifti.write_nifti_channels(field.grid, field.map, base.with_suffix(".nii"))
    tg = field.target_grid
    lines = [
        "affine_part: " + " ".join(format(v, ".17g") for v in field.affine_part.ravel()),
        "target_dims: " + " ".join(str(d) for d in tg.dims),
        "target_affine: " + " ".join(format(v, ".17g") for v in tg.affine.ravel()),
    ]
    base.with_suffix(".txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _load_field(base: Path) -> DeformationField:
    grid, data = nifti.read_nifti_channels(base.with_suffix(".nii"))
    meta = {}
    for line in base.with_suffix(".txt").read_text(encoding="utf-8").splitlines():
        key, _, rest = line.partition(":")
        meta[key.strip()] = rest.split()
    affine_part = np.array([float(v) for v in meta["affine_part"]]).reshape(4, 4)
    dims = tuple(int(v) for v in meta["target_dims"])
    t_affine = np.array([float(v) for v in meta["target_affine"]]).reshape(4, 4)
    spacing = tuple(np.linalg.norm(t_affine[:3, i]) for i in range(3))
    target = VoxelGrid(dims, spacing, t_affine)
    return DeformationField(grid, data, affine_part, target)


def _load_posteriors(path: Path) -> TissueMaps:
    grid, data = nifti.read_nifti_channels(path)
    total = data.sum(axis=-1, keepdims=True)
    return TissueMaps(grid, np.clip(data, 0.0, 1.0) / np.clip(total, 1e-9, None))


def _tissue_channel(maps: TissueMaps, c: int) -> Volume:
    return Volume(maps.grid, maps.data[..., c], Units.PROBABILITY)


# ---------------------------------------------------------------------------
# phantom-gen


def cmd_phantom_gen(cfg: PipelineConfig) -> list:
    if cfg.input_mode == "directory":
        raise DomainError("phantom-gen does not apply to directory input mode")
    if cfg.n_subjects < 2:
        raise DomainError("cohort statistics need at least 2 subjects")
    spec = PhantomSpec(
        dims=(cfg.dims,) * 3, spacing=(cfg.spacing,) * 3,
        ct_noise_sd=cfg.ct_noise_sd, mr_noise_sd=cfg.mr_noise_sd, seed=cfg.seed,
    )
    variation = CohortVariation(
        sex_effect=cfg.sex_effect, scale_jitter=cfg.scale_jitter,
        rot_deg=cfg.rot_deg, trans_mm=cfg.trans_mm,
        warp_amp_mm=cfg.warp_amp_mm, warp_smooth_mm=cfg.warp_smooth_mm,
    )
    cohort = make_cohort(cfg.n_subjects, spec, variation, seed=cfg.seed)
    atlas = make_atlas(cohort)

    base = cohort_dir(cfg)
    base.mkdir(parents=True, exist_ok=True)
    atlas.save(base / "atlas.nii")
    rows = []
    for s in cohort:
        d = base / s.subject_id
        d.mkdir(exist_ok=True)
        nifti.write_nifti(s.ct, d / "ct.nii")
        nifti.write_nifti(s.mr, d / "mr.nii")
        nifti.write_nifti_channels(s.truth.grid, s.truth.data, d / "truth.nii")
        rows.append([s.subject_id, s.sex, s.scale_factor, cfg.seed])
    write_csv(base / "manifest.csv", ["subject_id", "sex", "scale", "seed"], rows)
    return []


# ---------------------------------------------------------------------------
# segment


def _segment_opts(cfg: PipelineConfig, profile: str) -> SegmentOpts:
    return SegmentOpts(
        modality=profile,
        alternations=cfg.alternations,
        em_max_iter=cfg.em_max_iter,
        reg=RegistrationOpts(bins=cfg.reg_bins, levels=cfg.reg_levels,
                             max_evals=cfg.reg_max_evals, rigid_init=False),
        nonlinear=NonlinearOpts(levels=cfg.nonlin_levels,
                                iterations=cfg.nonlin_iterations),
    )


def _segment_subject(args):
    cfg, subject_id = args
    cdir = cohort_dir(cfg) / subject_id
    atlas = Atlas.load(atlas_file(cfg))
    images = {
        "ct": nifti.read_nifti(cdir / "ct.nii", Units.HU),
        "mr": nifti.read_nifti(cdir / "mr.nii", Units.MR),
    }
    out = seg_dir(cfg) / subject_id
    out.mkdir(parents=True, exist_ok=True)
    runtimes, failures = [], []
    for method in cfg.methods:
        modality, profile = METHOD_TABLE[method]
        try:
            t0 = time.perf_counter()
            res = segment(images[modality], atlas, _segment_opts(cfg, profile))
            dt = time.perf_counter() - t0
            nifti.write_nifti_channels(res.posteriors.grid, res.posteriors.data,
                                       out / f"{method}.post.nii")
            _save_field(res.deformation, out / f"{method}.field")
            runtimes.append([subject_id, method, dt])
        except Exception as exc:  # per-subject isolation; the stage continues
            failures.append([ "segment", subject_id, method, f"{type(exc).__name__}: {exc}"])
    return runtimes, failures


def cmd_segment(cfg: PipelineConfig) -> list:
    ids = manifest_ids(cfg)
    _require(atlas_file(cfg), "phantom-gen")
    jobs = [(cfg, sid) for sid in ids]
    if cfg.jobs > 1:
        with get_context("fork").Pool(min(cfg.jobs, len(jobs))) as pool:
            results = pool.map(_segment_subject, jobs)
    else:
        results = [_segment_subject(j) for j in jobs]
    runtimes, failures = [], []
    for rt, fl in results:
        runtimes.extend(rt)
        failures.extend(fl)
    runtimes.sort(key=lambda r: (r[0], r[1]))
    failures.sort(key=lambda r: (r[1], r[2]))
    write_csv(cfg.out_dir / "runtimes.csv", ["subject_id", "method", "runtime_s"], runtimes)
    write_csv(cfg.out_dir / "failures.csv", ["stage", "subject_id", "method", "error"],
              failures)
    return failures


def _method_files(cfg: PipelineConfig, subject_id: str, method: str):
    d = seg_dir(cfg) / subject_id
    return d / f"{method}.post.nii", d / f"{method}.field"


def _completed_subjects(cfg: PipelineConfig, methods) -> list[str]:
    """Subjects with every needed method output present (others are already
    accounted for in failures.csv)."""
    _require(cfg.out_dir / "runtimes.csv", "segment")
    out = []
    for sid in manifest_ids(cfg):
        ok = True
        for m in methods:
            post, field = _method_files(cfg, sid, m)
            ok = ok and post.exists() and field.with_suffix(".nii").exists()
        if ok:
            out.append(sid)
    return out


# ---------------------------------------------------------------------------
# validate-seg


def _binary_channel(maps: TissueMaps, c: int) -> BinaryMask:
    return binarise(_tissue_channel(maps, c), 0.5)


def _surface_metrics(a: BinaryMask, b: BinaryMask):
    try:
        return metrics.hd95(a, b), metrics.assd(a, b), ""
    except DegenerateInputError:
        return None, None, "empty-surface"


def _wilcoxon_rows(per_subject: dict, classes=TISSUE_TRIO,
                   metric_names=("dice", "hd95_mm", "assd_mm")) -> list[list]:
    """Paired BASE-CT vs CTSEG-CT tests, Bonferroni over the three classes."""
    rows = []
    for metric in metric_names:
        ps, partial = [], []
        for cls in classes:
            base = per_subject.get(("BASE-CT", cls, metric))
            ctseg = per_subject.get(("CTSEG-CT", cls, metric))
            if not base or not ctseg or len(base) != len(ctseg):
                partial.append((cls, None))
                continue
            t = stats.wilcoxon_signed_rank(base, ctseg)
            partial.append((cls, t))
            ps.append(t.p_value)
        adj = iter(stats.bonferroni(ps, m=3))
        for cls, t in partial:
            if t is None:
                rows.append([metric, cls, "", "", "", "missing", 0])
            else:
                rows.append([metric, cls, t.statistic, t.p_value, next(adj),
                             t.method, t.n_effective])
    return rows


def cmd_validate_seg(cfg: PipelineConfig) -> list:
    methods = [m for m in cfg.methods if m in CT_METHODS]
    subjects = _completed_subjects(cfg, list(methods) + ["REF-MR"])
    rows = []
    per_subject: dict = {}
    for sid in subjects:
        ref = _load_posteriors(_method_files(cfg, sid, "REF-MR")[0])
        for method in methods:
            post = _load_posteriors(_method_files(cfg, sid, method)[0])
            for c, cls in enumerate(TISSUE_TRIO):
                am, bm = _binary_channel(post, c), _binary_channel(ref, c)
                d = metrics.dice(am, bm)
                h, a_, note = _surface_metrics(am, bm)
                rows.append([sid, method, cls, d,
                             "" if h is None else h, "" if a_ is None else a_, note])
                if h is not None:
                    for name, val in (("dice", d), ("hd95_mm", h), ("assd_mm", a_)):
                        per_subject.setdefault((method, cls, name), []).append(val)
    write_csv(cfg.out_dir / "validate_seg.csv",
              ["subject_id", "method", "class", "dice", "hd95_mm", "assd_mm", "note"], rows)

    summary = []
    for method in methods:
        for cls in TISSUE_TRIO:
            for name in ("dice", "hd95_mm", "assd_mm"):
                vals = per_subject.get((method, cls, name), [])
                if vals:
                    summary.append([method, cls, name, float(np.median(vals)),
                                    float(np.percentile(vals, 25)),
                                    float(np.percentile(vals, 75)), len(vals)])
    write_csv(cfg.out_dir / "seg_summary.csv",
              ["method", "class", "metric", "median", "iqr_low", "iqr_high", "n"], summary)
    if "BASE-CT" in methods and "CTSEG-CT" in methods:
        write_csv(cfg.out_dir / "seg_tests.csv",
                  ["metric", "class", "statistic", "p_value", "p_bonferroni",
                   "test", "n_effective"],
                  _wilcoxon_rows(per_subject))
    return []


# ---------------------------------------------------------------------------
# validate-norm


def cmd_validate_norm(cfg: PipelineConfig) -> list:
    subjects = _completed_subjects(cfg, cfg.methods)
    if len(subjects) < 2:
        raise DomainError("normalisation validation needs at least 2 completed subjects")
    warped_ct: dict[str, list[Volume]] = {m: [] for m in cfg.methods}
    fields: dict[tuple[str, str], DeformationField] = {}
    for sid in subjects:
        ct = nifti.read_nifti(cohort_dir(cfg) / sid / "ct.nii", Units.HU)
        for method in cfg.methods:
            fld = _load_field(_method_files(cfg, sid, method)[1])
            fields[(sid, method)] = fld
            warped_ct[method].append(apply_deformation(ct, fld))

    cov_rows = []
    for method in cfg.methods:
        cov = metrics.cov_stats(warped_ct[method], hu_threshold=cfg.hu_threshold)
        cov_rows.append([method, cov.mean_cov, int(cov.brain_mask.n_foreground),
                         cov.n_excluded])
        gm_img = metrics.group_mean(warped_ct[method])
        nifti.write_nifti(gm_img, cfg.out_dir / f"norm_groupmean_{method}.nii")
    write_csv(cfg.out_dir / "norm_cov.csv",
              ["method", "mean_cov", "n_mask_voxels", "n_excluded"], cov_rows)

    rows, per_subject = [], {}
    ct_methods = [m for m in cfg.methods if m in CT_METHODS]
    if "REF-MR" in cfg.methods:
        for sid in subjects:
            ref_post = _load_posteriors(_method_files(cfg, sid, "REF-MR")[0])
            ref_warp = {
                cls: binarise(apply_deformation(_tissue_channel(ref_post, c),
                                                fields[(sid, "REF-MR")]), 0.5)
                for c, cls in enumerate(TISSUE_TRIO)
            }
            for method in ct_methods:
                for c, cls in enumerate(TISSUE_TRIO):
                    warped = binarise(apply_deformation(_tissue_channel(ref_post, c),
                                                        fields[(sid, method)]), 0.5)
                    d = metrics.dice(warped, ref_warp[cls])
                    try:
                        a_ = metrics.assd(warped, ref_warp[cls])
                        note = ""
                    except DegenerateInputError:
                        a_, note = None, "empty-surface"
                    rows.append([sid, method, cls, d, "" if a_ is None else a_, note])
                    if a_ is not None:
                        per_subject.setdefault((method, cls, "dice"), []).append(d)
                        per_subject.setdefault((method, cls, "assd_mm"), []).append(a_)
        write_csv(cfg.out_dir / "validate_norm.csv",
                  ["subject_id", "method", "class", "dice", "assd_mm", "note"], rows)
        if len(ct_methods) == 2:
            write_csv(cfg.out_dir / "norm_tests.csv",
                      ["metric", "class", "statistic", "p_value", "p_bonferroni",
                       "test", "n_effective"],
                      _wilcoxon_rows(per_subject, metric_names=("dice", "assd_mm")))
    return []


# ---------------------------------------------------------------------------
# volumetrics


def cmd_volumetrics(cfg: PipelineConfig) -> list:
    subjects = _completed_subjects(cfg, cfg.methods)
    if "REF-MR" not in cfg.methods:
        raise DomainError("volumetrics needs the REF-MR method for the shared mask")
    atlas = Atlas.load(_require(atlas_file(cfg), "phantom-gen"))
    rows = []
    volumes: dict[tuple[str, str], dict[str, float]] = {}
    for sid in subjects:
        mask = intracranial_mask(atlas, _load_field(_method_files(cfg, sid, "REF-MR")[1]))
        for method in cfg.methods:
            post = _load_posteriors(_method_files(cfg, sid, method)[0])
            rep = brain_volumes(post, mask)
            volumes[(sid, method)] = {"tbv_ml": rep.tbv_ml, "tiv_ml": rep.tiv_ml}
            rows.append([sid, method, rep.tbv_ml, rep.tiv_ml, *rep.per_class_ml,
                         rep.mask_volume_ml])
    write_csv(cfg.out_dir / "volumetrics.csv",
              ["subject_id", "method", "tbv_ml", "tiv_ml", "gm_ml", "wm_ml", "csf_ml",
               "bone_ml", "soft_ml", "background_ml", "mask_ml"], rows)

    agree = []
    for method in (m for m in cfg.methods if m in CT_METHODS):
        for measure in ("tbv_ml", "tiv_ml"):
            ref = [volumes[(sid, "REF-MR")][measure] for sid in subjects]
            test = [volumes[(sid, method)][measure] for sid in subjects]
            try:
                ag = stats.icc31(np.column_stack([ref, test]))
                ba = stats.bland_altman(ref, test)
                agree.append([method, measure, ag.icc, ag.ci_low, ag.ci_high,
                              ag.pearson_r, ba.bias, ba.loa_low, ba.loa_high, ""])
            except (DomainError, DegenerateInputError) as exc:
                agree.append([method, measure, "", "", "", "", "", "", "",
                              f"{type(exc).__name__}: {exc}"])
    write_csv(cfg.out_dir / "volumetrics_agreement.csv",
              ["method", "measure", "icc", "ci_low", "ci_high", "pearson_r",
               "bias", "loa_low", "loa_high", "note"], agree)
    return []


# ---------------------------------------------------------------------------
# predict


def cmd_predict(cfg: PipelineConfig) -> list:
    subjects = _completed_subjects(cfg, cfg.methods)
    atlas = Atlas.load(_require(atlas_file(cfg), "phantom-gen"))
    pri = atlas.priors().data
    mask = BinaryMask(atlas.grid, (pri[..., 0] + pri[..., 1] + pri[..., 2]) >= 0.5)
    sex = {r["subject_id"]: r["sex"] for r in read_csv(cohort_dir(cfg) / "manifest.csv")}
    labels = np.array([1.0 if sex[sid] == "f" else -1.0 for sid in subjects])

    pred_rows, roc_rows, summary = [], [], []
    for method in cfg.methods:
        feats = []
        for sid in subjects:
            post = _load_posteriors(_method_files(cfg, sid, method)[0])
            fld = _load_field(_method_files(cfg, sid, method)[1])
            jac = jacobian_determinant(fld)
            mods = [modulate(apply_deformation(_tissue_channel(post, c), fld), jac)
                    for c in range(3)]
            feats.append(build_features(*mods, mask, fwhm_mm=cfg.feature_fwhm_mm,
                                        subject_id=sid))
        cv = kfold_cv(linear_kernel(feats), labels, subjects, k=min(cfg.folds, len(subjects)),
                      seed=cfg.seed)
        for i, sid in enumerate(subjects):
            pred_rows.append([sid, method, int(cv.fold[i]), int(cv.true_labels[i]),
                              cv.probabilities[i], int(cv.predicted[i])])
        for fpr, tpr in roc_points(cv.probabilities, labels):
            roc_rows.append([method, fpr, tpr])
        summary.append([method, cv.auc, cv.balanced_accuracy])
    write_csv(cfg.out_dir / "predictions.csv",
              ["subject_id", "method", "fold", "true_label", "probability",
               "predicted_label"], pred_rows)
    write_csv(cfg.out_dir / "roc.csv", ["method", "fpr", "tpr"], roc_rows)
    write_csv(cfg.out_dir / "predict_summary.csv",
              ["method", "auc", "balanced_accuracy"], summary)
    return []


# ---------------------------------------------------------------------------
# report


def cmd_report(cfg: PipelineConfig) -> list:
    from . import __version__

    stage_files = {
        "segment": "runtimes.csv",
        "validate-seg": "seg_summary.csv",
        "validate-norm": "norm_cov.csv",
        "volumetrics": "volumetrics_agreement.csv",
        "predict": "predict_summary.csv",
    }
    tables = {}
    for stage, fname in stage_files.items():
        tables[stage] = read_csv(_require(cfg.out_dir / fname, stage))

    rows = [["meta", "version", __version__],
            ["meta", "config_sha256", cfg.config_hash],
            ["meta", "seed", cfg.seed]]
    for r in tables["validate-seg"]:
        rows.append(["segmentation", f"{r['method']}/{r['class']}/{r['metric']}/median",
                     r["median"]])
    for r in tables["validate-norm"]:
        rows.append(["normalisation", f"{r['method']}/mean_cov", r["mean_cov"]])
    for r in tables["volumetrics"]:
        if r["icc"] != "":
            rows.append(["volumetry", f"{r['method']}/{r['measure']}/icc", r["icc"]])
            rows.append(["volumetry", f"{r['method']}/{r['measure']}/bias", r["bias"]])
    for r in tables["predict"]:
        rows.append(["prediction", f"{r['method']}/auc", r["auc"]])
        rows.append(["prediction", f"{r['method']}/balanced_accuracy",
                     r["balanced_accuracy"]])
    write_csv(cfg.out_dir / "report.csv", ["section", "key", "value"], rows)

    lines = [
        "neurovox report",
        f"version: {__version__}",
        f"config sha256: {cfg.config_hash}",
        f"seed: {cfg.seed}",
        "",
        "segmentation vs REF-MR (median):",
    ]
    for r in tables["validate-seg"]:
        lines.append(f"  {r['method']:9s} {r['class']:4s} {r['metric']:8s} "
                     f"{float(r['median']):.4f} "
                     f"[{float(r['iqr_low']):.4f}, {float(r['iqr_high']):.4f}]")
    lines.append("")
    lines.append("normalisation consistency (mean CoV, lower is better):")
    for r in tables["validate-norm"]:
        lines.append(f"  {r['method']:9s} {float(r['mean_cov']):.4f}")
    lines.append("")
    lines.append("volumetric agreement vs REF-MR:")
    for r in tables["volumetrics"]:
        if r["icc"] != "":
            lines.append(f"  {r['method']:9s} {r['measure']:7s} "
                         f"ICC {float(r['icc']):.3f} "
                         f"[{float(r['ci_low']):.3f}, {float(r['ci_high']):.3f}] "
                         f"bias {float(r['bias']):+.2f} ml")
    lines.append("")
    lines.append("sex prediction:")
    for r in tables["predict"]:
        lines.append(f"  {r['method']:9s} AUC {float(r['auc']):.3f} "
                     f"balanced accuracy {float(r['balanced_accuracy']):.3f}")
    lines.append("")
    lines.append("median segmentation runtime per subject (s):")
    by_method: dict[str, list[float]] = {}
    for r in tables["segment"]:
        by_method.setdefault(r["method"], []).append(float(r["runtime_s"]))
    for method in sorted(by_method):
        lines.append(f"  {method:9s} {float(np.median(by_method[method])):.2f}")
    (cfg.out_dir / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return []


STAGES = {
    "phantom-gen": cmd_phantom_gen,
    "segment": cmd_segment,
    "validate-seg": cmd_validate_seg,
    "validate-norm": cmd_validate_norm,
    "volumetrics": cmd_volumetrics,
    "predict": cmd_predict,
    "report": cmd_report,
}


def cmd_all(cfg: PipelineConfig) -> list:
    failures = []
    for stage in STAGES.values():
        failures.extend(stage(cfg))
    return failures
