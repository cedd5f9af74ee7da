"""neurovox: atlas-guided brain CT/MR tissue segmentation, spatial
normalisation, and a four-way validation harness (segmentation overlap,
normalisation consistency, volumetrics, predictive validation) exercised on
synthetic paired phantoms."""

__version__ = "0.1.0"

from .errors import (
    ConvergenceError,
    DegenerateInputError,
    DomainError,
    FormatError,
    GeometryError,
    NeurovoxError,
    UnsupportedError,
)
from .volume import (
    FWHM_TO_SIGMA,
    N_CLASSES,
    TISSUE_CLASSES,
    BinaryMask,
    TissueMaps,
    Units,
    Volume,
    VoxelGrid,
    binarise,
    gaussian_smooth,
    resample,
    softmax_channels,
)
from .nifti import read_nifti, read_nifti_channels, write_nifti, write_nifti_channels
from .metrics import (
    CovStats,
    SurfaceSet,
    assd,
    cov_stats,
    dice,
    distance_transform,
    group_mean,
    hd95,
    surface_voxels,
)
from .stats import (
    AgreementStats,
    BlandAltman,
    TestResult,
    bland_altman,
    bonferroni,
    icc31,
    pearson,
    wilcoxon_signed_rank,
)
from .register import (
    AffineParams,
    ConvergenceWarning,
    DeformationField,
    JacobianMap,
    NonlinearOpts,
    RegistrationOpts,
    RigidParams,
    affine_field,
    apply_deformation,
    identity_field,
    invert_field,
    jacobian_determinant,
    modulate,
    nmi,
    register_affine,
    register_nonlinear,
    register_rigid,
    transform_volume,
    warp_tissue_maps,
)
from .atlasgmm import (
    Atlas,
    CT_PROFILE,
    EmResult,
    GmmModel,
    MR_PROFILE,
    ModalityProfile,
    SegmentOpts,
    SegmentationResult,
    em_fit,
    get_profile,
    init_gmm,
    intracranial_mask,
    segment,
)
from .volumetry import VolumeReport, brain_volumes, tissue_volume
from .predict import (
    CvResult,
    FeatureVector,
    KernelMatrix,
    balanced_accuracy,
    build_features,
    center_kernel_fold,
    gp_classify,
    kfold_cv,
    linear_kernel,
    roc_auc,
    roc_points,
)
from .phantom import (
    CohortVariation,
    PhantomSpec,
    PhantomSubject,
    analytic_volumes_ml,
    make_atlas,
    make_cohort,
    make_phantom,
)
