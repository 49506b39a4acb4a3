"""Model-based monitoring of stochastic textured surfaces.

Learn the in-control texture of greyscale images with a regression tree
over causal pixel neighborhoods, then watch new images for local
departures using spatial moving statistics on the residuals.
"""

from .baselines import epwma_sms, epwmv_sms
from .errors import (
    ConfigMismatchError,
    DataError,
    TexspcError,
)
from .image import (
    build_training_matrix,
    extract_neighborhood,
    load_image,
    neighborhood_offsets,
    neighborhood_size,
    save_image_png,
    standardize,
)
from .monitor import (
    CalibrationBundle,
    MonitorReport,
    calibrate,
    diagnostic_image,
    load_bundle,
    monitor_image,
    save_bundle,
)
from .refcdf import ReferenceCdf, fit_reference_cdf
from .simulate import DefectSpec, SarParams, generate_sar, inject_defect, make_image, to_greyscale
from .sms import (
    SmsConfig,
    SmsImage,
    ad_sms,
    bp_sms,
    epanechnikov,
    image_statistic,
    kernel_matrix,
)
from .tree import (
    FitConfig,
    RegressionTree,
    fit_tree,
    load_tree,
    residual_image,
    save_tree,
    select_neighborhood,
)

__version__ = "1.0"
