"""Unsupervised coarse-to-fine stereo matching with census cost volumes and error prediction."""
__version__ = "0.1.0"

from .cbem import (CBEMClassifier, build_features, calibration_report, loss_self_sup, lr_error, make_labels,
                   predict_uscore, reliability_mask, self_supervised_finetune)
from .cost_volume import (CostVolume, HypothesisRange, aggregate_costs, build_cost_volume, census_transform,
                          next_range, soft_regress)
from .exceptions import (DimensionMismatchError, DivergenceError, ImageReadError, InvalidInputError, ManifestError,
                         SingleClassError, StereoError, UnsupportedBitDepthError)
from .gradcheck import finite_diff_check
from .imaging import (build_pyramid, load_image, read_pfm, save_png, upsample_field, warp_with_disparity,
                      write_pfm)
from .losses import (LossReport, LossWeights, detect_occlusion, loss_ap, loss_census, loss_smooth,
                     total_unsup_loss)
from .metrics import MetricReport, d1, epe, error_map, evaluate
from .refine import CascadeStereo, RefineConfig, RefineResult, cascade_refine, init_coarse, refine_level
from .synth import SceneSpec, SyntheticScene, generate_scene, read_manifest, scene_manifest
