"""Region-localized text-driven editing of 3D Gaussian splat scenes."""

from .camera import Camera, load_cameras, look_at, save_cameras
from .errors import (ConfigError, ContractViolation, DataError, GsplatError,
                     LocalizationError, NumericAbort, ParseError,
                     ProtocolError, TransportError)
from .guidance import (GuidanceRequest, GuidanceResponse, NoiseSchedule,
                       OracleProvider, WireProvider, oracle_guidance,
                       remote_guidance, sds_gradient, sds_loss_value)
from .images import ImageBuffer, load_image, read_pfm, save_image, write_pfm, \
    write_png
from .localize import (AttentionMap, LocalizationMode, LocalizeParams,
                       MaskBuffer, OracleSegmenter, PointPrompts,
                       SegmentationProvider, backproject_labels,
                       build_view_mask, cluster_dbscan, decide_mode,
                       filter_attention, relocalize, select_point_prompts)
from .optimizer import (EditConfig, EditProviders, EditResult, TrainState,
                        anchor_loss, densify_and_prune, gate_gradients,
                        run_edit)
from .ply import load_scene, save_scene
from .preserve import (LossReport, LossWeights, compose_pseudo_gt,
                       preservation_loss, total_loss)
from .providers import WireSegmenter
from .rasterizer import (ParamGradients, RenderOutput, Splat2D,
                         contribution_weights, project, rasterize,
                         rasterize_backward, render_view, visible_mass)
from .scene import (AnchorSnapshot, GaussianAux, GaussianParams,
                    GaussianScene, covariance, snapshot_anchor)

__version__ = "0.1.0"
