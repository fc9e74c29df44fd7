"""Differentiable Gaussian-splat compositing with spatially variant mask sparsification."""

from .errors import (DegenerateSceneError, InternalError, OracleError,
                     ParameterError)
from .gradients import (GradAccumulator, fd_oracle, grad_mask_cumulative,
                        grad_mask_inverse, grad_mask_proposed,
                        verify_mask_gradients)
from .harness import (SyntheticScene, TrainConfig, ablate_forwards,
                      generate_scene, sweep, train)
from .losses import (LossReport, global_mask_loss, psnr, rgb_loss,
                     spatial_mask_loss, ssim, total_loss)
from .model import (Gaussian3D, MaskSample, Scene, activate, read_scene,
                    sample_mask, sample_masks, write_scene)
from .projection import (Camera, Splat2D, eval_alpha, project_gaussian,
                         project_scene, read_cameras, write_cameras)
from .rasterizer import (Fragments, RenderOptions, RenderOutputs, build_fragments,
                         composite_rgb, render, render_mask_cumulative,
                         render_mask_inverse, render_mask_proposed)
from .schedule import Action, ScheduleConfig, actions_at, densify, prune

__version__ = "0.1.0"
