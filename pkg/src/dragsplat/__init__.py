"""Drag-based editing for 3D Gaussian splatting scenes."""

from .cameras import Camera, load_cameras, project_gaussian, project_point, save_cameras
from .config import EditParams, EditSpec, load_spec, spec_from_json, spec_to_json
from .engine import EditRun, build_soft_group, run_edit, select_mask_frustum, start_round
from .guidance import (DiffusionSchedule, GuidanceRequest, GuidanceResponse,
                       LatentCodec, SourceEstimator, SyntheticOracle,
                       add_noise, cfg_scale, composite_noise,
                       denoised_estimate, drag_sds_losses, timestep_schedule)
from .render import RenderOutput, dilate_mask, render, render_backward, render_mask
from .scene import (GaussianPrimitive, GaussianScene, MirroredScene, load_scene,
                    make_scene, mark_new_primitives_masked, mirror, partition,
                    save_scene)
from .triplane import TriplaneDeformation, deform_scene, region_reg_loss

__version__ = "0.1.0"
