"""Camera-radar fusion for BEV segmentation: library and CLI.

The pipeline lifts multi-camera image features into a bird's-eye-view grid
with radar-guided deformable attention, fuses them with an encoded radar
point cloud in the BEV plane, and predicts multi-label segmentation masks
(vehicles plus seven map classes).  See the README for the CLI and the
module docstrings for the individual stages.
"""

from .attention import DeformableAttention, DeformableAttentionConfig, TransformerBlock
from .backbone import (PYRAMID_STRIDES, FeaturePyramid, ResidualBackbone,
                       build_backbone, encode_images, register_backbone)
from .checkpoint import CheckpointData, load_checkpoint, load_model, save_checkpoint
from .config import (RunConfig, apply_overrides, config_from_dict, config_hash,
                     config_to_dict, load_config, save_config)
from .data import (BevGroundTruth, Sample, list_tokens, load_sample, load_split,
                   prefetch_samples, save_sample, save_split)
from .errors import (CheckpointError, ConfigurationError, DatasetError,
                     GenerationError, TrainingError)
from .fusion import BevEncoder, BevFusion
from .geometry import (BevGrid, CameraModel, CameraRig, assign_cameras,
                       cell_centers_2d, default_rig, make_camera, project_points,
                       splat_image_features, voxel_centers)
from .heads import (CLASS_ORDER, MAP_CLASSES, NUM_CLASSES, VEHICLE_CLASS,
                    LossConfig, SegmentationHead, bce_loss, focal_loss, total_loss)
from .lifting import QueryInitializer, ViewLifting, compose_queries
from .metrics import (CONDITIONS, DEFAULT_RANGE_BANDS, ConditionSplit,
                      IoUAccumulator, measure_runtime, range_masks, round_percent,
                      summarize)
from .model import BevCarNet, GeometryCache, batch_from_samples, build_geometry_cache
from .radar import (RADAR_ATTRS, RadarEncoder, RadarPointCloud, VoxelizedRadar,
                    load_radar_csv, save_radar_csv, voxelize_radar)
from .report import render_bev, render_error_map, save_png, write_eval_report
from .synth import (SceneParams, SyntheticScene, VehicleBox, generate_dataset,
                    generate_sample, generate_scene)
from .train import evaluate_model, predict_masks, run_training

__version__ = "0.1.0"
