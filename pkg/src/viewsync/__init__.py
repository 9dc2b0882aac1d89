"""viewsync: single-frame synchronization of unsynchronized multi-camera views,
embedded in a multi-view crowd-counting pipeline, with a synthetic scene
simulator and evaluation harness.
"""

from .geometry import (CameraModel, EpipolarMask, FundamentalMatrix,
                       GeometryError, ProjectionGrid, ScenePlaneGrid,
                       build_epipolar_mask, build_projection_grid,
                       fundamental_from_cameras, look_at_camera,
                       project_features)
from .losses import (LossConfig, LossError, similarity_loss, task_loss,
                     total_loss, warping_loss)
from .nets import (ConvBlockSpec, ConvLayerSpec, Decoder, FeatureExtractor,
                   MotionEstimator, resize_flow, upsample_flow)
from .pipeline import (CrowdCounter, ModelConfig, PipelineError,
                       SyncCountingModel, TrainConfig, TrainingDiverged,
                       assemble_model, count_metrics, evaluate, predict, train,
                       train_basesu)
from .simulate import (AgentTrack, Dataset, DatasetError, DensityMap,
                       DesyncSchedule, SimConfig, default_cameras,
                       export_dataset, generate_dataset, ingest_dataset,
                       make_desync_schedule, render_camera_view,
                       render_scene_density, simulate_agents)
from .sync import (CorrelationVolume, SyncError, apply_epipolar_weights,
                   cls_sync, match_concat, match_correlation, multiscale_flow,
                   residual_correlation_inputs, sls_sync, warp)

__version__ = "0.1.0"
