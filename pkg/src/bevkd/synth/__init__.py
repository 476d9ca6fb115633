from .scene import WorldConfig, Scene, generate_scene, make_rig, footprints_overlap
from .lidar import simulate_lidar, simulate_radar, ray_box_intersect
from .render import CameraFrameGT, render_cameras
from .depth import project_depth_gt

__all__ = [
    "WorldConfig", "Scene", "generate_scene", "make_rig", "footprints_overlap",
    "simulate_lidar", "simulate_radar", "ray_box_intersect",
    "CameraFrameGT", "render_cameras", "project_depth_gt",
]
