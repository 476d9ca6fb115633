"""Dataset records and parameter checkpoints.

Both use the same container: an uncompressed ``.npz`` holding named
little-endian float32 arrays plus a ``__meta__`` entry with a JSON header
(array shapes and dtypes, seed, config hash, free-form fields). Records live
one per scene in a split directory next to a ``manifest.json``.
"""

from __future__ import annotations

import json
import os

import numpy as np
import torch

from .geom import Box3D, PointCloud
from .synth import (
    WorldConfig,
    generate_scene,
    render_cameras,
    simulate_lidar,
    simulate_radar,
)
from .synth.depth import depth_gt_for_rig


def save_record(path: str, arrays: dict, meta: dict):
    payload = {}
    header = {"fields": {}, **meta}
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        payload[name] = arr
        header["fields"][name] = {"shape": list(arr.shape), "dtype": "<f4"}
    payload["__meta__"] = np.frombuffer(
        json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    np.savez(path, **payload)


def load_record(path: str):
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
    return arrays, meta


def scene_to_arrays(seed: int, config: WorldConfig) -> dict:
    """Generate a scene and flatten everything training needs into arrays."""
    scene = generate_scene(seed, config)
    lidar = simulate_lidar(scene, config)
    radar = simulate_radar(scene, config)
    frames = render_cameras(scene)
    depth = depth_gt_for_rig(lidar, scene.rig, config.pv_shape,
                             config.depth_bins, config.depth_range)
    boxes = (np.stack([b.as_array() for b in scene.boxes])
             if scene.boxes else np.zeros((0, 10)))
    images = np.stack([f.image for f in frames])
    # Per-camera 2D instance GT: rows (cam, cx, cy, w, h, class, box_index).
    rows, masks = [], []
    for cam_i, f in enumerate(frames):
        for box_i, b2d in f.boxes2d.items():
            rows.append([cam_i, *b2d, box_i])
            masks.append(f.masks[box_i])
    boxes2d = np.array(rows) if rows else np.zeros((0, 7))
    mask_stack = (np.stack(masks).astype(np.float32)
                  if masks else np.zeros((0, *config.image_size)))
    return {
        "boxes": boxes,
        "lidar": lidar.points,
        "radar": radar.points,
        "images": images,
        "depth_gt": depth,           # (N_cam, H_pv, W_pv, D) one-hot
        "boxes2d": boxes2d,
        "masks2d": mask_stack,
    }


class SceneRecord:
    """In-memory view of one serialized scene."""

    def __init__(self, arrays: dict, meta: dict):
        self.seed = int(meta["seed"])
        self.boxes = [Box3D.from_array(r)
                      for r in np.asarray(arrays["boxes"], dtype=np.float64)]
        self.lidar = PointCloud(np.asarray(arrays["lidar"], np.float64))
        self.radar = PointCloud(np.asarray(arrays["radar"], np.float64))
        self.images = torch.as_tensor(
            arrays["images"], dtype=torch.float32).permute(0, 3, 1, 2)
        self.depth_gt = torch.as_tensor(
            arrays["depth_gt"], dtype=torch.float32).permute(0, 3, 1, 2)
        self.boxes2d = np.asarray(arrays["boxes2d"], dtype=np.float64)
        self.masks2d = np.asarray(arrays["masks2d"], dtype=np.float64)

    def instance_gt(self, cam_i: int):
        """(boxes4 (M, 4), class_ids (M,), full-res masks (M, H, W)) for one
        camera."""
        idx = np.nonzero(self.boxes2d[:, 0] == cam_i)[0]
        if idx.size == 0:
            return np.zeros((0, 4)), np.zeros(0, np.int64), np.zeros((0, 1, 1))
        rows = self.boxes2d[idx]
        return (rows[:, 1:5], rows[:, 5].astype(np.int64),
                self.masks2d[idx] > 0.5)


def generate_dataset(directory: str, config: WorldConfig, n_scenes: int,
                     seed_offset: int, config_digest: str):
    """Write one record per scene plus a manifest; idempotent per digest."""
    os.makedirs(directory, exist_ok=True)
    manifest_path = os.path.join(directory, "manifest.json")
    if os.path.exists(manifest_path):
        with open(manifest_path) as fh:
            manifest = json.load(fh)
        if (manifest["config_hash"] == config_digest
                and manifest["n_scenes"] == n_scenes):
            return
    for i in range(n_scenes):
        seed = seed_offset + i
        arrays = scene_to_arrays(seed, config)
        save_record(os.path.join(directory, f"scene_{i:05d}.npz"), arrays,
                    {"seed": seed, "config_hash": config_digest})
    with open(manifest_path, "w") as fh:
        json.dump({"config_hash": config_digest, "n_scenes": n_scenes,
                   "seed_offset": seed_offset}, fh)


def load_dataset(directory: str) -> list:
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    records = []
    for i in range(manifest["n_scenes"]):
        arrays, meta = load_record(
            os.path.join(directory, f"scene_{i:05d}.npz"))
        records.append(SceneRecord(arrays, meta))
    return records


def save_checkpoint(path: str, module: torch.nn.Module, meta: dict,
                    optimizer: torch.optim.Optimizer | None = None):
    """Flat named-array checkpoint; optimizer moments ride along for resume."""
    arrays = {f"model/{k}": v.detach().cpu().numpy()
              for k, v in module.state_dict().items()}
    if optimizer is not None:
        params = optimizer.param_groups[0]["params"]
        for i, p in enumerate(params):
            state = optimizer.state.get(p, {})
            for key in ("exp_avg", "exp_avg_sq"):
                if key in state:
                    arrays[f"opt/{i}/{key}"] = state[key].detach().numpy()
            if "step" in state:
                step = state["step"]
                arrays[f"opt/{i}/step"] = np.array(
                    [float(step) if not torch.is_tensor(step) else float(step)])
    save_record(path, arrays, meta)


def load_checkpoint(path: str, module: torch.nn.Module,
                    optimizer: torch.optim.Optimizer | None = None) -> dict:
    arrays, meta = load_record(path)
    state = {k[len("model/"):]: torch.as_tensor(v)
             for k, v in arrays.items() if k.startswith("model/")}
    own = module.state_dict()
    for name, tensor in own.items():
        if name not in state:
            raise ValueError(f"missing tensor in checkpoint: {name}")
        if tuple(state[name].shape) != tuple(tensor.shape):
            raise ValueError(
                f"shape mismatch for {name}: "
                f"{tuple(state[name].shape)} vs {tuple(tensor.shape)}")
    module.load_state_dict(state)
    if optimizer is not None:
        params = optimizer.param_groups[0]["params"]
        for i, p in enumerate(params):
            entry = {}
            for key in ("exp_avg", "exp_avg_sq"):
                name = f"opt/{i}/{key}"
                if name in arrays:
                    entry[key] = torch.as_tensor(arrays[name])
            name = f"opt/{i}/step"
            if name in arrays:
                entry["step"] = torch.tensor(float(arrays[name][0]))
            if entry:
                optimizer.state[p] = entry
    return meta
