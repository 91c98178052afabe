"""Glue shared by the command line and the demos: dataset I/O and batch steps."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from .database import DescriptorDatabase, SubmapRecord
from .formats import read_labels, read_pcd, read_trajectory, write_pcd, write_trajectory
from .geometry import Trajectory
from .model import DescriptorNet, LearnedBackend
from .projection import ProjectionParams, project
from .spectral import SpectralBackend
from .world import (LabeledSample, LidarModel, WorldSpec, build_map, export_dataset,
                    generate_dataset, generate_world, sample_poses)

log = logging.getLogger(__name__)


def make_backend(name: str, checkpoint=None):
    if name == "spectral":
        return SpectralBackend()
    if name == "learned":
        if checkpoint is None:
            raise ValueError("the learned backend needs a checkpoint")
        return LearnedBackend(DescriptorNet.load(checkpoint))
    raise ValueError(f"unknown backend {name!r}")


def describe_submaps(submaps, backend, params: ProjectionParams) -> list[SubmapRecord]:
    """Descriptor record per submap; the learned backend also stores a class."""
    out = []
    for s in submaps:
        d = backend.describe(project(s.cloud, params))
        label = int(np.argmax(backend.classify(d.q))) if backend.can_classify else None
        out.append(SubmapRecord(s.index, s.origin, d.q, d.w, label, s))
    return out


def build_database(submaps, backend, params: ProjectionParams) -> DescriptorDatabase:
    return DescriptorDatabase(describe_submaps(submaps, backend, params))


def scan_paths(directory) -> list[Path]:
    """Numbered ``.pcd`` files of a scan directory in index order."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"scan directory {d} does not exist")
    return sorted(d.glob("*.pcd"))


def load_dataset(directory) -> list[LabeledSample]:
    """Read ``scans/``, ``trajectory.tum`` and ``labels.csv`` from a dataset directory."""
    d = Path(directory)
    paths = scan_paths(d / "scans")
    if not paths:
        raise ValueError(f"dataset {d} contains no scans")
    traj = read_trajectory(d / "trajectory.tum")
    labels = read_labels(d / "labels.csv")
    if not len(paths) == len(traj) == len(labels):
        raise ValueError(f"dataset {d}: {len(paths)} scans, {len(traj)} poses, "
                         f"{len(labels)} labels")
    return [LabeledSample(read_pcd(p), e.pose, lab) for p, e, lab in zip(paths, traj, labels)]


def simulate(out_dir, spec: WorldSpec, seed: int) -> dict:
    """World, prebuilt map, map trajectory and a labeled query dataset.

    Layout: ``map.pcd``, ``map_trajectory.tum``, ``world.json`` and
    ``dataset/`` (see ``export_dataset``). The query set is sampled at
    ``query_offset`` into each corridor so it falls between map poses.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    world = generate_world(seed, spec.segments, roughness=spec.roughness)
    clean = LidarModel()
    noisy = LidarModel(noise_sigma=spec.noise_sigma, dropout=spec.dropout)
    map_poses = sample_poses(world, spec.map_spacing)
    cloud = build_map(world, map_poses, clean, seed, spec.voxel)
    write_pcd(cloud, out / "map.pcd")
    write_trajectory(Trajectory.from_poses(map_poses, [float(i) for i in range(len(map_poses))]),
                     out / "map_trajectory.tum")
    samples = generate_dataset(world, spec.query_spacing, noisy, seed + 1, spec.query_offset,
                               spec.heading_jitter)
    export_dataset(samples, out / "dataset")
    summary = {
        "seed": seed, "nodes": len(world.nodes), "edges": len(world.edges),
        "junctions": len(world.junctions), "length_m": world.total_length(),
        "map_points": len(cloud), "map_poses": len(map_poses), "queries": len(samples),
        "spec": spec.__dict__,
    }
    (out / "world.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
