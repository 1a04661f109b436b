"""Per-frame geometric evaluation against depth clouds."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .mesh import FrameScore, TriangleMesh, camera_mesh, score_frame
from .proxy import ProxyBasis, ProxyParams, proxy_vertices


@dataclass
class SequenceReport:
    frames: list

    @property
    def mean(self) -> float:
        return float(np.mean([f.chamfer for f in self.frames]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("frame", "chamfer", "chamfer_unaligned", "scale"))
            for f in self.frames:
                w.writerow((f.frame, f"{f.chamfer:.9g}", f"{f.chamfer_unaligned:.9g}",
                            f"{f.scale:.9g}"))
            w.writerow(("mean", f"{self.mean:.9g}", "", ""))


def evaluate_meshes(meshes_cam: list, dataset, count: int = 10_000, seed: int = 0) -> SequenceReport:
    """Score camera-space meshes, one per dataset frame, against the depth maps."""
    if len(meshes_cam) != len(dataset.frames):
        raise ValueError("need one mesh per frame")
    scores = []
    for j, (mesh, fr) in enumerate(zip(meshes_cam, dataset.frames)):
        if fr.depth is None:
            raise ValueError(f"frame {j} has no depth map")
        scores.append(score_frame(mesh, fr.depth, fr.mask, fr.intrinsics, j, count, seed + j))
    return SequenceReport(scores)


def proxy_meshes(basis: ProxyBasis, params: ProxyParams) -> list:
    """Fitted proxy surfaces in the camera space of each frame."""
    return [camera_mesh(TriangleMesh(proxy_vertices(params, basis, j), basis.faces), params.pose(j))
            for j in range(params.n_frames)]


def evaluate_checkpoint(ckpt, dataset, count: int = 10_000, seed: int = 0,
                        resolution: int | None = None) -> SequenceReport:
    from .trainer import extract_frame_mesh
    field_ = ckpt.build_field()
    meshes = [extract_frame_mesh(ckpt, j, field_, resolution) for j in range(len(dataset.frames))]
    return evaluate_meshes(meshes, dataset, count, seed)
