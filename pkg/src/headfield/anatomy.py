"""Analytic description of the synthetic head family.

Both the ground-truth scene generator and the synthetic blendshape basis are
built from these definitions, so the proxy can represent the scene exactly
everywhere except under the hair cap, which no basis column models.

Head frame: the face looks down -z and the top of the head points to -y, so
an identity camera at ``t = (0, 0, d)`` sees the face upright.

Semantic classes (0-based): 0 face, 1 hair, 2 feature patch, 3 other head.
Label images store ``class + 1`` and 0 for background.
"""
from __future__ import annotations

import numpy as np

CLASS_NAMES = ("face", "hair", "feature", "other")
N_CLASSES = len(CLASS_NAMES)
FACE, HAIR, FEATURE, OTHER = range(4)

_HAIR_AXIS = np.array([0.0, -0.75, 0.66])
_HAIR_COS = np.cos(np.radians(58.0))
_FACE_AXIS = np.array([0.0, 0.05, -1.0])
_FACE_COS = np.cos(np.radians(52.0))
_FEATURE_CENTERS = np.array([[0.34, -0.28, -0.9], [-0.34, -0.28, -0.9], [0.0, 0.42, -0.9]])
_FEATURE_COS = np.cos(np.radians(13.0))
_SOFTNESS = 0.03


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def region_weights(directions: np.ndarray) -> np.ndarray:
    """Soft class memberships ``(n, 4)`` of unit directions from the head centre."""
    d = _unit(directions)
    hair = _sigmoid((d @ _unit(_HAIR_AXIS) - _HAIR_COS) / _SOFTNESS)
    feat_score = np.max(d @ _unit(_FEATURE_CENTERS).T, axis=-1)
    feat = _sigmoid((feat_score - _FEATURE_COS) / _SOFTNESS)
    face = _sigmoid((d @ _unit(_FACE_AXIS) - _FACE_COS) / _SOFTNESS)
    w = np.empty(d.shape[:-1] + (4,))
    w[..., HAIR] = hair
    w[..., FEATURE] = (1 - hair) * feat
    w[..., FACE] = (1 - hair) * (1 - feat) * face
    w[..., OTHER] = (1 - hair) * (1 - feat) * (1 - face)
    return w


def region_labels(directions: np.ndarray) -> np.ndarray:
    return np.argmax(region_weights(directions), axis=-1)


# Localised expression fields: (centre direction(s), angular width, amplitude).
# The first two drive the synthetic scene; all eight span the proxy's
# expression basis.
EXPRESSION_FIELDS = (
    ([[0.0, 0.55, -0.83]], 0.30, 0.12),                        # jaw drop
    ([[0.55, 0.12, -0.83], [-0.55, 0.12, -0.83]], 0.25, 0.10),  # cheek puff
    ([[0.35, -0.5, -0.79], [-0.35, -0.5, -0.79]], 0.20, 0.06),  # brow raise
    ([[0.0, 0.0, -1.0]], 0.20, 0.06),                           # nose
    ([[0.0, 0.35, -0.94]], 0.15, 0.05),                         # lips
    ([[0.0, -0.7, -0.71]], 0.30, 0.06),                         # forehead
    ([[0.45, 0.45, -0.77]], 0.22, 0.05),                        # left mouth corner
    ([[-0.45, 0.45, -0.77]], 0.22, 0.05),                       # right mouth corner
)
N_SCENE_EXPRESSIONS = 2


def expression_bump(directions: np.ndarray, k: int) -> np.ndarray:
    """Scalar bump profile (peak 1) of expression field ``k`` over unit directions."""
    centers, width, _ = EXPRESSION_FIELDS[k]
    d = _unit(directions)
    out = np.zeros(d.shape[:-1])
    for c in _unit(centers):
        chord2 = np.sum((d - c) ** 2, -1)
        out += np.exp(-chord2 / (2.0 * width ** 2))
    return out


def expression_displacement(directions: np.ndarray, code) -> np.ndarray:
    """Radial displacement of the unit sphere for the first ``len(code)`` fields."""
    disp = np.zeros(np.shape(directions)[:-1])
    for k, c in enumerate(np.asarray(code, dtype=np.float64)):
        disp += c * EXPRESSION_FIELDS[k][2] * expression_bump(directions, k)
    return disp


LANDMARK_DIRECTIONS = _unit(np.array([
    [0.36, -0.45, -0.82], [-0.36, -0.45, -0.82],    # brows
    [0.50, -0.22, -0.84], [-0.50, -0.22, -0.84],    # outer eye corners
    [0.0, 0.02, -1.0],                              # nose tip
    [0.30, 0.42, -0.86], [-0.30, 0.42, -0.86],      # mouth corners
    [0.0, 0.72, -0.69],                             # chin
    [0.65, 0.15, -0.74], [-0.65, 0.15, -0.74],      # cheeks
    [0.97, 0.10, 0.20], [-0.97, 0.10, 0.20],        # ears
    [0.75, 0.55, -0.35], [-0.75, 0.55, -0.35],      # jaw angles
    [0.60, 0.55, 0.58], [-0.60, 0.55, 0.58],        # nape
]))

# Albedo population: per-class base colour plus four latent colour factors.
BASE_ALBEDO = np.array([
    [0.78, 0.58, 0.48],   # face
    [0.30, 0.21, 0.15],   # hair
    [0.66, 0.38, 0.36],   # feature
    [0.72, 0.54, 0.45],   # other
])
_SKIN = np.array([1.0, 0.0, 1.0, 1.0])
_HAIR = np.array([0.0, 1.0, 0.0, 0.0])
ALBEDO_FACTORS = np.stack([
    _SKIN[:, None] * [0.08, 0.07, 0.06],    # skin lightness
    _SKIN[:, None] * [0.04, -0.015, -0.025],  # skin redness
    _HAIR[:, None] * [0.10, 0.08, 0.06],    # hair lightness
    _HAIR[:, None] * [0.05, 0.0, -0.03],    # hair warmth
])  # (4 factors, 4 classes, 3 channels)


def class_albedo(factors) -> np.ndarray:
    """Per-class RGB albedo ``(4, 3)`` for latent colour factors ``(4,)``."""
    f = np.asarray(factors, dtype=np.float64)
    return BASE_ALBEDO + np.tensordot(f, ALBEDO_FACTORS, axes=1)


def albedo_at(directions: np.ndarray, factors) -> np.ndarray:
    return np.clip(region_weights(directions) @ class_albedo(factors), 0.0, 1.0)
