"""Explicit Gaussian scene representation and parameter algebra.

A scene is a flat, ordered collection of anisotropic 3D Gaussians stored
as struct-of-arrays. The list order is the canonical identity of a
Gaussian within a run: densification appends, pruning compacts and emits
an explicit index remap to the caller.

Per-Gaussian parameters are kept in unconstrained form (log-scales,
opacity logit, free quaternion renormalized by the optimizer) so that
gradient updates never need projection steps. Covariance is always the
factored form R * diag(exp(2*log_scale)) * R^T and therefore symmetric
positive definite by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation

PARAM_GROUPS = ("position", "log_scale", "rotation", "opacity_logit", "color")


def sigmoid(x):
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Return q / |q|. Accepts (4,) or (N, 4)."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    return q / norm


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from wxyz quaternions.

    Accepts (4,) or (N, 4); the input is normalized before use, so a
    quaternion that drifted slightly off unit norm still yields a proper
    rotation. Returns (3, 3) or (N, 3, 3).
    """
    single = np.asarray(q).ndim == 1
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    q = quat_normalize(q)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3), dtype=np.float64)
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R[0] if single else R


@dataclass
class GaussianParams:
    """Optimizable parameters of a single Gaussian.

    position is the world-space center; log_scale holds the log of the
    per-axis standard deviations; rotation is a wxyz unit quaternion;
    sigmoid(opacity_logit) is the opacity in (0, 1); color is flat RGB
    (degree-0 appearance, no view dependence).
    """

    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    color: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)
        self.opacity_logit = float(self.opacity_logit)

    @property
    def opacity(self) -> float:
        return float(sigmoid(np.array([self.opacity_logit]))[0])


@dataclass
class GaussianAux:
    """Non-optimized per-Gaussian bookkeeping.

    label marks the Gaussian as editable; backproj_weight keeps the
    aggregated back-projection score that produced the label; generation
    is the anchor-generation index at which this Gaussian was created.
    """

    label: bool = False
    backproj_weight: float = 0.0
    generation: int = 0


def covariance(params: GaussianParams) -> np.ndarray:
    """3x3 world-space covariance R diag(exp(2*log_scale)) R^T.

    Symmetric positive definite for any finite inputs; the quaternion is
    normalized internally.
    """
    R = quat_to_rotmat(params.rotation)
    S2 = np.diag(np.exp(2.0 * params.log_scale))
    cov = R @ S2 @ R.T
    return 0.5 * (cov + cov.T)


class GaussianScene:
    """Ordered set of Gaussians with struct-of-arrays storage.

    Single-writer: mutation happens only between render passes. Arrays are
    float64 in memory; the PLY interchange format is float32.
    """

    def __init__(self, positions=None, log_scales=None, rotations=None,
                 opacity_logits=None, colors=None, labels=None,
                 backproj_weights=None, generations=None,
                 current_generation: int = 0):
        n = 0 if positions is None else len(positions)

        def arr(a, shape, dtype=np.float64, fill=0.0):
            if a is None:
                return np.full(shape, fill, dtype=dtype)
            out = np.array(a, dtype=dtype).reshape(shape)
            return out

        self.positions = arr(positions, (n, 3))
        self.log_scales = arr(log_scales, (n, 3))
        self.rotations = arr(rotations, (n, 4)) if rotations is not None else \
            np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (n, 1))
        self.opacity_logits = arr(opacity_logits, (n,))
        self.colors = arr(colors, (n, 3))
        self.labels = arr(labels, (n,), dtype=bool, fill=False)
        self.backproj_weights = arr(backproj_weights, (n,))
        self.generations = arr(generations, (n,), dtype=np.int64, fill=0)
        self.current_generation = int(current_generation)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @classmethod
    def empty(cls) -> "GaussianScene":
        return cls()

    @classmethod
    def from_gaussians(cls, gaussians) -> "GaussianScene":
        """Build a scene from an iterable of (GaussianParams, GaussianAux)."""
        gaussians = list(gaussians)
        scene = cls(
            positions=[g.position for g, _ in gaussians],
            log_scales=[g.log_scale for g, _ in gaussians],
            rotations=[g.rotation for g, _ in gaussians],
            opacity_logits=[g.opacity_logit for g, _ in gaussians],
            colors=[g.color for g, _ in gaussians],
            labels=[a.label for _, a in gaussians],
            backproj_weights=[a.backproj_weight for _, a in gaussians],
            generations=[a.generation for _, a in gaussians],
        ) if gaussians else cls()
        return scene

    def params_at(self, i: int) -> GaussianParams:
        return GaussianParams(
            position=self.positions[i].copy(),
            log_scale=self.log_scales[i].copy(),
            rotation=self.rotations[i].copy(),
            opacity_logit=float(self.opacity_logits[i]),
            color=self.colors[i].copy(),
        )

    def aux_at(self, i: int) -> GaussianAux:
        return GaussianAux(
            label=bool(self.labels[i]),
            backproj_weight=float(self.backproj_weights[i]),
            generation=int(self.generations[i]),
        )

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned bounding box of the centers (lo, hi)."""
        if len(self) == 0:
            zero = np.zeros(3)
            return zero, zero.copy()
        return self.positions.min(axis=0), self.positions.max(axis=0)

    @property
    def extent(self) -> float:
        """Diagonal length of the bounding box."""
        lo, hi = self.bounds
        return float(np.linalg.norm(hi - lo))

    def copy(self) -> "GaussianScene":
        return GaussianScene(
            positions=self.positions.copy(),
            log_scales=self.log_scales.copy(),
            rotations=self.rotations.copy(),
            opacity_logits=self.opacity_logits.copy(),
            colors=self.colors.copy(),
            labels=self.labels.copy(),
            backproj_weights=self.backproj_weights.copy(),
            generations=self.generations.copy(),
            current_generation=self.current_generation,
        )

    def append(self, params: GaussianParams, aux: GaussianAux) -> int:
        """Append one Gaussian; returns its index."""
        self.positions = np.vstack([self.positions, params.position[None]])
        self.log_scales = np.vstack([self.log_scales, params.log_scale[None]])
        self.rotations = np.vstack([self.rotations, params.rotation[None]])
        self.opacity_logits = np.append(self.opacity_logits, params.opacity_logit)
        self.colors = np.vstack([self.colors, params.color[None]])
        self.labels = np.append(self.labels, aux.label)
        self.backproj_weights = np.append(self.backproj_weights, aux.backproj_weight)
        self.generations = np.append(self.generations, aux.generation)
        return len(self) - 1

    def restructure(self, keep: np.ndarray, newborn: "GaussianScene | None" = None
                    ) -> np.ndarray:
        """Compact to `keep` (old indices, in order) then append `newborn`.

        Returns the remap: an int array over the new ordering whose entry is
        the old index of that Gaussian, or -1 for appended newborns. Callers
        holding index-keyed state (anchor snapshots, optimizer moments) must
        apply the remap.
        """
        keep = np.asarray(keep, dtype=np.int64)
        for name in ("positions", "log_scales", "rotations", "opacity_logits",
                     "colors", "labels", "backproj_weights", "generations"):
            setattr(self, name, getattr(self, name)[keep])
        n_new = 0
        if newborn is not None and len(newborn) > 0:
            n_new = len(newborn)
            self.positions = np.vstack([self.positions, newborn.positions])
            self.log_scales = np.vstack([self.log_scales, newborn.log_scales])
            self.rotations = np.vstack([self.rotations, newborn.rotations])
            self.opacity_logits = np.concatenate([self.opacity_logits,
                                                  newborn.opacity_logits])
            self.colors = np.vstack([self.colors, newborn.colors])
            self.labels = np.concatenate([self.labels, newborn.labels])
            self.backproj_weights = np.concatenate([self.backproj_weights,
                                                    newborn.backproj_weights])
            self.generations = np.concatenate([self.generations,
                                               newborn.generations])
        return np.concatenate([keep, np.full(n_new, -1, dtype=np.int64)])

    def covariances(self) -> np.ndarray:
        """(N, 3, 3) world covariances, SPD by construction."""
        R = quat_to_rotmat(self.rotations)
        S2 = np.exp(2.0 * self.log_scales)
        return np.einsum("nij,nj,nkj->nik", R, S2, R)

    def validate(self) -> None:
        """Check the type invariants; raises ContractViolation on breakage."""
        if len(self) == 0:
            return
        norms = np.linalg.norm(self.rotations, axis=1)
        if not np.all(np.abs(norms - 1.0) < 1e-6):
            raise ContractViolation("rotation quaternions drifted off unit norm")
        for name in ("positions", "log_scales", "rotations", "opacity_logits",
                     "colors"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ContractViolation(f"non-finite values in {name}")


@dataclass
class AnchorSnapshot:
    """A saved parameter generation consumed by the anchor pull.

    index_map maps current Gaussian indices to rows of the saved arrays;
    -1 marks Gaussians created after the snapshot, which contribute zero
    to this generation's term.
    """

    generation: int
    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    index_map: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))

    def apply_remap(self, remap: np.ndarray) -> None:
        """Rewrite index_map after the scene was restructured.

        remap[j] is the old index of new Gaussian j, or -1 for newborns.
        """
        remap = np.asarray(remap, dtype=np.int64)
        new_map = np.full(remap.shape[0], -1, dtype=np.int64)
        alive = remap >= 0
        new_map[alive] = self.index_map[remap[alive]]
        self.index_map = new_map


def snapshot_anchor(scene: GaussianScene) -> AnchorSnapshot:
    """Deep-copy the scene parameters as a new anchor generation.

    Increments the scene's generation counter, so Gaussians created later
    carry a higher generation index and stay out of this snapshot.
    """
    snap = AnchorSnapshot(
        generation=scene.current_generation,
        positions=scene.positions.copy(),
        log_scales=scene.log_scales.copy(),
        rotations=scene.rotations.copy(),
        opacity_logits=scene.opacity_logits.copy(),
        colors=scene.colors.copy(),
        index_map=np.arange(len(scene), dtype=np.int64),
    )
    scene.current_generation += 1
    return snap
