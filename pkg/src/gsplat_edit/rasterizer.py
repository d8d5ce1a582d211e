"""Differentiable splatting: projection, front-to-back compositing, and
analytic gradients for every Gaussian parameter group.

Forward model per pixel: splats arrive depth-sorted; each contributes
sigma_i = alpha_i * exp(-0.5 * d^T cov2d^{-1} d), clamped to [0, 0.999],
and the pixel color accumulates c_i * sigma_i * T with T *= (1 - sigma_i),
stopping once T drops below 1e-4. The background is black; the leftover
transmittance is reported separately so callers can composite anything.

Everything runs in float64. The per-splat raster footprint extends to
FOOTPRINT_SIGMAS standard deviations, far enough that the truncated tail
(< 1e-14) is invisible to finite-difference gradient checks.

All loops are vectorized per splat over its pixel footprint; the work is
deterministic regardless of thread count because accumulation follows
the fixed depth order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import Camera
from .errors import ContractViolation
from .images import ImageBuffer
from .scene import GaussianScene, quat_normalize, quat_to_rotmat

# Screen-space anti-alias floor added to every projected covariance (px^2).
BLUR_FLOOR = 0.3
# Opacity clamp and transmittance cutoff keep 1/(1-sigma) terms stable.
SIGMA_CLAMP = 0.999
TRANSMITTANCE_EPS = 1e-4
# Raster footprint in standard deviations; exp(-8^2/2) ~ 1.3e-14.
FOOTPRINT_SIGMAS = 8.0
# Culling guard band around the image, in standard deviations.
CULL_GUARD_SIGMAS = 3.0


@dataclass
class Splat2D:
    """A Gaussian's screen-space footprint."""

    mean2d: np.ndarray      # (2,) pixels
    cov2d: np.ndarray       # (2, 2) SPD, pixels^2
    depth: float            # camera-space z
    gaussian_index: int


@dataclass
class SplatContrib:
    """Raster record of one splat: everything backward needs, in order.

    Arrays cover the splat's pixel bounding box [y0:y1, x0:x1].
    sigma holds the composited opacities (zero where the transmittance
    cutoff disabled the pixel); sigma_grad and gauss_grad are the same
    values with clamped pixels zeroed, used as d(sigma)/d(params) and
    d(sigma)/d(alpha) factors.
    """

    splat_pos: int
    gaussian_index: int
    y0: int
    y1: int
    x0: int
    x1: int
    sigma: np.ndarray
    sigma_grad: np.ndarray
    gauss_grad: np.ndarray
    t_before: np.ndarray


@dataclass
class RenderOutput:
    image: ImageBuffer
    final_transmittance: np.ndarray
    contrib_records: list[SplatContrib]
    # Packed splat state reused by the backward pass and weight queries.
    splat_idx: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    splat_mean2d: np.ndarray = field(default_factory=lambda: np.empty((0, 2)))
    splat_conic: np.ndarray = field(default_factory=lambda: np.empty((0, 2, 2)))
    splat_alpha: np.ndarray = field(default_factory=lambda: np.empty(0))
    n_gaussians: int = 0

    def pixel_records(self, row: int, col: int) -> list[tuple[int, float, float]]:
        """Ordered (gaussian_index, sigma, T_before) entries at one pixel."""
        out = []
        for rec in self.contrib_records:
            if rec.y0 <= row < rec.y1 and rec.x0 <= col < rec.x1:
                s = float(rec.sigma[row - rec.y0, col - rec.x0])
                if s > 0.0:
                    t = float(rec.t_before[row - rec.y0, col - rec.x0])
                    out.append((rec.gaussian_index, s, t))
        return out


@dataclass
class ParamGradients:
    """Per-Gaussian loss gradients, aligned with scene indices.

    mean2d carries the screen-space position gradient as well; the
    densification bookkeeping thresholds on its norm.
    """

    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: np.ndarray
    color: np.ndarray
    mean2d: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "ParamGradients":
        return cls(position=np.zeros((n, 3)), log_scale=np.zeros((n, 3)),
                   rotation=np.zeros((n, 4)), opacity_logit=np.zeros(n),
                   color=np.zeros((n, 3)), mean2d=np.zeros((n, 2)))

    def scaled(self, factor: float) -> "ParamGradients":
        return ParamGradients(
            position=self.position * factor, log_scale=self.log_scale * factor,
            rotation=self.rotation * factor,
            opacity_logit=self.opacity_logit * factor,
            color=self.color * factor, mean2d=self.mean2d * factor)

    def add(self, other: "ParamGradients") -> None:
        self.position += other.position
        self.log_scale += other.log_scale
        self.rotation += other.rotation
        self.opacity_logit += other.opacity_logit
        self.color += other.color
        self.mean2d += other.mean2d


def _pinhole_jacobian(camera: Camera, t_cam: np.ndarray) -> np.ndarray:
    """Local affine Jacobian of the perspective projection, (K, 2, 3)."""
    x, y, z = t_cam[:, 0], t_cam[:, 1], t_cam[:, 2]
    J = np.zeros((t_cam.shape[0], 2, 3))
    J[:, 0, 0] = camera.fx / z
    J[:, 0, 2] = -camera.fx * x / z**2
    J[:, 1, 1] = camera.fy / z
    J[:, 1, 2] = -camera.fy * y / z**2
    return J


def _eigmax_2x2(cov: np.ndarray) -> np.ndarray:
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    mid = 0.5 * (a + c)
    return mid + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))


def project(scene: GaussianScene, camera: Camera) -> list[Splat2D]:
    """Project the scene's Gaussians to screen space, depth-sorted.

    Culls Gaussians outside (near, far) and those whose projected mean
    falls outside the image bounds plus a 3-sigma guard band. Depth ties
    break by Gaussian index (stable sort).
    """
    n = len(scene)
    if n == 0:
        return []
    t_cam = camera.to_camera_space(scene.positions)
    z = t_cam[:, 2]
    in_depth = (z > camera.near) & (z < camera.far)
    if not in_depth.any():
        return []
    idx = np.nonzero(in_depth)[0]
    t_cam = t_cam[idx]
    mean2d = camera.project(t_cam)

    R_cw = camera.rotation
    sigma3 = scene.covariances()[idx]
    V = np.einsum("ai,nij,bj->nab", R_cw, sigma3, R_cw)
    J = _pinhole_jacobian(camera, t_cam)
    cov2d = np.einsum("nai,nij,nbj->nab", J, V, J)
    cov2d[:, 0, 0] += BLUR_FLOOR
    cov2d[:, 1, 1] += BLUR_FLOOR

    radius = CULL_GUARD_SIGMAS * np.sqrt(_eigmax_2x2(cov2d))
    on_screen = ((mean2d[:, 0] >= -radius) & (mean2d[:, 0] <= camera.width + radius)
                 & (mean2d[:, 1] >= -radius) & (mean2d[:, 1] <= camera.height + radius))
    idx, t_cam, mean2d, cov2d = (idx[on_screen], t_cam[on_screen],
                                 mean2d[on_screen], cov2d[on_screen])

    order = np.argsort(t_cam[:, 2], kind="stable")
    return [Splat2D(mean2d=mean2d[k].copy(), cov2d=cov2d[k].copy(),
                    depth=float(t_cam[k, 2]), gaussian_index=int(idx[k]))
            for k in order]


def _conic(cov2d: np.ndarray) -> np.ndarray:
    """Closed-form inverse of (K, 2, 2) SPD matrices."""
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.empty_like(cov2d)
    conic[:, 0, 0] = c / det
    conic[:, 0, 1] = -b / det
    conic[:, 1, 0] = -b / det
    conic[:, 1, 1] = a / det
    return conic


def rasterize(splats: list[Splat2D], scene: GaussianScene,
              camera: Camera) -> RenderOutput:
    """Composite depth-sorted splats front to back."""
    h, w = camera.height, camera.width
    image = np.zeros((h, w, 3))
    transmittance = np.ones((h, w))
    records: list[SplatContrib] = []

    k = len(splats)
    if k == 0:
        return RenderOutput(image=ImageBuffer(image),
                            final_transmittance=transmittance,
                            contrib_records=records, n_gaussians=len(scene))

    idx = np.array([s.gaussian_index for s in splats], dtype=np.int64)
    mean2d = np.stack([s.mean2d for s in splats])
    cov2d = np.stack([s.cov2d for s in splats])
    conic = _conic(cov2d)
    alpha = scene.opacities[idx]
    colors = scene.colors[idx]
    radius = FOOTPRINT_SIGMAS * np.sqrt(_eigmax_2x2(cov2d))

    for pos in range(k):
        mx, my = mean2d[pos]
        r = radius[pos]
        x0 = max(0, int(np.floor(mx - r - 0.5)))
        x1 = min(w, int(np.ceil(mx + r - 0.5)) + 1)
        y0 = max(0, int(np.floor(my - r - 0.5)))
        y1 = min(h, int(np.ceil(my + r - 0.5)) + 1)
        if x0 >= x1 or y0 >= y1:
            continue
        t_sub = transmittance[y0:y1, x0:x1]
        active = t_sub >= TRANSMITTANCE_EPS
        if not active.any():
            continue
        dx = (np.arange(x0, x1) + 0.5) - mx
        dy = (np.arange(y0, y1) + 0.5) - my
        A, B, C = conic[pos, 0, 0], conic[pos, 0, 1], conic[pos, 1, 1]
        q = (A * dx**2)[None, :] + (C * dy**2)[:, None] \
            + (2.0 * B) * dy[:, None] * dx[None, :]
        gauss = np.exp(-0.5 * q)
        sigma_raw = alpha[pos] * gauss
        clamped = sigma_raw > SIGMA_CLAMP
        sigma = np.where(clamped, SIGMA_CLAMP, sigma_raw)
        sigma *= active
        if not sigma.any():
            continue
        live = active & ~clamped
        t_before = t_sub.copy()
        image[y0:y1, x0:x1] += colors[pos] * (sigma * t_before)[:, :, None]
        records.append(SplatContrib(
            splat_pos=pos, gaussian_index=int(idx[pos]),
            y0=y0, y1=y1, x0=x0, x1=x1,
            sigma=sigma, sigma_grad=sigma * live, gauss_grad=gauss * live,
            t_before=t_before))
        transmittance[y0:y1, x0:x1] = t_sub * (1.0 - sigma)

    return RenderOutput(image=ImageBuffer(image),
                        final_transmittance=transmittance,
                        contrib_records=records,
                        splat_idx=idx, splat_mean2d=mean2d, splat_conic=conic,
                        splat_alpha=alpha, n_gaussians=len(scene))


def render_view(scene: GaussianScene, camera: Camera) -> RenderOutput:
    """Convenience wrapper: project then rasterize."""
    return rasterize(project(scene, camera), scene, camera)


def rasterize_backward(render: RenderOutput, dL_dImage: ImageBuffer,
                       scene: GaussianScene, camera: Camera) -> ParamGradients:
    """Analytic gradients of the composited image w.r.t. all parameters.

    Walks the contribution records back to front, maintaining the suffix
    color sum each pixel accumulated behind the current splat, then chains
    screen-space gradients through the projection to world parameters.
    Must be called with the same (scene, camera) state that produced
    `render`.
    """
    g = np.asarray(dL_dImage.data, dtype=np.float64)
    if g.shape != (camera.height, camera.width, 3) \
            or g.shape != render.image.data.shape:
        raise ContractViolation(
            f"gradient image shape {g.shape} does not match render "
            f"{render.image.data.shape}")

    n = len(scene)
    grads = ParamGradients.zeros(n)
    k = render.splat_idx.shape[0]
    if k == 0 or not render.contrib_records:
        return grads

    idx = render.splat_idx
    colors = scene.colors[idx]
    conic = render.splat_conic
    alpha = render.splat_alpha
    mean2d = render.splat_mean2d

    d_color = np.zeros((k, 3))
    d_alpha = np.zeros(k)
    d_mean2d = np.zeros((k, 2))
    d_cov2d = np.zeros((k, 2, 2))

    suffix = np.zeros_like(g)
    for rec in reversed(render.contrib_records):
        pos = rec.splat_pos
        ys, xs = slice(rec.y0, rec.y1), slice(rec.x0, rec.x1)
        sub_g = g[ys, xs]
        sigma, t_before = rec.sigma, rec.t_before
        weight = sigma * t_before
        c_k = colors[pos]

        d_color[pos] = np.einsum("yxc,yx->c", sub_g, weight)
        d_sigma = (sub_g @ c_k) * t_before \
            - np.einsum("yxc,yxc->yx", sub_g, suffix[ys, xs]) / (1.0 - sigma)
        d_alpha[pos] = np.sum(d_sigma * rec.gauss_grad)

        dx = (np.arange(rec.x0, rec.x1) + 0.5) - mean2d[pos, 0]
        dy = (np.arange(rec.y0, rec.y1) + 0.5) - mean2d[pos, 1]
        A, B, C = conic[pos, 0, 0], conic[pos, 0, 1], conic[pos, 1, 1]
        ld_x = A * dx[None, :] + B * dy[:, None]
        ld_y = B * dx[None, :] + C * dy[:, None]
        m = d_sigma * rec.sigma_grad
        d_mean2d[pos, 0] = np.sum(m * ld_x)
        d_mean2d[pos, 1] = np.sum(m * ld_y)
        half = 0.5 * m
        dxx = np.sum(half * ld_x * ld_x)
        dxy = np.sum(half * ld_x * ld_y)
        dyy = np.sum(half * ld_y * ld_y)
        d_cov2d[pos, 0, 0] = dxx
        d_cov2d[pos, 0, 1] = dxy
        d_cov2d[pos, 1, 0] = dxy
        d_cov2d[pos, 1, 1] = dyy

        suffix[ys, xs] += c_k * weight[:, :, None]

    # Chain screen-space gradients through projection and covariance
    # factorization, vectorized over splats.
    R_cw = camera.rotation
    t_cam = camera.to_camera_space(scene.positions[idx])
    x, y, z = t_cam[:, 0], t_cam[:, 1], t_cam[:, 2]
    J = _pinhole_jacobian(camera, t_cam)
    q_raw = scene.rotations[idx]
    q_hat = quat_normalize(q_raw)
    R = quat_to_rotmat(q_hat)
    s = np.exp(scene.log_scales[idx])
    sigma3 = np.einsum("nij,nj,nkj->nik", R, s * s, R)
    V = np.einsum("ai,nij,bj->nab", R_cw, sigma3, R_cw)

    d_t = np.einsum("kab,ka->kb", J, d_mean2d)

    dV = np.einsum("kai,kab,kbj->kij", J, d_cov2d, J)
    d_sigma3 = np.einsum("ai,kab,bj->kij", R_cw, dV, R_cw)
    dJ = 2.0 * np.einsum("kab,kbi,kij->kaj", d_cov2d, J, V)
    fx, fy = camera.fx, camera.fy
    inv_z2 = 1.0 / z**2
    inv_z3 = inv_z2 / z
    d_t[:, 0] += dJ[:, 0, 2] * (-fx * inv_z2)
    d_t[:, 1] += dJ[:, 1, 2] * (-fy * inv_z2)
    d_t[:, 2] += (dJ[:, 0, 0] * (-fx * inv_z2) + dJ[:, 1, 1] * (-fy * inv_z2)
                  + dJ[:, 0, 2] * (2.0 * fx * x * inv_z3)
                  + dJ[:, 1, 2] * (2.0 * fy * y * inv_z3))
    d_pos = d_t @ R_cw

    M3 = R * s[:, None, :]
    dM3 = 2.0 * np.einsum("kij,kjl->kil", d_sigma3, M3)
    d_s = np.einsum("kij,kij->kj", dM3, R)
    d_log_scale = d_s * s
    dR = dM3 * s[:, None, :]

    d_qhat = np.einsum("kij,kcij->kc", dR, _rotmat_quat_jacobian(q_hat))
    norm = np.linalg.norm(q_raw, axis=1, keepdims=True)
    d_q = (d_qhat - q_hat * np.sum(q_hat * d_qhat, axis=1, keepdims=True)) / norm

    a = alpha
    d_logit = d_alpha * a * (1.0 - a)

    grads.position[idx] = d_pos
    grads.log_scale[idx] = d_log_scale
    grads.rotation[idx] = d_q
    grads.opacity_logit[idx] = d_logit
    grads.color[idx] = d_color
    grads.mean2d[idx] = d_mean2d
    return grads


def _rotmat_quat_jacobian(q_hat: np.ndarray) -> np.ndarray:
    """d(rotation matrix)/d(unit quaternion), shape (K, 4, 3, 3)."""
    w, x, y, z = q_hat[:, 0], q_hat[:, 1], q_hat[:, 2], q_hat[:, 3]
    k = q_hat.shape[0]
    zero = np.zeros(k)
    dw = np.stack([zero, -z, y, z, zero, -x, -y, x, zero], axis=1)
    dx = np.stack([zero, y, z, y, -2 * x, -w, z, w, -2 * x], axis=1)
    dy = np.stack([-2 * y, x, w, x, zero, z, -w, z, -2 * y], axis=1)
    dz = np.stack([-2 * z, -w, x, w, -2 * z, y, x, y, zero], axis=1)
    table = np.stack([dw, dx, dy, dz], axis=1).reshape(k, 4, 3, 3)
    return 2.0 * table


def visible_mass(render: RenderOutput) -> np.ndarray:
    """Total composited contribution (sum of sigma*T) per Gaussian."""
    total = np.zeros(render.n_gaussians)
    for rec in render.contrib_records:
        total[rec.gaussian_index] += float(np.sum(rec.sigma * rec.t_before))
    return total


def contribution_weights(render: RenderOutput, mask) -> np.ndarray:
    """Fraction of each Gaussian's visible contribution inside the mask.

    0/0 (Gaussian invisible in this view) is defined as 0. `mask` may be
    a MaskBuffer or a bare (H, W) array matching the render resolution.
    """
    grid = np.asarray(getattr(mask, "grid", mask), dtype=np.float64)
    h, w = render.final_transmittance.shape
    if grid.shape != (h, w):
        raise ContractViolation(
            f"mask shape {grid.shape} does not match render {(h, w)}")
    total = np.zeros(render.n_gaussians)
    inside = np.zeros(render.n_gaussians)
    for rec in render.contrib_records:
        contrib = rec.sigma * rec.t_before
        total[rec.gaussian_index] += float(np.sum(contrib))
        inside[rec.gaussian_index] += float(
            np.sum(contrib * grid[rec.y0:rec.y1, rec.x0:rec.x1]))
    weights = np.zeros(render.n_gaussians)
    seen = total > 0.0
    weights[seen] = inside[seen] / total[seen]
    return np.clip(weights, 0.0, 1.0)
