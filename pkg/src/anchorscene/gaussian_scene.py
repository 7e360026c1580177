"""Incremental 3-D Gaussian scene: initialization from point maps, rendering,
masked-supervision optimization, and PLY interchange.

Parameters are stored in optimization encodings — log scale, logit opacity,
unconstrained color mapped through a sigmoid, unnormalized quaternion — and
decoded on render/export. The scene grows only by spawning over unknown
regions; there is no densification or pruning.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .core_geometry import CameraIntrinsics, CameraPose, unproject
from .errors import InputError, ParseError
from .rasters import DepthMap, known, validate_mask, validate_rgb
from .splatting import RenderSettings, rasterize
from . import rasters

_LOGIT_EPS = 1e-6
DEFAULT_SPAWN_OPACITY = 0.9

PLY_PROPERTIES = ("x", "y", "z", "rot_0", "rot_1", "rot_2", "rot_3",
                  "scale_0", "scale_1", "scale_2", "opacity",
                  "red", "green", "blue")


def _logit(p: np.ndarray | float) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=np.float64), _LOGIT_EPS, 1.0 - _LOGIT_EPS)
    return np.log(p / (1.0 - p))


@dataclass(frozen=True)
class GaussianPrimitive:
    """One decoded primitive: meters, unit quaternion (w, x, y, z), linear
    scale, opacity and color in (0, 1)."""

    position: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    opacity: float
    color: np.ndarray


@dataclass
class FrameEntry:
    """A supervision frame: image, validity mask, and its camera."""

    image: np.ndarray
    mask: np.ndarray
    pose: CameraPose
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        self.image = validate_rgb(self.image)
        self.mask = validate_mask(self.mask)
        if self.mask.shape != self.image.shape[:2]:
            raise InputError("frame mask dimensions must match the image")
        if (self.image.shape[0] != self.intrinsics.height
                or self.image.shape[1] != self.intrinsics.width):
            raise InputError("frame image size must match its intrinsics")


@dataclass
class RenderOutput:
    rgb: np.ndarray      # (H, W, 3), un-premultiplied
    alpha: np.ndarray    # (H, W)
    depth: DepthMap      # alpha-weighted expected depth


@dataclass(frozen=True)
class OptimizerConfig:
    """Per-integration optimization settings (Adam, deterministic)."""

    iterations: int = 400
    lr_position: float = 1e-3
    lr_quaternion: float = 2e-3
    lr_log_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_color: float = 5e-2
    loss_l1_weight: float = 0.8
    loss_dssim_weight: float = 0.2
    settings: RenderSettings = field(default_factory=RenderSettings)

    def __post_init__(self):
        if self.iterations < 0:
            raise InputError("iterations must be >= 0")


@dataclass
class PrimitiveBatch:
    """Struct-of-arrays batch of primitives in storage encoding."""

    positions: np.ndarray       # (N, 3)
    quats_raw: np.ndarray       # (N, 4)
    log_scales: np.ndarray      # (N, 3)
    opacity_logits: np.ndarray  # (N,)
    color_logits: np.ndarray    # (N, 3)

    def __len__(self) -> int:
        return len(self.positions)

    @staticmethod
    def empty() -> "PrimitiveBatch":
        return PrimitiveBatch(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)),
                              np.zeros((0,)), np.zeros((0, 3)))

    def to_primitives(self) -> list[GaussianPrimitive]:
        quats = self.quats_raw / np.linalg.norm(self.quats_raw, axis=-1, keepdims=True)
        opac = 1.0 / (1.0 + np.exp(-self.opacity_logits))
        cols = 1.0 / (1.0 + np.exp(-self.color_logits))
        return [GaussianPrimitive(position=self.positions[i].copy(),
                                  rotation=quats[i].copy(),
                                  scale=np.exp(self.log_scales[i]),
                                  opacity=float(opac[i]),
                                  color=cols[i].copy())
                for i in range(len(self))]


class GaussianScene:
    """Growable set of Gaussian primitives plus its supervision frame list.

    Single-writer: optimization mutates the scene exclusively; rendering is
    pure against a frozen scene.
    """

    def __init__(self):
        self.positions = torch.zeros((0, 3), dtype=torch.float64)
        self.quats_raw = torch.zeros((0, 4), dtype=torch.float64)
        self.log_scales = torch.zeros((0, 3), dtype=torch.float64)
        self.opacity_logits = torch.zeros((0,), dtype=torch.float64)
        self.color_logits = torch.zeros((0, 3), dtype=torch.float64)
        self.spawn_view = torch.zeros((0,), dtype=torch.int64)
        self.frame_list: list[FrameEntry] = []
        self.next_spawn_id = 0

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def primitives(self) -> list[GaussianPrimitive]:
        return self.batch().to_primitives()

    def batch(self) -> PrimitiveBatch:
        return PrimitiveBatch(self.positions.numpy().copy(),
                              self.quats_raw.numpy().copy(),
                              self.log_scales.numpy().copy(),
                              self.opacity_logits.numpy().copy(),
                              self.color_logits.numpy().copy())

    def add_batch(self, batch: PrimitiveBatch, spawn_id: int | None = None) -> int:
        """Append primitives; returns the spawn id they are tagged with."""
        sid = self.next_spawn_id if spawn_id is None else spawn_id
        self.next_spawn_id = max(self.next_spawn_id, sid + 1)
        if len(batch) == 0:
            return sid
        as64 = lambda arr: torch.as_tensor(np.asarray(arr), dtype=torch.float64)
        self.positions = torch.cat([self.positions, as64(batch.positions)])
        self.quats_raw = torch.cat([self.quats_raw, as64(batch.quats_raw)])
        self.log_scales = torch.cat([self.log_scales, as64(batch.log_scales)])
        self.opacity_logits = torch.cat([self.opacity_logits, as64(batch.opacity_logits)])
        self.color_logits = torch.cat([self.color_logits, as64(batch.color_logits)])
        self.spawn_view = torch.cat([
            self.spawn_view, torch.full((len(batch),), sid, dtype=torch.int64)])
        return sid

    def remove(self, keep_mask: np.ndarray) -> None:
        keep = torch.as_tensor(np.asarray(keep_mask, dtype=bool))
        self.positions = self.positions[keep]
        self.quats_raw = self.quats_raw[keep]
        self.log_scales = self.log_scales[keep]
        self.opacity_logits = self.opacity_logits[keep]
        self.color_logits = self.color_logits[keep]
        self.spawn_view = self.spawn_view[keep]

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Snapshot of all parameter tensors (for determinism comparisons)."""
        return {
            "positions": self.positions.numpy().copy(),
            "quats_raw": self.quats_raw.numpy().copy(),
            "log_scales": self.log_scales.numpy().copy(),
            "opacity_logits": self.opacity_logits.numpy().copy(),
            "color_logits": self.color_logits.numpy().copy(),
        }


def init_from_pointmap(image: np.ndarray, depth: DepthMap,
                       intrinsics: CameraIntrinsics, pose: CameraPose,
                       region: np.ndarray, stride: int = 1,
                       opacity: float = DEFAULT_SPAWN_OPACITY) -> PrimitiveBatch:
    """Spawn one primitive per (strided) region pixel from the unprojected
    point map: position on the surface, color from the pixel, isotropic
    scale equal to the pixel footprint depth * stride / fx, identity
    rotation, fixed initial opacity.

    An empty region yields an empty batch (not an error). Region pixels with
    invalid depth are skipped.
    """
    image = validate_rgb(image)
    region_b = known(validate_mask(region))
    if image.shape[:2] != depth.shape or region_b.shape != depth.shape:
        raise InputError("image/depth/region shapes must match")
    sel = region_b & depth.validity
    if stride > 1:
        grid = np.zeros_like(sel)
        off = stride // 2
        grid[off::stride, off::stride] = True
        sel &= grid
    if not sel.any():
        return PrimitiveBatch.empty()

    pts = unproject(depth, intrinsics, pose)
    positions = pts.points[sel]
    colors = image[sel]
    z = depth.values[sel]
    scale = z * stride / intrinsics.fx
    n = len(positions)
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    return PrimitiveBatch(
        positions=positions.astype(np.float64),
        quats_raw=quats,
        log_scales=np.log(scale)[:, None].repeat(3, axis=1),
        opacity_logits=np.full(n, float(_logit(opacity))),
        color_logits=_logit(colors),
    )


def render(scene: GaussianScene, intrinsics: CameraIntrinsics, pose: CameraPose,
           settings: RenderSettings = RenderSettings()) -> RenderOutput:
    """Pure rendering of a frozen scene; see splatting.rasterize for the model."""
    dtype = settings.torch_dtype
    with torch.no_grad():
        rgb, alpha, depth, valid = rasterize(
            scene.positions.to(dtype), scene.quats_raw.to(dtype),
            scene.log_scales.to(dtype), scene.opacity_logits.to(dtype),
            scene.color_logits.to(dtype), intrinsics, pose, settings)
    depth_np = depth.numpy().astype(np.float64)
    valid_np = valid.numpy()
    depth_np[~valid_np] = np.nan
    return RenderOutput(
        rgb=np.clip(rgb.numpy().astype(np.float64), 0.0, 1.0),
        alpha=np.clip(alpha.numpy().astype(np.float64), 0.0, 1.0),
        depth=DepthMap(depth_np, valid_np),
    )


def _gaussian_window(size: int, sigma: float, dtype, device) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2.0
    g = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def _ssim_map(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-pixel SSIM (11x11 Gaussian window, C1/C2 for unit dynamic range)."""
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    win = _gaussian_window(11, 1.5, pred.dtype, pred.device)
    kernel = win.expand(3, 1, 11, 11)
    p = pred.permute(2, 0, 1).unsqueeze(0)
    t = target.permute(2, 0, 1).unsqueeze(0)
    conv = lambda im: torch.nn.functional.conv2d(im, kernel, padding=5, groups=3)
    mu_p, mu_t = conv(p), conv(t)
    sig_p = conv(p * p) - mu_p ** 2
    sig_t = conv(t * t) - mu_t ** 2
    sig_pt = conv(p * t) - mu_p * mu_t
    num = (2 * mu_p * mu_t + c1) * (2 * sig_pt + c2)
    den = (mu_p ** 2 + mu_t ** 2 + c1) * (sig_p + sig_t + c2)
    return (num / den).squeeze(0).permute(1, 2, 0)


def masked_loss(pred_rgb: torch.Tensor, target: torch.Tensor, mask: torch.Tensor,
                l1_weight: float, dssim_weight: float) -> torch.Tensor:
    """0.8*L1 + 0.2*D-SSIM (weights configurable) over mask-valid pixels.

    An all-invalid mask yields an exactly-zero loss (and so exactly-zero
    gradients), preserving the masked-supervision locality contract.
    """
    m = mask
    n = m.sum()
    if float(n) == 0.0:
        return pred_rgb.sum() * 0.0
    loss = pred_rgb.sum() * 0.0
    if l1_weight != 0.0:
        l1 = (torch.abs(pred_rgb - target) * m.unsqueeze(-1)).sum() / (3.0 * n)
        loss = loss + l1_weight * l1
    if dssim_weight != 0.0:
        ssim = _ssim_map(pred_rgb, target)
        dssim = (((1.0 - ssim) / 2.0) * m.unsqueeze(-1)).sum() / (3.0 * n)
        loss = loss + dssim_weight * dssim
    return loss


def render_gradients(scene: GaussianScene, intrinsics: CameraIntrinsics,
                     pose: CameraPose, target: np.ndarray, mask: np.ndarray,
                     settings: RenderSettings | None = None) -> dict[str, np.ndarray]:
    """Gradients of the masked L1 loss w.r.t. every stored parameter group.

    Pixels outside the mask contribute exactly zero. Returned keys:
    positions, quats_raw, log_scales, opacity_logits, color_logits.
    """
    settings = settings or RenderSettings(truncation_sigma=None)
    dtype = settings.torch_dtype
    params = {
        "positions": scene.positions.to(dtype).requires_grad_(True),
        "quats_raw": scene.quats_raw.to(dtype).requires_grad_(True),
        "log_scales": scene.log_scales.to(dtype).requires_grad_(True),
        "opacity_logits": scene.opacity_logits.to(dtype).requires_grad_(True),
        "color_logits": scene.color_logits.to(dtype).requires_grad_(True),
    }
    rgb, _, _, _ = rasterize(params["positions"], params["quats_raw"],
                             params["log_scales"], params["opacity_logits"],
                             params["color_logits"], intrinsics, pose, settings)
    t = torch.as_tensor(validate_rgb(target), dtype=dtype)
    m = torch.as_tensor(validate_mask(mask), dtype=dtype)
    loss = masked_loss(rgb, t, m, l1_weight=1.0, dssim_weight=0.0)
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    out = {}
    for (name, p), g in zip(params.items(), grads):
        out[name] = (torch.zeros_like(p) if g is None else g).detach().numpy()
    return out


def optimize(scene: GaussianScene, config: OptimizerConfig, seed: int,
             frames: list[FrameEntry] | None = None) -> GaussianScene:
    """Run `config.iterations` Adam steps, each against a uniformly sampled
    frame (seeded), with masked L1 + D-SSIM supervision; quaternions are
    renormalized after every step. Deterministic for a fixed seed.

    Mutates and returns `scene`. `frames` defaults to scene.frame_list.
    """
    frames = scene.frame_list if frames is None else frames
    if not frames:
        raise InputError("optimize requires a nonempty frame list")
    if config.iterations == 0 or len(scene) == 0:
        return scene

    dtype = config.settings.torch_dtype
    params = {
        "positions": scene.positions.to(dtype).requires_grad_(True),
        "quats_raw": scene.quats_raw.to(dtype).requires_grad_(True),
        "log_scales": scene.log_scales.to(dtype).requires_grad_(True),
        "opacity_logits": scene.opacity_logits.to(dtype).requires_grad_(True),
        "color_logits": scene.color_logits.to(dtype).requires_grad_(True),
    }
    opt = torch.optim.Adam([
        {"params": [params["positions"]], "lr": config.lr_position},
        {"params": [params["quats_raw"]], "lr": config.lr_quaternion},
        {"params": [params["log_scales"]], "lr": config.lr_log_scale},
        {"params": [params["opacity_logits"]], "lr": config.lr_opacity},
        {"params": [params["color_logits"]], "lr": config.lr_color},
    ])

    torch_frames = [
        (torch.as_tensor(f.image, dtype=dtype), torch.as_tensor(f.mask, dtype=dtype),
         f.intrinsics, f.pose)
        for f in frames
    ]
    rng = np.random.default_rng(seed)
    for _ in range(config.iterations):
        image, mask, intr, pose = torch_frames[int(rng.integers(len(torch_frames)))]
        rgb, _, _, _ = rasterize(params["positions"], params["quats_raw"],
                                 params["log_scales"], params["opacity_logits"],
                                 params["color_logits"], intr, pose, config.settings)
        loss = masked_loss(rgb, image, mask,
                           config.loss_l1_weight, config.loss_dssim_weight)
        opt.zero_grad()
        loss.backward()
        opt.step()
        with torch.no_grad():
            norm = torch.linalg.norm(params["quats_raw"], dim=-1, keepdim=True)
            params["quats_raw"].data = params["quats_raw"].data / torch.clamp(norm, min=1e-12)

    scene.positions = params["positions"].detach().to(torch.float64)
    scene.quats_raw = params["quats_raw"].detach().to(torch.float64)
    scene.log_scales = params["log_scales"].detach().to(torch.float64)
    scene.opacity_logits = params["opacity_logits"].detach().to(torch.float64)
    scene.color_logits = params["color_logits"].detach().to(torch.float64)
    return scene


def integrate_view(scene: GaussianScene, inpainted: np.ndarray,
                   unknown: np.ndarray, rendered_depth: DepthMap,
                   pose: CameraPose, intrinsics: CameraIntrinsics,
                   config: OptimizerConfig, seed: int,
                   stride: int = 1) -> GaussianScene:
    """One incremental-construction step: spawn primitives over the unknown
    region from the supplied depth, append the frame (full-frame validity
    minus invalid depth), then optimize over the accumulated frames."""
    batch = init_from_pointmap(inpainted, rendered_depth, intrinsics, pose,
                               region=unknown, stride=stride)
    scene.add_batch(batch)
    mask = np.where(rendered_depth.validity, 1.0, 0.0)
    scene.frame_list.append(FrameEntry(image=inpainted, mask=mask,
                                       pose=pose, intrinsics=intrinsics))
    return optimize(scene, config, seed)


# ---------------------------------------------------------------------------
# PLY interchange (decoded parameters, float32 little-endian)


def export_ply(scene: GaussianScene, path) -> None:
    batch = scene.batch()
    n = len(batch)
    quats = batch.quats_raw
    if n:
        quats = quats / np.linalg.norm(quats, axis=-1, keepdims=True)
    opac = 1.0 / (1.0 + np.exp(-batch.opacity_logits))
    cols = 1.0 / (1.0 + np.exp(-batch.color_logits))
    data = np.concatenate([
        batch.positions, quats, np.exp(batch.log_scales),
        opac[:, None], cols], axis=1).astype("<f4")
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {p}" for p in PLY_PROPERTIES]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())


def import_ply(path) -> GaussianScene:
    raw = Path(path).read_bytes()
    marker = b"end_header\n"
    end = raw.find(marker)
    if end < 0:
        raise ParseError("missing PLY end_header", byte_offset=0)
    lines = raw[:end].decode("ascii", errors="replace").splitlines()
    if not lines or lines[0] != "ply":
        raise ParseError("not a PLY file", byte_offset=0)
    n = None
    props: list[str] = []
    offset = 0
    for line in lines:
        if line.startswith("element vertex"):
            try:
                n = int(line.split()[2])
            except (IndexError, ValueError):
                raise ParseError("malformed vertex element", byte_offset=offset)
        elif line.startswith("property"):
            parts = line.split()
            if parts[1] != "float":
                raise ParseError(f"unsupported property type {parts[1]}",
                                 byte_offset=offset)
            props.append(parts[2])
        offset += len(line) + 1
    if n is None:
        raise ParseError("PLY header lacks a vertex element", byte_offset=0)
    if tuple(props) != PLY_PROPERTIES:
        raise ParseError(f"unexpected property layout {props}", byte_offset=0)
    body = raw[end + len(marker):]
    expect = n * 14 * 4
    if len(body) != expect:
        raise ParseError(f"body holds {len(body)} bytes, expected {expect}",
                         byte_offset=end + len(marker) + min(len(body), expect))
    data = np.frombuffer(body, dtype="<f4").reshape(n, 14).astype(np.float64)

    scene = GaussianScene()
    if n:
        scale = data[:, 7:10]
        if (scale <= 0).any():
            raise ParseError("non-positive scale in PLY body",
                             byte_offset=end + len(marker))
        batch = PrimitiveBatch(
            positions=data[:, 0:3],
            quats_raw=data[:, 3:7],
            log_scales=np.log(scale),
            opacity_logits=_logit(data[:, 10]),
            color_logits=_logit(data[:, 11:14]),
        )
        scene.add_batch(batch)
    return scene


def save_scene_manifest(scene: GaussianScene, manifest_path, assets_dir) -> None:
    """JSON manifest {frames: [pose, intrinsics, image path, mask path]} with
    frame rasters written as PNGs under `assets_dir`."""
    assets = Path(assets_dir)
    assets.mkdir(parents=True, exist_ok=True)
    frames = []
    for i, f in enumerate(scene.frame_list):
        img_path = assets / f"frame_{i:03d}.png"
        mask_path = assets / f"frame_{i:03d}_mask.png"
        rasters.save_rgb_png(f.image, img_path)
        rasters.save_mask_png(f.mask, mask_path)
        frames.append({
            "pose": {"rotation": f.pose.rotation.tolist(),
                     "translation": f.pose.translation.tolist()},
            "intrinsics": {"fx": f.intrinsics.fx, "fy": f.intrinsics.fy,
                           "cx": f.intrinsics.cx, "cy": f.intrinsics.cy,
                           "width": f.intrinsics.width, "height": f.intrinsics.height},
            "image": str(img_path),
            "mask": str(mask_path),
        })
    Path(manifest_path).write_text(json.dumps({"frames": frames}, indent=2))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images."""
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse == 0:
        return float("inf")
    return float(-10.0 * np.log10(mse))
