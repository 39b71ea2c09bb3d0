"""Heavy, light and instance-level disturbed views of an image."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, Literal, Optional, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import GeoRecord, ImageSample, apply_geo

ViewKind = Literal["HID", "LID", "InsD"]


@dataclass
class DisturbanceConfig:
    s_hid: float = 3.5
    v_hid_enabled: bool = True
    s_lid: float = 1.5
    d_lid: float = 0.25
    brightness_jitter: float = 0.25
    contrast_jitter: float = 0.6
    saturation_jitter: float = 0.5
    blur_sigma_max: float = 1.0
    noise_sigma_max: float = 0.1
    lid_jitter_scale: float = 0.25
    insd_view: Literal["share_lid", "share_hid", "dedicated"] = "share_lid"
    feature_stride: int = 8
    crop_size: Optional[Tuple[int, int]] = None  # None -> input size
    rng_seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.s_hid < 1 or self.s_lid < 1:
            raise ValueError("disturbance scales must be >= 1")
        if not 0 <= self.d_lid < 1:
            raise ValueError("d_lid must lie in [0, 1)")
        jitters = (
            self.brightness_jitter, self.contrast_jitter, self.saturation_jitter,
            self.blur_sigma_max, self.noise_sigma_max, self.lid_jitter_scale,
        )
        if min(jitters) < 0:
            raise ValueError("jitter magnitudes must be non-negative")
        if self.insd_view not in ("share_lid", "share_hid", "dedicated"):
            raise ValueError(f"unknown insd_view {self.insd_view!r}")


@dataclass
class DisturbedView:
    image: ImageSample
    geo: GeoRecord
    kind: ViewKind
    photometric_params: Dict[str, float] = field(default_factory=dict)


def sample_rng(rng_seed: int, sample_index: int) -> np.random.Generator:
    """Per-sample generator for parallel batch construction."""
    return np.random.default_rng(int(rng_seed) ^ int(sample_index))


def sample_photometric(cfg: DisturbanceConfig, rng: np.random.Generator, strength: float = 1.0) -> Dict[str, float]:
    # Every draw happens regardless of magnitude so rng consumption is config-independent.
    u = rng.uniform(-1.0, 1.0, size=3)
    blur = rng.uniform(0.0, 1.0)
    noise = rng.uniform(0.0, 1.0)
    noise_seed = int(rng.integers(0, 2**31 - 1))
    return {
        "brightness": float(u[0] * cfg.brightness_jitter * strength),
        "contrast": float(1.0 + u[1] * cfg.contrast_jitter * strength),
        "saturation": float(1.0 + u[2] * cfg.saturation_jitter * strength),
        "blur_sigma": float(blur * cfg.blur_sigma_max * strength),
        "noise_sigma": float(noise * cfg.noise_sigma_max * strength),
        "noise_seed": noise_seed,
    }


def apply_photometric(pixels: np.ndarray, params: Dict[str, float]) -> np.ndarray:
    out = pixels
    if params["brightness"] != 0.0:
        out = out + params["brightness"]
    if params["contrast"] != 1.0:
        mean = out.mean()
        out = (out - mean) * params["contrast"] + mean
    if params["saturation"] != 1.0:
        gray = out.mean(axis=2, keepdims=True)
        out = (out - gray) * params["saturation"] + gray
    if params["blur_sigma"] > 0.0:
        out = gaussian_filter(out, sigma=(params["blur_sigma"], params["blur_sigma"], 0.0), mode="reflect")
    if params["noise_sigma"] > 0.0:
        noise_rng = np.random.default_rng(params["noise_seed"])
        out = out + noise_rng.normal(0.0, params["noise_sigma"], size=out.shape)
    if out is pixels:
        return pixels.copy()
    return np.clip(out, 0.0, 1.0)


def _pad_to(img: ImageSample, size: Tuple[int, int]) -> Tuple[ImageSample, Tuple[int, int]]:
    # Bottom/right reflective padding keeps the original coordinates valid.
    h, w = img.size
    ph, pw = max(0, size[0] - h), max(0, size[1] - w)
    if ph == 0 and pw == 0:
        return img, (0, 0)
    pixels = np.pad(img.pixels, ((0, ph), (0, pw), (0, 0)), mode="reflect" if ph < h and pw < w else "symmetric")
    return replace(img, pixels=pixels), (ph, pw)


def _center_crop_record(size, scale, crop, flip=False, translation=(0.0, 0.0)) -> GeoRecord:
    h, w = size
    ch, cw = crop
    origin = ((w * scale - cw) / 2.0, (h * scale - ch) / 2.0)
    return GeoRecord(src_size=size, scale=scale, flip_h=flip, crop_origin=origin, crop_size=crop, translation=translation)


def _geometric_view(img, cfg, scale, flip, translation, kind, photo) -> DisturbedView:
    crop = tuple(cfg.crop_size) if cfg.crop_size is not None else img.size
    padded, pad = _pad_to(img, crop)
    # Padding only ever enlarges the frame, so small scales never leave the crop window.
    rec = _center_crop_record(padded.size, scale, crop, flip=flip, translation=translation)
    warped = apply_geo(rec, padded)
    pixels = apply_photometric(warped.pixels, photo)
    params = dict(photo)
    if pad != (0, 0):
        params["pad_h"], params["pad_w"] = float(pad[0]), float(pad[1])
    return DisturbedView(image=replace(warped, pixels=pixels), geo=rec, kind=kind, photometric_params=params)


def make_hid(img: ImageSample, cfg: DisturbanceConfig, rng: np.random.Generator) -> DisturbedView:
    scale = float(rng.uniform(1.0, cfg.s_hid))
    flip = bool(rng.integers(0, 2)) if cfg.v_hid_enabled else False
    photo = sample_photometric(cfg, rng)
    return _geometric_view(img, cfg, scale, flip, (0.0, 0.0), "HID", photo)


def make_lid(img: ImageSample, cfg: DisturbanceConfig, rng: np.random.Generator) -> DisturbedView:
    scale = float(rng.uniform(1.0, cfg.s_lid))
    offsets = rng.uniform(0.0, cfg.d_lid, size=2) * cfg.feature_stride
    signs = np.where(rng.integers(0, 2, size=2) == 1, 1.0, -1.0)
    translation = (float(offsets[0] * signs[0]), float(offsets[1] * signs[1]))
    photo = sample_photometric(cfg, rng, strength=cfg.lid_jitter_scale)
    return _geometric_view(img, cfg, scale, False, translation, "LID", photo)


def make_insd(
    img: ImageSample,
    cfg: DisturbanceConfig,
    rng: np.random.Generator,
    lid_view: Optional[DisturbedView] = None,
    hid_view: Optional[DisturbedView] = None,
) -> DisturbedView:
    if cfg.insd_view == "share_lid":
        if lid_view is None:
            raise ValueError("insd_view=share_lid needs the LID view")
        return replace(lid_view, kind="InsD")
    if cfg.insd_view == "share_hid":
        if hid_view is None:
            raise ValueError("insd_view=share_hid needs the HID view")
        return replace(hid_view, kind="InsD")
    photo = sample_photometric(cfg, rng)
    rec = GeoRecord.identity(img.size)
    pixels = apply_photometric(img.pixels, photo)
    view_img = ImageSample(pixels=pixels, domain=img.domain, labels=img.labels, frame_id=img.frame_id, image_id=img.image_id)
    return DisturbedView(image=view_img, geo=rec, kind="InsD", photometric_params=photo)
