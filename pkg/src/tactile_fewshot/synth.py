"""Parametric generator of labeled four-channel tactile trials.

This is a test fixture, not a contact-mechanics model. Each trial is one
sweep across a shape's contour:

* strain-gauge channels (3, 4): a smooth loading baseline whose level
  depends on material friction, plus ``edge_count`` contour bumps per
  sweep. Bumps are skewed by ``contour_asymmetry``. The whole channel scales
  with force and is time-warped by speed.
* PVDF channels (1, 2): band-limited texture noise with the material's
  spectral exponent and resonance, plus the time derivative of the contour
  profile (edge transients). Both scale with force x speed.
* additive Gaussian sensor noise on every channel.

Every trial draws from its own RNG stream derived from
``(seed, shape_id, material, trial_index)``, so any class can be generated
alone or in any order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import (
    DEFAULT_PERTURBATION_GRID,
    N_SHAPES,
    LabelError,
    Material,
    TactileDataset,
    TactileTrial,
)

SHAPE_NAMES = (
    "Circle", "Ellipse", "Semicircle", "Hexagon", "Moon", "Parallelogram",
    "Pentagon", "Pentagram", "Rhombus", "Square", "Trapezoid", "Triangle",
)


@dataclass(frozen=True)
class ShapeParams:
    edge_count: int
    contour_asymmetry: float
    bump_amplitude: float


@dataclass(frozen=True)
class MaterialParams:
    spectral_exponent: float
    resonance_hz: float
    texture_amplitude: float
    friction: float = 1.0
    edge_sharpness: float = 1.0


# Calibrated so that unseen shapes transfer better than unseen materials
# and force/speed perturbations cost accuracy. See README for the checks.
DEFAULT_SHAPES = (
    ShapeParams(2, 0.00, 0.50),  # Circle
    ShapeParams(2, 0.35, 0.55),  # Ellipse
    ShapeParams(1, 0.10, 0.80),  # Semicircle
    ShapeParams(6, 0.05, 0.40),  # Hexagon
    ShapeParams(2, 0.80, 0.70),  # Moon
    ShapeParams(4, 0.60, 0.50),  # Parallelogram
    ShapeParams(5, 0.15, 0.45),  # Pentagon
    ShapeParams(10, 0.20, 0.30),  # Pentagram
    ShapeParams(4, 0.30, 0.60),  # Rhombus
    ShapeParams(4, 0.00, 0.45),  # Square
    ShapeParams(4, 0.75, 0.65),  # Trapezoid
    ShapeParams(3, 0.25, 0.60),  # Triangle
)

DEFAULT_MATERIALS = (
    MaterialParams(spectral_exponent=1.6, resonance_hz=60.0, texture_amplitude=0.30, friction=1.00, edge_sharpness=1.0),  # Resin
    MaterialParams(spectral_exponent=1.0, resonance_hz=140.0, texture_amplitude=0.40, friction=1.15, edge_sharpness=0.8),  # Wood
    MaterialParams(spectral_exponent=0.4, resonance_hz=260.0, texture_amplitude=0.25, friction=0.85, edge_sharpness=1.4),  # Aluminum
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    shapes: tuple[ShapeParams, ...] = DEFAULT_SHAPES
    materials: tuple[MaterialParams, ...] = DEFAULT_MATERIALS
    noise_sigma: float = 0.05
    trials_per_class: int = 60
    sample_rate_hz: float = 1000.0
    window_s: float = 2.0
    seed: int = 0
    nominal_force: float = 1.0
    nominal_speed: float = 10.0
    force_jitter: float = 0.05
    amplitude_jitter: float = 0.15
    sg_noise_factor: float = 1.0  # extra multiplier on strain-gauge noise
    transient_gain: float = 0.02  # edge-transient scale in the PVDF channels
    level_jitter: float = 0.05  # relative jitter of the friction level
    noiseless: bool = False
    perturbed_trials_per_cell: int = 0
    perturbation_grid: tuple = DEFAULT_PERTURBATION_GRID

    def validate(self) -> "SynthConfig":
        if len(self.shapes) != N_SHAPES:
            raise ConfigError(f"need {N_SHAPES} shape records, got {len(self.shapes)}")
        if len(self.materials) != len(Material):
            raise ConfigError(f"need {len(Material)} material records, got {len(self.materials)}")
        if self.trials_per_class < 2:
            raise ConfigError("trials_per_class must be >= 2")
        if self.sample_rate_hz <= 2 * max(m.resonance_hz for m in self.materials):
            raise ConfigError("sample_rate_hz must exceed twice the largest resonance_hz")
        amplitudes = [s.bump_amplitude for s in self.shapes] + [m.texture_amplitude for m in self.materials]
        if min(amplitudes) < 0 or self.noise_sigma < 0:
            raise ConfigError("amplitudes and noise_sigma must be >= 0")
        if any(s.edge_count < 1 for s in self.shapes):
            raise ConfigError("edge_count must be >= 1")
        if any(not 0 <= s.contour_asymmetry <= 1 for s in self.shapes):
            raise ConfigError("contour_asymmetry must lie in [0, 1]")
        if self.window_len < 64:
            raise ConfigError("window must hold at least 64 samples")
        return self

    @property
    def window_len(self) -> int:
        return int(round(self.sample_rate_hz * self.window_s))


def trial_rng(seed: int, shape_id: int, material: Material | int, trial_index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(shape_id), int(Material.parse(material)), int(trial_index)])


def contour_profile(u: np.ndarray, shape: ShapeParams) -> tuple[np.ndarray, np.ndarray]:
    """Contour height and its derivative w.r.t. sweep phase ``u`` (period 1)."""
    e = shape.edge_count
    u = np.mod(u, 1.0)
    width = 0.11 / e
    left = width * (1.0 - 0.6 * shape.contour_asymmetry)
    right = width * (1.0 + 0.6 * shape.contour_asymmetry)
    ramp = np.linspace(-1.0, 1.0, e) if e > 1 else np.zeros(1)
    amps = shape.bump_amplitude * (1.0 + 0.5 * shape.contour_asymmetry * ramp)
    h = np.zeros_like(u)
    dh = np.zeros_like(u)
    for k in range(e):
        c = (k + 0.5) / e
        d = u - c
        d = d - np.round(d)  # wrap to [-0.5, 0.5)
        w = np.where(d < 0, left, right)
        g = amps[k] * np.exp(-0.5 * (d / w) ** 2)
        h += g
        dh += -g * d / w**2
    return h, dh


def texture_noise(n: int, fs: float, material: MaterialParams, speed_scale: float, rng: np.random.Generator) -> np.ndarray:
    """Unit-RMS colored noise with a resonance, scaled to ``texture_amplitude``."""
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / fs)
    f_lo, f_hi = 5.0 * speed_scale, 0.45 * fs
    band = (f >= f_lo) & (f <= f_hi)
    shaping = np.zeros_like(f)
    shaping[band] = (f[band] / f_lo) ** (-material.spectral_exponent / 2.0)
    fr = min(material.resonance_hz * speed_scale, 0.45 * fs)
    gamma = 0.08 * fr
    shaping += 1.5 * shaping[band].max(initial=1.0) / (1.0 + ((f - fr) / gamma) ** 2) * band
    y = np.fft.irfft(spec * shaping, n)
    rms = np.sqrt(np.mean(y**2))
    return material.texture_amplitude * y / rms if rms > 0 else y


def synth_trial(
    shape_id: int,
    material: Material | int | str,
    force_scale: float = 1.0,
    speed_scale: float = 1.0,
    rng: np.random.Generator | None = None,
    config: SynthConfig | None = None,
    trial_index: int = 0,
) -> TactileTrial:
    """Generate one trial; deterministic given the RNG state."""
    cfg = config or SynthConfig()
    if not 1 <= int(shape_id) <= N_SHAPES:
        raise LabelError(f"shape_id must be 1..{N_SHAPES}, got {shape_id}")
    material = Material.parse(material)
    if not force_scale > 0 or not speed_scale > 0:
        raise ValueError("force_scale and speed_scale must be > 0")
    if rng is None:
        rng = trial_rng(cfg.seed, shape_id, material, trial_index)
    shape = cfg.shapes[int(shape_id) - 1]
    mat = cfg.materials[int(material)]
    n = cfg.window_len
    t = np.arange(n) / n  # normalized time over the window

    # draw every random quantity up front so stream usage is fixed
    phase, phase_gap = rng.uniform(0.0, 1.0), rng.uniform(0.01, 0.03)
    jitters = rng.standard_normal(4)
    tex = [texture_noise(n, cfg.sample_rate_hz, mat, speed_scale, rng) for _ in range(2)]
    sensor = rng.standard_normal((4, n))
    if cfg.noiseless:
        phase, phase_gap, jitters = 0.0, 0.02, np.zeros(4)

    f_eff = force_scale * (1.0 + cfg.force_jitter * jitters[0])
    amp = 1.0 + cfg.amplitude_jitter * jitters[1]
    u = speed_scale * t + phase
    h1, dh1 = contour_profile(u, shape)
    h2, dh2 = contour_profile(u - phase_gap, shape)
    load = 1.0 - np.exp(-t / 0.05)
    level = 0.6 * mat.friction * (1.0 + cfg.level_jitter * jitters[2])

    sg3 = f_eff * (level * load + amp * h1)
    sg4 = f_eff * (0.7 * level * load + 0.8 * amp * h2)
    gain = f_eff * speed_scale
    transient_scale = cfg.transient_gain * mat.edge_sharpness * (1.0 + cfg.amplitude_jitter * jitters[3])
    pv1 = gain * (tex[0] + transient_scale * amp * dh1)
    pv2 = gain * (tex[1] + 0.8 * transient_scale * amp * dh2)
    channels = np.stack([pv1, pv2, sg3, sg4])
    if not cfg.noiseless and cfg.noise_sigma > 0:
        sigma = cfg.noise_sigma * np.array([1.0, 1.0, cfg.sg_noise_factor, cfg.sg_noise_factor])
        channels = channels + sigma[:, None] * sensor
    return TactileTrial(
        channels,
        int(shape_id),
        material,
        force=cfg.nominal_force * force_scale,
        speed=cfg.nominal_speed * speed_scale,
        trial_index=trial_index,
    )


def synth_class(config: SynthConfig, shape_id: int, material: Material | int) -> list[TactileTrial]:
    """All trials of one class: nominal ones first, then perturbed ones."""
    trials = []
    idx = 0
    for _ in range(config.trials_per_class):
        trials.append(synth_trial(shape_id, material, 1.0, 1.0, trial_rng(config.seed, shape_id, material, idx), config, idx))
        idx += 1
    for fs, ss in config.perturbation_grid:
        for _ in range(config.perturbed_trials_per_cell):
            trials.append(synth_trial(shape_id, material, fs, ss, trial_rng(config.seed, shape_id, material, idx), config, idx))
            idx += 1
    return trials


def synth_dataset(config: SynthConfig | None = None) -> TactileDataset:
    cfg = (config or SynthConfig()).validate()
    trials = []
    for material in Material:
        for shape_id in range(1, N_SHAPES + 1):
            trials.extend(synth_class(cfg, shape_id, material))
    return TactileDataset(tuple(trials), cfg.sample_rate_hz)


def config_from_dict(d: dict) -> SynthConfig:
    """Build a config from plain values (as read from YAML)."""
    d = dict(d)
    if "shapes" in d:
        d["shapes"] = tuple(ShapeParams(**s) for s in d["shapes"])
    if "materials" in d:
        d["materials"] = tuple(MaterialParams(**m) for m in d["materials"])
    if "perturbation_grid" in d:
        d["perturbation_grid"] = tuple(tuple(map(float, p)) for p in d["perturbation_grid"])
    return SynthConfig(**d).validate()


__all__ = [
    "SHAPE_NAMES",
    "ShapeParams",
    "MaterialParams",
    "SynthConfig",
    "ConfigError",
    "contour_profile",
    "texture_noise",
    "synth_trial",
    "synth_class",
    "synth_dataset",
    "trial_rng",
    "config_from_dict",
]
