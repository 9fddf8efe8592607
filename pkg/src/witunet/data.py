"""Synthetic paired-image corpus: seeded ellipse phantoms as the clean target,
a dose-reduction noise model for the degraded input, window normalization,
rotation/flip augmentation, and the on-disk corpus layout (WTEN tensors plus
tab-separated manifests).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, ShapeError, UsageError
from .rng import Rng, derive_seed, gaussian_field, splitmix_array
from .tensor import atomic_write_bytes, load_wten, save_wten


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 64
    min_ellipses: int = 4
    max_ellipses: int = 10
    min_intensity: float = 0.15
    max_intensity: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if self.size < 16:
            raise ConfigError("phantom size must be >= 16")
        if not 0 <= self.min_ellipses <= self.max_ellipses:
            raise ConfigError("bad ellipse count range")


@dataclass(frozen=True)
class NoiseSpec:
    gaussian_sigma: float = 0.08
    poisson_photons: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.gaussian_sigma < 0:
            raise ConfigError("gaussian_sigma must be >= 0")
        if self.poisson_photons is not None and self.poisson_photons <= 0:
            raise ConfigError("poisson_photons must be positive when enabled")


@dataclass
class ImagePair:
    """ldct is the degraded input, fdct the clean target; both (1,H,W) float32."""

    ldct: np.ndarray
    fdct: np.ndarray
    tag: str = ""

    def __post_init__(self):
        if self.ldct.shape != self.fdct.shape:
            raise ShapeError(f"pair shapes differ: {self.ldct.shape} vs {self.fdct.shape}")


def make_phantom(spec: PhantomSpec) -> np.ndarray:
    """Deterministic overlapping-ellipse image, clamped to [0,1], shape (1,H,W)."""
    rng = Rng(spec.seed)
    s = spec.size
    img = np.zeros((s, s), dtype=np.float64)
    count = rng.randint(spec.min_ellipses, spec.max_ellipses + 1)
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    for _ in range(count):
        cx = rng.uniform(0.15, 0.85) * s
        cy = rng.uniform(0.15, 0.85) * s
        a = rng.uniform(0.06, 0.35) * s
        b = rng.uniform(0.06, 0.35) * s
        theta = rng.uniform(0.0, math.pi)
        inten = rng.uniform(spec.min_intensity, spec.max_intensity)
        ct, st = math.cos(theta), math.sin(theta)
        u = (xx - cx) * ct + (yy - cy) * st
        v = -(xx - cx) * st + (yy - cy) * ct
        img += inten * ((u / a) ** 2 + (v / b) ** 2 <= 1.0)
    return np.clip(img, 0.0, 1.0).astype(np.float32)[None]


def _poisson_counts(lam: np.ndarray, seed: int) -> np.ndarray:
    """Photon counts for rate map `lam`: Knuth sampling below 16, gaussian
    approximation N(lam, lam) above (rounded, clipped at zero)."""
    flat = lam.reshape(-1)
    out = np.zeros_like(flat)
    big = flat >= 16.0
    if big.any():
        g = gaussian_field(derive_seed(seed, 1), (int(big.sum()),)).astype(np.float64)
        out[big] = np.maximum(0.0, np.rint(flat[big] + np.sqrt(flat[big]) * g))
    small = ~big
    if small.any():
        n = int(small.sum())
        lam_s = flat[small]
        limit = np.exp(-lam_s)
        prod = np.ones(n)
        k = np.zeros(n)
        active = prod > limit
        draw = 0
        while active.any():
            bits = splitmix_array(derive_seed(seed, 2, draw), n)
            u = (bits >> np.uint64(11)).astype(np.float64) * 2.0**-53
            prod = np.where(active, prod * u, prod)
            k += (active & (prod > limit)).astype(np.float64)
            active = prod > limit
            draw += 1
        out[small] = k
    return out.reshape(lam.shape)


def degrade(clean: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    """Simulated low-dose image: additive gaussian noise, optional photon-count
    perturbation, clamped back to [0,1]. Never mutates `clean`."""
    x = np.asarray(clean, dtype=np.float32)
    y = x.astype(np.float64)
    if spec.poisson_photons:
        lam = np.clip(y, 0.0, 1.0) * spec.poisson_photons
        y = _poisson_counts(lam, derive_seed(spec.seed, 101)) / spec.poisson_photons
    if spec.gaussian_sigma > 0:
        y = y + spec.gaussian_sigma * gaussian_field(derive_seed(spec.seed, 7), x.shape).astype(np.float64)
    return np.clip(y, 0.0, 1.0).astype(np.float32)


_ROTATIONS = (0, 1, 2, 3)
_FLIPS = ("none", "h", "v")


def _apply_aug(img: np.ndarray, rot: int, flip: str) -> np.ndarray:
    out = np.rot90(img, rot, axes=(-2, -1)) if rot else img
    if flip == "h":
        out = out[..., :, ::-1]
    elif flip == "v":
        out = out[..., ::-1, :]
    return np.ascontiguousarray(out)


def augment(pair: ImagePair, rng: Rng) -> ImagePair:
    """Random 90-degree rotation x horizontal/vertical flip, same draw applied
    to both images. Rotations require square images."""
    rot = rng.choice(_ROTATIONS)
    flip = rng.choice(_FLIPS)
    h, w = pair.fdct.shape[-2:]
    if rot % 2 and h != w:
        raise ConfigError(f"90/270-degree rotation needs square images, got ({h},{w})")
    return ImagePair(
        ldct=_apply_aug(pair.ldct, rot, flip),
        fdct=_apply_aug(pair.fdct, rot, flip),
        tag=pair.tag,
    )


def normalize(raw: np.ndarray, lo: float = -160.0, hi: float = 240.0) -> np.ndarray:
    """Affine window map to [0,1] with clamping; defaults to the usual
    soft-tissue display window."""
    if hi <= lo:
        raise ConfigError(f"normalize window must satisfy hi > lo, got [{lo}, {hi}]")
    out = (np.asarray(raw, dtype=np.float32) - lo) / (hi - lo)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def denormalize(norm: np.ndarray, lo: float = -160.0, hi: float = 240.0) -> np.ndarray:
    if hi <= lo:
        raise ConfigError(f"denormalize window must satisfy hi > lo, got [{lo}, {hi}]")
    return (np.asarray(norm, dtype=np.float32) * (hi - lo) + lo).astype(np.float32)


# ---------------------------------------------------------------------------
# corpus on disk
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.tsv"
TRAIN_MANIFEST = "train.tsv"
TEST_MANIFEST = "test.tsv"


def _manifest_lines(entries) -> str:
    return "".join(f"{i}\t{lp}\t{fp}\t{seed}\n" for i, lp, fp, seed in entries)


def build_corpus(n_train: int, n_test: int, phantom: PhantomSpec, noise: NoiseSpec, out_dir: str) -> str:
    """Write n_train+n_test image pairs plus manifests; returns the directory.

    Per-image streams are derived from (base seed, index), so the split is
    seed-disjoint and regeneration is bit-identical. Manifest paths are
    relative to the manifest itself, keeping corpora relocatable and rebuilds
    byte-identical. Images land first; the manifests are written last and
    atomically, so a failed build leaves no manifest behind.
    """
    if n_train < 1 or n_test < 1:
        raise UsageError("need at least one train and one test pair")
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i in range(n_train + n_test):
        pseed = derive_seed(phantom.seed, i)
        nseed = derive_seed(noise.seed, i)
        clean = make_phantom(replace(phantom, seed=pseed))
        noisy = degrade(clean, replace(noise, seed=nseed))
        fname, lname = f"fdct_{i:04d}.wten", f"ldct_{i:04d}.wten"
        save_wten(os.path.join(out_dir, fname), clean)
        save_wten(os.path.join(out_dir, lname), noisy)
        entries.append((i, lname, fname, nseed))
    atomic_write_bytes(os.path.join(out_dir, MANIFEST_NAME), _manifest_lines(entries).encode())
    atomic_write_bytes(os.path.join(out_dir, TRAIN_MANIFEST), _manifest_lines(entries[:n_train]).encode())
    atomic_write_bytes(os.path.join(out_dir, TEST_MANIFEST), _manifest_lines(entries[n_train:]).encode())
    return out_dir


def load_manifest(path: str) -> list[tuple[int, str, str, int]]:
    """Entries as (index, ldct_path, fdct_path, seed); relative paths resolve
    against the manifest's directory."""
    if not os.path.exists(path):
        raise UsageError(f"manifest not found: {path}")
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            idx, lp, fp, seed = line.split("\t")
            if not os.path.isabs(lp):
                lp = os.path.join(base, lp)
            if not os.path.isabs(fp):
                fp = os.path.join(base, fp)
            entries.append((int(idx), lp, fp, int(seed)))
    if not entries:
        raise UsageError(f"manifest is empty: {path}")
    return entries


def load_pair(entry) -> ImagePair:
    idx, lp, fp, _ = entry
    return ImagePair(ldct=load_wten(lp), fdct=load_wten(fp), tag=str(idx))
