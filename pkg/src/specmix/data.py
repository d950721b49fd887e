"""Synthetic scene generation, noise injection, patch extraction, persistence.

Scenes follow the linear mixing model: smooth bump-shaped endmember
spectra, spatially coherent simplex abundance fields (softmax of random
Gaussian-blob fields), and additive white Gaussian noise at a requested
SNR.  A coherence length of zero degenerates to i.i.d. pixels, which is
the stand-in used for the transfer-learning workflow.
"""

import io
import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ContractError, FormatError, GenerationError, ShapeError

SCENE_MAGIC = b"HSIS"
SCENE_VERSION = 1

# abundance fields are normalized then scaled by this gain before the
# per-pixel softmax; ~3 gives scenes with near-pure regions for every
# endmember, which the geometric baselines rely on
FIELD_GAIN = 3.0


@dataclass
class SceneSpec:
    height: int
    width: int
    bands: int
    endmembers: int
    seed: int = 0
    snr_db: float = math.inf
    coherence_length: float = 0.0
    endmember_mode: str = "synthetic"

    def __post_init__(self):
        if min(self.height, self.width, self.bands) < 1 or self.endmembers < 2:
            raise ContractError("scene dims must be >= 1 and endmembers >= 2")
        self.snr_db = float(self.snr_db)
        if not (self.snr_db > 0.0 or math.isinf(self.snr_db)):
            raise ContractError(f"snr_db must be positive or infinite, got {self.snr_db}")

    def to_json(self):
        d = asdict(self)
        if math.isinf(d["snr_db"]):
            d["snr_db"] = "inf"
        return json.dumps(d)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        if not isinstance(d, dict):
            raise ContractError("scene spec must be a JSON object")
        known = {"height", "width", "bands", "endmembers", "seed", "snr_db",
                 "coherence_length", "endmember_mode"}
        for key in d:
            if key not in known:
                raise ContractError(f"unknown scene spec field: {key!r}")
        for key in ("height", "width", "bands", "endmembers"):
            if key not in d:
                raise ContractError(f"scene spec missing field: {key!r}")
        if isinstance(d.get("snr_db"), str):
            if d["snr_db"].lower() not in ("inf", "infinite", "infinity"):
                raise ContractError(f"bad snr_db value: {d['snr_db']!r}")
            d["snr_db"] = math.inf
        return cls(**d)


# ---------------------------------------------------------------------------
# endmember spectra
# ---------------------------------------------------------------------------

def _bump_spectrum(b, rng):
    lam = np.linspace(0.0, 1.0, b)
    base = rng.uniform(0.15, 0.4) + rng.uniform(-0.15, 0.15) * lam
    spec = base
    for _ in range(rng.integers(2, 5)):
        center = rng.uniform(0.0, 1.0)
        width = rng.uniform(0.04, 0.18)
        amp = rng.uniform(0.15, 0.55)
        spec = spec + amp * np.exp(-0.5 * ((lam - center) / width) ** 2)
    return np.clip(spec, 0.05, 1.0)


def sad_value(a, b):
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ContractError("SAD undefined for zero vectors")
    return math.acos(min(1.0, max(-1.0, float(np.dot(a, b) / (na * nb)))))


def generate_endmembers(k, b, seed, min_sad=0.15, max_attempts=100):
    """Draw K bump-shaped spectra with pairwise SAD >= min_sad."""
    if k < 2 or b < k:
        raise ContractError(f"need K >= 2 and B >= K, got K={k}, B={b}")
    rng = np.random.default_rng(seed)
    for _ in range(max_attempts):
        endm = np.stack([_bump_spectrum(b, rng) for _ in range(k)])
        ok = all(sad_value(endm[i], endm[j]) >= min_sad
                 for i in range(k) for j in range(i + 1, k))
        if ok:
            return endm
    raise GenerationError(
        f"could not draw {k} endmembers with pairwise SAD >= {min_sad} "
        f"in {max_attempts} attempts (B={b} too crowded)")


# ---------------------------------------------------------------------------
# abundance fields
# ---------------------------------------------------------------------------

def _blob_field(h, w, length, rng):
    n_blobs = max(8, int(round(2.0 * h * w / (length * length))))
    ii, jj = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    field = np.zeros((h, w))
    for _ in range(n_blobs):
        ci = rng.uniform(-0.5, h - 0.5)
        cj = rng.uniform(-0.5, w - 0.5)
        amp = rng.normal()
        field += amp * np.exp(-((ii - ci) ** 2 + (jj - cj) ** 2) / (2.0 * length * length))
    return field


def generate_abundances(h, w, k, coherence_length, seed):
    """Simplex-valued (H, W, K) map: per-pixel softmax over K random fields.

    coherence_length > 0 builds each field from Gaussian blobs of that
    length scale; 0 degenerates to i.i.d. pixels.
    """
    if coherence_length < 0:
        raise ContractError("coherence_length must be >= 0")
    rng = np.random.default_rng(seed)
    if coherence_length == 0:
        fields = rng.normal(size=(k, h, w))
    else:
        fields = np.stack([_blob_field(h, w, coherence_length, rng) for _ in range(k)])
    flat = fields.reshape(k, -1)
    std = flat.std(axis=1, keepdims=True)
    std[std == 0.0] = 1.0
    flat = (flat - flat.mean(axis=1, keepdims=True)) / std * FIELD_GAIN
    e = np.exp(flat - flat.max(axis=0, keepdims=True))
    z = (e / e.sum(axis=0, keepdims=True)).reshape(k, h, w)
    return np.ascontiguousarray(z.transpose(1, 2, 0))


# ---------------------------------------------------------------------------
# mixing and noise
# ---------------------------------------------------------------------------

def mix_scene(abundances, endmembers, snr_db, rng=None):
    """Linear mixing z^T E plus white Gaussian noise at the requested SNR.

    The noise standard deviation is set from the mean signal power over
    the whole cube; infinite SNR adds no noise.  Negative values are
    clamped at zero.
    """
    abundances = np.asarray(abundances, dtype=np.float64)
    endmembers = np.asarray(endmembers, dtype=np.float64)
    if abundances.shape[-1] != endmembers.shape[0]:
        raise ShapeError(f"abundance K={abundances.shape[-1]} vs "
                         f"endmember K={endmembers.shape[0]}")
    signal = abundances @ endmembers
    if math.isinf(snr_db):
        return signal
    if rng is None:
        rng = np.random.default_rng(0)
    p_signal = np.mean(signal * signal)
    sigma = math.sqrt(p_signal / (10.0 ** (snr_db / 10.0)))
    cube = signal + rng.normal(0.0, sigma, size=signal.shape)
    return np.maximum(cube, 0.0)


def generate_scene(spec, endmembers=None):
    """Generate (cube, abundances, endmembers) for a SceneSpec.

    Child seeds for the three stages are spawned from spec.seed so any
    stage is reproducible in isolation.  `spec.endmember_mode` is either
    "synthetic" (bump-spectrum generator) or a CSV path of user-supplied
    spectra, one endmember per row; an explicit `endmembers` argument
    overrides both.
    """
    ss = np.random.SeedSequence(spec.seed)
    s_endm, s_abund, s_noise = ss.spawn(3)
    if endmembers is None and spec.endmember_mode != "synthetic":
        endmembers = load_endmembers_csv(spec.endmember_mode)
    if endmembers is None:
        endm = generate_endmembers(spec.endmembers, spec.bands,
                                   seed=s_endm)
    else:
        endm = np.asarray(endmembers, dtype=np.float64)
        if endm.shape != (spec.endmembers, spec.bands):
            raise ShapeError(f"endmember matrix {endm.shape} does not match spec "
                             f"({spec.endmembers}, {spec.bands})")
    abund = generate_abundances(spec.height, spec.width, spec.endmembers,
                                spec.coherence_length, seed=s_abund)
    cube = mix_scene(abund, endm, spec.snr_db, rng=np.random.default_rng(s_noise))
    return cube, abund, endm


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------

def reflect_index(i, n):
    """Fold an out-of-range index back into [0, n) by boundary reflection."""
    if n == 1:
        return 0
    period = 2 * (n - 1)
    i = abs(i) % period
    return period - i if i >= n else i


def _padded(cube, wpad):
    h, w, _ = cube.shape
    ri = np.array([reflect_index(i - wpad, h) for i in range(h + 2 * wpad)])
    rj = np.array([reflect_index(j - wpad, w) for j in range(w + 2 * wpad)])
    return cube[np.ix_(ri, rj)]


def patch_batch(cube, patch_size, flat_indices):
    """Gather (n, P, P, B) patches for row-major flat pixel indices."""
    if patch_size % 2 == 0:
        raise ContractError(f"patch_size must be odd, got {patch_size}")
    h, w, b = cube.shape
    wpad = patch_size // 2
    padded = _padded(cube, wpad)
    flat_indices = np.asarray(flat_indices)
    out = np.empty((flat_indices.size, patch_size, patch_size, b))
    for n, fi in enumerate(flat_indices):
        i, j = divmod(int(fi), w)
        out[n] = padded[i:i + patch_size, j:j + patch_size]
    return out


def extract_patches(cube, patch_size):
    """Yield (patch, center_spectrum, (i, j)) for every pixel, row-major."""
    if patch_size % 2 == 0:
        raise ContractError(f"patch_size must be odd, got {patch_size}")
    cube = np.asarray(cube, dtype=np.float64)
    h, w, _ = cube.shape
    wpad = patch_size // 2
    padded = _padded(cube, wpad)
    for i in range(h):
        for j in range(w):
            patch = padded[i:i + patch_size, j:j + patch_size].copy()
            yield patch, cube[i, j].copy(), (i, j)


def split(n_items, fraction, seed):
    """Shuffle indices and split; returns (train_idx, test_idx), exhaustive."""
    if not 0.0 < fraction < 1.0:
        raise ContractError(f"fraction must be in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_items)
    cut = int(round(n_items * fraction))
    return np.sort(perm[:cut]), np.sort(perm[cut:])


# ---------------------------------------------------------------------------
# scene container
# ---------------------------------------------------------------------------

def save_scene(path, cube, abundances, endmembers, spec):
    cube = np.asarray(cube, dtype=np.float64)
    abundances = np.asarray(abundances, dtype=np.float64)
    endmembers = np.asarray(endmembers, dtype=np.float64)
    h, w, b = cube.shape
    k = endmembers.shape[0]
    if abundances.shape != (h, w, k) or endmembers.shape != (k, b):
        raise ShapeError(f"inconsistent scene arrays: cube {cube.shape}, "
                         f"abundances {abundances.shape}, endmembers {endmembers.shape}")
    buf = io.BytesIO()
    buf.write(SCENE_MAGIC)
    buf.write(struct.pack("<I", SCENE_VERSION))
    buf.write(struct.pack("<4I", h, w, b, k))
    buf.write(cube.tobytes())
    buf.write(abundances.tobytes())
    buf.write(endmembers.tobytes())
    trailer = spec.to_json().encode("utf-8")
    buf.write(struct.pack("<I", len(trailer)))
    buf.write(trailer)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated scene file while reading {what}",
                          offset=fh.tell() - len(data))
    return data


def load_scene(path):
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != SCENE_MAGIC:
            raise FormatError(f"bad magic {magic!r}", offset=0)
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != SCENE_VERSION:
            raise FormatError(f"unsupported scene version {version}", offset=4)
        h, w, b, k = struct.unpack("<4I", _read_exact(fh, 16, "dims"))
        cube = np.frombuffer(_read_exact(fh, 8 * h * w * b, "cube"),
                             dtype="<f8").reshape(h, w, b).copy()
        abund = np.frombuffer(_read_exact(fh, 8 * h * w * k, "abundances"),
                              dtype="<f8").reshape(h, w, k).copy()
        endm = np.frombuffer(_read_exact(fh, 8 * k * b, "endmembers"),
                             dtype="<f8").reshape(k, b).copy()
        (tlen,) = struct.unpack("<I", _read_exact(fh, 4, "trailer length"))
        spec = SceneSpec.from_json(_read_exact(fh, tlen, "trailer").decode("utf-8"))
    return cube, abund, endm, spec


# ---------------------------------------------------------------------------
# CSV endmember import
# ---------------------------------------------------------------------------

def load_endmembers_csv(path, header="auto"):
    """Read one endmember spectrum per CSV row.

    An optional first row of band wavelengths is skipped; with
    header="auto" a strictly increasing first row is treated as one.
    """
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            rows.append([float(tok) for tok in line.split(",")])
    if not rows:
        raise FormatError(f"no data rows in {path}")
    first = np.asarray(rows[0])
    if header == "auto":
        header = first.size > 1 and bool(np.all(np.diff(first) > 0))
    if header:
        rows = rows[1:]
    if not rows:
        raise FormatError(f"only a header row in {path}")
    mat = np.asarray(rows, dtype=np.float64)
    if mat.ndim != 2:
        raise FormatError(f"ragged CSV rows in {path}")
    return mat
