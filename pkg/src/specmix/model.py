"""The unmixing network: spatial-attention CNN encoder and Gaussian decoder.

The encoder maps an odd-sized hyperspectral patch to a Dirichlet
concentration vector for the patch's center pixel.  Feature maps keep the
patch's spatial size at every stage; a sigmoid attention map built from
channel-pooled features weights each location before aggregation.  The
decoder is a two-hidden-layer MLP producing a diagonal Gaussian over the
spectrum, and doubles as the endmember extractor: decoding the one-hot
abundance e_k yields the model's estimate of endmember k.
"""

import io
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import patch_batch
from .errors import ContractError, FormatError, ShapeError
from .tensor import BufferPool, RunningStats, Tensor

SOFTPLUS_FLOOR = 1e-4
ALPHA_FLOOR = 1e-6

CHECKPOINT_MAGIC = b"SPMX"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    bands: int
    endmembers: int
    hidden_channels: int = 64
    patch_size: int = 7
    concentration_scale: float = 10.0
    decoder_hidden: int = 128

    def __post_init__(self):
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ContractError(f"patch_size must be odd and >= 1, got {self.patch_size}")


class ConvBlock:
    """conv 3x3 -> batch norm -> relu, with pooled conv scratch buffers.

    The convolution runs bias-free: batch norm's mean subtraction cancels
    any conv bias exactly, which would leave a dead parameter.
    """

    def __init__(self, name, cin, cout, rng):
        std = np.sqrt(2.0 / (cin * 9))
        self.kernel = Tensor(rng.normal(0.0, std, size=(cout, cin, 3, 3)),
                             requires_grad=True, name=f"{name}.kernel")
        self.bias = Tensor(np.zeros(cout), name=f"{name}.bias")
        self.gamma = Tensor(np.ones(cout), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(cout), requires_grad=True, name=f"{name}.beta")
        self.stats = RunningStats(cout)
        self.pool = BufferPool()

    def __call__(self, x, training):
        y = T.conv2d_nhwc(x, self.kernel, self.bias, pool=self.pool)
        y = T.batchnorm2d_nhwc(y, self.gamma, self.beta, self.stats, training)
        return T.relu(y)

    def parameters(self):
        return [self.kernel, self.gamma, self.beta]

    def buffers(self):
        return [(f"{self.gamma.name[:-6]}.running_mean", self.stats.mean),
                (f"{self.gamma.name[:-6]}.running_var", self.stats.var)]


class EncoderParams:
    """Stem conv block, six body blocks, 1x1 head, and the attention conv."""

    def __init__(self, config, rng):
        c = config.hidden_channels
        k = config.endmembers
        self.config = config
        self.stem = ConvBlock("encoder.stem", config.bands, c, rng)
        self.body = [ConvBlock(f"encoder.body{i}", c, c, rng) for i in range(6)]
        # small head init keeps the initial z' spread modest, so softmax
        # starts near-uniform instead of in the stiff tails of the KL
        std_head = 0.01
        self.head_kernel = Tensor(rng.normal(0.0, std_head, size=(k, c, 1, 1)),
                                  requires_grad=True, name="encoder.head.kernel")
        self.head_bias = Tensor(np.zeros(k), requires_grad=True, name="encoder.head.bias")
        std_attn = np.sqrt(2.0 / (2 * 9))
        self.attn_kernel = Tensor(rng.normal(0.0, std_attn, size=(1, 2, 3, 3)),
                                  requires_grad=True, name="encoder.attn.kernel")
        self.attn_bias = Tensor(np.zeros(1), requires_grad=True, name="encoder.attn.bias")
        self.attn_pool = BufferPool()

    def parameters(self):
        ps = self.stem.parameters()
        for blk in self.body:
            ps += blk.parameters()
        ps += [self.head_kernel, self.head_bias, self.attn_kernel, self.attn_bias]
        return ps

    def buffers(self):
        bs = self.stem.buffers()
        for blk in self.body:
            bs += blk.buffers()
        return bs


class DecoderParams:
    """MLP decoder: K -> D -> D with ReLU, then linear heads for mu / pre-sigma."""

    def __init__(self, config, rng):
        k, d, b = config.endmembers, config.decoder_hidden, config.bands
        self.config = config

        def lin(name, nin, nout):
            std = np.sqrt(2.0 / nin)
            w = Tensor(rng.normal(0.0, std, size=(nin, nout)), requires_grad=True,
                       name=f"decoder.{name}.weight")
            bias = Tensor(np.zeros(nout), requires_grad=True, name=f"decoder.{name}.bias")
            return w, bias

        self.w1, self.b1 = lin("fc1", k, d)
        self.w2, self.b2 = lin("fc2", d, d)
        self.wmu, self.bmu = lin("mu", d, b)
        self.wsigma, self.bsigma = lin("sigma", d, b)

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2,
                self.wmu, self.bmu, self.wsigma, self.bsigma]


@dataclass
class ModelParams:
    config: ModelConfig
    encoder: EncoderParams
    decoder: DecoderParams

    def parameters(self):
        return self.encoder.parameters() + self.decoder.parameters()

    def buffers(self):
        return self.encoder.buffers()

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def init_params(config, seed):
    rng = np.random.default_rng(seed)
    return ModelParams(config, EncoderParams(config, rng), DecoderParams(config, rng))


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def encode(params, batch, training=False, return_attention=False):
    """Map a patch batch (N, B, P, P) to concentration vectors (N, K).

    The pipeline is stem -> 6 body blocks -> 1x1 head giving per-endmember
    feature maps F, a sigmoid attention map from channel-pooled F, the
    attention-weighted spatial sum, softmax, and finally the concentration
    scale with a positivity clamp.  With return_attention=True also returns
    the (N, P, P) attention map values for inspection.
    """
    enc = params.encoder if isinstance(params, ModelParams) else params
    cfg = enc.config
    data = batch if isinstance(batch, Tensor) else Tensor(batch)
    if data.data.ndim != 4 or data.data.shape[1] != cfg.bands:
        raise ShapeError(f"encode expects (N, {cfg.bands}, P, P), got {data.data.shape}")
    if data.data.shape[2] % 2 == 0 or data.data.shape[2] != data.data.shape[3]:
        raise ShapeError(f"encode expects square odd patches, got {data.data.shape}")

    x = T.nchw_to_nhwc(data)
    x = enc.stem(x, training)
    for blk in enc.body:
        x = blk(x, training)
    f = T.conv2d_1x1_nhwc(x, enc.head_kernel, enc.head_bias)          # (N,P,P,K)
    avg = T.channel_avg_pool(f, axis=3)
    mx = T.channel_max_pool(f, axis=3)
    att_in = T.concat_channels(avg, mx, axis=3)                       # (N,P,P,2)
    att = T.sigmoid(T.conv2d_nhwc(att_in, enc.attn_kernel, enc.attn_bias,
                                  pool=enc.attn_pool))                # (N,P,P,1)
    zprime = T.weighted_spatial_sum(f, att)                           # (N,K)
    alpha = T.clamp_min(T.mul(T.softmax_lastdim(zprime), cfg.concentration_scale),
                        ALPHA_FLOOR)
    if return_attention:
        return alpha, att.data[..., 0].copy()
    return alpha


def decode(params, z):
    """Map abundance vectors (N, K) to a diagonal Gaussian over spectra.

    Returns (mu, sigma) tensors of shape (N, B); sigma goes through a
    softplus with an additive floor so the likelihood stays finite.
    """
    dec = params.decoder if isinstance(params, ModelParams) else params
    zt = z if isinstance(z, Tensor) else Tensor(z)
    if zt.data.ndim != 2 or zt.data.shape[1] != dec.config.endmembers:
        raise ShapeError(f"decode expects (N, {dec.config.endmembers}), got {zt.data.shape}")
    if np.any(zt.data < 0.0):
        raise ContractError("decode requires nonnegative abundance components")
    h = T.relu(T.linear(zt, dec.w1, dec.b1))
    h = T.relu(T.linear(h, dec.w2, dec.b2))
    mu = T.linear(h, dec.wmu, dec.bmu)
    sigma = T.add(T.softplus(T.linear(h, dec.wsigma, dec.bsigma)), SOFTPLUS_FLOOR)
    return mu, sigma


def extract_endmembers(params):
    """Decode the K one-hot abundance vectors; row k is endmember estimate k.

    Rows are decoded one at a time so they agree bitwise with individual
    decode() calls regardless of BLAS batching.
    """
    dec = params.decoder if isinstance(params, ModelParams) else params
    k = dec.config.endmembers
    rows = []
    for i in range(k):
        onehot = np.zeros((1, k))
        onehot[0, i] = 1.0
        mu, _ = decode(dec, onehot)
        rows.append(mu.data[0])
    return np.stack(rows)


def unmix_scene(params, cube, patch_size=None, batch_pixels=512):
    """Encode every pixel of a cube from its patch neighborhood.

    Returns the (H, W, K) map of posterior-mean abundances (alpha
    normalized to the simplex).  Border patches use reflect padding.
    """
    enc = params.encoder if isinstance(params, ModelParams) else params
    cfg = enc.config
    p = cfg.patch_size if patch_size is None else patch_size
    cube = np.asarray(cube, dtype=np.float64)
    if cube.ndim != 3 or cube.shape[0] < 1 or cube.shape[1] < 1:
        raise ContractError(f"unmix_scene expects an (H, W, B) cube, got {cube.shape}")
    if cube.shape[2] != cfg.bands:
        raise ShapeError(f"cube has {cube.shape[2]} bands, encoder expects {cfg.bands}")
    h, w, _ = cube.shape
    k = cfg.endmembers
    flat_idx = np.arange(h * w)
    out = np.empty((h * w, k))
    for start in range(0, h * w, batch_pixels):
        idx = flat_idx[start:start + batch_pixels]
        patches = patch_batch(cube, p, idx)             # (n, P, P, B)
        nbpp = np.ascontiguousarray(patches.transpose(0, 3, 1, 2))
        alpha = encode(enc, nbpp, training=False)
        a = alpha.data
        out[idx] = a / a.sum(axis=1, keepdims=True)
    return out.reshape(h, w, k)


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

def _write_block(fh, name, arr):
    nb = name.encode("utf-8")
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def save_checkpoint(path, params):
    cfg = params.config
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<5d", cfg.endmembers, cfg.bands, cfg.hidden_channels,
                          cfg.patch_size, cfg.concentration_scale))
    for p in params.parameters():
        _write_block(buf, p.name, p.data)
    for name, arr in params.buffers():
        _write_block(buf, name, arr)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated checkpoint while reading {what}",
                          offset=fh.tell() - len(data))
    return data


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad magic {magic!r}", offset=0)
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}", offset=4)
        k, b, c, p, s = struct.unpack("<5d", _read_exact(fh, 40, "header"))
        blocks = {}
        while True:
            raw = fh.read(4)
            if not raw:
                break
            if len(raw) != 4:
                raise FormatError("truncated block header", offset=fh.tell() - len(raw))
            (nlen,) = struct.unpack("<I", raw)
            name = _read_exact(fh, nlen, "block name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, "block rank"))
            shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "block dims"))
            count = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(_read_exact(fh, 8 * count, f"block {name!r} payload"),
                                 dtype="<f8").reshape(shape)
            blocks[name] = np.array(data)

    d = blocks["decoder.fc1.weight"].shape[1]
    cfg = ModelConfig(bands=int(b), endmembers=int(k), hidden_channels=int(c),
                      patch_size=int(p), concentration_scale=float(s),
                      decoder_hidden=d)
    params = init_params(cfg, seed=0)
    for t in params.parameters():
        if t.name not in blocks:
            raise FormatError(f"checkpoint missing parameter block {t.name!r}")
        if blocks[t.name].shape != t.data.shape:
            raise FormatError(f"parameter {t.name!r} has shape {blocks[t.name].shape}, "
                              f"expected {t.data.shape}")
        t.data = blocks[t.name]
    for name, arr in params.buffers():
        if name not in blocks:
            raise FormatError(f"checkpoint missing buffer block {name!r}")
        arr[:] = blocks[name]
    return params
