"""Twin-VAE: two origin-specific VAEs sharing their inner layers, plus a count regressor.

Data flow for a mixed batch::

    x_nat -> enc_outer_nat \\                                      / dec_outer_nat -> recon_nat
                            > enc_shared -> bottleneck -> dec_shared
    x_syn -> enc_outer_syn /                                      \\ dec_outer_syn -> recon_syn
                                                       shared features -> regressor -> count

Both origins are concatenated before the shared layers so that every layer runs
exactly once per step and shared parameters see a single gradient.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import nncore as nn
from .nncore import functional as F
from .nncore.errors import ShapeError

ORIGINS = ("natural", "synthetic")
GROUPS = (
    "enc_outer_nat", "enc_outer_syn", "enc_shared", "bottleneck",
    "dec_shared", "dec_outer_nat", "dec_outer_syn", "regressor",
)
OUTER_GROUPS = ("enc_outer_nat", "enc_outer_syn", "dec_outer_nat", "dec_outer_syn")
CORE_GROUPS = ("enc_shared", "bottleneck", "dec_shared")
_SUFFIX = {"natural": "nat", "synthetic": "syn"}

# outer decoder: kernel, stride, padding, output_padding per layer (8 -> 16 -> 32 -> 64 -> 63 -> 128)
DEC_OUTER_SCHEDULE = ((5, 2, 2, 1), (5, 2, 2, 1), (5, 2, 2, 1), (2, 1, 1, 0), (6, 2, 1, 0))


def origin_groups(origin):
    s = _SUFFIX[origin]
    return (f"enc_outer_{s}", f"dec_outer_{s}")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 128
    enc_channels: tuple = (32, 64, 128, 256)
    shared_channels: int = 512
    fc_hidden: int = 512
    latent_dim: int = 256
    dec_shared_channels: int = 256
    dec_channels: tuple = (128, 64, 32, 16)
    regressor_hidden: tuple = (256, 128)
    kernel: int = 5
    dropout: float = 0.1
    leaky_slope: float = 0.2
    regressor_input: str = "decoder"

    def __post_init__(self):
        object.__setattr__(self, "enc_channels", tuple(self.enc_channels))
        object.__setattr__(self, "dec_channels", tuple(self.dec_channels))
        object.__setattr__(self, "regressor_hidden", tuple(self.regressor_hidden))
        if self.image_size != 128:
            raise ValueError("the architecture is defined for 128x128 inputs only")
        if len(self.enc_channels) != 4 or len(self.dec_channels) != 4:
            raise ValueError("expected 4 outer encoder and 4 intermediate decoder channel counts")
        if self.regressor_input not in ("decoder", "bottleneck"):
            raise ValueError("regressor_input must be 'decoder' or 'bottleneck'")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")

    @classmethod
    def scaled(cls, divisor, **overrides):
        """Paper layout with every convolution channel count divided by ``divisor``."""
        base = cls()
        d = int(divisor)
        return replace(
            base,
            enc_channels=tuple(max(c // d, 1) for c in base.enc_channels),
            shared_channels=max(base.shared_channels // d, 1),
            dec_shared_channels=max(base.dec_shared_channels // d, 1),
            dec_channels=tuple(max(c // d, 1) for c in base.dec_channels),
            **overrides,
        )

    @property
    def bottleneck_spatial(self):
        return self.image_size // 32

    @property
    def flat_dim(self):
        return self.shared_channels * self.bottleneck_spatial ** 2

    @property
    def feature_shape(self):
        s = 2 * self.bottleneck_spatial
        return (self.dec_shared_channels, s, s)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)


def _outer_encoder(cfg):
    layers = []
    cin = 1
    for i, cout in enumerate(cfg.enc_channels):
        conv = nn.Conv2d(cin, cout, cfg.kernel, stride=2, padding=2)
        if i == 0:
            conv.input_grad = False
        layers += [conv, nn.LeakyReLU(cfg.leaky_slope), nn.Dropout(cfg.dropout)]
        cin = cout
    return nn.Sequential(*layers)


def _outer_decoder(cfg):
    chans = (cfg.dec_shared_channels,) + cfg.dec_channels + (1,)
    layers = []
    for i, (k, s, p, op) in enumerate(DEC_OUTER_SCHEDULE):
        layers.append(nn.ConvTranspose2d(chans[i], chans[i + 1], k, s, p, op))
        layers.append(nn.Sigmoid() if i == len(DEC_OUTER_SCHEDULE) - 1
                      else nn.LeakyReLU(cfg.leaky_slope))
    return nn.Sequential(*layers)


class Bottleneck(nn.Module):
    """flat -> fc(512) -> [mu, logvar](256) ... z(256) -> fc(512) -> fc(flat) -> C x 4 x 4."""

    def __init__(self, cfg):
        super().__init__()
        s = cfg.bottleneck_spatial
        self.fc_in = nn.Sequential(
            nn.Linear(cfg.flat_dim, cfg.fc_hidden), nn.LeakyReLU(cfg.leaky_slope),
            nn.Dropout(cfg.dropout),
        )
        self.mu_head = nn.Linear(cfg.fc_hidden, cfg.latent_dim)
        self.logvar_head = nn.Linear(cfg.fc_hidden, cfg.latent_dim)
        self.fc_out = nn.Sequential(
            nn.Linear(cfg.latent_dim, cfg.fc_hidden), nn.LeakyReLU(cfg.leaky_slope),
            nn.Dropout(cfg.dropout),
            nn.Linear(cfg.fc_hidden, cfg.flat_dim), nn.LeakyReLU(cfg.leaky_slope),
            nn.Reshape(cfg.shared_channels, s, s),
        )

    def children(self):
        return [self.fc_in, self.mu_head, self.logvar_head, self.fc_out]

    def reset_parameters(self, rng, gain):
        self.fc_in.reset_parameters(rng, gain)
        self.mu_head.reset_parameters(rng, 1.0)
        self.logvar_head.reset_parameters(rng, 1.0)
        self.fc_out.reset_parameters(rng, gain)

    def encode(self, h, train=False, rng=None):
        h = self.fc_in(h, train, rng)
        return self.mu_head(h), self.logvar_head(h)

    def encode_backward(self, dmu, dlogvar):
        dh = self.mu_head.backward(dmu) + self.logvar_head.backward(dlogvar)
        return self.fc_in.backward(dh)

    def decode(self, z, train=False, rng=None):
        return self.fc_out(z, train, rng)

    def decode_backward(self, dout):
        return self.fc_out.backward(dout)


@dataclass
class ForwardOutput:
    n_nat: int
    mu: np.ndarray
    logvar: np.ndarray
    z: np.ndarray
    eps: np.ndarray | None
    features: np.ndarray
    pred: np.ndarray
    recon: dict = field(default_factory=dict)


class TwinVAE:
    def __init__(self, config=None, seed=0):
        self.config = config or ModelConfig()
        cfg = self.config
        self.enc_outer = {o: _outer_encoder(cfg) for o in ORIGINS}
        self.enc_shared = nn.Sequential(
            nn.Conv2d(cfg.enc_channels[-1], cfg.shared_channels, cfg.kernel, 2, 2),
            nn.LeakyReLU(cfg.leaky_slope), nn.Dropout(cfg.dropout), nn.Flatten(),
        )
        self.bottleneck = Bottleneck(cfg)
        self.dec_shared = nn.Sequential(
            nn.ConvTranspose2d(cfg.shared_channels, cfg.dec_shared_channels, cfg.kernel, 2, 2, 1),
            nn.BatchNorm2d(cfg.dec_shared_channels), nn.LeakyReLU(cfg.leaky_slope),
        )
        self.dec_outer = {o: _outer_decoder(cfg) for o in ORIGINS}
        reg_in = (int(np.prod(cfg.feature_shape)) if cfg.regressor_input == "decoder"
                  else cfg.latent_dim)
        h1, h2 = cfg.regressor_hidden
        self.regressor = nn.Sequential(
            nn.Flatten(), nn.Linear(reg_in, h1), nn.Dropout(cfg.dropout),
            nn.Linear(h1, h2), nn.Dropout(cfg.dropout), nn.Linear(h2, 1),
        )
        self.groups = {
            "enc_outer_nat": self.enc_outer["natural"],
            "enc_outer_syn": self.enc_outer["synthetic"],
            "enc_shared": self.enc_shared,
            "bottleneck": self.bottleneck,
            "dec_shared": self.dec_shared,
            "dec_outer_nat": self.dec_outer["natural"],
            "dec_outer_syn": self.dec_outer["synthetic"],
            "regressor": self.regressor,
        }
        for name, module in self.groups.items():
            module.name_parameters(name, name)
        self.reset_parameters(seed)

    # ------------------------------------------------------------ bookkeeping

    def reset_parameters(self, seed):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
        gain = nn.leaky_relu_gain(self.config.leaky_slope)
        for name in GROUPS:
            module = self.groups[name]
            module.reset_parameters(rng, 1.0 if name == "regressor" else gain)
        for module in self.dec_outer.values():
            module.layers[-2].reset_parameters(rng, 1.0)

    def parameters(self, groups=None):
        names = GROUPS if groups is None else groups
        out = []
        for name in names:
            out.extend(self.groups[name].parameters())
        return out

    def named_buffers(self):
        out = []
        for name in GROUPS:
            for i, (bname, arr) in enumerate(self.groups[name].buffers()):
                out.append((name, f"{name}.{bname}.{i}", arr))
        return out

    def num_parameters(self):
        return sum(p.data.size for p in self.parameters())

    def group_state(self, group):
        return [p.data.copy() for p in self.groups[group].parameters()]

    def state_arrays(self):
        """Copies of every parameter and buffer, keyed by name."""
        out = {p.name: p.data.copy() for p in self.parameters()}
        for _, name, arr in self.named_buffers():
            out[name] = arr.copy()
        return out

    def load_state_arrays(self, arrays):
        for p in self.parameters():
            p.data = np.array(arrays[p.name], dtype=p.data.dtype)
        for _, name, arr in self.named_buffers():
            arr[...] = arrays[name]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def to_dtype(self, dtype):
        for module in self.groups.values():
            module.to_dtype(dtype)
        for module in self.groups.values():
            for layer in _walk(module):
                if isinstance(layer, nn.BatchNorm2d):
                    layer.running_mean = layer.running_mean.astype(dtype)
                    layer.running_var = layer.running_var.astype(dtype)
        return self

    @property
    def dtype(self):
        return self.enc_shared.layers[0].weight.data.dtype

    # ------------------------------------------------------------ building blocks

    def _as_batch(self, images):
        x = np.asarray(images)
        if x.ndim == 2:
            x = x[None]
        if x.ndim == 3:
            x = x[:, None]
        size = self.config.image_size
        if x.ndim != 4 or x.shape[1:] != (1, size, size):
            raise ShapeError(f"expected {size}x{size} grayscale images, got shape {np.shape(images)}")
        return np.ascontiguousarray(x, dtype=self.dtype)

    def encode(self, images, origin, train=False, rng=None):
        x = self._as_batch(images)
        h = self.enc_outer[origin](x, train, rng)
        h = self.enc_shared(h, train, rng)
        return self.bottleneck.encode(h, train, rng)

    @staticmethod
    def reparameterize(mu, logvar, rng=None, train=False):
        if not train:
            return mu.copy()
        eps = rng.standard_normal(mu.shape).astype(mu.dtype)
        return mu + np.exp(0.5 * logvar) * eps

    def decode(self, z, origin, train=False, rng=None):
        z = np.atleast_2d(np.asarray(z, dtype=self.dtype))
        if z.shape[1] != self.config.latent_dim:
            raise ShapeError(f"latent must have {self.config.latent_dim} entries, got {z.shape[1]}")
        feat = self.dec_shared(self.bottleneck.decode(z, train, rng), train, rng)
        recon = self.dec_outer[origin](feat, train, rng)[:, 0]
        return recon, feat

    def regress(self, features, train=False, rng=None):
        f = np.asarray(features, dtype=self.dtype)
        expected = (self.config.feature_shape if self.config.regressor_input == "decoder"
                    else (self.config.latent_dim,))
        if f.shape[1:] != expected:
            if f.shape == expected:
                f = f[None]
            else:
                raise ShapeError(f"regressor expects features of shape {expected}, got {f.shape}")
        return self.regressor(f, train, rng)[:, 0]

    def predict(self, images, origin, batch_size=64):
        """Eval-mode count prediction (latent mean, no dropout)."""
        x = np.asarray(images)
        out = []
        for i in range(0, len(x), batch_size):
            mu, _ = self.encode(x[i:i + batch_size], origin)
            if self.config.regressor_input == "decoder":
                feat = self.dec_shared(self.bottleneck.decode(mu))
            else:
                feat = mu
            out.append(self.regress(feat))
        self.clear_caches()
        return np.concatenate(out) if out else np.zeros(0, self.dtype)

    def clear_caches(self):
        for module in self.groups.values():
            module.clear_cache()

    # ------------------------------------------------------------ training pass

    def forward(self, x_nat, x_syn, train=False, rng=None, decode_outer=True):
        """Joint pass over a natural and a synthetic sub-batch (either may be empty)."""
        inputs = {"natural": x_nat, "synthetic": x_syn}
        hs = []
        n_nat = 0
        for origin in ORIGINS:
            x = inputs[origin]
            if x is None or len(x) == 0:
                continue
            x = self._as_batch(x)
            if origin == "natural":
                n_nat = len(x)
            hs.append(self.enc_outer[origin](x, train, rng))
        if not hs:
            raise ValueError("forward needs at least one image")
        h = hs[0] if len(hs) == 1 else np.concatenate(hs)
        h = self.enc_shared(h, train, rng)
        mu, logvar = self.bottleneck.encode(h, train, rng)
        if train:
            eps = rng.standard_normal(mu.shape).astype(mu.dtype)
            z = mu + np.exp(0.5 * logvar) * eps
        else:
            eps, z = None, mu
        feat = self.dec_shared(self.bottleneck.decode(z, train, rng), train, rng)
        reg_in = feat if self.config.regressor_input == "decoder" else z
        pred = self.regressor(reg_in, train, rng)[:, 0]
        out = ForwardOutput(n_nat=n_nat, mu=mu, logvar=logvar, z=z, eps=eps,
                            features=feat, pred=pred)
        if decode_outer:
            for origin, sl in self._slices(out).items():
                if sl.stop > sl.start:
                    out.recon[origin] = self.dec_outer[origin](feat[sl], train, rng)[:, 0]
        return out

    @staticmethod
    def _slices(out):
        n = len(out.mu)
        return {"natural": slice(0, out.n_nat), "synthetic": slice(out.n_nat, n)}

    def backward(self, out, d_pred, d_recon, d_mu, d_logvar):
        """Accumulate parameter gradients from upstream gradients of the forward outputs."""
        d_reg_in = self.regressor.backward(d_pred[:, None].astype(out.pred.dtype))
        if self.config.regressor_input == "decoder":
            d_feat = d_reg_in
            d_z_extra = 0.0
        else:
            d_feat = np.zeros_like(out.features)
            d_z_extra = d_reg_in
        for origin, sl in self._slices(out).items():
            g = d_recon.get(origin)
            if g is not None and origin in out.recon:
                d_feat[sl] += self.dec_outer[origin].backward(g[:, None])
        dz = self.bottleneck.decode_backward(self.dec_shared.backward(d_feat)) + d_z_extra
        d_mu_total = d_mu + dz
        if out.eps is not None:
            d_lv_total = d_logvar + dz * out.eps * 0.5 * np.exp(0.5 * out.logvar)
        else:
            d_lv_total = d_logvar
        dh = self.enc_shared.backward(self.bottleneck.encode_backward(d_mu_total, d_lv_total))
        for origin, sl in self._slices(out).items():
            if sl.stop > sl.start:
                self.enc_outer[origin].backward(np.ascontiguousarray(dh[sl]))

    def active_groups(self, out, decode_outer=True):
        """Groups that received gradients in the last backward pass."""
        groups = set(CORE_GROUPS) | {"regressor"}
        for origin, sl in self._slices(out).items():
            if sl.stop > sl.start:
                enc, dec = origin_groups(origin)
                groups.add(enc)
                if decode_outer:
                    groups.add(dec)
        return groups


def _walk(module):
    yield module
    for child in module.children():
        yield from _walk(child)


# ---------------------------------------------------------------- twin loss

@dataclass
class LossWeights:
    c_reco: dict = field(default_factory=lambda: {"natural": 100.0, "synthetic": 100.0})
    c_regr: dict = field(default_factory=lambda: {"natural": 3.0, "synthetic": 3.0})
    c_kld: dict = field(default_factory=lambda: {"natural": 2.0, "synthetic": 2.0})
    reco_loss_kind: str = "mse"
    bce_decay_rate: float = 3e-5
    bce_decay_form: str = "exponential"

    def __post_init__(self):
        for name in ("c_reco", "c_regr", "c_kld"):
            v = getattr(self, name)
            if not isinstance(v, dict):
                v = {o: float(v) for o in ORIGINS}
            v = {o: float(v[o]) for o in ORIGINS}
            if any(c < 0 for c in v.values()):
                raise ValueError(f"{name} coefficients must be nonnegative")
            setattr(self, name, v)
        if self.reco_loss_kind not in ("mse", "bce"):
            raise ValueError("reco_loss_kind must be 'mse' or 'bce'")
        if self.bce_decay_form not in ("exponential", "linear"):
            raise ValueError("bce_decay_form must be 'exponential' or 'linear'")

    def effective_c_reco(self, origin, epoch):
        c = self.c_reco[origin]
        if self.reco_loss_kind != "bce":
            return c
        if self.bce_decay_form == "exponential":
            return c * math.exp(-self.bce_decay_rate * epoch)
        return c * max(0.0, 1.0 - self.bce_decay_rate * epoch)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown loss keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LossBreakdown:
    reco: float
    regr: float
    kld: float
    total: float
    n: int
    origin_totals: dict
    items: dict   # per-item arrays: origin, reco, regr, kld, c_reco, c_regr, c_kld


def _per_item_coeffs(origins, table):
    return np.array([table[o] for o in origins], dtype=np.float64)


def loss_terms(out, batch, weights, epoch=0, regr_enabled=True, decode_outer=True):
    """Twin-loss breakdown and upstream gradients for a completed forward pass.

    ``batch`` provides ``images``/``labels`` dicts per origin; label < 1 means unlabeled.
    """
    parts = [(o, batch.images[o], batch.labels[o]) for o in ORIGINS
             if batch.images.get(o) is not None and len(batch.images[o])]
    origins = [o for o, x, _ in parts for _ in range(len(x))]
    labels = np.concatenate([np.asarray(lab, dtype=np.float64) for _, _, lab in parts])
    n = len(origins)
    dtype = out.mu.dtype
    labeled = labels >= 1
    if decode_outer:
        c_reco = np.array([weights.effective_c_reco(o, epoch) for o in origins])
    else:
        c_reco = np.zeros(n)
    c_regr = _per_item_coeffs(origins, weights.c_regr) * labeled * float(regr_enabled)
    c_kld = _per_item_coeffs(origins, weights.c_kld)

    reco = np.zeros(n)
    d_recon = {}
    start = 0
    for origin, x, _ in parts:
        sl = slice(start, start + len(x))
        start += len(x)
        if origin not in out.recon:
            continue
        r = out.recon[origin]
        target = np.asarray(x, dtype=dtype)
        if weights.reco_loss_kind == "mse":
            reco[sl] = F.mse(r, target, reduction="none")
            d_recon[origin] = F.mse_grad(r, target, c_reco[sl].astype(dtype))
        else:
            reco[sl] = F.bce(r, target, reduction="none")
            d_recon[origin] = F.bce_grad(r, target, c_reco[sl].astype(dtype))

    pred = out.pred.astype(np.float64)
    # gated items (unlabeled or still inside the regressor delay) report exactly 0
    regr = np.where(labeled & regr_enabled, (labels - pred) ** 2, 0.0)
    d_pred = (2.0 * c_regr * np.where(labeled, pred - labels, 0.0)).astype(dtype)
    kld = F.kld_standard_normal(out.mu, out.logvar, reduction="none").astype(np.float64)
    d_mu, d_logvar = F.kld_grad(out.mu, out.logvar, c_kld.astype(dtype))

    item_total = c_reco * reco + c_regr * regr + c_kld * kld
    origin_arr = np.array(origins)
    breakdown = LossBreakdown(
        reco=float(reco.mean()),
        regr=float(regr.mean()),
        kld=float(kld.mean()),
        total=float(item_total.sum()),
        n=n,
        origin_totals={o: float(item_total[origin_arr == o].sum()) for o in ORIGINS},
        items={"origin": origin_arr, "reco": reco, "regr": regr, "kld": kld,
               "c_reco": c_reco, "c_regr": c_regr, "c_kld": c_kld},
    )
    grads = {"d_pred": d_pred, "d_recon": d_recon, "d_mu": d_mu, "d_logvar": d_logvar}
    return breakdown, grads


def twin_loss(batch, weights, epoch, model, rng=None, train=False, regr_enabled=True,
              decode_outer=True):
    """Forward ``batch`` through ``model`` and return its :class:`LossBreakdown`."""
    out = model.forward(batch.images.get("natural"), batch.images.get("synthetic"),
                        train=train, rng=rng, decode_outer=decode_outer)
    breakdown, _ = loss_terms(out, batch, weights, epoch, regr_enabled, decode_outer)
    model.clear_caches()
    return breakdown
