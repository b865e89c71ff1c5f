"""Quantile forecaster: a compact fusion-transformer-style network.

Data flow, per sample:

  past window  (target + calendar covariates, input_window steps)
  future window (calendar covariates only, horizon steps)
        |  per-feature linear embeddings (scalar -> hidden)
        v
  variable selection per window: a gated residual network over the
  flattened embeddings emits softmax feature weights; the embedding mix
  becomes the position's representation
        |
        v
  single-layer GRU over [past; future]  -> encoded positions
        |
        v
  multi-head attention: horizon positions query all positions up to and
  including themselves (causal mask over the concatenated sequence)
        |
        v
  gated residual post-attention block (GLU skip onto the decoder states,
  layer norm, then a position-wise gated residual network)
        |
        v
  quantile heads: a linear median head plus cumulative softplus
  increments above / decrements below, so per-step quantile values are
  monotone in the level by construction.

All parameters are float64 numpy arrays in one flat, canonically ordered
store; gradients come from the reverse-mode tape in `autodiff` plus a
hand-rolled backward-through-time for the GRU. Weight matrices and biases
initialize uniformly in +/- 1/sqrt(fan_in); layer-norm scales start at 1,
shifts at 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..core import CALENDAR_COLUMNS, DEFAULT_COVARIATES, validate_quantiles
from . import autodiff as ad
from .autodiff import Tensor


class ShapeError(ValueError):
    """Sample shapes disagree with the model configuration."""


@dataclass(frozen=True)
class ModelConfig:
    input_window: int = 672
    horizon: int = 96
    quantiles: tuple[float, ...] = (0.1, 0.5, 0.9)
    hidden_size: int = 32
    attention_heads: int = 4
    dropout: float = 0.1
    covariates: tuple[str, ...] = DEFAULT_COVARIATES

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.input_window < self.horizon:
            raise ValueError(
                f"input_window ({self.input_window}) must be >= horizon ({self.horizon})"
            )
        q = tuple(float(x) for x in self.quantiles)
        validate_quantiles(q)
        object.__setattr__(self, "quantiles", q)
        if self.hidden_size < 1 or self.attention_heads < 1:
            raise ValueError("hidden_size and attention_heads must be >= 1")
        if self.hidden_size % self.attention_heads != 0:
            raise ValueError(
                f"hidden_size {self.hidden_size} not divisible by {self.attention_heads} heads"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        cov = tuple(self.covariates)
        if not cov:
            raise ValueError("at least one covariate column is required")
        unknown = [c for c in cov if c not in CALENDAR_COLUMNS]
        if unknown:
            raise ValueError(f"unknown covariates {unknown}")
        object.__setattr__(self, "covariates", cov)

    @property
    def n_quantiles(self) -> int:
        return len(self.quantiles)

    @property
    def anchor_index(self) -> int:
        """Index of the head anchored directly (the level closest to 0.5)."""
        q = np.asarray(self.quantiles)
        return int(np.argmin(np.abs(q - 0.5)))

    def to_dict(self) -> dict:
        return {
            "input_window": self.input_window,
            "horizon": self.horizon,
            "quantiles": list(self.quantiles),
            "hidden_size": self.hidden_size,
            "attention_heads": self.attention_heads,
            "dropout": self.dropout,
            "covariates": list(self.covariates),
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(
            input_window=d["input_window"],
            horizon=d["horizon"],
            quantiles=tuple(d["quantiles"]),
            hidden_size=d["hidden_size"],
            attention_heads=d["attention_heads"],
            dropout=d["dropout"],
            covariates=tuple(d["covariates"]),
        )


def parameter_spec(config: ModelConfig) -> list[tuple[str, tuple[int, ...], int | None]]:
    """Canonical (name, shape, fan_in) list; fan_in None means layer-norm init."""
    d = config.hidden_size
    spec: list[tuple[str, tuple[int, ...], int | None]] = []

    def linear(prefix, din, dout):
        spec.append((f"{prefix}/w", (din, dout), din))
        spec.append((f"{prefix}/b", (dout,), din))

    for feat in ("target",) + config.covariates:
        linear(f"embed_past/{feat}", 1, d)
    for feat in config.covariates:
        linear(f"embed_future/{feat}", 1, d)

    def grn(prefix, din, dout, with_skip):
        linear(f"{prefix}/in", din, d)
        linear(f"{prefix}/hid", d, dout)
        linear(f"{prefix}/gate", dout, dout)
        linear(f"{prefix}/val", dout, dout)
        if with_skip:
            linear(f"{prefix}/skip", din, dout)
        spec.append((f"{prefix}/ln_gamma", (dout,), None))
        spec.append((f"{prefix}/ln_beta", (dout,), None))

    m_past = 1 + len(config.covariates)
    m_future = len(config.covariates)
    grn("vsn_past", m_past * d, m_past, with_skip=True)
    grn("vsn_future", m_future * d, m_future, with_skip=True)

    spec.append(("gru/w_ih", (d, 3 * d), d))
    spec.append(("gru/w_hh", (d, 3 * d), d))
    spec.append(("gru/b", (3 * d,), d))

    for name in ("q", "k", "v", "o"):
        linear(f"attn/{name}", d, d)

    linear("post_attn/gate", d, d)
    linear("post_attn/val", d, d)
    spec.append(("post_attn/ln_gamma", (d,), None))
    spec.append(("post_attn/ln_beta", (d,), None))

    grn("post_grn", d, d, with_skip=False)

    anchor = config.anchor_index
    linear("head/median", d, 1)
    for i in range(config.n_quantiles - 1 - anchor):
        linear(f"head/up{i}", d, 1)
    for i in range(anchor):
        linear(f"head/down{i}", d, 1)
    return spec


@dataclass(frozen=True, eq=False)
class ModelWeights:
    """Versioned flat parameter store in canonical component order."""

    config: ModelConfig
    rng_seed: int
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    version: int = 1

    def __post_init__(self):
        expected = parameter_spec(self.config)
        if [n for n, _, _ in expected] != list(self.params):
            raise ValueError("parameter names/order do not match the configuration")
        for name, shape, _ in expected:
            arr = self.params[name]
            if arr.shape != shape:
                raise ValueError(f"parameter {name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"parameter {name} contains non-finite values")

    @property
    def n_parameters(self) -> int:
        return sum(int(a.size) for a in self.params.values())

    def copy(self) -> "ModelWeights":
        return ModelWeights(
            config=self.config,
            rng_seed=self.rng_seed,
            params={k: v.copy() for k, v in self.params.items()},
            meta=dict(self.meta),
            version=self.version,
        )

    def equal_values(self, other: "ModelWeights") -> bool:
        return self.config == other.config and all(
            np.array_equal(self.params[k], other.params[k]) for k in self.params
        )


def init_model(config: ModelConfig, seed: int) -> ModelWeights:
    """Deterministic initialization: U(+/- 1/sqrt(fan_in)); LN at identity."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    params: dict[str, np.ndarray] = {}
    for name, shape, fan_in in parameter_spec(config):
        if fan_in is None:
            params[name] = np.ones(shape) if name.endswith("ln_gamma") else np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return ModelWeights(config=config, rng_seed=int(seed), params=params)


# --- sample containers ----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ForecastSample:
    """One (past window, future covariates[, target]) training/inference item."""

    past_target: np.ndarray
    past_covariates: np.ndarray
    future_covariates: np.ndarray
    target: np.ndarray | None = None

    def __post_init__(self):
        pt = np.asarray(self.past_target, dtype=np.float64)
        pc = np.asarray(self.past_covariates, dtype=np.float64)
        fc = np.asarray(self.future_covariates, dtype=np.float64)
        if pt.ndim != 1 or pc.ndim != 2 or fc.ndim != 2:
            raise ShapeError("past_target must be 1-D; covariate blocks must be 2-D")
        if pc.shape[0] != pt.shape[0]:
            raise ShapeError("past covariates must cover the past window")
        if pc.shape[1] != fc.shape[1]:
            raise ShapeError("past and future covariate column counts differ")
        tgt = self.target
        if tgt is not None:
            tgt = np.asarray(tgt, dtype=np.float64)
            if tgt.shape != (fc.shape[0],):
                raise ShapeError("target must match the future window length")
        object.__setattr__(self, "past_target", pt)
        object.__setattr__(self, "past_covariates", pc)
        object.__setattr__(self, "future_covariates", fc)
        object.__setattr__(self, "target", tgt)


def stack_samples(samples) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray | None]:
    if not samples:
        raise ValueError("empty batch")
    past = np.stack([s.past_target for s in samples])
    past_cov = np.stack([s.past_covariates for s in samples])
    fut_cov = np.stack([s.future_covariates for s in samples])
    if any(s.target is None for s in samples):
        target = None
    else:
        target = np.stack([s.target for s in samples])
    return past, past_cov, fut_cov, target


@dataclass(frozen=True, eq=False)
class QuantileForecast:
    """Per-step, per-quantile values; non-decreasing across levels per step."""

    values: np.ndarray  # (horizon, n_quantiles)
    quantiles: tuple[float, ...]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != len(self.quantiles):
            raise ShapeError(f"forecast values of shape {v.shape} do not fit {self.quantiles}")
        if not np.all(np.isfinite(v)):
            raise ValueError("forecast contains non-finite values")
        if np.any(np.diff(v, axis=1) < 0.0):
            raise ValueError("quantile values must be non-decreasing per step")
        object.__setattr__(self, "values", v)

    def point(self, quantile: float) -> np.ndarray:
        for i, q in enumerate(self.quantiles):
            if abs(q - quantile) < 1e-12:
                return self.values[:, i].copy()
        raise ValueError(f"quantile {quantile} not among {self.quantiles}")


# --- forward graph ----------------------------------------------------------------


def _gru_sequence(x_seq: Tensor, w_ih: Tensor, w_hh: Tensor, b: Tensor) -> Tensor:
    """GRU over (B, T, d) inputs with hand-rolled backward-through-time.

    z_t = sigm(xz + hz), r_t = sigm(xr + hr), n_t = tanh(xn + r_t*(h W_n)),
    h_t = n_t + z_t * (h_{t-1} - n_t), h_0 = 0.
    """
    xv, wi, wh, bv = x_seq.value, w_ih.value, w_hh.value, b.value
    bsz, steps, d = xv.shape
    xp = xv @ wi + bv  # (B, T, 3d)
    h = np.zeros((bsz, d))
    hs = np.empty((bsz, steps, d))
    zs = np.empty((bsz, steps, d))
    rs = np.empty((bsz, steps, d))
    ns = np.empty((bsz, steps, d))
    hpn = np.empty((bsz, steps, d))
    for t in range(steps):
        hp = h @ wh
        z = _sigm(xp[:, t, :d] + hp[:, :d])
        r = _sigm(xp[:, t, d : 2 * d] + hp[:, d : 2 * d])
        n = np.tanh(xp[:, t, 2 * d :] + r * hp[:, 2 * d :])
        h = n + z * (h - n)
        zs[:, t], rs[:, t], ns[:, t], hpn[:, t], hs[:, t] = z, r, n, hp[:, 2 * d :], h

    def bwd(g):
        dxp = np.empty((bsz, steps, 3 * d))
        dwh = np.zeros_like(wh)
        dh_next = np.zeros((bsz, d))
        for t in range(steps - 1, -1, -1):
            h_prev = hs[:, t - 1] if t > 0 else np.zeros((bsz, d))
            z, r, n, hp_n = zs[:, t], rs[:, t], ns[:, t], hpn[:, t]
            dh = g[:, t] + dh_next
            dz = dh * (h_prev - n)
            dn = dh * (1.0 - z)
            dh_prev = dh * z
            da_n = dn * (1.0 - n * n)
            dr = da_n * hp_n
            dhp_n = da_n * r
            da_z = dz * z * (1.0 - z)
            da_r = dr * r * (1.0 - r)
            dxp[:, t, :d] = da_z
            dxp[:, t, d : 2 * d] = da_r
            dxp[:, t, 2 * d :] = da_n
            dhp = np.concatenate([da_z, da_r, dhp_n], axis=1)
            dh_prev += dhp @ wh.T
            dwh += h_prev.T @ dhp
            dh_next = dh_prev
        dx = dxp @ wi.T
        dwi = xv.reshape(-1, d).T @ dxp.reshape(-1, 3 * d)
        db = dxp.sum(axis=(0, 1))
        return dx, dwi, dwh, db

    return Tensor(hs, (x_seq, w_ih, w_hh, b), bwd)


def _sigm(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ev = np.exp(x[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def _linear(leaves, prefix, x):
    return ad.add(ad.matmul(x, leaves[f"{prefix}/w"]), leaves[f"{prefix}/b"])


def _grn(leaves, prefix, x, same_dims, dropout_rate, rng, skip=None):
    h = ad.elu(_linear(leaves, f"{prefix}/in", x))
    h = _linear(leaves, f"{prefix}/hid", h)
    h = ad.dropout(h, dropout_rate, rng)
    glu = ad.mul(ad.sigmoid(_linear(leaves, f"{prefix}/gate", h)), _linear(leaves, f"{prefix}/val", h))
    if skip is None:
        skip = x if same_dims else _linear(leaves, f"{prefix}/skip", x)
    normed = ad.layer_norm(ad.add(skip, glu))
    return ad.add(ad.mul(normed, leaves[f"{prefix}/ln_gamma"]), leaves[f"{prefix}/ln_beta"])


def _embed_and_select(leaves, embed_prefix, vsn_prefix, columns, dropout_rate, rng):
    """Per-feature embeddings followed by softmax variable selection."""
    embeds = [
        _linear(leaves, f"{embed_prefix}/{feat}", col[..., None])
        for feat, col in columns
    ]
    flat = ad.concat(embeds, axis=-1)
    logits = _grn(leaves, vsn_prefix, flat, same_dims=False, dropout_rate=dropout_rate, rng=rng)
    alpha = ad.masked_softmax(logits, np.ones(logits.shape, dtype=bool))
    mixed = None
    for f, emb in enumerate(embeds):
        w = ad.slice_(alpha, (slice(None), slice(None), slice(f, f + 1)))
        term = ad.mul(w, emb)
        mixed = term if mixed is None else ad.add(mixed, term)
    return mixed


def _forward_graph(config, params, past, past_cov, fut_cov, rng=None):
    """Build the tape; returns (prediction Tensor (B, H, nq), leaves dict)."""
    bsz = past.shape[0]
    w, h, c = config.input_window, config.horizon, len(config.covariates)
    if past.shape != (bsz, w):
        raise ShapeError(f"past target shape {past.shape}, expected {(bsz, w)}")
    if past_cov.shape != (bsz, w, c):
        raise ShapeError(f"past covariate shape {past_cov.shape}, expected {(bsz, w, c)}")
    if fut_cov.shape != (bsz, h, c):
        raise ShapeError(f"future covariate shape {fut_cov.shape}, expected {(bsz, h, c)}")

    leaves = {name: Tensor(arr) for name, arr in params.items()}
    rate = config.dropout if rng is not None else 0.0

    past_cols = [("target", past)] + [
        (feat, past_cov[:, :, i]) for i, feat in enumerate(config.covariates)
    ]
    fut_cols = [(feat, fut_cov[:, :, i]) for i, feat in enumerate(config.covariates)]
    sel_past = _embed_and_select(leaves, "embed_past", "vsn_past", past_cols, rate, rng)
    sel_fut = _embed_and_select(leaves, "embed_future", "vsn_future", fut_cols, rate, rng)

    seq = ad.concat([sel_past, sel_fut], axis=1)  # (B, W+H, d)
    enc = _gru_sequence(seq, leaves["gru/w_ih"], leaves["gru/w_hh"], leaves["gru/b"])
    dec = ad.slice_(enc, (slice(None), slice(w, w + h), slice(None)))

    d = config.hidden_size
    heads = config.attention_heads
    dk = d // heads

    def to_heads(x, length):
        return ad.transpose(ad.reshape(x, (bsz, length, heads, dk)), (0, 2, 1, 3))

    q = to_heads(_linear(leaves, "attn/q", dec), h)
    k = to_heads(_linear(leaves, "attn/k", enc), w + h)
    v = to_heads(_linear(leaves, "attn/v", enc), w + h)
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dk))
    # horizon position j may look at every position up to itself (index w + j)
    mask = np.arange(w + h)[None, :] <= (w + np.arange(h))[:, None]
    attn = ad.masked_softmax(scores, mask)
    ctx = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (bsz, h, d))
    attn_out = _linear(leaves, "attn/o", ctx)

    gated = ad.mul(
        ad.sigmoid(_linear(leaves, "post_attn/gate", attn_out)),
        _linear(leaves, "post_attn/val", attn_out),
    )
    merged = ad.layer_norm(ad.add(dec, gated))
    merged = ad.add(ad.mul(merged, leaves["post_attn/ln_gamma"]), leaves["post_attn/ln_beta"])
    phi = _grn(leaves, "post_grn", merged, same_dims=True, dropout_rate=rate, rng=rng)

    anchor = config.anchor_index
    ordered: list = [None] * config.n_quantiles
    ordered[anchor] = _linear(leaves, "head/median", phi)
    cur = ordered[anchor]
    for i, idx in enumerate(range(anchor + 1, config.n_quantiles)):
        cur = ad.add(cur, ad.softplus(_linear(leaves, f"head/up{i}", phi)))
        ordered[idx] = cur
    cur = ordered[anchor]
    for i, idx in enumerate(range(anchor - 1, -1, -1)):
        cur = ad.sub(cur, ad.softplus(_linear(leaves, f"head/down{i}", phi)))
        ordered[idx] = cur
    pred = ad.concat(ordered, axis=-1)
    return pred, leaves


def forward_batch(config, params, past, past_cov, fut_cov) -> np.ndarray:
    """Inference-mode predictions (B, horizon, n_quantiles); dropout off."""
    pred, _ = _forward_graph(config, params, past, past_cov, fut_cov, rng=None)
    return pred.value


def forward(weights: ModelWeights, sample: ForecastSample) -> QuantileForecast:
    """Deterministic single-sample inference."""
    past, past_cov, fut_cov, _ = stack_samples([sample])
    values = forward_batch(weights.config, weights.params, past, past_cov, fut_cov)
    return QuantileForecast(values=values[0], quantiles=weights.config.quantiles)


def pinball_graph(config, pred: Tensor, target: np.ndarray) -> Tensor:
    q = np.asarray(config.quantiles)
    r = ad.sub(target[..., None], pred)
    return ad.mean_(ad.maximum(ad.mul(r, q), ad.mul(r, q - 1.0)))


def loss_and_gradients_raw(config, params, batch, dropout_rng=None):
    """(loss, grads by name) for a list of samples with targets.

    With dropout_rng=None the network runs deterministically (no dropout),
    which is what gradient checking needs.
    """
    past, past_cov, fut_cov, target = stack_samples(batch)
    if target is None:
        raise ValueError("every sample in a training batch needs a target")
    pred, leaves = _forward_graph(config, params, past, past_cov, fut_cov, rng=dropout_rng)
    loss = pinball_graph(config, pred, target)
    ad.backward(loss)
    grads = {
        name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value))
        for name, leaf in leaves.items()
    }
    return float(loss.value), grads


def loss_and_gradients(weights: ModelWeights, batch, dropout_rng=None):
    return loss_and_gradients_raw(weights.config, weights.params, batch, dropout_rng)


def evaluate_pinball(config, params, samples, batch_size: int = 256) -> float:
    """Mean pinball loss over `samples`, inference mode, sample-weighted."""
    if not samples:
        raise ValueError("no samples to evaluate")
    total = 0.0
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        past, past_cov, fut_cov, target = stack_samples(chunk)
        if target is None:
            raise ValueError("evaluation samples need targets")
        pred = forward_batch(config, params, past, past_cov, fut_cov)
        q = np.asarray(config.quantiles)
        r = target[..., None] - pred
        total += float(np.sum(np.maximum(q * r, (q - 1.0) * r))) / (
            config.horizon * config.n_quantiles
        )
    return total / len(samples)
