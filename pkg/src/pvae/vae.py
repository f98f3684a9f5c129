"""Gaussian VAE over log-power-spectrum frames.

One model class serves both roles (clean speech and noise); the role flag
only selects training data. The encoder maps each F-bin frame to a diagonal
Gaussian over an L-dim latent, causally via a GRU; the decoder mirrors the
encoder in reverse and emits a diagonal Gaussian over F bins.

Batched sequences are laid out time-major: a (B, T, F) batch becomes a
(T*B, F) matrix whose row t*B + b is frame t of sequence b. Frame-local
layers then run as single matmuls and the GRU walks the T row-blocks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import NumericError, Tensor

VAR_FLOOR = 1e-6
LOG_2PI = float(np.log(2.0 * np.pi))


def _np(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


@dataclass
class GaussianParams:
    """Diagonal Gaussian (mu, var); var strictly positive element-wise.

    Fields may be Tensors (inside a training graph) or plain arrays.
    """

    mu: object
    var: object

    def __post_init__(self):
        mu, var = _np(self.mu), _np(self.var)
        if mu.shape != var.shape:
            raise ValueError(f"gaussian params: mu {mu.shape} vs var {var.shape}")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(var))):
            raise ValueError("gaussian params: non-finite values")
        if np.any(var <= 0):
            raise ValueError("gaussian params: variance must be strictly positive")

    @property
    def mu_array(self) -> np.ndarray:
        return _np(self.mu)

    @property
    def var_array(self) -> np.ndarray:
        return _np(self.var)


@dataclass
class LatentSample:
    """A reparameterized draw z = mu + sqrt(var) * epsilon."""

    z: Tensor
    epsilon: np.ndarray


def reparameterize(q: GaussianParams, rng: np.random.Generator) -> LatentSample:
    mu = q.mu if isinstance(q.mu, Tensor) else Tensor(q.mu)
    var = q.var if isinstance(q.var, Tensor) else Tensor(q.var)
    eps = rng.standard_normal(mu.data.shape).astype(mu.data.dtype)
    z = ad.add(mu, ad.mul(ad.sqrt(var), Tensor(eps)))
    return LatentSample(z=z, epsilon=eps)


class VaeModel:
    """Encoder (3 FC-ReLU + GRU + 2 linear heads) and mirrored decoder."""

    def __init__(self, input_dim: int = 257, hidden_dim: int = 512,
                 latent_dim: int = 128, role: str = "speech",
                 rng: np.random.Generator | None = None, dtype=np.float64):
        if role not in ("speech", "noise"):
            raise ValueError(f"role must be 'speech' or 'noise', got {role!r}")
        rng = rng or np.random.default_rng(0)
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.latent_dim = latent_dim
        self.role = role
        self.dtype = np.dtype(dtype)

        def fc(i, o, act="relu"):
            return nn.LinearLayer(i, o, activation=act, rng=rng, dtype=dtype)

        h = hidden_dim
        self.enc_fc = [fc(input_dim, h), fc(h, h), fc(h, h)]
        self.enc_gru = nn.GruLayer(h, h, rng=rng, dtype=dtype)
        self.enc_mu = fc(h, latent_dim, act="none")
        self.enc_logvar = fc(h, latent_dim, act="none")

        self.dec_gru = nn.GruLayer(latent_dim, h, rng=rng, dtype=dtype)
        self.dec_fc = [fc(h, h), fc(h, h), fc(h, h)]
        self.dec_mu = fc(h, input_dim, act="none")
        self.dec_logvar = fc(h, input_dim, act="none")

    # -- parameter plumbing -------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}

        def add_linear(prefix, layer):
            out[f"{prefix}.weight"] = layer.weight
            out[f"{prefix}.bias"] = layer.bias

        def add_gru(prefix, gru):
            for name in ("W_r", "W_z", "W_h", "U_r", "U_z", "U_h", "b_r", "b_z", "b_h"):
                out[f"{prefix}.{name}"] = getattr(gru, name)

        for i, layer in enumerate(self.enc_fc):
            add_linear(f"enc.fc{i}", layer)
        add_gru("enc.gru", self.enc_gru)
        add_linear("enc.mu", self.enc_mu)
        add_linear("enc.logvar", self.enc_logvar)
        add_gru("dec.gru", self.dec_gru)
        for i, layer in enumerate(self.dec_fc):
            add_linear(f"dec.fc{i}", layer)
        add_linear("dec.mu", self.dec_mu)
        add_linear("dec.logvar", self.dec_logvar)
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def encoder_parameters(self) -> list[Tensor]:
        named = self.named_parameters()
        return [p for name, p in named.items() if name.startswith("enc.")]

    def freeze(self) -> None:
        """Make all parameters gradient-free (pretrained target models)."""
        for p in self.parameters():
            p.requires_grad = False

    def config(self) -> dict:
        return {"input_dim": self.input_dim, "hidden_dim": self.hidden_dim,
                "latent_dim": self.latent_dim, "role": self.role}

    # -- forward passes -----------------------------------------------------
    #
    # Every frame is processed with ops whose shapes depend only on the batch
    # size, never on the sequence length: BLAS kernels may change summation
    # order with matrix shape, so per-step processing is what makes encoder
    # causality hold bit-exactly (outputs for frame n never move when later
    # frames are appended).

    def _heads_step(self, trunk: Tensor, mu_head, logvar_head) -> tuple[Tensor, Tensor]:
        mu = mu_head(trunk)
        var = ad.clamp_min(ad.exp(logvar_head(trunk)), VAR_FLOOR)
        return mu, var

    @staticmethod
    def _split_steps(stack: Tensor, n_batch: int) -> list[Tensor]:
        total = stack.data.shape[0]
        if total % n_batch != 0:
            raise ValueError(f"stack of {total} rows does not divide into batches of {n_batch}")
        return [ad.slice_rows(stack, t * n_batch, (t + 1) * n_batch)
                for t in range(total // n_batch)]

    @staticmethod
    def _stack_steps(steps: list[Tensor]) -> Tensor:
        return steps[0] if len(steps) == 1 else ad.concat(steps, axis=0)

    def encode_batch(self, x_stack: Tensor, n_batch: int) -> GaussianParams:
        """Posterior parameters for a time-major (T*B, F) frame stack.

        GRU state starts at zero: callers are responsible for feeding whole
        segments, never continuations.
        """
        h_state = self.enc_gru.initial_state(n_batch, dtype=x_stack.data.dtype)
        mus, vars_ = [], []
        for t, x_t in enumerate(self._split_steps(x_stack, n_batch)):
            try:
                h = x_t
                for layer in self.enc_fc:
                    h = layer(h)
                h_state = self.enc_gru.step(h, h_state)
                mu, var = self._heads_step(h_state, self.enc_mu, self.enc_logvar)
            except NumericError as exc:
                raise NumericError(f"encode frame {t}: {exc}") from exc
            mus.append(mu)
            vars_.append(var)
        return GaussianParams(mu=self._stack_steps(mus), var=self._stack_steps(vars_))

    def encode(self, frames) -> GaussianParams:
        """Single sequence (T, F) -> per-frame posteriors (T, L), causal."""
        arr = _np(frames).astype(self.dtype, copy=False)
        if arr.ndim != 2 or arr.shape[1] != self.input_dim:
            raise ValueError(f"encode: expected (T, {self.input_dim}), got {arr.shape}")
        return self.encode_batch(Tensor(arr), n_batch=1)

    def decode_batch(self, z_stack: Tensor, n_batch: int) -> GaussianParams:
        """Likelihood parameters for a time-major (T*B, L) latent stack."""
        h_state = self.dec_gru.initial_state(n_batch, dtype=z_stack.data.dtype)
        mus, vars_ = [], []
        for t, z_t in enumerate(self._split_steps(z_stack, n_batch)):
            try:
                h_state = self.dec_gru.step(z_t, h_state)
                h = h_state
                for layer in self.dec_fc:
                    h = layer(h)
                mu, var = self._heads_step(h, self.dec_mu, self.dec_logvar)
            except NumericError as exc:
                raise NumericError(f"decode frame {t}: {exc}") from exc
            mus.append(mu)
            vars_.append(var)
        return GaussianParams(mu=self._stack_steps(mus), var=self._stack_steps(vars_))

    def decode(self, z) -> GaussianParams:
        arr = _np(z)
        if arr.ndim != 2 or arr.shape[1] != self.latent_dim:
            raise ValueError(f"decode: expected (T, {self.latent_dim}), got {arr.shape}")
        z_t = z if isinstance(z, Tensor) else Tensor(arr.astype(self.dtype, copy=False))
        return self.decode_batch(z_t, n_batch=1)


# ---------------------------------------------------------------------------
# scalar reference losses (numpy; the training path uses the tensor versions)
# ---------------------------------------------------------------------------

def gaussian_log_likelihood(s, p: GaussianParams) -> float:
    """log N(s; mu, diag var) = -1/2 sum[ log(2 pi var) + (s-mu)^2/var ]."""
    s = _np(s)
    mu, var = p.mu_array, p.var_array
    if s.shape != mu.shape:
        raise ValueError(f"log-likelihood: shape mismatch {s.shape} vs {mu.shape}")
    if np.any(var <= 0):
        raise ValueError("log-likelihood: variance must be positive")
    return float(-0.5 * np.sum(np.log(2.0 * np.pi * var) + (s - mu) ** 2 / var))


def kl_to_standard_normal(q: GaussianParams) -> float:
    """KL( N(mu, diag var) || N(0, I) ) = 1/2 sum(mu^2 + var - log var - 1)."""
    mu, var = q.mu_array, q.var_array
    if np.any(var <= 0):
        raise ValueError("kl: variance must be positive")
    return float(0.5 * np.sum(mu * mu + var - np.log(var) - 1.0))


# ---------------------------------------------------------------------------
# tensor-path loss terms
# ---------------------------------------------------------------------------

def gaussian_nll_sum(s: Tensor, mu: Tensor, var: Tensor) -> Tensor:
    """Summed negative log-likelihood, differentiable through mu and var."""
    quad = ad.mul(ad.square(ad.sub(s, mu)), ad.reciprocal(var))
    core = ad.add(ad.tsum(ad.log(var)), ad.tsum(quad))
    const = 0.5 * LOG_2PI * s.data.size
    return ad.add(ad.mul(core, 0.5), const)


def kl_std_normal_sum(mu: Tensor, var: Tensor) -> Tensor:
    """Summed KL to the standard-normal prior, differentiable."""
    terms = ad.sub(ad.add(ad.square(mu), var), ad.add(ad.log(var), 1.0))
    return ad.mul(ad.tsum(terms), 0.5)


def stack_time_major(batch: np.ndarray, dtype) -> np.ndarray:
    """(B, T, F) -> (T*B, F) with row t*B + b holding frame t of sequence b."""
    if batch.ndim == 2:
        batch = batch[None]
    b, t, f = batch.shape
    return np.ascontiguousarray(batch.transpose(1, 0, 2).reshape(t * b, f)).astype(dtype, copy=False)


def forward_terms(model: VaeModel, batch: np.ndarray, rng: np.random.Generator):
    """One stochastic forward pass; returns per-frame mean NLL and KL plus
    the posterior-mean stack (for covariance regularizers downstream).
    """
    batch = np.asarray(batch)
    if batch.ndim == 2:
        batch = batch[None]
    n_batch = batch.shape[0]
    x = Tensor(stack_time_major(batch, model.dtype))
    q = model.encode_batch(x, n_batch)
    sample = reparameterize(q, rng)
    p = model.decode_batch(sample.z, n_batch)
    n_frames = x.data.shape[0]
    inv = 1.0 / n_frames
    nll_mean = ad.mul(gaussian_nll_sum(x, p.mu, p.var), inv)
    kl_mean = ad.mul(kl_std_normal_sum(q.mu, q.var), inv)
    return nll_mean, kl_mean, q.mu


def elbo_loss(model: VaeModel, batch: np.ndarray, rng: np.random.Generator) -> Tensor:
    """Negated single-sample ELBO, averaged per frame (a minimization target)."""
    if np.asarray(batch).size == 0:
        raise ValueError("elbo_loss: empty batch")
    nll_mean, kl_mean, _ = forward_terms(model, batch, rng)
    return ad.add(nll_mean, kl_mean)
