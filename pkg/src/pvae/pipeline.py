"""End-to-end orchestration: segment preparation, the three training loops
with early stopping, bundle serialization, and waveform-in/waveform-out
enhancement.

Training runs in float32 so that checkpoints (which store float32 payloads)
round-trip bit-exactly; all loops are deterministic functions of (seed,
config, dataset).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import CHECKPOINT_FORMAT_VERSION, autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint
from .datagen import MixTriple
from .diploss import LossWeights, dip_total_loss
from .dsp import Spectrogram, Waveform, apply_mask, istft, lps, lps_to_magnitude, stft
from .nn import Adam, clip_grad_norm
from .nsvae import NsvaeModel, permutation_loss
from .vae import VaeModel, reparameterize


@dataclass
class TrainConfig:
    max_epochs: int = 500
    patience: int = 20
    batch_size: int = 128
    lr: float = 1e-4
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    segment_len: int = 64
    val_fraction: float = 0.2

    def __post_init__(self):
        if min(self.max_epochs, self.patience, self.batch_size,
               self.segment_len) < 1 or self.lr <= 0:
            raise ValueError("training hyperparameters must be positive")
        if self.patience >= self.max_epochs:
            raise ValueError("patience must be smaller than max_epochs")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")


@dataclass
class ModelBundle:
    """The three trained models plus the loss weights each VAE was trained
    with; latent dimensions must agree so posteriors can be matched."""

    cvae: VaeModel
    nvae: VaeModel
    nsvae: NsvaeModel
    cvae_weights: LossWeights = field(default_factory=LossWeights)
    nvae_weights: LossWeights = field(default_factory=LossWeights)
    format_version: int = CHECKPOINT_FORMAT_VERSION

    def __post_init__(self):
        dims = {self.cvae.latent_dim, self.nvae.latent_dim, self.nsvae.latent_dim}
        if len(dims) != 1:
            raise ValueError(f"latent dims disagree: {sorted(dims)}")
        if self.cvae.role != "speech" or self.nvae.role != "noise":
            raise ValueError("bundle wants a speech cvae and a noise nvae")


# ---------------------------------------------------------------------------
# Segment preparation
# ---------------------------------------------------------------------------

def waveform_to_lps(w: Waveform) -> np.ndarray:
    """Frame-major (T, F) log-power sequence for one clip."""
    return lps(stft(w).frames).T


def make_segments(seqs: list[np.ndarray], segment_len: int) -> np.ndarray:
    """Chop (T, F) sequences into non-overlapping (N, segment_len, F) blocks.

    Tail frames that do not fill a block are dropped; the GRU state is
    implicitly reset at every block boundary because forward passes always
    start from the zero state.
    """
    out = []
    for seq in seqs:
        n_blocks = seq.shape[0] // segment_len
        for i in range(n_blocks):
            out.append(seq[i * segment_len:(i + 1) * segment_len])
    if not out:
        raise ValueError(
            f"no clip provides even one {segment_len}-frame segment")
    return np.stack(out)


def _split(n: int, val_fraction: float, rng: np.random.Generator):
    if n < 2:
        raise ValueError("need at least 2 segments for a train/val split")
    perm = rng.permutation(n)
    n_val = min(max(1, int(round(n * val_fraction))), n - 1)
    return perm[n_val:], perm[:n_val]


# ---------------------------------------------------------------------------
# Generic epoch loop
# ---------------------------------------------------------------------------

def _run_training(model, batch_loss, segments, cfg: TrainConfig):
    """Adam + gradient clipping + patience-based early stopping.

    batch_loss(indices, rng) -> scalar loss Tensor over those segments.
    Returns (log, best_params) where log is a list of (epoch, train, val)
    and best_params maps names to copies of the best-validation weights.
    """
    split_rng = np.random.default_rng(cfg.seed + 1)
    shuffle_rng = np.random.default_rng(cfg.seed + 2)
    eps_rng = np.random.default_rng(cfg.seed + 3)
    train_idx, val_idx = _split(len(segments), cfg.val_fraction, split_rng)

    params = model.named_parameters()
    opt = Adam(list(params.values()), lr=cfg.lr)
    log: list[tuple[int, float, float]] = []
    best_val = np.inf
    best_params = {n: p.data.copy() for n, p in params.items()}
    bad_epochs = 0

    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(len(train_idx))
        total, count = 0.0, 0
        for lo in range(0, len(order), cfg.batch_size):
            chunk = train_idx[order[lo:lo + cfg.batch_size]]
            loss = batch_loss(chunk, eps_rng)
            opt.zero_grad()
            ad.backward(loss)
            clip_grad_norm(list(params.values()), 5.0)
            opt.step()
            total += loss.item() * len(chunk)
            count += len(chunk)
        train_loss = total / count

        # fresh generator each epoch: identical validation draws keep the
        # early-stopping signal comparable across epochs
        val_rng = np.random.default_rng(cfg.seed + 4)
        with ad.no_grad():
            vtotal = 0.0
            for lo in range(0, len(val_idx), cfg.batch_size):
                chunk = val_idx[lo:lo + cfg.batch_size]
                vtotal += batch_loss(chunk, val_rng).item() * len(chunk)
            val_loss = vtotal / len(val_idx)

        log.append((epoch, train_loss, val_loss))
        if val_loss < best_val:
            best_val = val_loss
            best_params = {n: p.data.copy() for n, p in params.items()}
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                break

    for name, p in params.items():
        p.data = best_params[name]
    return log


# ---------------------------------------------------------------------------
# Training entry points
# ---------------------------------------------------------------------------

def pretrain_vae(role: str, dataset: list[Waveform], cfg: TrainConfig,
                 hidden_dim: int = 512, latent_dim: int = 128,
                 dtype=np.float32):
    """Train one VAE on clean clips of its role; returns (model, log)."""
    if not dataset:
        raise ValueError("dataset is empty")
    segments = make_segments([waveform_to_lps(w) for w in dataset],
                             cfg.segment_len).astype(dtype)
    model = VaeModel(input_dim=segments.shape[2], hidden_dim=hidden_dim,
                     latent_dim=latent_dim, role=role,
                     rng=np.random.default_rng(cfg.seed), dtype=dtype)

    def batch_loss(idx, rng):
        return dip_total_loss(model, segments[idx], cfg.loss_weights, rng)

    log = _run_training(model, batch_loss, segments, cfg)
    return model, log


def train_nsvae(cvae: VaeModel, nvae: VaeModel, triples: list[MixTriple],
                cfg: TrainConfig, dtype=np.float32):
    """Match NSVAE posteriors to the frozen pretrained ones; (model, log)."""
    if not triples:
        raise ValueError("no training triples")
    if cvae.latent_dim != nvae.latent_dim:
        raise ValueError(
            f"latent dims disagree: {cvae.latent_dim} vs {nvae.latent_dim}")
    cvae.freeze()
    nvae.freeze()

    seqs = [(waveform_to_lps(t.mixture), waveform_to_lps(t.speech),
             waveform_to_lps(t.noise)) for t in triples]
    y = make_segments([s[0] for s in seqs], cfg.segment_len).astype(dtype)
    x = make_segments([s[1] for s in seqs], cfg.segment_len).astype(dtype)
    v = make_segments([s[2] for s in seqs], cfg.segment_len).astype(dtype)

    model = NsvaeModel(input_dim=y.shape[2], hidden_dim=cvae.hidden_dim,
                       latent_dim=cvae.latent_dim,
                       rng=np.random.default_rng(cfg.seed), dtype=dtype)

    def batch_loss(idx, rng):
        return permutation_loss(model, cvae, nvae, y[idx], x[idx], v[idx])

    log = _run_training(model, batch_loss, y, cfg)
    return model, log


# ---------------------------------------------------------------------------
# Enhancement
# ---------------------------------------------------------------------------

@dataclass
class EnhanceResult:
    enhanced: Waveform
    mask: np.ndarray              # (F, N) in (0, 1)
    speech_lps: np.ndarray        # (T, F) decoder mean for speech
    noise_lps: np.ndarray         # (T, F) decoder mean for noise
    z_speech: np.ndarray          # (T, L) latents fed to the decoders
    z_noise: np.ndarray


def enhance_details(bundle: ModelBundle, noisy: Waveform,
                    sample_latent: bool = False,
                    rng: np.random.Generator | None = None) -> EnhanceResult:
    """Masked enhancement with intermediates exposed for analysis.

    Latents default to the posterior means, giving deterministic output;
    sample_latent draws through the reparameterization instead.
    """
    spec = stft(noisy)
    y = lps(spec.frames).T.astype(bundle.nsvae.dtype)
    with ad.no_grad():
        qx, qv = bundle.nsvae.encode(y)
        if sample_latent:
            rng = rng or np.random.default_rng(0)
            z_x = reparameterize(qx, rng).z.data
            z_v = reparameterize(qv, rng).z.data
        else:
            z_x = qx.mu_array
            z_v = qv.mu_array
        x_lps = bundle.cvae.decode(z_x.astype(bundle.cvae.dtype)).mu_array
        v_lps = bundle.nvae.decode(z_v.astype(bundle.nvae.dtype)).mu_array

    x_mag = lps_to_magnitude(x_lps.astype(np.float64).T)
    v_mag = lps_to_magnitude(v_lps.astype(np.float64).T)
    masked = apply_mask(x_mag, v_mag, spec.frames)
    out = istft(Spectrogram(frames=masked, frame_len=spec.frame_len,
                            hop=spec.hop))
    return EnhanceResult(enhanced=out, mask=x_mag / (x_mag + v_mag),
                         speech_lps=x_lps, noise_lps=v_lps,
                         z_speech=z_x, z_noise=z_v)


def enhance(bundle: ModelBundle, noisy: Waveform, sample_latent: bool = False,
            rng: np.random.Generator | None = None) -> Waveform:
    return enhance_details(bundle, noisy, sample_latent, rng).enhanced


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def write_training_log(path, log) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss"])
        for epoch, train_loss, val_loss in log:
            writer.writerow([epoch, repr(float(train_loss)),
                             repr(float(val_loss))])


def _weights_dict(w: LossWeights) -> dict:
    return {"beta": w.beta, "lambda_od": w.lambda_od, "lambda_d": w.lambda_d}


def save_bundle(path, bundle: ModelBundle) -> None:
    config = {
        "kind": "bundle",
        "format_version": bundle.format_version,
        "cvae": bundle.cvae.config(),
        "nvae": bundle.nvae.config(),
        "nsvae": bundle.nsvae.config(),
        "cvae_weights": _weights_dict(bundle.cvae_weights),
        "nvae_weights": _weights_dict(bundle.nvae_weights),
    }
    tensors = {}
    for prefix, model in (("cvae", bundle.cvae), ("nvae", bundle.nvae),
                          ("nsvae", bundle.nsvae)):
        for name, p in model.named_parameters().items():
            tensors[f"{prefix}.{name}"] = p.data
    save_checkpoint(path, config, tensors)


def load_bundle(path, dtype=np.float32) -> ModelBundle:
    from .checkpoint import CheckpointError, _assign

    config, tensors = load_checkpoint(path)
    if config.get("kind") != "bundle":
        raise CheckpointError(
            f"config: expected a bundle, got kind {config.get('kind')!r}")
    cvae = VaeModel(dtype=dtype, **config["cvae"])
    nvae = VaeModel(dtype=dtype, **config["nvae"])
    nsvae = NsvaeModel(dtype=dtype, **config["nsvae"])
    for prefix, model in (("cvae", cvae), ("nvae", nvae), ("nsvae", nsvae)):
        sub = {name[len(prefix) + 1:]: arr for name, arr in tensors.items()
               if name.startswith(prefix + ".")}
        _assign(model, sub, path)
    return ModelBundle(cvae=cvae, nvae=nvae, nsvae=nsvae,
                       cvae_weights=LossWeights(**config["cvae_weights"]),
                       nvae_weights=LossWeights(**config["nvae_weights"]),
                       format_version=config["format_version"])
