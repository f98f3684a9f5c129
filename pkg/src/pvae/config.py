"""Flat `key = value` run configuration.

One file drives every command: topology, training hyperparameters, loss
weights, synthetic-data sizing, and the seed. Defaults are the full-scale
values; desk-scale runs override the topology and dataset keys.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .diploss import LossWeights
from .pipeline import TrainConfig


@dataclass
class RunConfig:
    # topology
    hidden_dim: int = 512
    latent_dim: int = 128
    # training
    max_epochs: int = 500
    patience: int = 20
    batch_size: int = 128
    lr: float = 1e-4
    segment_len: int = 64
    val_fraction: float = 0.2
    seed: int = 0
    # pretraining loss
    beta: float = 1.0
    lambda_od: float = 0.0
    lambda_d: float = 0.0
    # synthetic data
    n_speech: int = 40
    n_noise: int = 40
    n_eval: int = 8
    duration_s: float = 2.5
    snr_lo: float = -10.0
    snr_hi: float = 15.0
    snr_eval: float = 0.0
    # optional WAV ingestion root with speech/ and noise/ subdirectories;
    # empty means synthesize
    data_dir: str = ""

    def loss_weights(self) -> LossWeights:
        return LossWeights(beta=self.beta, lambda_od=self.lambda_od,
                           lambda_d=self.lambda_d)

    def train_config(self, loss_weights: LossWeights | None = None,
                     seed: int | None = None) -> TrainConfig:
        return TrainConfig(
            max_epochs=self.max_epochs, patience=self.patience,
            batch_size=self.batch_size, lr=self.lr,
            seed=self.seed if seed is None else seed,
            loss_weights=self.loss_weights() if loss_weights is None else loss_weights,
            segment_len=self.segment_len, val_fraction=self.val_fraction)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed)


def parse_config_text(text: str) -> RunConfig:
    """Parse `key = value` lines; `#` starts a comment, blanks are skipped."""
    types = {f.name: f.type for f in fields(RunConfig)}
    casts = {"int": int, "float": float, "str": str}
    seen: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in types:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        try:
            seen[key] = casts[types[key]](value)
        except ValueError as exc:
            raise ValueError(
                f"line {lineno}: bad {types[key]} for {key!r}: {value!r}") from exc
    return RunConfig(**seen)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config_text(fh.read())
