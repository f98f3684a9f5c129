"""Command-line surface: data synthesis, the three training stages,
enhancement, evaluation, latent visualization, and the four-setting
ablation grid.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Every command
writes its artifacts under --out and records a manifest (config snapshot,
seed, versions) before any long-running work starts.
"""

from __future__ import annotations

import argparse
import json
import platform
import sys
from pathlib import Path

import numpy as np

from . import CHECKPOINT_FORMAT_VERSION, __version__
from .analysis import (LatentCloud, log_spectral_distance, pca_fit,
                       separation_stats, si_snr, write_latent_csv,
                       write_latent_svg, write_metrics_csv)
from .checkpoint import load_checkpoint, load_model, save_model
from .config import RunConfig, load_config
from .datagen import mix_at_snr, synth_dataset
from .diploss import SETTINGS, LossWeights
from .dsp import Waveform, load_wav, save_wav
from .pipeline import (ModelBundle, enhance, enhance_details, load_bundle,
                       pretrain_vae, save_bundle, train_nsvae,
                       write_training_log)

# fixed offsets deriving each stage's generator from the master seed
SEED_SPEECH, SEED_NOISE = 101, 202
SEED_MIX, SEED_EVAL_SPEECH, SEED_EVAL_NOISE, SEED_EVAL_MIX = 303, 404, 505, 606
SEED_PER_SETTING = 1000


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):          # argparse would sys.exit(2)
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="pvae", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, desc, out=True):
        p = sub.add_parser(name, description=desc)
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--seed", type=int, help="override the config seed")
        if out:
            p.add_argument("--out", required=True, help="output directory")
        return p

    add("synth-data", "write synthetic speech/noise WAV sets")
    p = add("pretrain", "train one VAE on clean clips of one role")
    p.add_argument("--role", required=True, choices=("speech", "noise"))
    p = add("train-nsvae", "train the noisy-speech VAE against frozen targets")
    p.add_argument("--cvae", required=True, help="pretrained speech checkpoint")
    p.add_argument("--nvae", required=True, help="pretrained noise checkpoint")
    p = add("enhance", "enhance one WAV file with a trained bundle", out=False)
    p.add_argument("--bundle", required=True, help="bundle checkpoint")
    p.add_argument("--in", dest="in_path", required=True, help="noisy WAV")
    p.add_argument("--out", required=True, help="output WAV path")
    p.add_argument("--sample-latent", action="store_true",
                   help="draw latents instead of using posterior means")
    p = add("evaluate", "SI-SNR/LSD metrics for a bundle on a fresh eval set")
    p.add_argument("--bundle", required=True)
    p = add("latent-viz", "export the 2-D PCA latent scatter for a bundle")
    p.add_argument("--bundle", required=True)
    p = add("ablation", "train + evaluate the four loss-weight settings")
    p.add_argument("--settings", default="1,2,3,4",
                   help="comma-separated subset of 1,2,3,4")
    return parser


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------

def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def write_manifest(out_dir: Path, command: str, cfg: RunConfig,
                   extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "config": {f: getattr(cfg, f) for f in cfg.__dataclass_fields__},
        "seed": cfg.seed,
        "versions": {
            "package": __version__,
            "checkpoint_format": CHECKPOINT_FORMAT_VERSION,
            "python": platform.python_version(),
            "numpy": np.__version__,
        },
    }
    manifest.update(extra or {})
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_wav_dir(root: Path) -> list[Waveform]:
    paths = sorted(root.glob("*.wav"))
    if not paths:
        raise FileNotFoundError(f"no WAV files under {root}")
    return [load_wav(p) for p in paths]


def make_datasets(cfg: RunConfig) -> tuple[list[Waveform], list[Waveform]]:
    """Training clips for both roles: synthesized, or read from data_dir."""
    if cfg.data_dir:
        root = Path(cfg.data_dir)
        return _load_wav_dir(root / "speech"), _load_wav_dir(root / "noise")
    speech = synth_dataset("speech", cfg.n_speech, cfg.duration_s,
                           np.random.default_rng(cfg.seed + SEED_SPEECH))
    noise = synth_dataset("noise", cfg.n_noise, cfg.duration_s,
                          np.random.default_rng(cfg.seed + SEED_NOISE))
    return speech, noise


def make_training_triples(cfg: RunConfig, speech, noise):
    rng = np.random.default_rng(cfg.seed + SEED_MIX)
    triples = []
    for i, s in enumerate(speech):
        snr = float(rng.uniform(cfg.snr_lo, cfg.snr_hi))
        triples.append(mix_at_snr(s, noise[i % len(noise)], snr, rng))
    return triples


def make_eval_triples(cfg: RunConfig):
    """Held-out mixtures at the fixed evaluation SNR, disjoint seeds."""
    speech = synth_dataset("speech", cfg.n_eval, cfg.duration_s,
                           np.random.default_rng(cfg.seed + SEED_EVAL_SPEECH))
    noise = synth_dataset("noise", cfg.n_eval, cfg.duration_s,
                          np.random.default_rng(cfg.seed + SEED_EVAL_NOISE))
    rng = np.random.default_rng(cfg.seed + SEED_EVAL_MIX)
    return [mix_at_snr(s, v, cfg.snr_eval, rng)
            for s, v in zip(speech, noise)]


# Metrics exclude the first/last FRAME_LEN-HOP samples: those lie under a
# single synthesis window whose taper approaches zero, so any spectral
# modification is amplified without bound there. The comparison stays fair
# because noisy and enhanced are trimmed identically.
EDGE_TRIM = 256


def evaluate_bundle(bundle: ModelBundle, triples) -> list[dict]:
    rows = []
    for i, t in enumerate(triples):
        out = enhance(bundle, t.mixture)
        n = len(out)
        core = slice(EDGE_TRIM, n - EDGE_TRIM)
        ref = t.speech.samples[:n][core]
        noisy = t.mixture.samples[:n][core]
        est = out.samples[core]
        rows.append({
            "clip_id": f"clip_{i:03d}",
            "si_snr_noisy": si_snr(noisy, ref),
            "si_snr_enhanced": si_snr(est, ref),
            "lsd_noisy": log_spectral_distance(noisy, ref),
            "lsd_enhanced": log_spectral_distance(est, ref),
        })
    return rows


def summarize_metrics(rows: list[dict]) -> dict:
    """Mean and standard error of each metric column, labeled as such."""
    out = {"n_clips": len(rows), "statistic": "mean +- standard error"}
    for key in ("si_snr_noisy", "si_snr_enhanced", "lsd_noisy", "lsd_enhanced"):
        vals = np.array([r[key] for r in rows])
        out[key] = {"mean": float(vals.mean()),
                    "stderr": float(vals.std(ddof=1) / np.sqrt(len(vals)))
                    if len(vals) > 1 else 0.0}
    return out


def latent_clouds(bundle: ModelBundle, triples) -> list[LatentCloud]:
    """Per-frame NSVAE posterior means over mixtures, one cloud per branch."""
    zx, zv = [], []
    for t in triples:
        res = enhance_details(bundle, t.mixture)
        zx.append(res.z_speech)
        zv.append(res.z_noise)
    return [LatentCloud(np.concatenate(zx), "speech"),
            LatentCloud(np.concatenate(zv), "noise")]


def export_latents(out_dir: Path, bundle: ModelBundle, triples) -> dict:
    clouds = latent_clouds(bundle, triples)
    pca = pca_fit(clouds)
    write_latent_csv(out_dir / "latents.csv", clouds, pca)
    write_latent_svg(out_dir / "latents.svg", clouds, pca)
    return separation_stats(*clouds)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth_data(args) -> None:
    cfg = _load_run_config(args)
    out = Path(args.out)
    write_manifest(out, "synth-data", cfg)
    speech, noise = make_datasets(cfg)
    for kind, clips in (("speech", speech), ("noise", noise)):
        sub = out / kind
        sub.mkdir(parents=True, exist_ok=True)
        for i, clip in enumerate(clips):
            save_wav(sub / f"{kind}_{i:03d}.wav", clip)


def cmd_pretrain(args) -> None:
    cfg = _load_run_config(args)
    out = Path(args.out)
    write_manifest(out, "pretrain", cfg, {"role": args.role})
    speech, noise = make_datasets(cfg)
    dataset = speech if args.role == "speech" else noise
    model, log = pretrain_vae(args.role, dataset, cfg.train_config(),
                              hidden_dim=cfg.hidden_dim,
                              latent_dim=cfg.latent_dim)
    save_model(out / f"{args.role}_vae.ckpt", model,
               {"loss_weights": vars(cfg.loss_weights())})
    write_training_log(out / f"{args.role}_vae_log.csv", log)


def _weights_from_checkpoint(path) -> LossWeights:
    config, _ = load_checkpoint(path)
    stored = config.get("loss_weights")
    return LossWeights(**stored) if stored else LossWeights()


def cmd_train_nsvae(args) -> None:
    cfg = _load_run_config(args)
    out = Path(args.out)
    write_manifest(out, "train-nsvae", cfg,
                   {"cvae": str(args.cvae), "nvae": str(args.nvae)})
    cvae = load_model(args.cvae)
    nvae = load_model(args.nvae)
    if cvae.role != "speech" or nvae.role != "noise":
        raise ValueError("--cvae must hold a speech model and --nvae a noise model")
    speech, noise = make_datasets(cfg)
    triples = make_training_triples(cfg, speech, noise)
    nsvae, log = train_nsvae(cvae, nvae, triples, cfg.train_config())
    bundle = ModelBundle(cvae=cvae, nvae=nvae, nsvae=nsvae,
                         cvae_weights=_weights_from_checkpoint(args.cvae),
                         nvae_weights=_weights_from_checkpoint(args.nvae))
    save_bundle(out / "bundle.ckpt", bundle)
    write_training_log(out / "nsvae_log.csv", log)


def cmd_enhance(args) -> None:
    cfg = _load_run_config(args)
    bundle = load_bundle(args.bundle)
    noisy = load_wav(args.in_path)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_manifest(out_path.parent, "enhance", cfg,
                   {"bundle": str(args.bundle), "in": str(args.in_path),
                    "out": out_path.name})
    rng = np.random.default_rng(cfg.seed) if args.sample_latent else None
    save_wav(out_path, enhance(bundle, noisy, sample_latent=args.sample_latent,
                               rng=rng))


def cmd_evaluate(args) -> None:
    cfg = _load_run_config(args)
    out = Path(args.out)
    write_manifest(out, "evaluate", cfg, {"bundle": str(args.bundle)})
    bundle = load_bundle(args.bundle)
    rows = evaluate_bundle(bundle, make_eval_triples(cfg))
    write_metrics_csv(out / "metrics.csv", rows)
    with open(out / "summary.json", "w") as fh:
        json.dump(summarize_metrics(rows), fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_latent_viz(args) -> None:
    cfg = _load_run_config(args)
    out = Path(args.out)
    write_manifest(out, "latent-viz", cfg, {"bundle": str(args.bundle)})
    bundle = load_bundle(args.bundle)
    stats = export_latents(out, bundle, make_eval_triples(cfg))
    with open(out / "separation.json", "w") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True)
        fh.write("\n")


def run_setting(cfg: RunConfig, setting: int, out_dir: Path) -> dict:
    """Full chain for one loss-weight setting; returns the summary row."""
    weights = SETTINGS[setting]
    seed = cfg.seed + SEED_PER_SETTING * setting
    scfg = cfg.with_seed(seed)
    out_dir.mkdir(parents=True, exist_ok=True)

    speech, noise = make_datasets(scfg)
    tc = scfg.train_config(loss_weights=weights)
    cvae, log_c = pretrain_vae("speech", speech, tc, hidden_dim=cfg.hidden_dim,
                               latent_dim=cfg.latent_dim)
    nvae, log_n = pretrain_vae("noise", noise, tc, hidden_dim=cfg.hidden_dim,
                               latent_dim=cfg.latent_dim)
    write_training_log(out_dir / "speech_vae_log.csv", log_c)
    write_training_log(out_dir / "noise_vae_log.csv", log_n)

    triples = make_training_triples(scfg, speech, noise)
    nsvae, log_ns = train_nsvae(cvae, nvae, triples, scfg.train_config())
    write_training_log(out_dir / "nsvae_log.csv", log_ns)
    bundle = ModelBundle(cvae=cvae, nvae=nvae, nsvae=nsvae,
                         cvae_weights=weights, nvae_weights=weights)
    save_bundle(out_dir / "bundle.ckpt", bundle)

    eval_triples = make_eval_triples(scfg)
    rows = evaluate_bundle(bundle, eval_triples)
    write_metrics_csv(out_dir / "metrics.csv", rows)
    stats = export_latents(out_dir, bundle, eval_triples)
    summary = summarize_metrics(rows)
    summary["separation"] = stats
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")

    return {
        "setting": setting,
        "beta": weights.beta,
        "lambda_od": weights.lambda_od,
        "lambda_d": weights.lambda_d,
        "si_snr_noisy": summary["si_snr_noisy"]["mean"],
        "si_snr_enhanced": summary["si_snr_enhanced"]["mean"],
        "si_snr_improvement": (summary["si_snr_enhanced"]["mean"]
                               - summary["si_snr_noisy"]["mean"]),
        "lsd_enhanced": summary["lsd_enhanced"]["mean"],
        "separation_ratio": stats["ratio"],
    }


def write_comparison_csv(path, rows: list[dict]) -> None:
    cols = ["setting", "beta", "lambda_od", "lambda_d", "si_snr_noisy",
            "si_snr_enhanced", "si_snr_improvement", "lsd_enhanced",
            "separation_ratio"]
    with open(path, "w", newline="") as fh:
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join(
                str(row[c]) if c == "setting" else f"{row[c]:.6f}"
                for c in cols) + "\n")


def cmd_ablation(args) -> None:
    cfg = _load_run_config(args)
    try:
        settings = [int(s) for s in args.settings.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--settings must be integers, got {args.settings!r}")
    if not settings or any(s not in SETTINGS for s in settings):
        raise UsageError(f"--settings must be a subset of 1,2,3,4, got "
                         f"{args.settings!r}")
    out = Path(args.out)
    write_manifest(out, "ablation", cfg, {"settings": settings})
    rows = [run_setting(cfg, s, out / f"setting_{s}") for s in settings]
    write_comparison_csv(out / "comparison.csv", rows)


_COMMANDS = {
    "synth-data": cmd_synth_data,
    "pretrain": cmd_pretrain,
    "train-nsvae": cmd_train_nsvae,
    "enhance": cmd_enhance,
    "evaluate": cmd_evaluate,
    "latent-viz": cmd_latent_viz,
    "ablation": cmd_ablation,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        command = args.command
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        _COMMANDS[command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
