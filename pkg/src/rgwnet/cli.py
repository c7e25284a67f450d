"""Command-line entry point: dataset synthesis, training, evaluation, export.

Commands
--------
synth            write per-class WAVs + a manifest for a scenario preset
train            train one model on a manifest, save checkpoint + reports
crossval         repeated-split evaluation, per-fold checkpoints + reports
eval             evaluate a checkpoint against a manifest
export-wavelets  dump sampled kernels (and optionally a scalogram) as CSV
extract          dump the feature map of one segment of a WAV file as CSV

Every command is deterministic given its flags, seed, and input files;
failures print one machine-parsable line `error <Class>: <message>` and exit
non-zero.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import audio, network, transform
from .errors import (
    ConfigError, DataError, FormatError, InvalidParameterError, ShapeError,
    StateError, TrainingError,
)
from .wavelet import sample_kernel

KNOWN_ERRORS = (ConfigError, DataError, FormatError, InvalidParameterError,
                ShapeError, StateError, TrainingError, OSError)

SEGMENTS_PER_RECORDING = 10  # one written recording covers at most 1 s of audio


# ---------------------------------------------------------------------------
# synth presets: scaled-down analogs of the measurement scenarios
# ---------------------------------------------------------------------------

PRESETS = {
    # single-UAV model classification, studio-like (clean) conditions
    "indoor-3class": {
        "classes": ["mavic_pro", "mavic_pro_2", "mavic_mini"],
        "snr_db": 20.0,
    },
    # {background noise, one UAV, 2-3 superposed UAVs}; the pool spans three
    # spectrally distinct platforms so source count is acoustically decidable
    "swarm": {
        "classes": ["noise", "single", "multi"],
        "snr_db": 20.0,
        "pool": ["mavic_pro", "mavic_mini", "avata_2"],
    },
    # noisy detection: drone vs. background
    "outdoor-2class": {
        "classes": ["noise", "drone"],
        "snr_db": 5.0,
        "drone": "mavic_3_pro",
    },
}


def _recording_plan(total_segments):
    """Recording lengths (in segments) summing exactly to total_segments."""
    plan = [SEGMENTS_PER_RECORDING] * (total_segments // SEGMENTS_PER_RECORDING)
    if total_segments % SEGMENTS_PER_RECORDING:
        plan.append(total_segments % SEGMENTS_PER_RECORDING)
    return plan


def _synth_class_signal(preset, class_name, duration_s, snr_db, sample_rate, rng):
    """One recording for a preset class; mixing happens here, not in recipes."""
    def clean(platform):
        recipe = audio.platform_recipe(
            platform, sample_rate, duration_s, snr_db=np.inf,
            seed=int(rng.integers(1 << 31)))
        return audio.synthesize(recipe, sample_rate)

    if class_name == "noise":
        return audio.white_noise(duration_s, sample_rate, int(rng.integers(1 << 31)))
    if preset == "swarm":
        pool = PRESETS["swarm"]["pool"]
        if class_name == "single":
            chosen = [pool[int(rng.integers(len(pool)))]]
        else:  # 2 or 3 superposed sources, distinct models
            count = int(rng.integers(2, 4))
            chosen = [pool[i] for i in rng.permutation(len(pool))[:count]]
        mixed = np.sum([clean(name) for name in chosen], axis=0)
        mixed = audio.add_noise_snr(mixed, snr_db, int(rng.integers(1 << 31)))
        return audio.peak_normalize(mixed)
    if preset == "outdoor-2class":
        platform = PRESETS[preset]["drone"]
    else:
        platform = class_name
    recipe = audio.platform_recipe(platform, sample_rate, duration_s,
                                   snr_db=snr_db, seed=int(rng.integers(1 << 31)))
    return audio.synthesize(recipe, sample_rate)


def cmd_synth(args) -> int:
    if args.preset not in PRESETS:
        raise ConfigError(f"unknown preset {args.preset!r}; "
                          f"choose from {sorted(PRESETS)}")
    preset = PRESETS[args.preset]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    snr_db = preset["snr_db"] if args.snr is None else args.snr
    segment_s = args.segment_ms / 1000.0

    entries = []
    for class_name in preset["classes"]:
        for rec_index, n_segments in enumerate(_recording_plan(args.segments)):
            duration_s = n_segments * segment_s
            signal = _synth_class_signal(
                args.preset, class_name, duration_s, snr_db,
                args.sample_rate, rng)
            name = f"{class_name}_{rec_index:03d}.wav"
            audio.write_wav(out / name, signal, args.sample_rate)
            entries.append(audio.ManifestEntry(
                "wav", class_name, path=str(out / name), ident=f"wav:{name}"))
    manifest = audio.DatasetManifest(
        entries, list(preset["classes"]), args.sample_rate,
        segment_ms=args.segment_ms, seed=args.seed)
    audio.write_manifest(manifest, out / "manifest.txt")
    print(f"wrote {len(entries)} recordings and {out / 'manifest.txt'}")
    return 0


# ---------------------------------------------------------------------------
# training / evaluation
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    """Parameter bundle for a training-style command."""

    train: network.TrainConfig
    manifest_path: str
    model: str
    out_dir: Path
    jobs: int = 1

    @classmethod
    def from_args(cls, args) -> "RunConfig":
        if not Path(args.manifest).exists():
            raise ConfigError(f"manifest {args.manifest} does not exist")
        train = network.TrainConfig(
            epochs=args.epochs, batch_size=args.batch, learning_rate=args.lr,
            folds=args.folds, split=args.split, seed=args.seed, q=args.q,
            kernel_length=args.kernel_length, m=args.scales, p=args.zeros,
            n=args.poles, hidden=args.hidden, std_mode=args.std_mode)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        return cls(train, args.manifest, args.model, out_dir,
                   jobs=getattr(args, "jobs", 1))


def _report_header(config, model, extra=None):
    lines = [f"# model={model}"]
    lines += [f"# {key}={value}" for key, value in asdict(config).items()]
    for key, value in (extra or {}).items():
        lines.append(f"# {key}={value}")
    return lines


def _front_end_note(net):
    scalars = network.front_end_scalar_count(net)
    if net.kind == "wknn":
        taps = net.m * net.kernel_length
        return (f"front-end learnable scalars: {scalars} "
                f"(a free-kernel front end of the same geometry has {taps} taps)")
    if net.kind == "cnn":
        return f"front-end learnable scalars: {scalars}"
    return "front-end learnable scalars: 0 (no front end)"


def _write_report_csv(path, config, model, rows, n_classes, extra=None):
    header = _report_header(config, model, extra)
    cols = ["fold", "accuracy"]
    cols += [f"conf_{i}_{j}" for i in range(n_classes) for j in range(n_classes)]
    lines = header + [",".join(cols)]
    for fold, (accuracy, confusion) in enumerate(rows):
        cells = [str(fold), repr(float(accuracy))]
        cells += [str(int(v)) for v in np.asarray(confusion).reshape(-1)]
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


def _accuracy_table(title, report):
    width = max(len(title), 5)
    return "\n".join([
        f"{title}",
        f"{'-' * width}",
        f"Mean Acc. {100.0 * report.mean_accuracy:.2f}%",
        f"Min Acc.  {100.0 * report.min_accuracy:.2f}%",
        f"Max Acc.  {100.0 * report.max_accuracy:.2f}%",
    ])


def cmd_train(args) -> int:
    run = RunConfig.from_args(args)
    config = run.train
    manifest = audio.parse_manifest(run.manifest_path)
    segments = audio.build_dataset(manifest)
    x = np.stack([s.samples for s in segments])
    y = np.array([s.label for s in segments], dtype=np.int64)
    n_classes = len(manifest.class_names)

    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(len(y))
    n_train = int(config.split * len(y))
    if n_train < 1 or n_train >= len(y):
        raise DataError(f"split {config.split} leaves an empty side")
    train_idx, val_idx = perm[:n_train], perm[n_train:]

    net = network.build_network(run.model, config, n_classes, x.shape[1], rng)
    network.fit(net, x[train_idx], y[train_idx], config, rng)
    train_acc, _ = network.evaluate(net, x[train_idx], y[train_idx])
    val_acc, val_conf = network.evaluate(net, x[val_idx], y[val_idx])
    manifest_acc, _ = network.evaluate(net, x, y)

    network.save_checkpoint(run.out_dir / "checkpoint.npz", net, config)
    extra = {
        "manifest": run.manifest_path,
        "train_accuracy": repr(float(train_acc)),
        "manifest_accuracy": repr(float(manifest_acc)),
        "front_end_scalars": network.front_end_scalar_count(net),
    }
    _write_report_csv(run.out_dir / "report.csv", config, run.model,
                      [(val_acc, val_conf)], n_classes, extra)
    report = network.EvalReport.from_folds([val_acc], [val_conf],
                                           manifest.class_names)
    summary = "\n".join([
        _accuracy_table(f"{run.model} held-out accuracy", report),
        f"train accuracy     {100.0 * train_acc:.2f}%",
        f"manifest accuracy  {100.0 * manifest_acc:.2f}%",
        _front_end_note(net),
    ])
    (run.out_dir / "summary.txt").write_text(summary + "\n")
    print(summary)
    return 0


def cmd_crossval(args) -> int:
    run = RunConfig.from_args(args)
    config = run.train
    manifest = audio.parse_manifest(run.manifest_path)
    report, nets = network.cross_validate(
        manifest, config, kind=run.model, jobs=run.jobs, return_nets=True)

    for fold, net in enumerate(nets):
        network.save_checkpoint(run.out_dir / f"checkpoint_fold{fold}.npz",
                                net, config)
    extra = {
        "manifest": run.manifest_path,
        "front_end_scalars": network.front_end_scalar_count(nets[0]),
    }
    rows = list(zip(report.fold_accuracies, report.confusions))
    _write_report_csv(run.out_dir / "report.csv", config, run.model, rows,
                      len(manifest.class_names), extra)
    summary = "\n".join([
        _accuracy_table(f"{run.model} {config.folds}-fold cross-validation", report),
        _front_end_note(nets[0]),
    ])
    (run.out_dir / "summary.txt").write_text(summary + "\n")
    print(summary)
    return 0


def cmd_eval(args) -> int:
    net, config, _seed = network.load_checkpoint(args.checkpoint)
    manifest = audio.parse_manifest(args.manifest)
    if manifest.segment_length != net.segment_length:
        raise ConfigError(
            f"manifest segments of {manifest.segment_length} samples do not "
            f"match checkpoint segment length {net.segment_length}")
    segments = audio.build_dataset(manifest)
    x = np.stack([s.samples for s in segments])
    y = np.array([s.label for s in segments], dtype=np.int64)
    accuracy, confusion = network.evaluate(net, x, y, len(manifest.class_names))

    lines = [f"accuracy {repr(float(accuracy))}", "confusion (rows=true, cols=predicted):"]
    for i, row in enumerate(confusion):
        lines.append(f"  {manifest.class_names[i]:>12s} " +
                     " ".join(f"{int(v):6d}" for v in row))
    print("\n".join(lines))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_report_csv(out / "eval_report.csv", config, net.kind,
                          [(accuracy, confusion)], len(manifest.class_names),
                          {"manifest": args.manifest, "checkpoint": args.checkpoint})
    return 0


def cmd_export_wavelets(args) -> int:
    net, _config, _seed = network.load_checkpoint(args.checkpoint)
    if net.kind != "wknn":
        raise ConfigError(f"checkpoint holds a {net.kind} model, not a wavelet model")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kernel_path = out / "kernels.csv"
    with open(kernel_path, "w", newline="") as fh:
        fh.write("scale_index,grid_position,tap_value,lambda\n")
        for k in range(net.m):
            kernel = sample_kernel(net.params, k, net.kernel_length)
            lam = repr(float(kernel.dilation))
            for position, value in zip(kernel.grid, kernel.values):
                fh.write(f"{k},{float(position)!r},{float(value)!r},{lam}\n")
    written = [str(kernel_path)]
    if args.wav:
        signal, rate = audio.load_wav(args.wav)
        segs = audio.segment_signal(signal, rate, source=str(args.wav))
        fmap = transform.wavelet_transform(
            segs[args.segment_index].samples, net.params, net.kernel_length)
        scalogram_path = out / f"featuremap_{args.segment_index}.csv"
        transform.write_featuremap_csv(fmap, scalogram_path)
        written.append(str(scalogram_path))
    print("wrote " + ", ".join(written))
    return 0


def cmd_extract(args) -> int:
    net, _config, _seed = network.load_checkpoint(args.checkpoint)
    if net.kind != "wknn":
        raise ConfigError(f"checkpoint holds a {net.kind} model, not a wavelet model")
    signal, rate = audio.load_wav(args.wav)
    segs = audio.segment_signal(signal, rate, source=str(args.wav))
    if not 0 <= args.segment_index < len(segs):
        raise DataError(f"segment index {args.segment_index} out of range "
                        f"(file has {len(segs)} segments)")
    fmap = transform.wavelet_transform(
        segs[args.segment_index].samples, net.params, net.kernel_length)
    transform.write_featuremap_csv(fmap, args.out)
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_train_flags(parser):
    parser.add_argument("--manifest", required=True)
    parser.add_argument("--model", choices=network.MODEL_KINDS, default="wknn")
    parser.add_argument("--epochs", type=int, default=300)
    parser.add_argument("--batch", type=int, default=64)
    parser.add_argument("--folds", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--q", type=int, default=32)
    parser.add_argument("--kernel-length", type=int, default=32)
    parser.add_argument("--scales", type=int, default=10, help="number of dilations m")
    parser.add_argument("--poles", type=int, default=10, help="number of poles n")
    parser.add_argument("--zeros", type=int, default=1, help="number of polynomial zeros p")
    parser.add_argument("--lr", type=float, default=1e-3)
    parser.add_argument("--split", type=float, default=0.8)
    parser.add_argument("--hidden", type=int, default=200)
    parser.add_argument("--std-mode", choices=transform.STD_MODES, default="var")
    parser.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rgwnet",
        description="rational Gaussian wavelet convolution networks for drone audio")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scenario dataset")
    p.add_argument("--preset", required=True, choices=sorted(PRESETS))
    p.add_argument("--out", required=True)
    p.add_argument("--segments", type=int, default=200, help="segments per class")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--snr", type=float, default=None, help="override preset SNR (dB)")
    p.add_argument("--sample-rate", type=int, default=8000)
    p.add_argument("--segment-ms", type=int, default=100)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model on a manifest")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("crossval", help="repeated-split cross-validation")
    _add_train_flags(p)
    p.add_argument("--jobs", type=int, default=1, help="parallel fold workers")
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-wavelets", help="dump sampled kernels as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--wav", default=None, help="also dump one segment's feature map")
    p.add_argument("--segment-index", type=int, default=0)
    p.set_defaults(func=cmd_export_wavelets)

    p = sub.add_parser("extract", help="dump one segment's feature map as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--wav", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--segment-index", type=int, default=0)
    p.set_defaults(func=cmd_extract)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except KNOWN_ERRORS as exc:
        print(f"error {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
