"""``sifisinger`` command line: prepare-data, pretrain-pitch, train, synthesize, evaluate, plot.

Exit codes: 0 success, 1 bad input or usage, 2 internal failure.  Any
``--section.key=value`` argument not known to the parser overrides the run
configuration.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import dsp
from .config import apply_overrides, load_config, preset
from .errors import ShapeMismatch, SiFiSingerError
from .metrics import metric_f0_corr, metric_f0_rmse, metric_mel_rmse, metric_vuv_error

log = logging.getLogger("sifisinger")
METRIC_COLUMNS = ("utt_id", "f0_rmse_hz", "mel_rmse", "f0_corr", "vuv_pct")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _config(args, overrides):
    cfg = load_config(args.config) if getattr(args, "config", None) else preset(args.preset)
    return apply_overrides(cfg, overrides)


# -- subcommands ------------------------------------------------------------

def cmd_prepare(args, overrides):
    from .data import prepare_dataset

    cfg = _config(args, overrides)
    out = prepare_dataset(args.transcriptions, args.wav_dir, args.out, cfg.dsp, f0_dir=args.f0_dir)
    print(json.dumps({"event": "prepared", "out": str(out)}))


def cmd_pretrain_pitch(args, overrides):
    from .pitch import pretrain_pitch_net, save_pitch_net

    net, summary = pretrain_pitch_net(args.tones, args.epochs, seed=args.seed,
                                      progress=lambda row: print(json.dumps({"event": "epoch", **row}), flush=True))
    save_pitch_net(net, args.out, summary)
    print(json.dumps({"event": "saved", "path": args.out, "val_acc50": summary["history"][-1]["val_acc50"]}))


def cmd_train(args, overrides):
    from .data import SingingDataset, batch_iterator
    from .pitch import load_pitch_net
    from .training import Trainer, ablation_variants, build_models, load_checkpoint, resume_trainer, save_checkpoint

    cfg = _config(args, overrides)
    cfg = ablation_variants(cfg, args.no_diff_recon, args.no_am_source)
    ds = SingingDataset(args.data)
    pitch_net = None
    if cfg.train.diff_recon:
        if not args.pitch_net:
            raise UsageError("--pitch-net is required unless --no-diff-recon is given")
        pitch_net = load_pitch_net(args.pitch_net)
    run = Path(args.out)
    run.mkdir(parents=True, exist_ok=True)
    cfg.save(run / "config.yaml")
    if args.resume:
        trainer = resume_trainer(load_checkpoint(args.resume), pitch_net, len(ds))
    else:
        model, disc = build_models(cfg, len(ds.phonemes), len(ds.notes), ds.stats)
        trainer = Trainer(cfg, model, disc, pitch_net, len(ds))
    steps = args.steps if args.steps is not None else cfg.train.total_steps - trainer.step
    extras = dict(vocabs=ds.vocabs, stats=ds.stats)
    batches = batch_iterator(ds, cfg.train.batch_size, cfg.train.seed + trainer.step)
    trainer.fit(batches, steps, log_dir=run, checkpoint_dir=run / "checkpoints", extras=extras,
                callback=lambda row: print(json.dumps({"event": "step", **row}), flush=True)
                if row["step"] % cfg.train.log_every == 0 else None)
    path = save_checkpoint(run / "final.pt", trainer, **extras)
    print(json.dumps({"event": "saved", "path": str(path), "step": trainer.step}))


def cmd_synthesize(args, overrides):
    from .score_io import encode_entry, read_transcriptions
    from .training import load_checkpoint

    ck = load_checkpoint(args.ckpt)
    model = ck.model.eval()
    if ck.stats is not None:
        model.set_norm_stats(ck.stats)
    hop, sr = ck.config.dsp.hop, ck.config.dsp.sample_rate
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for entry in read_transcriptions(args.score):
        tok = encode_entry(entry, (ck.phonemes, ck.notes), hop, sr)
        as_t = lambda a: torch.as_tensor(np.asarray(a), dtype=torch.long)  # noqa: E731
        wave, lengths, _ = model.synthesize(
            as_t(tok.phoneme_ids), as_t(tok.note_ids), as_t(tok.note_midi), as_t(tok.slur_ids),
            durations=None if args.predict_durations else as_t(tok.duration_frames),
            noise_scale=args.noise_scale if args.noise_scale is not None else ck.config.train.infer_noise_scale,
            seed=args.seed)
        path = out / f"{entry.utt_id}.wav"
        dsp.save_wav(path, wave[0, : int(lengths[0])].numpy(), sr)
        print(json.dumps({"event": "wrote", "path": str(path), "seconds": int(lengths[0]) / sr}), flush=True)


def evaluate_pair(ref_path, syn_path, cfg: dsp.DSPConfig = dsp.DSPConfig(), max_frame_diff: int = 2) -> dict:
    """Metrics for one reference / synthesized WAV pair with matching timing."""
    ref = dsp.load_wav(ref_path, cfg.sample_rate).samples
    syn = dsp.load_wav(syn_path, cfg.sample_rate).samples
    n_ref, n_syn = dsp.n_frames(len(ref), cfg.hop), dsp.n_frames(len(syn), cfg.hop)
    if abs(n_ref - n_syn) > max_frame_diff:
        raise ShapeMismatch(f"{Path(ref_path).stem}: {n_ref} reference frames vs {n_syn} synthesized")
    n = min(n_ref, n_syn)
    ref, syn = ref[: n * cfg.hop], syn[: n * cfg.hop]
    f0_r, v_r = dsp.extract_f0_reference(ref, cfg.sample_rate, cfg.f0_min, cfg.f0_max, cfg.hop, cfg.f0_win)
    f0_s, v_s = dsp.extract_f0_reference(syn, cfg.sample_rate, cfg.f0_min, cfg.f0_max, cfg.hop, cfg.f0_win)
    with torch.no_grad():
        mel_r = dsp.mel_spectrogram(torch.from_numpy(ref), cfg).numpy()
        mel_s = dsp.mel_spectrogram(torch.from_numpy(syn), cfg).numpy()
    row = {"utt_id": Path(ref_path).stem, "mel_rmse": metric_mel_rmse(mel_r, mel_s),
           "vuv_pct": metric_vuv_error(v_r, v_s)}
    try:
        row["f0_rmse_hz"] = metric_f0_rmse(f0_r, f0_s, v_r, v_s)
        row["f0_corr"] = metric_f0_corr(f0_r, f0_s, v_r, v_s)
    except SiFiSingerError:
        row["f0_rmse_hz"] = row["f0_corr"] = float("nan")
    return row


def _evaluate_args(a):
    return evaluate_pair(*a)


def cmd_evaluate(args, overrides):
    ref_dir, syn_dir = Path(args.ref_dir), Path(args.syn_dir)
    pairs = [(p, syn_dir / p.name) for p in sorted(ref_dir.glob("*.wav")) if (syn_dir / p.name).exists()]
    if not pairs:
        raise UsageError(f"no WAV file names shared by {ref_dir} and {syn_dir}")
    cfg = _config(args, overrides).dsp
    jobs = [(r, s, cfg) for r, s in pairs]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as ex:
            rows = list(ex.map(_evaluate_args, jobs))
    else:
        rows = [_evaluate_args(j) for j in jobs]
    mean = {"utt_id": "mean"}
    for k in METRIC_COLUMNS[1:]:
        mean[k] = float(np.nanmean([r[k] for r in rows]))
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.DictWriter(out, METRIC_COLUMNS)
        w.writeheader()
        for r in rows + [mean]:
            w.writerow({k: (r[k] if k == "utt_id" else f"{r[k]:.6f}") for k in METRIC_COLUMNS})
    finally:
        if args.out:
            out.close()


def cmd_plot(args, overrides):
    from .plotting import plot_spectrogram_pitch

    cfg = _config(args, overrides).dsp
    wave = dsp.load_wav(args.wav, cfg.sample_rate).samples
    if args.f0:
        f0 = np.load(args.f0) if args.f0.endswith(".npy") else np.loadtxt(args.f0)
    else:
        f0, _ = dsp.extract_f0_reference(wave, cfg.sample_rate, cfg.f0_min, cfg.f0_max, cfg.hop, cfg.f0_win)
    plot_spectrogram_pitch(wave, f0, args.out, cfg.sample_rate, cfg.hop, title=args.title)
    print(json.dumps({"event": "wrote", "path": args.out}))


# -- entry point ------------------------------------------------------------

def build_parser():
    p = _Parser(prog="sifisinger", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--preset", default="desk", help="paper, desk or tiny")
        sp.add_argument("--config", help="YAML config file (overrides --preset)")
        return sp

    sp = with_config(sub.add_parser("prepare-data", help="extract features and vocabularies"))
    sp.add_argument("--transcriptions", required=True)
    sp.add_argument("--wav-dir", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--f0-dir", help="externally extracted F0 tracks (<utt>.npy or .txt, Hz per frame)")
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("pretrain-pitch", help="fit the pitch estimator on synthetic tones")
    sp.add_argument("--out", required=True)
    sp.add_argument("--tones", type=int, default=10000)
    sp.add_argument("--epochs", type=int, default=8)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_pretrain_pitch)

    sp = with_config(sub.add_parser("train", help="train the synthesis network"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--pitch-net")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--resume")
    sp.add_argument("--no-diff-recon", action="store_true", help="drop the F0 and mcep reconstruction terms")
    sp.add_argument("--no-am-source", action="store_true", help="no excitation input to the AM decoder")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("synthesize", help="one WAV per score line")
    sp.add_argument("--score", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--noise-scale", type=float)
    sp.add_argument("--predict-durations", action="store_true", help="ignore score timing")
    sp.set_defaults(func=cmd_synthesize)

    sp = with_config(sub.add_parser("evaluate", help="F0 RMSE, mel RMSE, F0 correlation, V/UV error as CSV"))
    sp.add_argument("--ref-dir", required=True)
    sp.add_argument("--syn-dir", required=True)
    sp.add_argument("--out")
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_evaluate)

    sp = with_config(sub.add_parser("plot", help="spectrogram with pitch contour"))
    sp.add_argument("--wav", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--f0", help="frame F0 track (.npy or text); default: reference tracker")
    sp.add_argument("--title")
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    bad = [a for a in extra if not (a.startswith("--") and "=" in a and "." in a.split("=", 1)[0])]
    if bad:
        print(f"error: unrecognized arguments: {' '.join(bad)}", file=sys.stderr)
        return 1
    try:
        args.func(args, extra)
    except (UsageError, SiFiSingerError, ValueError, KeyError, FileNotFoundError, IsADirectoryError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"error: {type(e).__name__}: {msg}".splitlines()[0], file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        print(f"internal error: {type(e).__name__}: {e}".splitlines()[0], file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
