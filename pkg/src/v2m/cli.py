"""Command-line pipeline: extract, synth, train, train-regressor,
generate, evaluate, render.

Results print to stdout; diagnostics go to stderr; every command returns
0 on success and nonzero on failure. All stochastic steps derive from
--seed, so reruns with one seed reproduce their outputs byte for byte
(use --test-mode to also pin thread count and log timings as 0).

Extract input layout, one group of files per video id inside --inputs:
  <id>.notes.json     list of [onset_s, duration_s, pitch, velocity]
  <id>.rms.json       per-second RMS values in [0, 32767]
  <id>.scenes.json    per-second integer scene ids
  <id>.emotion.json   per-second 6-vectors (exciting, fearful, tense,
                      sad, relaxing, neutral), clamped then smoothed
  <id>.semantic.json  per-second semantic vectors, constant width
  <id>.chords.txt     one chord per second, e.g. "C:maj" or "N"
  <id>.frames/        one file per second, sorted by name: P6 portable
                      pixmaps (*.ppm) or raw 8-bit RGB rows (*.rgb with
                      a dims.txt holding "width height")
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from . import dataset as ds
from . import features as feats
from . import midi as midi_mod
from . import postprocess as post
from . import theory, training
from .config import ConfigError, RunConfig, resolve_config
from .model import new_model
from .postprocess import REGRESSOR_KINDS, ExpressiveRegressor
from .theory import SILENCE, ChordParseError, ChordQuality, ChordSymbol

_CONFIG_FIELDS = tuple(RunConfig.__dataclass_fields__)

# Compact primer chords: root, optional accidental, short suffix.
_PRIMER_SUFFIXES = {
    "": ChordQuality.maj,
    "m": ChordQuality.min,
    "7": ChordQuality.dom7,
    "m7": ChordQuality.min7,
    "maj7": ChordQuality.maj7,
    "m6": ChordQuality.min6,
    "6": ChordQuality.maj6,
    "dim": ChordQuality.dim,
    "dim7": ChordQuality.dim7,
    "hdim7": ChordQuality.hdim7,
    "m7b5": ChordQuality.hdim7,
    "aug": ChordQuality.aug,
    "sus2": ChordQuality.sus2,
    "sus4": ChordQuality.sus4,
}
_PRIMER_RE = re.compile(r"^([A-G][#b]?)(.*)$")


def parse_primer_token(token: str):
    """One primer chord: canonical ("A:min7"), compact ("Am7"), or "N"."""
    if ":" in token:
        return theory.parse_chord(token)
    if token == "N":
        return SILENCE
    match = _PRIMER_RE.match(token)
    if match and match.group(2) in _PRIMER_SUFFIXES:
        root = theory.NOTE_NAME_TO_PC[match.group(1)]
        return ChordSymbol(root, _PRIMER_SUFFIXES[match.group(2)])
    raise ChordParseError(f"cannot parse primer chord {token!r}")


def parse_primer(text: str) -> list:
    return [parse_primer_token(token) for token in text.split()]


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    parser.add_argument("--lr", type=float, default=None, help="base learning rate")
    parser.add_argument("--lambda", dest="lambda_weight", type=float, default=None,
                        help="chord-loss weight in [0, 1]")
    parser.add_argument("--heads", dest="n_heads", type=int, default=None)
    parser.add_argument("--layers", dest="n_layers", type=int, default=None,
                        help="encoder and decoder layer count")
    parser.add_argument("--d-model", dest="d_model", type=int, default=None)
    parser.add_argument("--d-ff", dest="d_ff", type=int, default=None)
    parser.add_argument("--dropout", type=float, default=None)
    parser.add_argument("--warmup", dest="warmup_steps", type=int, default=None)
    parser.add_argument("--max-rel-dist", dest="max_rel_dist", type=int, default=None)
    parser.add_argument("--tmax", dest="t_max", type=int, default=None,
                        help="clip/pad length in seconds")
    parser.add_argument("--key", default=None, help='reference key, e.g. "C:major"')
    parser.add_argument("--regressor-kind", dest="regressor_kind",
                        choices=REGRESSOR_KINDS, default=None)
    parser.add_argument("--regressor-hidden", dest="regressor_hidden", type=int,
                        default=None)
    parser.add_argument("--regressor-layers", dest="regressor_layers", type=int,
                        default=None)
    parser.add_argument("--test-mode", dest="test_mode", action="store_const",
                        const=True, default=None,
                        help="single-thread, zeroed log timings")


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    flags = {name: getattr(args, name, None) for name in _CONFIG_FIELDS}
    return resolve_config(flags, config_path=getattr(args, "config", None))


def _load_json(path: Path):
    return json.loads(path.read_text(encoding="utf-8"))


def _read_ppm(path: Path) -> feats.RgbFrame:
    data = path.read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos: pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos: pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos: pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P6":
        raise ValueError(f"{path}: only P6 pixmaps are supported")
    width, height, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"{path}: maxval must be 255, got {maxval}")
    pixels = np.frombuffer(data[pos + 1:], dtype=np.uint8, count=width * height * 3)
    return feats.RgbFrame(pixels.reshape(height, width, 3))


def _read_frames(frames_dir: Path) -> list[feats.RgbFrame]:
    ppm_files = sorted(frames_dir.glob("*.ppm"))
    if ppm_files:
        return [_read_ppm(p) for p in ppm_files]
    raw_files = sorted(frames_dir.glob("*.rgb"))
    if raw_files:
        dims = (frames_dir / "dims.txt").read_text(encoding="utf-8").split()
        width, height = int(dims[0]), int(dims[1])
        frames = []
        for p in raw_files:
            pixels = np.frombuffer(p.read_bytes(), dtype=np.uint8,
                                   count=width * height * 3)
            frames.append(feats.RgbFrame(pixels.reshape(height, width, 3)))
        return frames
    raise FileNotFoundError(f"{frames_dir}: no *.ppm or *.rgb frame files")


def _chord_expansion_notes(chords) -> list[feats.NoteEvent]:
    """One-second chord-tone notes, the input for key detection."""
    notes = []
    for t, chord in enumerate(chords):
        if chord is SILENCE:
            continue
        for pitch in theory.chord_tones(chord):
            notes.append(feats.NoteEvent(float(t), 1.0, pitch, 64))
    return notes


_EXTRACT_CHANNELS = (".notes.json", ".rms.json", ".scenes.json",
                     ".emotion.json", ".semantic.json", ".chords.txt")


def _extract_one(inputs: Path, vid: str, profiles) -> ds.FeatureRecord:
    for suffix in _EXTRACT_CHANNELS:
        if not (inputs / f"{vid}{suffix}").exists():
            raise FileNotFoundError(f"missing channel file {vid}{suffix}")
    frames_dir = inputs / f"{vid}.frames"
    if not frames_dir.is_dir():
        raise FileNotFoundError(f"missing frame directory {vid}.frames")

    chord_lines = (inputs / f"{vid}.chords.txt").read_text(encoding="utf-8").split()
    chords = [theory.parse_chord(line) for line in chord_lines]
    length = len(chords)

    notes = [feats.NoteEvent(*row) for row in _load_json(inputs / f"{vid}.notes.json")]
    rms = _load_json(inputs / f"{vid}.rms.json")
    scene_ids = _load_json(inputs / f"{vid}.scenes.json")
    emotion_raw = np.asarray(_load_json(inputs / f"{vid}.emotion.json"), dtype=np.float64)
    semantic = np.asarray(_load_json(inputs / f"{vid}.semantic.json"), dtype=np.float64)
    frames = _read_frames(frames_dir)

    for name, got in (("rms", len(rms)), ("scenes", len(scene_ids)),
                      ("emotion", len(emotion_raw)), ("semantic", len(semantic)),
                      ("frames", len(frames))):
        if got != length:
            raise ValueError(f"{name} has {got} seconds, chords has {length}")

    detected = feats.detect_key(_chord_expansion_notes(chords), profiles)
    normalized, reference = theory.normalize_sequence(chords, detected)
    emotion = feats.smooth_emotions(feats.clamp_emotion_probs(emotion_raw))
    return ds.FeatureRecord(
        id=vid,
        semantic=semantic,
        emotion=emotion,
        scene_offset=feats.scene_offsets(scene_ids),
        motion=feats.motion_values(frames),
        chords=normalized,
        key=reference,
        note_density=feats.note_density(notes, length),
        loudness=np.array([feats.loudness_from_rms(r) for r in rms]),
    )


def cmd_extract(args: argparse.Namespace) -> int:
    inputs = Path(args.inputs)
    profiles = feats.load_key_profiles(args.profiles)
    ids = sorted({p.name.split(".", 1)[0] for p in inputs.iterdir()
                  if p.name.endswith(_EXTRACT_CHANNELS) or p.name.endswith(".frames")})
    if not ids:
        print(f"error: no input channels under {inputs}", file=sys.stderr)
        return 1
    records = []
    for vid in ids:
        try:
            record = _extract_one(inputs, vid, profiles)
        except (ValueError, OSError) as exc:
            print(f"skipping {vid}: {exc}", file=sys.stderr)
            continue
        records.append(record)
        print(f"{record.id}: {record.length_s}s key={record.key} "
              f"d_sem={record.d_sem}")
    if not records:
        print("error: every record failed extraction", file=sys.stderr)
        return 1
    ds.save_dataset(records, args.out)
    print(f"wrote {len(records)} of {len(ids)} records to {args.out}")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    records = ds.synthesize_dataset(args.n, seed=config.seed,
                                    length_s=args.length, d_sem=args.d_sem)
    ds.save_dataset(records, args.out)
    print(f"wrote {len(records)} records to {args.out}")
    return 0


def _split_examples(records, config: RunConfig):
    by_id = {r.id: r for r in records}
    train_ids, val_ids, test_ids = ds.split_dataset(
        sorted(by_id), ds.SplitSpec(shuffle_seed=config.seed)
    )
    def pad(ids):
        return [ds.clip_or_pad(by_id[i], config.t_max) for i in ids]
    return pad(train_ids), pad(val_ids), pad(test_ids)


class _Tee:
    def __init__(self, *streams):
        self.streams = streams

    def write(self, text):
        for stream in self.streams:
            stream.write(text)

    def flush(self):
        for stream in self.streams:
            stream.flush()


def cmd_train(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    records = ds.load_dataset(args.data)
    train_ex, val_ex, _ = _split_examples(records, config)
    if not train_ex:
        print("error: train split is empty", file=sys.stderr)
        return 1
    d_sem = records[0].d_sem
    start_epoch = 0
    if args.resume:
        model, meta = ckpt.load_model(args.resume)
        if model.config.d_sem != d_sem:
            print(f"error: checkpoint d_sem {model.config.d_sem} does not match "
                  f"dataset d_sem {d_sem}", file=sys.stderr)
            return 1
        start_epoch = int(meta.get("epochs_trained", 0))
    else:
        model = new_model(config.model_config(d_sem), seed=config.seed)

    log_file = open(args.log, "a", encoding="utf-8") if args.log else None
    stream = _Tee(sys.stdout, log_file) if log_file else sys.stdout
    try:
        training.train(
            model,
            train_ex,
            epochs=config.epochs,
            seed=config.seed,
            batch_size=config.batch_size,
            spec=config.optimizer_spec(),
            weights=config.loss_weights(),
            val_examples=val_ex,
            log_stream=stream,
            test_mode=config.test_mode,
            start_epoch=start_epoch,
        )
    finally:
        if log_file:
            log_file.close()
    ckpt.save_model(args.out, model, meta={
        "epochs_trained": start_epoch + config.epochs,
        "seed": config.seed,
        "lambda_weight": config.lambda_weight,
    })
    print(f"saved model checkpoint to {args.out}")
    return 0


def cmd_train_regressor(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    records = ds.load_dataset(args.data)
    train_ex, val_ex, _ = _split_examples(records, config)
    if not train_ex:
        print("error: train split is empty", file=sys.stderr)
        return 1
    if config.test_mode:
        torch.set_num_threads(1)
    input_dim = ds.video_feature_dim(records[0].d_sem)
    torch.manual_seed(config.seed)
    model = ExpressiveRegressor(config.regressor_config(input_dim))

    def log(row):
        line = (f"epoch={row['epoch']} loss={row['loss']:.6f}"
                f" wall_seconds={0.0 if config.test_mode else row['wall_seconds']:.3f}")
        if "val_density_rmse" in row:
            line += (f" val_density_rmse={row['val_density_rmse']:.6f}"
                     f" val_loudness_rmse={row['val_loudness_rmse']:.6f}")
        print(line)

    post.train_regressor(
        model,
        train_ex,
        epochs=config.epochs,
        seed=config.seed,
        lr=args.regressor_lr,
        batch_size=config.batch_size,
        val_examples=val_ex,
        log=log,
    )
    ckpt.save_regressor(args.out, model, meta={"epochs_trained": config.epochs,
                                               "seed": config.seed})
    print(f"saved regressor checkpoint to {args.out}")
    return 0


def cmd_generate(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    if config.test_mode:
        torch.set_num_threads(1)
    record = ds.load_record(args.features)
    model, _ = ckpt.load_model(args.model_ckpt)
    if model.config.d_sem != record.d_sem:
        print(f"error: checkpoint d_sem {model.config.d_sem} does not match "
              f"feature d_sem {record.d_sem}", file=sys.stderr)
        return 1
    key = theory.parse_key(args.key) if args.key else record.key
    primer = parse_primer(args.primer) if args.primer else []
    length = min(record.length_s, model.config.max_len)
    video = record.video_features()[:length]

    chords = model.generate(video, key, primer)

    if args.use_ground_truth_expressive:
        densities = record.note_density[:length].astype(float)
        loudnesses = record.loudness[:length]
    else:
        if not args.regressor_ckpt:
            print("error: --regressor-ckpt is required unless "
                  "--use-ground-truth-expressive is given", file=sys.stderr)
            return 1
        regressor, _ = ckpt.load_regressor(args.regressor_ckpt)
        densities, loudnesses = post.predict_expressive(regressor, video)

    events = post.render_chords(chords, densities, loudnesses)
    out = Path(args.out)
    out.write_bytes(midi_mod.render_midi(events))
    chords_out = Path(args.chords_out) if args.chords_out else out.with_suffix(".chords.txt")
    chords_out.write_text(
        "".join(theory.format_chord(c) + "\n" for c in chords), encoding="utf-8"
    )
    print(f"generated {length}s in {key}: {len(events)} notes -> {out}")
    print(f"chord sequence -> {chords_out}")
    return 0


def _write_confusion_csv(path: Path, matrix: np.ndarray, labels) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("target\\predicted," + ",".join(labels) + "\n")
        for label, row in zip(labels, matrix, strict=True):
            handle.write(label + "," + ",".join(str(int(v)) for v in row) + "\n")


def _token_labels() -> list[str]:
    labels = ["PAD", "SOS"]
    for token in range(2, theory.VOCAB_SIZE):
        labels.append(theory.format_chord(theory.detokenize(token)))
    return labels


def cmd_evaluate(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    if config.test_mode:
        torch.set_num_threads(1)
    records = ds.load_dataset(args.data)
    _, _, test_ex = _split_examples(records, config)
    if not test_ex:
        print("error: test split is empty", file=sys.stderr)
        return 1
    by_id = {r.id: r for r in records}
    model, _ = ckpt.load_model(args.model_ckpt)
    weights = config.loss_weights()

    metrics = training.evaluate_model(model, test_ex, weights)
    chord_m = np.zeros((theory.VOCAB_SIZE, theory.VOCAB_SIZE), dtype=np.int64)
    root_m = np.zeros((13, 13), dtype=np.int64)
    quality_m = np.zeros((13, 13), dtype=np.int64)
    free_logits = []
    free_targets = []
    free_active = []
    match_rates = []
    for ex in test_ex:
        record = by_id[ex.id]
        length = min(record.length_s, model.config.max_len, config.t_max)
        video = record.video_features()[:length]
        emotion = record.emotion[:length]
        generated, logits = model.generate(video, record.key, return_logits=True)
        gen_tokens = theory.encode_sequence(generated)
        true_tokens = theory.encode_sequence(record.chords[:length])
        chord_m += training.chord_confusion(true_tokens, gen_tokens)
        root_m += training.root_confusion(true_tokens, gen_tokens)
        quality_m += training.quality_confusion(generated, emotion)
        targets, active = training.emotion_step_targets(
            emotion, np.ones(length, dtype=bool)
        )
        free_logits.append(logits.numpy())
        free_targets.append(targets)
        free_active.append(active)
        rate = training.quality_match_rate(generated, emotion)
        if not np.isnan(rate):
            match_rates.append(rate)

    free_loss = training.emotion_loss(
        torch.tensor(np.concatenate(free_logits)),
        torch.tensor(np.concatenate(free_targets)),
        torch.tensor(np.concatenate(free_active)),
    )

    print(f"test_records={len(test_ex)}")
    for k in (1, 3, 5):
        print(f"hits@{k}={metrics[f'hits@{k}']:.6f}")
    print(f"chord_loss={metrics['chord_loss']:.6f}")
    print(f"affective_loss_teacher_forced={metrics['emotion_loss']:.6f}")
    print(f"affective_loss_free_running={float(free_loss):.6f}")
    if match_rates:
        print(f"quality_match_rate={float(np.mean(match_rates)):.6f}")

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    roots = [theory.PC_TO_NOTE_NAME[i] for i in range(12)] + ["N"]
    qualities = [q.name for q in ChordQuality]
    _write_confusion_csv(out_dir / "chord_confusion.csv", chord_m, _token_labels())
    _write_confusion_csv(out_dir / "root_confusion.csv", root_m, roots)
    _write_confusion_csv(out_dir / "quality_confusion.csv", quality_m, qualities)
    print(f"confusion matrices -> {out_dir}")
    return 0


def _expressive_series(spec_text: str, length: int, name: str) -> list[float]:
    """A constant (e.g. "12") or a JSON file holding one value per second."""
    try:
        return [float(spec_text)] * length
    except ValueError:
        pass
    values = _load_json(Path(spec_text))
    if len(values) != length:
        raise ValueError(f"{name} file has {len(values)} values for {length} chords")
    return [float(v) for v in values]


def cmd_render(args: argparse.Namespace) -> int:
    lines = Path(args.chords).read_text(encoding="utf-8").split()
    chords = [theory.parse_chord(line) for line in lines]
    if not chords:
        print("error: chord file is empty", file=sys.stderr)
        return 1
    densities = _expressive_series(args.density, len(chords), "density")
    loudnesses = _expressive_series(args.loudness, len(chords), "loudness")
    events = post.render_chords(chords, densities, loudnesses)
    Path(args.out).write_bytes(midi_mod.render_midi(events))
    print(f"rendered {len(chords)}s, {len(events)} notes -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="v2m",
        description="Video-conditioned chord generation and expressive MIDI rendering.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="compute feature records from raw channels")
    p.add_argument("--inputs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--profiles", default=None, help="key-profile data file")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--n", type=_positive_int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--length", type=_positive_int, default=30,
                   help="seconds per record")
    p.add_argument("--d-sem", dest="d_sem", type=_positive_int, default=16)
    _add_config_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the chord model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", default=None, help="append epoch lines to this file")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-regressor", help="train a density/loudness regressor")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--regressor-lr", dest="regressor_lr", type=float, default=1e-3)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train_regressor)

    p = sub.add_parser("generate", help="generate chords for one feature record")
    p.add_argument("--features", required=True, help="feature record JSON")
    p.add_argument("--model-ckpt", dest="model_ckpt", required=True)
    p.add_argument("--regressor-ckpt", dest="regressor_ckpt", default=None)
    p.add_argument("--out", required=True, help="MIDI output path")
    p.add_argument("--chords-out", dest="chords_out", default=None)
    p.add_argument("--primer", default=None, help='e.g. "C Am F G"')
    p.add_argument("--use-ground-truth-expressive", action="store_true",
                   help="drive rendering from the record's density/loudness")
    _add_config_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score a checkpoint on the test split")
    p.add_argument("--data", required=True)
    p.add_argument("--model-ckpt", dest="model_ckpt", required=True)
    p.add_argument("--out", default=".", help="directory for confusion CSVs")
    _add_config_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("render", help="render a chord text file to MIDI")
    p.add_argument("--chords", required=True, help="one chord per line")
    p.add_argument("--out", required=True)
    p.add_argument("--density", default="8", help="constant or JSON file")
    p.add_argument("--loudness", default="0.5", help="constant or JSON file")
    p.set_defaults(func=cmd_render)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError, RuntimeError,
            ckpt.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
