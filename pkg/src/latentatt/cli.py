"""Command-line interface.

    latentatt gen-data --out DIR
    latentatt train --data DIR --out RUN
    latentatt align --model CKPT --data FILE --out FILE
    latentatt decode --model CKPT --data FILE --out FILE [--jobs N]
    latentatt eval --hyp FILE --ref FILE --out REPORT.json [--model CKPT]
    latentatt plot-attention --model CKPT --data FILE --out FIG.svg [--id ID | --index N]

Every command accepts ``--config FILE`` (default ``$LATATT_CONFIG``) and
dotted overrides such as ``--train.max_epochs=5``. Failures exit nonzero with
one line ``latentatt: error: <Kind>: <message>`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

from . import config as cfg
from . import data, metrics, viz
from .errors import ConfigError, FormatError, LatentAttError
from .nnet import Model, load_checkpoint
from .search import DecodeConfig, decode, force_align_batch
from .training import AlignmentCache, AlignmentCacheEntry, train

log = logging.getLogger("latentatt")

SPLITS = ("train", "dev", "test")
LATENT_DECODE_KEYS = ("beam_size_t", "expand", "expand_t", "max_step", "p_t_exponent", "temperature", "recombine")


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def split_path(directory, split):
    return os.path.join(directory, f"{split}.txt")


# -- commands -----------------------------------------------------------------


def cmd_gen_data(args, run):
    os.makedirs(args.out, exist_ok=True)
    splits = data.generate(run.task, strict=run.model.make_variant().strict)
    for name in SPLITS:
        data.write(splits[name], split_path(args.out, name))
        log.info("wrote %d records to %s", len(splits[name]), split_path(args.out, name))


def cmd_train(args, run):
    train_set = data.read(split_path(args.data, "train"))
    dev_path = split_path(args.data, "dev")
    dev_set = data.read(dev_path) if os.path.exists(dev_path) else None
    model = Model(run.model)
    _check_dataset(model, train_set)

    def progress(e):
        log.info("epoch %d %s loss %.4f dev_wer %s", e.epoch, e.phase, e.loss,
                 "-" if e.dev_wer is None else f"{e.dev_wer:.2f}")

    train(model, train_set, dev_set, run.train, out_dir=args.out, run_config=run.to_dict(), progress=progress)


def cmd_align(args, run):
    model, _ = load_checkpoint(args.model)
    if not model.variant.latent:
        raise ConfigError("align needs a latent-variable model (hard, local or segmental)")
    dataset = data.read(args.data)
    _check_dataset(model, dataset)
    cache = AlignmentCache()
    scale = run.train.latent_loss_scale if run.train.cache_score == "joint" else 0.0
    records = list(dataset)
    for start in range(0, len(records), args.batch_size):
        batch = records[start : start + args.batch_size]
        enc = model.encode([r.features for r in batch])
        targets = [list(r.labels) + [model.eos] for r in batch]
        found = force_align_batch(model, enc, targets, beam_size=run.train.align_beam, scale=scale,
                                  recombine=run.train.align_recombine)
        for r, (al, score) in zip(batch, found):
            cache.entries[r.id] = AlignmentCacheEntry(r.id, list(al), float(score), 0)
    cache.save(args.out)


_WORKER = {}


def _init_worker(model_path, decode_config):
    _WORKER["model"], _ = load_checkpoint(model_path)
    _WORKER["config"] = decode_config


def _decode_one(record):
    res = decode(_WORKER["model"], record.features, _WORKER["config"])
    return _result_json(record.id, res, _WORKER["model"].eos, _WORKER["config"].nbest)


def _result_json(rid, res, eos, nbest):
    out = {"id": rid, "labels": res.labels, "alignment": res.alignment, "score": res.score,
           "finished": res.finished}
    if nbest > 1:
        out["nbest"] = [{"labels": h.output_labels(eos), "alignment": list(h.positions), "score": h.score}
                        for h in res.nbest]
    return json.dumps(out, sort_keys=True)


def cmd_decode(args, run):
    model, _ = load_checkpoint(args.model)
    dataset = data.read(args.data)
    _check_dataset(model, dataset)
    dc = run.decode
    if not model.variant.latent:
        default = DecodeConfig()
        changed = [k for k in LATENT_DECODE_KEYS if getattr(dc, k) != getattr(default, k)]
        if changed:
            log.warning("model uses global soft attention; ignoring latent decode settings: %s",
                        ", ".join(f"decode.{k}" for k in changed))
    records = list(dataset)
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs, initializer=_init_worker, initargs=(args.model, dc)) as pool:
            lines = list(pool.map(_decode_one, records, chunksize=max(1, len(records) // (4 * args.jobs))))
    else:
        _init_worker(args.model, dc)
        lines = [_decode_one(r) for r in records]
    unfinished = sum(not json.loads(line)["finished"] for line in lines)
    if unfinished:
        log.warning("%d utterances ended without EOS", unfinished)
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(line + "\n" for line in lines)


def read_hypotheses(path):
    hyps = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                rec["labels"] = [int(v) for v in rec["labels"]]
                hyps[rec["id"]] = rec
            except (ValueError, KeyError, TypeError) as exc:
                raise FormatError(f"bad decode record: {exc}", path=str(path), line=lineno) from None
    return hyps


def cmd_eval(args, run):
    hyps = read_hypotheses(args.hyp)
    refs = data.read(args.ref)
    missing = [r.id for r in refs if r.id not in hyps]
    if missing:
        raise ConfigError(f"{len(missing)} reference utterances have no hypothesis (first: {missing[0]})")
    ref_labels = [r.labels for r in refs]
    hyp_labels = [hyps[r.id]["labels"] for r in refs]
    alignments = [hyps[r.id]["alignment"] for r in refs if hyps[r.id].get("alignment")]
    fer = None
    if args.model:
        model, _ = load_checkpoint(args.model)
        fer, skipped = metrics.frame_error_rate(model, list(refs), align_beam=run.train.align_beam,
                                                recombine=run.train.align_recombine)
        if skipped:
            log.warning("FER skipped %d infeasible utterances", skipped)
    report = metrics.evaluate(ref_labels, hyp_labels, alignments, fer=fer)
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report.to_json())
    csv_path = args.csv or os.path.splitext(args.out)[0] + ".csv"
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(report.to_csv())
    print(f"WER {report.wer:.2f}% (S={report.substitutions} I={report.insertions} "
          f"D={report.deletions} N={report.ref_length})")


def cmd_plot(args, run):
    model, _ = load_checkpoint(args.model)
    dataset = data.read(args.data)
    _check_dataset(model, dataset)
    if args.id is not None:
        matches = [r for r in dataset if r.id == args.id]
        if not matches:
            raise ConfigError(f"no record with id {args.id!r}")
        record = matches[0]
    else:
        if not 0 <= args.index < len(dataset):
            raise ConfigError(f"index {args.index} out of range for {len(dataset)} records")
        record = dataset[args.index]
    weights, targets, _ = viz.attention_matrix(model, record, align_beam=run.train.align_beam)
    bounds = viz.encoder_boundaries(record.bounds, model.config.encoder.total_pool)
    names = [("eos" if y == model.eos else str(y)) for y in targets]
    title = f"{record.id} ({model.variant.kind})"
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(viz.to_svg(weights, names, bounds, title=title))
    with open(os.path.splitext(args.out)[0] + ".ppm", "wb") as fh:
        fh.write(viz.to_ppm(weights, bounds))


def _check_dataset(model, dataset):
    if dataset.feature_dim != model.config.feature_dim or dataset.vocab_size != model.config.vocab_size:
        raise ConfigError(
            f"dataset has vocab {dataset.vocab_size} dim {dataset.feature_dim}, "
            f"model expects vocab {model.config.vocab_size} dim {model.config.feature_dim}"
        )


# -- entry point --------------------------------------------------------------


def build_parser():
    p = _Parser(prog="latentatt", description="Latent-alignment attention models on a synthetic task.")
    p.add_argument("--config", help=f"YAML run config (default ${cfg.CONFIG_ENV})")
    p.add_argument("--run", help="run name when --config is a recipe")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-data", help="write train/dev/test dataset files")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--data", required=True, help="directory with train.txt and dev.txt")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("align", help="forced-align a dataset")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--batch-size", type=int, default=32)
    s.set_defaults(func=cmd_align)

    s = sub.add_parser("decode", help="beam-search decode a dataset")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--nbest", type=int, help="shorthand for --decode.nbest")
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("eval", help="score decode output against references")
    s.add_argument("--hyp", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--csv")
    s.add_argument("--model", help="also report teacher-forced FER")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("plot-attention", help="SVG/PPM heatmap for one utterance")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--id")
    g.add_argument("--index", type=int, default=0)
    s.set_defaults(func=cmd_plot)
    return p


def split_overrides(argv):
    """Separate ``--section.key=value`` overrides from ordinary arguments."""
    rest, overrides = [], []
    for a in argv:
        head = a[2:].partition("=")[0] if a.startswith("--") else ""
        if "." in head and "=" in a:
            overrides.append(a[2:])
        else:
            rest.append(a)
    return rest, overrides


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        rest, overrides = split_overrides(argv)
        args = build_parser().parse_args(rest)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                            format="%(levelname)s %(message)s", stream=sys.stderr)
        if getattr(args, "nbest", None) is not None:
            overrides.append(f"decode.nbest={args.nbest}")
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be >= 1")
        run = cfg.load(args.config, overrides, args.run)
        args.func(args, run)
    except LatentAttError as exc:
        return _fail(exc, 2 if isinstance(exc, ConfigError) else 1)
    except FileNotFoundError as exc:
        return _fail(exc, 1, f"{exc.strerror}: {exc.filename}")
    except OSError as exc:
        return _fail(exc, 1)
    return 0


def _fail(exc, code, message=None):
    message = " ".join(str(message or exc).split())
    print(f"latentatt: error: {type(exc).__name__}: {message}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
