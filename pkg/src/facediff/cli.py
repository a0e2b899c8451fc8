"""``facediff`` command line: gen-data, train, sample, binarize, eval, verify.

Exit codes: 0 success, 1 verification or evaluation failure, 2 usage error.
Every command writes its resolved configuration next to its outputs.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import pipeline as pl
from .data import (BinarizeConfig, SyntheticSpec, binarize, generate_dataset, read_dataset, read_motion,
                   write_dataset, write_motion)
from .diffusion import GuidanceConfig
from .evaluation import ClassifierConfig, evaluate, train_classifier
from .profiles import get_profile
from .training import TrainConfig, load_generator, load_training_state, save_training_state, train
from .conditioning import CoarseBatch
from .denoiser import Generator, insert_adapter
from .diffusion import NoiseSchedule
from .types import AUVocabulary, FineCondition, FineConditionRangeError, VocabularyError, load_labels

log = logging.getLogger("facediff")


class UsageError(Exception):
    pass


def _echo(out_dir: Path, config: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.json", "w") as fh:
        json.dump(config, fh, indent=2, sort_keys=True, default=str)


def _vocab(args) -> AUVocabulary:
    return AUVocabulary.load(args.vocab) if getattr(args, "vocab", None) else AUVocabulary.default()


# ------------------------------------------------------------------ commands
def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} exists and is not empty (use --force)")
    prof = get_profile(args.profile)["data"]
    spec = SyntheticSpec(n_clips=prof["n_clips"] if args.n_clips is None else args.n_clips,
                         T=prof["T"] if args.T is None else args.T,
                         seed=pl.substream(args.seed, "data"))
    ds = generate_dataset(spec, _vocab(args))
    write_dataset(ds, out)
    _echo(out, {"command": "gen-data", "profile": args.profile, "seed": args.seed, "spec": spec.to_json()})
    print(json.dumps({"clips": len(ds), "out": str(out)}))
    return 0


def cmd_train(args) -> int:
    if args.stage == 2 and not args.base_checkpoint and not args.resume:
        raise UsageError("stage 2 needs --base-checkpoint")
    prof = get_profile(args.profile)
    pl.set_dtype(args.dtype or prof["dtype"])
    stage_prof = prof[f"stage{args.stage}"]
    cfg = TrainConfig(
        stage=args.stage,
        lr=stage_prof["lr"] if args.lr is None else args.lr,
        batch_size=stage_prof["batch_size"] if args.batch_size is None else args.batch_size,
        iterations=stage_prof["iterations"] if args.iterations is None else args.iterations,
        p_swap=stage_prof.get("p_swap", 0.5) if args.p_swap is None else args.p_swap,
        seed=pl.substream(args.seed, "train"),
        lr_schedule=args.lr_schedule or stage_prof["lr_schedule"],
        warmup=stage_prof["warmup"] if args.warmup is None else args.warmup,
        checkpoint_every=args.checkpoint_every, log_every=args.log_every,
        **{k: getattr(args, k) for k in ("p_audio", "p_coarse", "p_triplet", "p_au")
           if getattr(args, k) is not None})
    vocab = _vocab(args)
    ds = read_dataset(args.data)
    train_idx, _ = ds.split(args.holdout)
    data = ds.training_data(train_idx)
    out = Path(args.out)
    start, opt = 0, None
    if args.resume:
        gen, opt, start = load_training_state(args.resume, cfg)
    elif args.stage == 1:
        model = dict(prof["model"])
        for k in ("d_model", "n_heads", "n_blocks", "d_cond"):
            if getattr(args, k) is not None:
                model[k] = getattr(args, k)
        if args.diffusion_steps is not None:
            model["steps"] = args.diffusion_steps
        gen = Generator(pl.model_config_for(ds, vocab, **model, seed=pl.substream(args.seed, "init")))
    else:
        gen = load_generator(args.base_checkpoint)
        if gen.adapter is not None:
            raise UsageError("base checkpoint already carries an adapter")
        insert_adapter(gen)
    pl.check_compatible(gen.cfg, ds, vocab)
    if args.stage == 2:
        data = pl.stage2_data(data, vocab, args.fine_source)
    _echo(out, {"command": "train", "profile": args.profile, "seed": args.seed, "train": vars(cfg),
                "model": gen.cfg.to_json(), "data": str(args.data), "dtype": str(ag.get_dtype()),
                "base_checkpoint": args.base_checkpoint, "resume": args.resume, "fine_source": args.fine_source})
    records = train(gen, data, cfg, NoiseSchedule.cosine(gen.cfg.steps), vocab=vocab, optimizer=opt, start=start,
                    log_path=out / "train_log.jsonl", ckpt_dir=out)
    last = records[-1].loss if records else None
    print(json.dumps({"iterations": cfg.iterations, "final_loss": last, "out": str(out)}))
    return 0


def _read_fine(path, vocab: AUVocabulary, T: int) -> FineCondition:
    with open(path) as fh:
        fc = FineCondition.from_json(json.load(fh))
    for au in fc.aus():
        vocab.index(au)
    fc.check_range(T)
    return fc


def cmd_sample(args) -> int:
    prof = get_profile(args.profile)
    pl.set_dtype(args.dtype or prof["dtype"])
    vocab = _vocab(args)
    gen = load_generator(args.checkpoint)
    ds = read_dataset(args.data)
    pl.check_compatible(gen.cfg, ds, vocab)
    if args.clips:
        ids = args.clips.split(",")
        by_id = {c.clip_id: i for i, c in enumerate(ds.clips)}
        missing = [c for c in ids if c not in by_id]
        if missing:
            raise UsageError(f"unknown clip ids {missing}")
        idx = [by_id[c] for c in ids]
    else:
        idx = ds.split(args.holdout)[1]
    data = ds.training_data(idx)
    T = data.motion.shape[1]
    coarse = data.coarse
    if args.emotion is not None:
        labels = load_labels()["emotions"]
        if args.emotion not in labels:
            raise UsageError(f"unknown emotion {args.emotion!r}; choose from {sorted(labels)}")
        coarse = CoarseBatch(coarse.style_ids, np.full(len(idx), labels[args.emotion]), coarse.intensity)
    if args.swap_emotion:
        coarse = pl.conflict_conditions(data, gen.cfg.n_emotions, pl.substream(args.seed, "swap"))
    if args.fine:
        fines = [_read_fine(args.fine, vocab, T)] * len(idx)
    elif args.dataset_fine:
        fines = list(data.fine)
    else:
        fines = None
    if fines is not None and gen.adapter is None:
        raise UsageError("fine conditions need a stage-2 checkpoint")
    cond = pl.bundle_for(data, coarse, fines, vocab)
    mask = pl.cfg_masks(fines, T) if fines is not None else None
    guidance = GuidanceConfig(args.alpha, args.beta, mask)
    motions = pl.generate(gen, cond, guidance, pl.substream(args.seed, "sample"), n_steps=args.steps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for j, i in enumerate(idx):
        cid = ds.clips[i].clip_id
        write_motion(out / f"{cid}.motion", motions[j], ds.spec.fps)
        with open(out / f"{cid}.cond.json", "w") as fh:
            json.dump({"emotion_id": int(coarse.emotion_ids[j]),
                       "fine": fines[j].to_json() if fines is not None else []}, fh)
    _echo(out, {"command": "sample", "profile": args.profile, "seed": args.seed, "alpha": args.alpha,
                "beta": args.beta, "steps": args.steps, "checkpoint": args.checkpoint, "data": args.data,
                "clips": [ds.clips[i].clip_id for i in idx], "fine": args.fine, "dataset_fine": args.dataset_fine,
                "emotion": args.emotion, "swap_emotion": args.swap_emotion, "dtype": str(ag.get_dtype())})
    print(json.dumps({"clips": len(idx), "out": str(out)}))
    return 0


def cmd_binarize(args) -> int:
    vocab = _vocab(args)
    motion = read_motion(args.motion)
    cfg = BinarizeConfig(threshold=args.threshold, kernels=tuple(args.kernels), spacing=args.spacing,
                         p_merge=args.p_merge, min_length=args.min_length, seed=args.seed)
    fc = binarize(motion, vocab, cfg)
    text = json.dumps(fc.to_json(), indent=1)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return 0


def cmd_eval(args) -> int:
    prof = get_profile(args.profile)
    pl.set_dtype(args.dtype or prof["dtype"])
    vocab = _vocab(args)
    ds = read_dataset(args.data)
    samples = Path(args.samples)
    ids = sorted(p.name[:-len(".motion")] for p in samples.glob("*.motion"))
    by_id = {c.clip_id: c for c in ds.clips}
    unknown = [i for i in ids if i not in by_id]
    if unknown or not ids:
        print(json.dumps({"error": "sample ids do not match dataset", "unknown": unknown}), file=sys.stderr)
        return 1
    generated = [read_motion(samples / f"{i}.motion").frames for i in ids]
    gt = [by_id[i].motion.frames for i in ids]
    emotions, fines = [], []
    for i in ids:
        cond_path = samples / f"{i}.cond.json"
        doc = json.loads(cond_path.read_text()) if cond_path.exists() else {}
        emotions.append(doc.get("emotion_id", by_id[i].coarse.emotion_id))
        fines.append(FineCondition.from_json(doc.get("fine", [])))
    clf = None
    if not args.no_classifier:
        train_idx, _ = ds.split(args.holdout)
        ccfg = ClassifierConfig(**{k: v for k, v in prof["classifier"].items()}, seed=pl.substream(args.seed, "clf"))
        clf = train_classifier(np.stack([ds.clips[j].motion.frames for j in train_idx]),
                               np.array([ds.clips[j].coarse.emotion_id for j in train_idx]), ds.spec.n_emotions, ccfg)
    report = evaluate(ids, generated, gt, emotions, ds.spec.lip_channels, vocab, fines, clf)
    out = Path(args.out)
    report.save(out)
    _echo(out, {"command": "eval", "profile": args.profile, "seed": args.seed, "data": args.data,
                "samples": args.samples, "classifier": not args.no_classifier})
    print(json.dumps(report.aggregates))
    return 0


def cmd_verify(args) -> int:
    from .verify import run_all
    pl.set_dtype(args.dtype)
    only = args.only.split(",") if args.only else None
    results = run_all(seed=args.seed, corrupt_zero_proj=args.corrupt_zero_proj, only=only)
    doc = {"dtype": args.dtype, "checks": [r.to_json() for r in results],
           "ok": all(r.ok for r in results)}
    text = json.dumps(doc, indent=1)
    if args.out:
        Path(args.out).write_text(text)
    for r in results:
        print(f"{r.status.upper():8s} {r.name:20s} {r.seconds:7.1f}s  {r.detail}")
    return 0 if doc["ok"] else 1


# -------------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="facediff", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--profile", default="desk", choices=["desk", "paper"])
        sp.add_argument("--vocab", help="AU vocabulary JSON (default: bundled ARKit map)")
        if seed:
            sp.add_argument("--seed", type=int, default=0)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--n-clips", type=int)
    g.add_argument("--T", type=int)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the base model (stage 1) or the adapter (stage 2)")
    common(t)
    t.add_argument("--stage", type=int, choices=[1, 2], required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--base-checkpoint")
    t.add_argument("--resume", help="checkpoint directory to continue from")
    t.add_argument("--iterations", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-schedule", choices=["constant", "cosine"])
    t.add_argument("--warmup", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--p-swap", type=float)
    t.add_argument("--fine-source", default="events", choices=["events", "binarized"])
    t.add_argument("--holdout", type=float, default=0.1)
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--log-every", type=int, default=100)
    t.add_argument("--dtype", choices=sorted(pl.DTYPES))
    for flag in ("--d-model", "--n-heads", "--n-blocks", "--d-cond", "--diffusion-steps"):
        t.add_argument(flag, type=int, help="model override (stage 1)")
    for flag in ("--p-audio", "--p-coarse", "--p-triplet", "--p-au"):
        t.add_argument(flag, type=float)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="guided sampling for dataset clips")
    common(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True, help="dataset providing audio and coarse conditions")
    s.add_argument("--out", required=True)
    s.add_argument("--clips", help="comma-separated clip ids (default: held-out clips)")
    s.add_argument("--holdout", type=float, default=0.1)
    s.add_argument("--alpha", type=float, default=2.0)
    s.add_argument("--beta", type=float, default=0.0)
    s.add_argument("--fine", help="JSON list of {aus, start, end} triplets applied to every clip")
    s.add_argument("--dataset-fine", action="store_true", help="use each clip's own AU events")
    s.add_argument("--emotion", help="override the emotion label by name")
    s.add_argument("--swap-emotion", action="store_true", help="replace each emotion by a different one")
    s.add_argument("--steps", type=int, help="number of sampling steps (default: all trained steps)")
    s.add_argument("--dtype", choices=sorted(pl.DTYPES))
    s.set_defaults(func=cmd_sample)

    b = sub.add_parser("binarize", help="AU triplets from a motion file")
    common(b)
    b.add_argument("motion")
    b.add_argument("--out")
    b.add_argument("--threshold", type=float, default=0.25)
    b.add_argument("--kernels", type=int, nargs="+", default=[3, 5, 7])
    b.add_argument("--spacing", type=int, default=5)
    b.add_argument("--p-merge", type=float, default=0.5)
    b.add_argument("--min-length", type=int, default=2)
    b.set_defaults(func=cmd_binarize)

    e = sub.add_parser("eval", help="CR / LVE / accuracy / diversity report")
    common(e)
    e.add_argument("--data", required=True)
    e.add_argument("--samples", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--holdout", type=float, default=0.1)
    e.add_argument("--no-classifier", action="store_true")
    e.add_argument("--dtype", choices=sorted(pl.DTYPES))
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="gradient, guidance, identity and oracle checks")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--dtype", default="fp64", choices=sorted(pl.DTYPES))
    v.add_argument("--corrupt-zero-proj", action="store_true",
                   help="negative control: nonzero adapter output projection")
    v.add_argument("--only", help="comma-separated check names")
    v.add_argument("--out", help="write the JSON report here")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, VocabularyError, FineConditionRangeError, FileNotFoundError) as exc:
        print(f"facediff {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"facediff {args.command}: error: {exc}", file=sys.stderr)
        return 1
    finally:
        ag.set_dtype(np.float64)


if __name__ == "__main__":
    sys.exit(main())
