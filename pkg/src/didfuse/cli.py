"""``didfuse`` command-line entry point.

Every subcommand checks its inputs before writing anything. Failures print
one line ``error: <category>: <detail>`` to stderr and exit with 2 for
invalid input or 3 for failures while running.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config, datagen, didmodel, experiment, featext, fusion, metrics, nnet
from .nnet import LrSchedule

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3


class ValidationError(ValueError):
    def __init__(self, category, detail):
        super().__init__(detail)
        self.category = category


def _fail(category, detail):
    raise ValidationError(category, detail)


def _log(msg):
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# shared helpers


def _config(args, **extra):
    overrides = {"seed": args.seed, "profile": args.profile}
    for item in args.set or []:
        if "=" not in item:
            _fail("config", f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        overrides[key.strip()] = val.strip()
    overrides.update({k: v for k, v in extra.items() if v is not None})
    if args.config and not Path(args.config).is_file():
        _fail("config", f"config file {args.config} not found")
    return config.load_config(args.config, overrides)


def _require_out(args):
    if not args.out:
        _fail("usage", f"{args.command}: --out is required")
    return Path(args.out)


def _manifest(path, split=None, domains=None):
    if not path:
        _fail("usage", "--manifest is required")
    if not Path(path).is_file():
        _fail("manifest", f"{path} not found")
    man = datagen.read_manifest(path)
    if split or domains:
        unknown = sorted(set(domains or []) - set(man.domains()))
        if unknown:
            _fail("manifest", f"{path}: no rows for domains {unknown}")
        man = man.select(split, domains)
    if not man.rows:
        _fail("manifest", f"{path}: no rows selected (split={split}, domains={domains})")
    missing = man.missing_files()
    if missing:
        _fail("manifest", f"{len(missing)} files missing, first: {missing[0]}")
    return man


def _domains(text):
    return [d for d in text.split(",") if d] if text else None


def _load_examples(man, labels):
    unknown = sorted(set(man.dialects()) - set(labels))
    if unknown:
        _fail("manifest", f"dialects {unknown} not known to the model ({labels})")
    ids, xs, ys = didmodel.load_examples(man, labels)
    return ids, xs, ys


def _parse_bases(items):
    bases = []
    for item in items or []:
        sid, sep, path = item.partition("=")
        if not sep:
            sid, path = Path(item).stem, item
        if not Path(path).is_file():
            _fail("model", f"base model {path} not found")
        bases.append((sid, Path(path)))
    if not bases:
        _fail("usage", "at least one --base is required")
    ids = [b[0] for b in bases]
    if len(set(ids)) != len(ids):
        _fail("usage", f"duplicate base ids {ids}")
    return bases


def _load_nets(bases):
    nets = [didmodel.load_model(p) for _, p in bases]
    labels = nets[0].label_names
    for (sid, _), net in zip(bases, nets):
        if net.label_names != labels:
            _fail("model", f"base {sid} has labels {net.label_names}, expected {labels}")
    return nets, labels


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    cfg = _config(args)
    out = _require_out(args)
    if args.audio:
        man = datagen.synth_audio(out, per_class=args.per_class, seed=cfg.seed)
        _log(f"wrote {len(man)} wav files to {out}")
        return
    if args.spec:
        if not Path(args.spec).is_file():
            _fail("spec", f"{args.spec} not found")
        spec = datagen.CorpusSpec.from_json(Path(args.spec).read_text())
        if args.seed is not None or args.config:
            spec.seed = cfg.seed
    else:
        spec = datagen.default_spec(cfg.seed, args.n_domains)
    spec.validate()
    man = datagen.generate(spec, out)
    _log(f"wrote {len(man)} utterances to {out}")


def cmd_extract(args):
    _config(args)
    out = _require_out(args)
    man = _manifest(args.manifest)
    clips = []
    for row in man.rows:
        clip = featext.read_wav(man.resolve(row), row.utt_id)
        feats = featext.extract(clip)
        clips.append((row, feats))
    (out / "features").mkdir(parents=True, exist_ok=True)
    rows = []
    for row, feats in clips:
        rel = f"features/{row.utt_id}.didf"
        featext.write_features(out / rel, feats)
        rows.append(datagen.ManifestRow(row.utt_id, rel, row.dialect, row.domain, row.split))
    datagen.write_manifest(out / "manifest.csv", datagen.Manifest(rows, out))
    _log(f"extracted {len(rows)} utterances to {out}")


def cmd_train(args):
    cfg = _config(args)
    out = _require_out(args)
    full = _manifest(args.manifest)
    labels = sorted(full.dialects())
    man = _manifest(args.manifest, args.split, _domains(args.domains))
    width = args.width or len(man.domains())
    arch = didmodel.DidArchConfig.profile(cfg.profile, len(labels), width, cfg.pool_std)
    _, xs, ys = _load_examples(man, labels)
    short = [r.utt_id for r, x in zip(man.rows, xs) if x.shape[0] < arch.min_frames()]
    if short:
        _fail("input", f"{len(short)} utterances shorter than {arch.min_frames()} frames, first: {short[0]}")
    net = didmodel.build(arch, cfg.seed, labels)
    schedule = LrSchedule(cfg.lr, cfg.decay, cfg.decay_interval)
    history = didmodel.train(net, xs, ys, didmodel.TrainConfig(schedule, cfg.epochs, cfg.batch_size, cfg.seed),
                             log=_log)
    net.train_meta.update({"domains": man.domains(), "history": history})
    out.parent.mkdir(parents=True, exist_ok=True)
    didmodel.save_model(net, out)
    _log(f"saved {out}")


def cmd_fuse(args):
    cfg = _config(args, variant=args.variant)
    out = _require_out(args)
    bases = _parse_bases(args.base)
    nets, labels = _load_nets(bases)
    ids = [b[0] for b in bases]
    if args.kind == "lr":
        if not args.calib_domain:
            _fail("usage", "--kind lr needs --calib-domain")
        domains = [args.calib_domain]
    else:
        domains = _domains(args.domains)
    split = args.split or cfg.fusion_split
    man = _manifest(args.manifest, split, domains)
    _, xs, ys = _load_examples(man, labels)
    O, H = fusion.base_outputs(nets, xs)
    fcfg = fusion.FusionTrainConfig(LrSchedule(cfg.fusion_lr, cfg.decay, cfg.decay_interval),
                                    cfg.fusion_epochs, cfg.fusion_batch_size, cfg.seed)
    if args.kind == "lr":
        model = fusion.lr_fusion_train(O, ys, max_iter=cfg.lr_fusion_max_iter, calibration_domain=args.calib_domain)
        kind = "lr"
    elif args.kind == "layer":
        model = fusion.fit_fusion_layer(O, ys, fcfg, cfg.seed, cfg.fusion_hidden)
        kind = "fusion_layer"
    else:
        model = fusion.fit_attentive(O, H, ys, ids, cfg.variant, cfg.m, fcfg, cfg.seed)
        kind = "attentive"
    out.parent.mkdir(parents=True, exist_ok=True)
    fusion.save_fusion(out, model, kind, bases, labels)
    _log(f"saved {out}")


def cmd_score(args):
    _config(args)
    out = _require_out(args)
    if not args.model or not Path(args.model).is_file():
        _fail("model", f"model {args.model} not found")
    _, meta = nnet.load_container(args.model)
    man = _manifest(args.manifest, args.split, _domains(args.domains))
    if meta.get("kind") == "did":
        net = didmodel.load_model(args.model)
        ids, xs, _ = _load_examples(man, net.label_names)
        scores = didmodel.score(net, ids, xs)
        labels, hidden = net.label_names, args.hidden
    else:
        model, meta, base_paths = fusion.load_fusion(args.model)
        nets = [didmodel.load_model(p) for p in base_paths]
        labels = meta["label_names"]
        ids, xs, _ = _load_examples(man, labels)
        O, H = fusion.base_outputs(nets, xs)
        P = fusion.predict_with(model, meta["fusion_kind"], O, H)
        scores = [didmodel.UtteranceScore(u, p, np.zeros(0)) for u, p in zip(ids, P)]
        hidden = False
    out.parent.mkdir(parents=True, exist_ok=True)
    didmodel.write_scores(out, labels, scores, hidden)
    _log(f"scored {len(scores)} utterances into {out}")


def cmd_eval(args):
    _config(args)
    if not args.scores or not Path(args.scores).is_file():
        _fail("scores", f"scores file {args.scores} not found")
    labels, scores = didmodel.read_scores(args.scores)
    man = _manifest(args.manifest)
    truth = {r.utt_id: r.dialect for r in man.rows}
    missing = [s.utt_id for s in scores if s.utt_id not in truth]
    if missing:
        _fail("scores", f"{len(missing)} scored utterances absent from the manifest, first: {missing[0]}")
    unknown = sorted({truth[s.utt_id] for s in scores} - set(labels))
    if unknown:
        _fail("scores", f"reference dialects {unknown} have no score column")
    if not scores:
        _fail("scores", f"{args.scores}: no score rows")
    P = np.stack([s.o for s in scores])
    y = np.array([labels.index(truth[s.utt_id]) for s in scores])
    report = metrics.evaluate(P, y, labels)
    text = report.to_text()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(text)
        (out / "report.json").write_text(report.to_json())
    print(text, end="")


def cmd_experiment(args):
    cfg = _config(args, condition=args.condition, unseen_domain=args.unseen_domain, n_domains=args.n_domains)
    out = _require_out(args)
    plan = None
    if args.plan:
        if not Path(args.plan).is_file():
            _fail("plan", f"{args.plan} not found")
        try:
            plan = json.loads(Path(args.plan).read_text())
        except json.JSONDecodeError as e:
            _fail("plan", f"{args.plan}: {e}")
        for key in ("condition", "domains", "train_domains", "test_domains", "unseen_domains", "systems"):
            if key not in plan:
                _fail("plan", f"{args.plan}: missing key {key!r}")
    if args.manifest:
        man = _manifest(args.manifest)
    else:
        n = cfg.n_domains or (3 if cfg.condition == "unseen" else 2)
        spec = datagen.default_spec(cfg.seed, n)
        spec.validate()
        man = datagen.generate(spec, out / "corpus")
    if plan is None:
        plan = datagen.protocol(cfg.condition, man.domains(), cfg.unseen_domain or None)
    experiment.validate_inputs(man, plan)
    result = experiment.run_experiment(man, plan, cfg, out, log=_log)
    print(experiment.report_markdown(result), end="")


COMMANDS = {
    "synth": cmd_synth,
    "extract": cmd_extract,
    "train": cmd_train,
    "fuse": cmd_fuse,
    "score": cmd_score,
    "eval": cmd_eval,
    "experiment": cmd_experiment,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError("usage", f"{self.prog}: {message}")


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--seed", type=int, help="master random seed")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--profile", choices=sorted(config.PROFILE_DEFAULTS), help="architecture profile")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    p = _Parser(prog="didfuse", description="Multi-domain dialect identification toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    s.add_argument("--spec", help="corpus spec JSON (default: built-in)")
    s.add_argument("--n-domains", type=int, default=2)
    s.add_argument("--audio", action="store_true", help="write a small WAV corpus instead of features")
    s.add_argument("--per-class", type=int, default=2)

    s = sub.add_parser("extract", parents=[common], help="WAV manifest -> MFCC feature manifest")
    s.add_argument("--manifest", required=True)

    s = sub.add_parser("train", parents=[common], help="train one DID network")
    s.add_argument("--manifest", required=True)
    s.add_argument("--domains", help="comma-separated training domains (default: all)")
    s.add_argument("--split", default="train")
    s.add_argument("--width", type=int, help="width multiplier (default: number of domains)")

    s = sub.add_parser("fuse", parents=[common], help="train a fusion model over frozen bases")
    s.add_argument("--kind", choices=["attentive", "layer", "lr"], default="attentive")
    s.add_argument("--variant", choices=["output", "hidden"])
    s.add_argument("--base", action="append", metavar="ID=PATH", help="base model (repeatable, domain order)")
    s.add_argument("--manifest", required=True)
    s.add_argument("--domains", help="comma-separated domains to train on (default: all)")
    s.add_argument("--split", help="manifest split (default: config fusion_split)")
    s.add_argument("--calib-domain", help="calibration domain for --kind lr")

    s = sub.add_parser("score", parents=[common], help="score a manifest with a model")
    s.add_argument("--model", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--domains")
    s.add_argument("--hidden", action="store_true", help="also write hidden-layer columns")

    s = sub.add_parser("eval", parents=[common], help="evaluate a scores TSV")
    s.add_argument("--scores", required=True)
    s.add_argument("--manifest", required=True)

    s = sub.add_parser("experiment", parents=[common], help="run a seen/unseen plan end to end")
    s.add_argument("--manifest", help="feature manifest (default: generate one under --out)")
    s.add_argument("--plan", help="plan JSON (default: derived from --condition)")
    s.add_argument("--condition", choices=["seen", "unseen"])
    s.add_argument("--unseen-domain")
    s.add_argument("--n-domains", type=int)
    return p


_VALIDATION_ERRORS = (
    ValidationError, config.ConfigError, datagen.ManifestError, datagen.ProtocolError,
    featext.FeatureError, nnet.ContainerError, fusion.FusionError, metrics.MetricError,
    didmodel.MinimumLengthError, FileNotFoundError,
)


def _category(exc):
    if isinstance(exc, ValidationError):
        return exc.category
    names = {
        config.ConfigError: "config", datagen.ManifestError: "manifest", datagen.ProtocolError: "plan",
        featext.FeatureError: "features", nnet.ContainerError: "model", fusion.FusionError: "model",
        metrics.MetricError: "metrics", didmodel.MinimumLengthError: "input", FileNotFoundError: "io",
    }
    for cls, name in names.items():
        if isinstance(exc, cls):
            return name
    return "input"


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # --help
        return EXIT_OK if e.code in (0, None) else EXIT_VALIDATION
    except ValidationError as e:
        _error(e.category, e)
        return EXIT_VALIDATION
    try:
        COMMANDS[args.command](args)
    except _VALIDATION_ERRORS as e:
        _error(_category(e), e)
        return EXIT_VALIDATION
    except ValueError as e:
        _error("input", e)
        return EXIT_VALIDATION
    except Exception as e:  # noqa: BLE001 - single-line report for any failure
        _error("runtime", f"{type(e).__name__}: {e}")
        return EXIT_RUNTIME
    return EXIT_OK


def _error(category, detail):
    line = " ".join(str(detail).split())
    print(f"error: {category}: {line}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
