"""Run a seen/unseen experiment plan end to end and tabulate the results.

Output layout under ``out_dir``::

    plan.json  config.txt
    models/<system>.didm (+ .json sidecar)
    scores/<system>.<domain>.<split>.tsv
    confusion/<system>.<domain>.csv
    report.md  report.csv  report.json
"""

import hashlib
import json
import re
import zlib
from pathlib import Path

import numpy as np

from . import datagen, didmodel, fusion, metrics, nnet
from .nnet import LrSchedule

ROW_NAMES = {
    "single": "{id}",
    "multi": "{id} (multi-domain, x{width_multiplier} width)",
    "lr_fusion": "LR fusion (optimised for {calibration_domain})",
    "fusion_layer": "Fusion layer",
    "attentive": "Domain attentive fusion ({variant})",
}


def derive_seed(seed, name):
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


def safe_name(system_id):
    return re.sub(r"[^A-Za-z0-9+_-]", "_", system_id).strip("_")


def _sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class _Data:
    """Feature cache keyed by (split, domain)."""

    def __init__(self, manifest, labels):
        self.manifest, self.labels = manifest, labels
        self._cache = {}

    def get(self, split, domains):
        ids, xs, ys = [], [], []
        for d in domains:
            key = (split, d)
            if key not in self._cache:
                self._cache[key] = didmodel.load_examples(self.manifest.select(split, [d]), self.labels)
            i, x, y = self._cache[key]
            ids += i
            xs += x
            ys.append(y)
        return ids, xs, np.concatenate(ys) if ys else np.zeros(0, dtype=np.int64)


def validate_inputs(manifest, plan):
    """Fail before writing anything if the corpus cannot serve the plan."""
    missing = manifest.missing_files()
    if missing:
        raise FileNotFoundError(f"{len(missing)} feature files missing, first: {missing[0]}")
    have = set(manifest.domains())
    for d in plan["domains"]:
        if d not in have:
            raise ValueError(f"plan domain {d!r} absent from manifest")
    for d in plan["train_domains"]:
        if not manifest.select("train", [d]).rows:
            raise ValueError(f"domain {d!r} has no training utterances")
    for d in plan["test_domains"]:
        if not manifest.select("test", [d]).rows:
            raise ValueError(f"domain {d!r} has no test utterances")
    seen, bases = set(), set()
    for system in plan["systems"]:
        sid, kind = system.get("id"), system.get("kind")
        if kind not in ROW_NAMES:
            raise datagen.ProtocolError(f"system {sid!r}: unknown kind {kind!r}")
        if sid in seen:
            raise datagen.ProtocolError(f"duplicate system id {sid!r}")
        domains = list(system.get("train_domains", []))
        if "calibration_domain" in system:
            domains.append(system["calibration_domain"])
        for d in domains:
            if d not in have:
                raise datagen.ProtocolError(f"system {sid!r}: domain {d!r} absent from manifest")
        unknown = [b for b in system.get("bases", []) if b not in bases]
        if unknown:
            raise datagen.ProtocolError(f"system {sid!r}: bases {unknown} are not earlier base systems")
        seen.add(sid)
        if kind in ("single", "multi"):
            bases.add(sid)


def run_experiment(manifest, plan, cfg, out_dir, log=None):
    log = log or (lambda msg: None)
    validate_inputs(manifest, plan)
    out = Path(out_dir)
    for sub in ("models", "scores", "confusion"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    (out / "plan.json").write_text(datagen.plan_to_json(plan))
    (out / "config.txt").write_text(cfg.to_text())

    labels = sorted(manifest.dialects())
    data = _Data(manifest, labels)
    schedule = LrSchedule(cfg.lr, cfg.decay, cfg.decay_interval)
    fusion_schedule = LrSchedule(cfg.fusion_lr, cfg.decay, cfg.decay_interval)
    test_domains = plan["test_domains"]

    posteriors = {}  # (system, domain) -> (n, L) test posteriors
    test_labels = {d: data.get("test", [d])[2] for d in test_domains}
    nets, model_paths = {}, {}

    # -- base networks ------------------------------------------------------
    for system in plan["systems"]:
        if system["kind"] not in ("single", "multi"):
            continue
        sid = system["id"]
        arch = didmodel.DidArchConfig.profile(cfg.profile, len(labels),
                                              system["width_multiplier"], cfg.pool_std)
        seed = derive_seed(cfg.seed, sid)
        net = didmodel.build(arch, seed, labels)
        _, xs, ys = data.get("train", system["train_domains"])
        log(f"training {sid} on {'+'.join(system['train_domains'])} ({len(xs)} utterances)")
        history = didmodel.train(net, xs, ys, didmodel.TrainConfig(schedule, cfg.epochs, cfg.batch_size, seed))
        net.train_meta.update({"domains": system["train_domains"], "history": history})
        nnet.round_to_f32(net.params)  # score with exactly what the file stores
        path = out / "models" / f"{safe_name(sid)}.didm"
        didmodel.save_model(net, path)
        nets[sid], model_paths[sid] = net, path
        for d in test_domains:
            ids, xs, _ = data.get("test", [d])
            scores = didmodel.score(net, ids, xs)
            didmodel.write_scores(out / "scores" / f"{safe_name(sid)}.{d}.test.tsv", labels, scores, True)
            posteriors[(sid, d)] = np.stack([s.o for s in scores])

    # -- fusion systems -----------------------------------------------------
    base_hashes = {sid: _sha(p) for sid, p in model_paths.items()}
    base_digests = {sid: net.digest() for sid, net in nets.items()}
    base_cache = {}

    def base_scores(bases, split, domains):
        key = (tuple(bases), split, tuple(domains))
        if key not in base_cache:
            _, xs, ys = data.get(split, domains)
            O, H = fusion.base_outputs([nets[b] for b in bases], xs)
            base_cache[key] = (O, H, ys)
        return base_cache[key]

    for system in plan["systems"]:
        kind = system["kind"]
        if kind in ("single", "multi"):
            continue
        sid, bases = system["id"], system["bases"]
        seed = derive_seed(cfg.seed, sid)
        fcfg = fusion.FusionTrainConfig(fusion_schedule, cfg.fusion_epochs, cfg.fusion_batch_size, seed)
        if kind == "lr_fusion":
            cal = system["calibration_domain"]
            O, _, ys = base_scores(bases, cfg.fusion_split, [cal])
            log(f"calibrating {sid} on {cal}/{cfg.fusion_split} ({len(ys)} trials)")
            model = fusion.lr_fusion_train(O, ys, max_iter=cfg.lr_fusion_max_iter, calibration_domain=cal)
            save_kind = "lr"
        elif kind == "fusion_layer":
            O, _, ys = base_scores(bases, cfg.fusion_split, plan["train_domains"])
            log(f"training {sid} ({len(ys)} utterances)")
            model = fusion.fit_fusion_layer(O, ys, fcfg, seed, cfg.fusion_hidden)
            save_kind = "fusion_layer"
        elif kind == "attentive":
            O, H, ys = base_scores(bases, cfg.fusion_split, plan["train_domains"])
            log(f"training {sid} ({len(ys)} utterances)")
            model = fusion.fit_attentive(O, H, ys, bases, system["variant"], cfg.m, fcfg, seed)
            save_kind = "attentive"
        else:
            raise ValueError(f"unknown system kind {kind!r}")
        path = out / "models" / f"{safe_name(sid)}.didm"
        fusion.save_fusion(path, model, save_kind, [(b, model_paths[b]) for b in bases], labels)
        # predict with the stored (float32) parameters, as ``score`` would
        model, _, _ = fusion.load_fusion(path)
        for d in test_domains:
            ids, _, _ = data.get("test", [d])
            O, H, _ = base_scores(bases, "test", [d])
            P = fusion.predict_with(model, save_kind, O, H)
            posteriors[(sid, d)] = P
            scores = [didmodel.UtteranceScore(u, p, np.zeros(0)) for u, p in zip(ids, P)]
            didmodel.write_scores(out / "scores" / f"{safe_name(sid)}.{d}.test.tsv", labels, scores)

    frozen = (
        all(_sha(model_paths[s]) == h for s, h in base_hashes.items())
        and all(nets[s].digest() == h for s, h in base_digests.items())
    )
    if not frozen:
        raise fusion.FreezeViolation("a base model changed during fusion training")

    # -- evaluation ---------------------------------------------------------
    rows = []
    for system in plan["systems"]:
        sid = system["id"]
        per = {}
        for d in test_domains:
            P, y = posteriors[(sid, d)], test_labels[d]
            rep = metrics.evaluate(P, y, labels)
            per[d] = {"acc": 100 * rep.accuracy, "eer": 100 * rep.eer, "cavg": rep.min_cavg_x100}
            (out / "confusion" / f"{safe_name(sid)}.{d}.csv").write_text(
                metrics.confusion_csv(rep.confusion, labels))
        per["avg"] = {k: float(np.mean([per[d][k] for d in test_domains])) for k in ("acc", "eer", "cavg")}
        rows.append({"id": sid, "kind": system["kind"], "name": ROW_NAMES[system["kind"]].format(**system),
                     "metrics": per})

    result = {"plan": plan, "labels": labels, "rows": rows, "base_models_frozen": frozen,
              "base_model_sha256": base_hashes}
    (out / "report.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    (out / "report.md").write_text(report_markdown(result))
    (out / "report.csv").write_text(report_csv(result))
    return result


def _columns(result):
    plan = result["plan"]
    cols = []
    for d in plan["test_domains"]:
        tag = f"{d} test" + (" (unseen)" if d in plan["unseen_domains"] else "")
        cols.append((d, tag))
    cols.append(("avg", "Averaged"))
    return cols


def report_markdown(result):
    cols = _columns(result)
    plan = result["plan"]
    lines = [
        f"# Dialect identification, {plan['condition']} condition",
        "",
        f"Training domains: {', '.join(plan['train_domains'])}; test domains: {', '.join(plan['test_domains'])}.",
        "Acc. and EER in %, Cavg as min Cavg x 100.",
        "",
        "| System | " + " | ".join(f"{tag} Acc. | {tag} EER | {tag} Cavg" for _, tag in cols) + " |",
        "|---|" + "---:|" * (3 * len(cols)),
    ]
    for row in result["rows"]:
        vals = []
        for key, _ in cols:
            m = row["metrics"][key]
            vals += [f"{m['acc']:.2f}", f"{m['eer']:.2f}", f"{m['cavg']:.2f}"]
        lines.append(f"| {row['name']} | " + " | ".join(vals) + " |")
    lines += ["", f"Base models unchanged by fusion training: {'yes' if result['base_models_frozen'] else 'NO'}", ""]
    return "\n".join(lines)


def report_csv(result):
    cols = _columns(result)
    header = ["system"] + [f"{key}_{m}" for key, _ in cols for m in ("acc", "eer", "cavg")]
    lines = [",".join(header)]
    for row in result["rows"]:
        vals = [f"{row['metrics'][key][m]:.2f}" for key, _ in cols for m in ("acc", "eer", "cavg")]
        lines.append(",".join([row["id"]] + vals))
    return "\n".join(lines) + "\n"
