"""Command-line orchestration: poison / train / eval / defend / sweep / audit / advgen.

Every command reads one JSON config, derives all randomness from a single
master seed, and writes byte-reproducible artifacts into the output
directory.  Exit codes: 0 ok, 2 config error, 3 data error, 4 external
paraphraser failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import attack as attack_mod
from . import defense as defense_mod
from .corpus import LabeledDataset, SynthSpec, build_neighbor_table, concat, dump_jsonl, load_jsonl, split, synth_dataset, tokenize
from .errors import ConfigError, ExternalFailure, PoisonLabError
from .hashing import derive_seed
from .metrics import EvalReport, evaluate, perplexity_audit, sweep
from .model import TrainConfig, load_model, save_model, train_hard
from .ngram import fit_lm

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_EXTERNAL = 4

DEFAULT_NEIGHBORS = {"window": 2, "min_count": 2, "top_m": 10}


# ---------------------------------------------------------------------------
# config plumbing


def load_config(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")


def section(config, name, required=True) -> dict:
    value = config.get(name)
    if value is None:
        if required:
            raise ConfigError(f"config is missing the {name!r} section")
        return {}
    if not isinstance(value, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    return value


def load_datasets(config, seed):
    """Resolve the dataset source: synthetic spec or JSONL paths."""
    ds = section(config, "dataset")
    if ("synth" in ds) == ("jsonl" in ds):
        raise ConfigError("dataset section needs exactly one of 'synth' or 'jsonl'")
    if "synth" in ds:
        raw = dict(ds["synth"])
        if "length_range" in raw:
            raw["length_range"] = tuple(raw["length_range"])
        try:
            spec = SynthSpec(**raw)
        except TypeError as exc:
            raise ConfigError(f"bad synth spec: {exc}")
        return synth_dataset(spec, seed)
    js = ds["jsonl"]
    for key in ("train", "test", "class_names"):
        if key not in js:
            raise ConfigError(f"dataset.jsonl is missing {key!r}")
    for key in ("train", "test"):
        if not os.path.exists(js[key]):
            raise ConfigError(f"dataset file does not exist: {js[key]}")
    kwargs = dict(
        text_key=js.get("text_key", "text"),
        pair_key=js.get("pair_key"),
        label_key=js.get("label_key", "label"),
    )
    train = load_jsonl(js["train"], js["class_names"], **kwargs)
    test = load_jsonl(js["test"], js["class_names"], **kwargs)
    return train, test


def class_names_of(config):
    ds = section(config, "dataset")
    if "jsonl" in ds:
        return list(ds["jsonl"]["class_names"])
    c = ds.get("synth", {}).get("num_classes", SynthSpec.num_classes)
    return [f"class{i}" for i in range(c)]


def train_config_from(config, seed) -> TrainConfig:
    raw = dict(section(config, "train", required=False))
    if "ngram_orders" in raw:
        raw["ngram_orders"] = tuple(raw["ngram_orders"])
    raw["seed"] = seed
    try:
        cfg = TrainConfig(**raw)
    except TypeError as exc:
        raise ConfigError(f"bad train section: {exc}")
    cfg.validate()
    return cfg


def trigger_from(config) -> attack_mod.Trigger:
    raw = section(config, "attack").get("trigger", {})
    trig = attack_mod.Trigger(
        kind=raw.get("kind", "closed"),
        token=raw.get("token", "cf"),
        position=raw.get("position"),
    )
    trig.validate()
    return trig


def plan_from(config, seed) -> attack_mod.PoisonPlan:
    atk = section(config, "attack")
    for key in ("type", "target_class", "budget"):
        if key not in atk:
            raise ConfigError(f"attack section is missing {key!r}")
    plan = attack_mod.PoisonPlan(
        attack_type=atk["type"],
        target_class=int(atk["target_class"]),
        budget=int(atk["budget"]),
        trigger=trigger_from(config),
        seed=derive_seed(seed, "plan"),
    )
    plan.validate()
    return plan


def search_kwargs_from(config):
    raw = dict(section(config, "attack").get("search", {}))
    raw.pop("neighbors", None)
    raw.pop("surrogate_fraction", None)
    return raw


def attack_neighbors_from(config):
    return {**{"window": 2, "min_count": 2, "top_m": 100}, **section(config, "attack").get("search", {}).get("neighbors", {})}


def build_poison_set(config, train, seed, cfg):
    plan = plan_from(config, seed)
    search_cfg = None
    nt = None
    if plan.attack_type == "acl":
        atk = section(config, "attack")
        fraction = atk.get("search", {}).get("surrogate_fraction", 0.5)
        surrogate = attack_mod.fit_surrogate(train, cfg, fraction=fraction, seed=derive_seed(seed, "acl"))
        nt = build_neighbor_table(train, **attack_neighbors_from(config))
        search_cfg = attack_mod.AdvSearchConfig(surrogate=surrogate, **search_kwargs_from(config))
        search_cfg.validate()
    poison = attack_mod.build_poison(train, plan, search_cfg, nt)
    return plan, poison


# ---------------------------------------------------------------------------
# deterministic writers


def config_echo(config, seed):
    return json.dumps({"config": config, "seed": seed}, sort_keys=True, separators=(",", ":"))


def write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n")


def fmt(value):
    if value is None or value == "":
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, header, rows, config, seed):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# {config_echo(config, seed)}\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")


REPORT_HEADER = ["attack", "defense", "budget", "seed", "acc", "asr", "k", "p", "threshold", "wall_ms"]


def report_row(report: EvalReport, attack_type, budget, k="", p="", threshold=""):
    # wall_ms stays 0 in artifacts so reruns are byte-identical; real timing
    # goes to stderr instead
    return [attack_type, report.defense_tag, budget, report.seed, report.acc, report.asr, k, p, threshold, 0]


# ---------------------------------------------------------------------------
# commands


def cmd_poison(config, seed, out, jobs):
    train, _ = load_datasets(config, seed)
    cfg = train_config_from(config, derive_seed(seed, "train"))
    plan, poison = build_poison_set(config, train, seed, cfg)
    combined = concat(train, poison)
    dump_jsonl(combined, out / "poisoned_train.jsonl")
    instances = {}
    for ex in poison.examples:
        source = {e.id: e for e in train.examples}.get(ex.id.removesuffix(":poisoned"))
        before = set(tokenize(source.active_text())) if source else set()
        added = [t for t in tokenize(ex.active_text()) if t not in before]
        for tok in added[:1]:
            instances[tok] = instances.get(tok, 0) + 1
    write_json(
        out / "poison_manifest.json",
        {
            "plan": {
                "attack_type": plan.attack_type,
                "target_class": plan.target_class,
                "budget": plan.budget,
                "trigger": {"kind": plan.trigger.kind, "token": plan.trigger.token, "position": plan.trigger.position},
            },
            "counts": {"clean": len(train), "poison": len(poison), "total": len(combined)},
            "trigger_instances": instances,
            "seed": seed,
            "config_echo": config_echo(config, seed),
        },
    )
    return EXIT_OK


def _training_set(config, seed):
    """The training data for train/defend/audit: an explicit train_data JSONL
    (typically the poison command's output) or the dataset's own train part."""
    path = config.get("train_data")
    if path is None:
        train, _ = load_datasets(config, seed)
        return train
    if not os.path.exists(path):
        raise ConfigError(f"train_data file does not exist: {path}")
    ds = section(config, "dataset")
    kwargs = {}
    if "jsonl" in ds:
        kwargs = dict(
            text_key=ds["jsonl"].get("text_key", "text"),
            pair_key=ds["jsonl"].get("pair_key"),
            label_key=ds["jsonl"].get("label_key", "label"),
        )
        # dumped pair key default
        if kwargs["pair_key"] is None:
            kwargs.pop("pair_key")
    return load_jsonl(path, class_names_of(config), **kwargs)


def cmd_train(config, seed, out, jobs):
    train = _training_set(config, seed)
    cfg = train_config_from(config, derive_seed(seed, "train"))
    model = train_hard(train, cfg)
    save_model(model, out / "model.plab")
    write_json(
        out / "train_manifest.json",
        {"n_train": len(train), "num_buckets": cfg.num_buckets, "seed": seed, "config_echo": config_echo(config, seed)},
    )
    return EXIT_OK


def cmd_eval(config, seed, out, jobs):
    _, test = load_datasets(config, seed)
    model_path = config.get("model_path", str(out / "model.plab"))
    if not os.path.exists(model_path):
        raise ConfigError(f"model file does not exist: {model_path}")
    model = load_model(model_path)
    atk = section(config, "attack")
    report = evaluate(
        model,
        test,
        trigger_from(config),
        int(atk["target_class"]),
        seed=derive_seed(seed, "eval"),
        defense_tag="none",
        config={"command": "eval"},
    )
    row = report_row(report, atk.get("type", ""), atk.get("budget", ""))
    write_csv(out / "eval_report.csv", REPORT_HEADER, [row], config, seed)
    return EXIT_OK


def _sanitizer_for(name, dspec, poisoned_train, config):
    neighbors = {**DEFAULT_NEIGHBORS, **dspec.get("neighbors", {})}
    if name == "onion":
        lm = fit_lm(poisoned_train, add_k=dspec.get("add_k", 0.1))
        onion_cfg = defense_mod.OnionConfig(
            lm=lm,
            threshold=dspec.get("threshold", 0.0),
            max_removals=dspec.get("max_removals", 2),
        )
        return defense_mod.make_sanitizer("onion", onion_cfg=onion_cfg)
    if name == "random":
        nt = build_neighbor_table(poisoned_train, **neighbors)
        return defense_mod.make_sanitizer("random", nt=nt, p=dspec.get("p", 0.5))
    if name == "paraphrase":
        external = dspec.get("external_cmd")
        nt = None if external else build_neighbor_table(poisoned_train, **neighbors)
        return defense_mod.make_sanitizer(
            "paraphrase",
            nt=nt,
            q=dspec.get("q", 0.5),
            external_cmd=external,
            top_frequent=dspec.get("top_frequent", 100),
        )
    raise ConfigError(f"unknown sanitizer {name!r}")


def cmd_defend(config, seed, out, jobs):
    _, test = load_datasets(config, seed)
    poisoned = _training_set(config, seed)
    if config.get("train_data") is None:
        # no prebuilt poisoned file: construct the attack here
        cfg0 = train_config_from(config, derive_seed(seed, "train"))
        _, poison = build_poison_set(config, poisoned, seed, cfg0)
        poisoned = concat(poisoned, poison)
    atk = section(config, "attack")
    dspec = section(config, "defense")
    name = dspec.get("name", "none")
    mode = dspec.get("mode", "test")
    if mode not in ("test", "train"):
        raise ConfigError(f"unknown defense mode {mode!r}")
    trig = trigger_from(config)
    target = int(atk["target_class"])
    cfg = train_config_from(config, derive_seed(seed, "victim"))
    eval_seed = derive_seed(seed, "eval")
    t0 = time.monotonic()

    k_col, p_col, th_col = "", "", ""
    if name == "none":
        predictor = train_hard(poisoned, cfg)
        tag = "none"
    elif name in ("onion", "random", "paraphrase"):
        sanitizer = _sanitizer_for(name, dspec, poisoned, config)
        if mode == "train":
            cleaned = defense_mod.apply_defense_train(poisoned, sanitizer, seed=derive_seed(seed, "sanitize-train"))
            victim = train_hard(cleaned, cfg)
        else:
            victim = train_hard(poisoned, cfg)
        predictor = defense_mod.SanitizedPredictor(victim, sanitizer, seed=derive_seed(seed, "sanitize-test"))
        tag = f"{name}-{mode}"
        if name == "random":
            p_col = dspec.get("p", 0.5)
        if name == "paraphrase":
            p_col = dspec.get("q", 0.5)
        if name == "onion":
            th_col = dspec.get("threshold", 0.0)
    elif name == "knn":
        k_col = int(dspec.get("k_neighbors", 10))
        predictor = defense_mod.knn_build(poisoned, k_neighbors=k_col, pair_mode=dspec.get("pair_mode", "concat"))
        tag = "knn"
    elif name in ("dpa", "sdpa"):
        if "k" not in dspec:
            raise ConfigError(f"defense {name!r} needs a partition count 'k'")
        k_col = int(dspec["k"])
        ensemble = defense_mod.dpa_train(poisoned, k_col, cfg)
        predictor = ensemble
        tag = "dpa"
        if name == "sdpa":
            predictor = defense_mod.sdpa_distill(ensemble, poisoned, cfg)
            tag = "sdpa"
    else:
        raise ConfigError(f"unknown defense {name!r}")

    report = evaluate(predictor, test, trig, target, seed=eval_seed, defense_tag=tag, config={"command": "defend"})
    print(f"defend[{tag}] wall time {1000 * (time.monotonic() - t0):.0f} ms", file=sys.stderr)
    row = report_row(report, atk.get("type", ""), atk.get("budget", ""), k=k_col, p=p_col, threshold=th_col)
    write_csv(out / "defense_report.csv", REPORT_HEADER, [row], config, seed)
    return EXIT_OK


def cmd_sweep(config, seed, out, jobs):
    train, test = load_datasets(config, seed)
    sw = section(config, "sweep")
    budgets = sw.get("budgets")
    seeds = sw.get("seeds")
    if not budgets or not seeds:
        raise ConfigError("sweep section needs non-empty 'budgets' and 'seeds'")
    attack_types = sw.get("attack_types", [section(config, "attack").get("type", "lf")])
    atk = section(config, "attack")
    trig = trigger_from(config)
    target = int(atk["target_class"])
    cfg = train_config_from(config, derive_seed(seed, "train"))
    nt = None
    if "acl" in attack_types:
        nt = build_neighbor_table(train, **attack_neighbors_from(config))
    for attack_type in attack_types:
        curve = sweep(
            train,
            test,
            attack_type,
            trig,
            target,
            budgets=budgets,
            seeds=[derive_seed(seed, "sweep", s) for s in seeds],
            cfg=cfg,
            search_kwargs=search_kwargs_from(config),
            nt=nt,
            jobs=jobs,
        )
        rows = [[p.budget, p.mean_asr, p.sd_asr, p.mean_acc, p.sd_acc] for p in curve.points]
        write_csv(out / f"sweep_{attack_type}.csv", ["budget", "mean_asr", "sd_asr", "mean_acc", "sd_acc"], rows, config, seed)
    return EXIT_OK


def cmd_audit(config, seed, out, jobs):
    ds = _training_set(config, seed)
    if config.get("train_data") is None:
        cfg0 = train_config_from(config, derive_seed(seed, "train"))
        _, poison = build_poison_set(config, ds, seed, cfg0)
        ds = concat(ds, poison)
    add_k = section(config, "audit", required=False).get("add_k", 0.1)
    lm = fit_lm(ds, add_k=add_k)
    curve = perplexity_audit(ds, lm)
    write_csv(out / "audit.csv", ["n_inspected", "poison_recall"], [[n, r] for n, r in curve], config, seed)
    return EXIT_OK


def cmd_advgen(config, seed, out, jobs):
    train, _ = load_datasets(config, seed)
    atk = section(config, "attack")
    target = int(atk["target_class"])
    cfg = train_config_from(config, derive_seed(seed, "train"))
    fraction = atk.get("search", {}).get("surrogate_fraction", 0.5)
    surrogate = attack_mod.fit_surrogate(train, cfg, fraction=fraction, seed=derive_seed(seed, "acl"))
    nt = build_neighbor_table(train, **attack_neighbors_from(config))
    search_cfg = attack_mod.AdvSearchConfig(surrogate=surrogate, **search_kwargs_from(config))
    search_cfg.validate()
    n_success = 0
    with open(out / "advgen.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for ex in train.examples:
            if ex.label != target:
                continue
            try:
                result = attack_mod.adv_substitute(ex, search_cfg, nt, derive_seed(seed, ex.id))
            except PoisonLabError as exc:
                result = attack_mod.SubstitutionResult(False, reason=type(exc).__name__)
            record = {
                "id": ex.id,
                "success": result.success,
                "reason": result.reason,
                "n_substitutions": result.n_substitutions,
                "text": result.example.text if result.success else ex.text,
            }
            if ex.text_pair is not None:
                record["hypothesis"] = result.example.text_pair if result.success else ex.text_pair
            fh.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")
            n_success += int(result.success)
    write_json(
        out / "advgen_manifest.json",
        {"n_success": n_success, "seed": seed, "config_echo": config_echo(config, seed)},
    )
    return EXIT_OK


COMMANDS = {
    "poison": cmd_poison,
    "train": cmd_train,
    "eval": cmd_eval,
    "defend": cmd_defend,
    "sweep": cmd_sweep,
    "audit": cmd_audit,
    "advgen": cmd_advgen,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="poisonlab", description="Textual backdoor poisoning lab")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="JSON experiment config")
    parser.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
    parser.add_argument("--out", default=None, help="output directory (overrides config)")
    parser.add_argument("--jobs", type=int, default=None, help="worker processes (PLAB_JOBS fallback)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        seed = args.seed if args.seed is not None else config.get("seed", 0)
        if not isinstance(seed, int) or seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        out = Path(args.out or config.get("out", "."))
        out.mkdir(parents=True, exist_ok=True)
        jobs = args.jobs
        if jobs is None:
            jobs = int(os.environ.get("PLAB_JOBS", "1"))
        if jobs < 1:
            raise ConfigError("jobs must be >= 1")
        return COMMANDS[args.command](config, seed, out, jobs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ExternalFailure as exc:
        print(f"external command error: {exc}", file=sys.stderr)
        return EXIT_EXTERNAL
    except PoisonLabError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
