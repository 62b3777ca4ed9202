"""Command-line front end: one JSON config per campaign, stages resumable from an output directory.

Every invocation writes ``manifest_<stage>.json`` next to its artifacts.
A later stage reuses an upstream artifact only when the manifest that
produced it recorded the same configuration; otherwise it recomputes it.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .actionspace import ItemGroups
from .agent import load_agent, save_agent, train_dqn
from .attacks import InjectedSequences, n_controlled
from .data import Dataset, TargetSpec
from .evalharness import (
    ATTACKS,
    CampaignConfig,
    Lab,
    build_groups,
    build_simulator,
    build_targets,
    evaluate_injection,
    generate_attack,
    inject,
    load_dataset,
    make_reward,
    run_campaign,
    run_sweep,
)
from .kernels import BACKEND
from .recmodels import hit_rate, load_model
from .seeding import child_seed
from .simulator import Ensemble

logger = logging.getLogger("poisonforge")

COMMANDS = ("ingest", "train-models", "build-groups", "train-agent", "attack", "evaluate", "campaign", "sweep")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; this CLI reserves 2 for runtime failures
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def git_hash(path: str | Path) -> str:
    """Content hash as ``git hash-object`` computes it."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def configure_logging() -> None:
    raw = os.environ.get("POISONFORGE_LOG", "WARNING").strip().upper()
    level = logging.getLevelName(raw)
    bad = not isinstance(level, int)
    logging.basicConfig(level=logging.WARNING if bad else level, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if bad:
        logger.warning("POISONFORGE_LOG=%r is not a log level; using WARNING", raw)


def _parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise UsageError(f"--set expects KEY=VALUE, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def load_config(args) -> tuple[CampaignConfig, dict]:
    """Config file, then ``--set`` overrides, then ``--seed``.  Returns the config and input hashes."""
    obj: dict = {}
    inputs = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            obj = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(obj, dict):
            raise UsageError(f"config file {path} must hold a JSON object")
        inputs[str(path)] = git_hash(path)
    for text in args.set or []:
        keys, value = _parse_override(text)
        node = obj
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise UsageError(f"--set {text!r}: {k!r} is not a section")
        node[keys[-1]] = value
    if args.seed is not None:
        obj["seed"] = args.seed
    try:
        cfg = CampaignConfig.from_dict(obj)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    data_path = cfg.dataset.get("path")
    if data_path:
        if not Path(data_path).is_file():
            raise UsageError(f"dataset file not found: {data_path}")
        inputs[str(data_path)] = git_hash(data_path)
    return cfg, inputs


class Workspace:
    """Output directory holding stage artifacts plus the manifests that produced them."""

    def __init__(self, out_dir: str | Path, cfg: CampaignConfig, command: str, inputs: dict, argv: list[str]):
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self.command = command
        self.inputs = dict(inputs)
        self.argv = argv
        self.artifacts: dict[str, str] = {}
        self.timings: dict[str, float] = {}
        self._cache: dict = {}

    # -- artifact bookkeeping ---------------------------------------------------
    def path(self, name: str) -> Path:
        return self.out / name

    def _producer_config(self, name: str) -> dict | None:
        for m in sorted(self.out.glob("manifest_*.json")):
            try:
                meta = json.loads(m.read_text())
            except (OSError, json.JSONDecodeError):
                continue
            if name in meta.get("artifacts", {}).values():
                return meta.get("config")
        return None

    def reusable(self, name: str) -> bool:
        """True when ``name`` exists and was produced under the current configuration."""
        return self.path(name).is_file() and self._producer_config(name) == self.cfg.to_dict()

    def consumed(self, name: str) -> None:
        self.inputs[name] = git_hash(self.path(name))

    def emit(self, key: str, name: str) -> Path:
        self.artifacts[key] = name
        return self.path(name)

    def timed(self, stage: str):
        ws = self

        class _T:
            def __enter__(self):
                self.t0 = time.perf_counter()
                logger.info("stage %s", stage)

            def __exit__(self, *exc):
                ws.timings[stage] = ws.timings.get(stage, 0.0) + time.perf_counter() - self.t0
                return False

        return _T()

    def seeds(self) -> dict:
        s = self.cfg.seed
        names = ["synth", "targets", "actionspace", "lissa", "influence", "dqn"]
        names += [f"simulator/{j}" for j in range(len(self.cfg.ensemble))]
        return {"master": s, **{n: child_seed(s, n) for n in names}}

    def write_manifest(self, suffix: str = "") -> Path:
        name = f"manifest_{self.command}{'-' + suffix if suffix else ''}.json"
        manifest = {
            "format": "poisonforge.manifest",
            "version": __version__,
            "command": self.command,
            "argv": self.argv,
            "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "kernel_backend": BACKEND,
            "config": self.cfg.to_dict(),
            "inputs": self.inputs,
            "seeds": self.seeds(),
            "artifacts": self.artifacts,
            "timings": self.timings,
        }
        self._release(set(self.artifacts.values()), name)
        p = self.path(name)
        p.write_text(json.dumps(manifest, indent=1, sort_keys=True))
        return p

    def _release(self, names: set[str], keep: str) -> None:
        """Drop ``names`` from older manifests so each artifact has exactly one owner."""
        for m in self.out.glob("manifest_*.json"):
            if m.name == keep:
                continue
            try:
                meta = json.loads(m.read_text())
            except (OSError, json.JSONDecodeError):
                continue
            owned = meta.get("artifacts", {})
            kept = {k: v for k, v in owned.items() if v not in names}
            if kept != owned:
                meta["artifacts"] = kept
                m.write_text(json.dumps(meta, indent=1, sort_keys=True))

    # -- lazily built stages ----------------------------------------------------
    def dataset(self) -> Dataset:
        if "ds" not in self._cache:
            if self.reusable("dataset.json"):
                self.consumed("dataset.json")
                self._cache["ds"] = Dataset.load(self.path("dataset.json"))
            else:
                with self.timed("dataset"):
                    self._cache["ds"] = load_dataset(self.cfg)
        return self._cache["ds"]

    def targets(self) -> TargetSpec:
        if "targets" not in self._cache:
            if self.reusable("targets.json"):
                self.consumed("targets.json")
                self._cache["targets"] = TargetSpec.from_json(json.loads(self.path("targets.json").read_text()))
            else:
                with self.timed("targets"):
                    self._cache["targets"] = build_targets(self.cfg, self.dataset())
        return self._cache["targets"]

    def _member_names(self) -> list[str]:
        return [f"simulator_{j}_{m['kind']}.npz" for j, m in enumerate(self.cfg.ensemble)]

    def ensemble(self) -> Ensemble:
        if "ens" not in self._cache:
            names = self._member_names()
            weights = [float(m.get("weight", 1.0)) for m in self.cfg.ensemble]
            if all(self.reusable(n) for n in names):
                for n in names:
                    self.consumed(n)
                self._cache["ens"] = Ensemble([load_model(self.path(n)) for n in names], weights)
            else:
                ds = self.dataset()
                with self.timed("simulator"):
                    self._cache["ens"] = build_simulator(self.cfg, ds)
        return self._cache["ens"]

    def groups(self) -> ItemGroups:
        if "groups" not in self._cache:
            if self.reusable("groups.json"):
                self.consumed("groups.json")
                self._cache["groups"] = ItemGroups.load(self.path("groups.json"))
            else:
                ds, targets = self.dataset(), self.targets()
                with self.timed("groups"):
                    self._cache["groups"] = build_groups(self.cfg, ds, targets)
        return self._cache["groups"]

    def lab(self, need_agent: bool) -> Lab:
        lab = Lab(self.cfg, self.dataset(), self.targets(), self.ensemble(), self.groups())
        if need_agent:
            if self.reusable("agent.npz"):
                self.consumed("agent.npz")
                lab.agent, _, meta = load_agent(self.path("agent.npz"))
                lab.reward_scale = float(meta.get("reward_scale", 1.0))
            else:
                net, log = self._train_agent(lab)
                lab.agent, lab.agent_log, lab.reward_scale = net, log.rows, log.reward_scale
        return lab

    def _train_agent(self, lab: Lab):
        with self.timed("influence"):
            reward = make_reward(lab, self.cfg.m_actions)
        with self.timed("agent"):
            return train_dqn(lab.groups, reward, self.cfg.dqn_config())


# -- subcommands --------------------------------------------------------------------
def cmd_ingest(ws: Workspace, args) -> None:
    ds, targets = ws.dataset(), ws.targets()
    ds.save(ws.emit("dataset", "dataset.json"))
    ws.emit("targets", "targets.json").write_text(json.dumps(targets.to_json(), indent=1))
    print(f"dataset: {ds.n_users} users, {ds.n_items} items; "
          f"{len(targets.target_items)} target items, {len(targets.target_users)} target users")


def cmd_train_models(ws: Workspace, args) -> None:
    ds = ws.dataset()
    ens = ws.ensemble()
    summary = []
    for name, m in zip(ws._member_names(), ens.members):
        m.save(ws.emit(name.removesuffix(".npz"), name))
        hr = hit_rate(m, ds, ws.cfg.k, "val")
        summary.append({"artifact": name, "kind": m.KIND, f"val_hit_rate@{ws.cfg.k}": hr})
        print(f"{name}: val HR@{ws.cfg.k} = {hr:.4f}")
    ws.emit("models", "models.json").write_text(json.dumps(summary, indent=1))


def cmd_build_groups(ws: Workspace, args) -> None:
    groups = ws.groups()
    groups.save(ws.emit("groups", "groups.json"))
    sizes = ", ".join(f"{k}:{len(g)}" for k, g in zip(groups.kinds, groups.groups))
    print(f"{groups.n_groups} groups ({sizes})")


def cmd_train_agent(ws: Workspace, args) -> None:
    lab = ws.lab(need_agent=False)
    net, log = ws._train_agent(lab)
    save_agent(ws.emit("agent", "agent.npz"), net, ws.cfg.dqn_config(), {"reward_scale": log.reward_scale})
    log.write_csv(ws.emit("dqn_log", "dqn_log.csv"))
    tail = log.rows[-1] if log.rows else {}
    print(f"agent trained: {len(log.rows)} epochs, final mean reward {tail.get('mean_reward', float('nan')):.4g}")


def _injected_name(kind: str) -> str:
    return f"injected_{kind}.jsonl"


def cmd_attack(ws: Workspace, args) -> None:
    kind = args.attack
    if kind == "none":
        raise UsageError("attack: 'none' injects nothing; use 'evaluate --attack none' for the control")
    lab = ws.lab(need_agent=kind == "loki")
    n_users = n_controlled(lab.ds, ws.cfg.user_fraction)
    with ws.timed(f"generate/{kind}"):
        seqs = generate_attack(lab, kind, n_users, ws.cfg.m_actions)
    seqs.write_jsonl(ws.emit(f"injected_{kind}", _injected_name(kind)))
    print(f"{kind}: {len(seqs)} sequences, max length {seqs.max_len}, {seqs.n_fallbacks} fallbacks")


def cmd_evaluate(ws: Workspace, args) -> None:
    kind = args.attack
    ds, targets = ws.dataset(), ws.targets()
    if kind == "none":
        seqs = InjectedSequences([], "none")
    elif ws.reusable(_injected_name(kind)):
        ws.consumed(_injected_name(kind))
        seqs = InjectedSequences.read_jsonl(ws.path(_injected_name(kind)))
    else:
        lab = ws.lab(need_agent=kind == "loki")
        with ws.timed(f"generate/{kind}"):
            seqs = generate_attack(lab, kind, n_controlled(ds, ws.cfg.user_fraction), ws.cfg.m_actions)
        seqs.write_jsonl(ws.emit(f"injected_{kind}", _injected_name(kind)))
    lab = Lab(ws.cfg, ds, targets, None, None)  # retraining needs neither simulator nor groups
    poisoned = inject(ds, seqs)
    result = {"attack": kind, "n_sequences": len(seqs), "k": ws.cfg.k, "results": []}
    for model_kind in ws.cfg.target_models:
        with ws.timed(f"retrain/{kind}/{model_kind}"):
            rates = evaluate_injection(lab, poisoned, model_kind)
        mean = sum(rates) / len(rates)
        result["results"].append({"target_model": model_kind, "display_rate": mean, "per_seed": rates})
        print(f"{kind} -> {model_kind}: display rate@{ws.cfg.k} = {mean:.4f}")
    ws.emit(f"evaluation_{kind}", f"evaluation_{kind}.json").write_text(
        json.dumps(result, indent=1, sort_keys=True))


def _write_report(ws: Workspace, report) -> None:
    paths = report.write(ws.out)
    for key, p in paths.items():
        ws.emit(key, p.name)
    ws.timings.update(report.timings)
    for row in report.results_table():
        print(f"f={row['user_fraction']:.3f} m={row['m_actions']:2d} {row['attack']:>8s} -> "
              f"{row['target_model']}: {row['display_rate']:.4f}")


def cmd_campaign(ws: Workspace, args) -> None:
    _write_report(ws, run_campaign(ws.cfg))


def cmd_sweep(ws: Workspace, args) -> None:
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    _write_report(ws, run_sweep(ws.cfg, args.jobs))


HANDLERS = {
    "ingest": cmd_ingest, "train-models": cmd_train_models, "build-groups": cmd_build_groups,
    "train-agent": cmd_train_agent, "attack": cmd_attack, "evaluate": cmd_evaluate,
    "campaign": cmd_campaign, "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="campaign config (JSON); defaults apply when omitted")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out-dir", default="runs/default", help="artifact directory (default: %(default)s)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key; dotted keys reach nested sections, values parse as JSON")
    parser = _Parser(prog="poisonforge", description="Poisoning campaigns against next-item recommenders.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "ingest": "build the filtered dataset and pick targets",
        "train-models": "train the simulator ensemble",
        "build-groups": "build the item-group action space",
        "train-agent": "train the LOKI policy on simulator influence rewards",
        "attack": "generate injected sequences",
        "evaluate": "inject, retrain the target models and report display rates",
        "campaign": "full pipeline at the configured budget",
        "sweep": "full pipeline over the configured budget grid",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=helps[name], description=helps[name])
        if name in ("attack", "evaluate"):
            p.add_argument("--attack", required=True, choices=ATTACKS)
        if name == "sweep":
            p.add_argument("--jobs", type=int, default=1, help="parallel sweep workers (default: %(default)s)")
    return parser


def run(argv: list[str] | None = None) -> int:
    """Execute one subcommand; returns 0 on success, 1 on usage errors, 2 on runtime failures."""
    argv = list(sys.argv[1:] if argv is None else argv)
    configure_logging()
    try:
        args = build_parser().parse_args(argv)
        cfg, inputs = load_config(args)
        ws = Workspace(args.out_dir, cfg, args.command, inputs, argv)
        HANDLERS[args.command](ws, args)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except Exception as exc:
        logger.debug("runtime failure", exc_info=True)
        print(f"poisonforge: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    suffix = getattr(args, "attack", "") or ""
    manifest = ws.write_manifest(suffix)
    print(f"manifest: {manifest}")
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
