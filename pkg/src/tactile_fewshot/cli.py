"""Command-line entry point: ``tactile-fewshot <subcommand> [options]``.

Subcommands
-----------
synth        generate a synthetic dataset file
extract      write the 386-feature matrix and the feature catalog
pretrain     fit standardizer, NCA ranking and D for each fold of a protocol
eval         AFOP evaluation; ``--all-protocols`` writes one summary CSV for all four
baseline     same as eval with all features and no feature optimization
diagnose     embedding diagnostics in the Top-D space of each fold
dscan-curve  accuracy against D for each fold (``D,acc,ci`` CSV)
report       median selected D and PVDF share per protocol family

Exit codes: 0 success, 1 stage failure (JSON error on stderr), 2 usage or
config error. Every run writes ``manifest-<subcommand>.json`` with the
config hash, seed and catalog version.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

TABLE_FIELDS = ("protocol", "n_way", "k_shot", "acc_mean", "ci", "pretrain_s", "adapt_ms", "selected_D", "pvdf_fraction")
ALL_PROTOCOLS = ("closed-set", "cross-shape", "cross-material", "force-speed")


def _positive(min_value: int):
    def parse(text: str) -> int:
        try:
            v = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
        if v < min_value:
            raise argparse.ArgumentTypeError(f"must be >= {min_value}, got {v}")
        return v

    return parse


def _nonneg_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config")
    common.add_argument("-o", "--output", help="output directory (default: $TACTILE_FEWSHOT_OUT or ./runs)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--threads", type=_positive(1), help="cap on worker threads")
    common.add_argument("--data", help="dataset file (.tact or .csv); synthesized from the config when omitted")

    proto = argparse.ArgumentParser(add_help=False)
    proto.add_argument("--protocol", choices=ALL_PROTOCOLS)

    episode = argparse.ArgumentParser(add_help=False)
    episode.add_argument("--n", type=_positive(2), dest="n_way", help="classes per episode")
    episode.add_argument("--k", type=_positive(1), dest="k_shot", help="support examples per class")
    episode.add_argument("--q", type=_positive(1), dest="q_query", help="queries per class")
    episode.add_argument("--episodes", type=_positive(1))
    episode.add_argument("--alpha", type=float)
    episode.add_argument("--lam", type=_nonneg_float, help="entropy weight (>= 0)")
    episode.add_argument("--steps", type=_positive(0), help="adaptation steps")
    episode.add_argument("--lr", type=float)
    episode.add_argument("--all-protocols", action="store_true", help="run the four protocols in turn")

    p = argparse.ArgumentParser(prog="tactile-fewshot", description="Few-shot tactile recognition pipeline.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--trials-per-class", type=_positive(2))
    s.add_argument("--perturbed-per-cell", type=_positive(0), help="trials per force/speed perturbation cell")
    s.add_argument("--noise-sigma", type=_nonneg_float)
    s.add_argument("--format", choices=("tact", "csv"), default="tact")

    sub.add_parser("extract", parents=[common], help="write feature matrix and catalog")
    sub.add_parser("pretrain", parents=[common, proto], help="fit the offline stage per fold")
    sub.add_parser("eval", parents=[common, proto, episode], help="episodic AFOP evaluation")
    sub.add_parser("baseline", parents=[common, proto, episode], help="all-feature prototype baseline")
    sub.add_parser("diagnose", parents=[common, proto], help="embedding diagnostics")
    sub.add_parser("dscan-curve", parents=[common, proto], help="accuracy against D")
    r = sub.add_parser("report", parents=[common], help="adaptive-D summary per protocol family")
    r.add_argument("--protocols", nargs="+", choices=ALL_PROTOCOLS, default=list(ALL_PROTOCOLS))
    return p


# ---------------------------------------------------------------------------
# helpers


def _set_threads(n: int | None) -> None:
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ[var] = str(n)


def _resolve_config(args):
    from .config import load_config, with_overrides

    cfg = load_config(args.config)
    over = {"seed": args.seed, "output": args.output, "dataset_path": args.data}
    for name in ("protocol", "n_way", "k_shot", "q_query", "episodes", "alpha", "lam", "steps", "lr"):
        over[name] = getattr(args, name, None)
    cfg = with_overrides(cfg, **over)
    if args.command == "synth":
        extra = {"trials_per_class": args.trials_per_class, "perturbed_trials_per_cell": args.perturbed_per_cell, "noise_sigma": args.noise_sigma}
        cfg = with_overrides(cfg, synth={**cfg.synth, **{k: v for k, v in extra.items() if v is not None}})
    return cfg.validate()


def _slug(label: str) -> str:
    return label.replace("/", "_")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


class Run:
    """Shared state of one CLI invocation."""

    def __init__(self, command: str, cfg):
        from .features import DEFAULT_CATALOG

        self.command = command
        self.cfg = cfg
        self.out = cfg.output_dir()
        self.out.mkdir(parents=True, exist_ok=True)
        self.catalog = DEFAULT_CATALOG
        self.outputs: list[str] = []
        self._dataset = None

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.out / name

    def dataset(self):
        if self._dataset is None:
            from .dataset import load_dataset
            from .synth import synth_dataset

            if self.cfg.dataset_path:
                self._dataset = load_dataset(self.cfg.dataset_path)
            else:
                self._dataset = synth_dataset(self.cfg.synth_config())
        return self._dataset

    def dataset_for(self, protocol: str):
        """Force/speed uses every trial; the other protocols only nominal ones."""
        from .dataset import nominal_subset
        from .evaluation import attach_features, dataset_features

        ds = self.dataset()
        if protocol == "force-speed":
            return ds
        sub = nominal_subset(ds)
        if len(sub) == len(ds):
            return ds
        kept = {id(t) for t in sub.trials}
        keep = [i for i, t in enumerate(ds.trials) if id(t) in kept]
        attach_features(sub, dataset_features(ds)[keep])
        return sub

    def protocols(self, all_protocols: bool = False) -> tuple[str, ...]:
        return ALL_PROTOCOLS if all_protocols else (self.cfg.protocol,)

    def manifest(self) -> None:
        from . import __version__

        _write_json(
            self.out / f"manifest-{self.command}.json",
            {
                "command": self.command,
                "package_version": __version__,
                "seed": self.cfg.seed,
                "config_hash": self.cfg.config_hash(),
                "config": self.cfg.to_json() | {"output": None},
                "catalog_version": self.catalog.version,
                "outputs": sorted(set(self.outputs)),
            },
        )


def _say(msg: str) -> None:
    print(msg, flush=True)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(run: Run, args) -> None:
    from .dataset import write_dataset

    ds = run.dataset()
    name = "dataset.csv" if args.format == "csv" else "dataset.tact"
    write_dataset(ds, run.path(name))
    _say(f"synth: {len(ds)} trials, {ds.n_classes} classes -> {run.out / name}")


def cmd_extract(run: Run, args) -> None:
    from .evaluation import dataset_features

    ds = run.dataset()
    F = dataset_features(ds)
    header = ["trial_id", "shape_id", "material"] + [f"f{j:03d}" for j in range(F.shape[1])]
    rows = ([i, t.shape_id, t.material.label] + [repr(v) for v in row.tolist()] for i, (t, row) in enumerate(zip(ds.trials, F)))
    _write_csv(run.path("features.csv"), header, rows)
    _write_json(run.path("catalog.json"), run.catalog.to_json())
    _say(f"extract: {F.shape[0]} x {F.shape[1]} features, catalog {run.catalog.version}")


def _pretrain_folds(run: Run, protocol: str):
    from .dataset import make_split
    from .evaluation import dataset_features, pretrain_on_split, protocol_splits

    ds = run.dataset_for(protocol)
    F = dataset_features(ds)
    y = ds.labels()
    out = []
    for proto in protocol_splits(protocol):
        split = make_split(ds, proto, run.cfg.seed)
        model = pretrain_on_split(F, y, split, run.cfg.pretrain_config())
        out.append((ds, F, split, model))
    return out


def cmd_pretrain(run: Run, args) -> None:
    for _, _, split, model in _pretrain_folds(run, run.cfg.protocol):
        name = f"model_{_slug(split.label)}.json"
        model.save(run.path(name))
        curve = [(d, m, m - h, m + h) for d, m, h in model.dscan.curve_rows()]
        _write_csv(run.path(f"dscan_{_slug(split.label)}.csv"), ("D", "mean_acc", "ci_lo", "ci_hi"), curve)
        _say(f"pretrain {split.label}: D={model.selected_D}, {model.pretrain_wall_time_s:.1f} s -> {name}")


def _evaluate(run: Run, args, optimize: bool) -> None:
    from dataclasses import asdict

    from .evaluation import run_protocol

    method = "afop" if optimize else "direct-prot"
    spec = run.cfg.episode_spec()
    summaries, details = [], []
    for protocol in run.protocols(args.all_protocols):
        res = run_protocol(run.dataset_for(protocol), protocol, spec, config=run.cfg.eval_config(), optimize_features=optimize)
        summaries.append(res.summary)
        details.append({"protocol": protocol, "summary": res.summary.to_json(), "folds": [r.to_json() for r in res.reports]})
        s = res.summary
        _say(f"{method} {protocol} {spec.n_way}-way-{spec.k_shot}-shot: acc {s.accuracy_mean:.4f} +/- {s.ci_halfwidth:.4f}, D={s.selected_D}, adapt {s.adapt_ms_per_episode:.1f} ms")
    tag = "all" if args.all_protocols else run.cfg.protocol
    stem = f"{method}_{tag}_{spec.n_way}w{spec.k_shot}s"
    _write_json(run.path(f"report_{stem}.json"), {"method": method, "episode_spec": asdict(spec), "protocols": details})
    rows = []
    for s in summaries:
        r = s.table_row()
        rows.append([r[k] for k in TABLE_FIELDS])
    _write_csv(run.path(f"table1_{stem}.csv"), TABLE_FIELDS, rows)


def cmd_eval(run: Run, args) -> None:
    _evaluate(run, args, optimize=True)


def cmd_baseline(run: Run, args) -> None:
    _evaluate(run, args, optimize=False)


def cmd_diagnose(run: Run, args) -> None:
    from .evaluation import embedding_diagnostics

    rows = []
    for ds, F, split, model in _pretrain_folds(run, run.cfg.protocol):
        test = list(split.test_trial_ids)
        emb = model.embed(F[test])
        d = embedding_diagnostics(emb, ds.shape_ids()[test], ds.materials()[test])
        rows.append([split.label, model.selected_D, d.one_nn_shape_acc, d.mix_sil, d.dgi, d.k])
        _say(f"diagnose {split.label}: 1-NN {d.one_nn_shape_acc:.3f}, mix-sil {d.mix_sil:.3f}, DGI {d.dgi:.3f} (D={model.selected_D})")
    _write_csv(run.path(f"diagnostics_{run.cfg.protocol}.csv"), ("split", "D", "one_nn_shape_acc", "mix_sil", "dgi", "k"), rows)


def cmd_dscan_curve(run: Run, args) -> None:
    for _, _, split, model in _pretrain_folds(run, run.cfg.protocol):
        name = f"dscan_curve_{_slug(split.label)}.csv"
        _write_csv(run.path(name), ("D", "acc", "ci"), model.dscan.curve_rows())
        _say(f"dscan-curve {split.label}: selected D={model.selected_D} -> {name}")


def cmd_report(run: Run, args) -> None:
    from .evaluation import adaptive_d_report

    models = {p: [m for *_, m in _pretrain_folds(run, p)] for p in args.protocols}
    rows = adaptive_d_report(models, run.catalog)
    _write_csv(run.path("adaptive_d.csv"), ("protocol", "median_D", "pvdf_fraction", "folds"), [[r[k] for k in ("protocol", "median_D", "pvdf_fraction", "folds")] for r in rows])
    for r in rows:
        _say(f"report {r['protocol']}: median D={r['median_D']:g}, PVDF share {r['pvdf_fraction']:.3f} over {r['folds']} fold(s)")


COMMANDS = {
    "synth": cmd_synth,
    "extract": cmd_extract,
    "pretrain": cmd_pretrain,
    "eval": cmd_eval,
    "baseline": cmd_baseline,
    "diagnose": cmd_diagnose,
    "dscan-curve": cmd_dscan_curve,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _set_threads(args.threads)

    from .synth import ConfigError

    try:
        cfg = _resolve_config(args)
    except (ConfigError, ValueError, TypeError) as exc:
        parser.print_usage(sys.stderr)
        print(f"tactile-fewshot: error: {exc}", file=sys.stderr)
        return 2
    try:
        run = Run(args.command, cfg)
        COMMANDS[args.command](run, args)
        run.manifest()
    except Exception as exc:  # stage failure: report and exit 1
        err = {"stage": args.command, "error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(err), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
