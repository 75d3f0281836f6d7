"""Command-line entry point (``ethphish`` / ``python -m ethphish``).

Every command writes into ``--out`` and drops the resolved configuration
next to its artifacts as ``config.json``.
"""

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as rc
from . import features, fundflow, gbdt, htamg, ingest, pipeline, synthetic
from . import numeric as nm
from .contrastive import pretrain
from .errors import ConfigError, EthPhishError
from .phishtgl import PhishTGL

log = logging.getLogger("ethphish")

GRAPH_FILE = "graph.bin"
FEATURES_FILE = "features.csv"
ENCODER_FILE = "encoder.json"


def _out(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _load_graph(path, features_path=None):
    g, meta = htamg.Htamg.load(path)
    registry = ingest.AddressRegistry.from_json(meta["registry"]) if "registry" in meta else None
    if features_path:
        g.set_node_features(features.load_csv(features_path))
    return g, registry


def _load_encoder(path):
    return PhishTGL.from_checkpoint(json.loads(Path(path).read_text()))


def _dataset_from_log(cfg, log_path, node_labels=None, tx_labels=None):
    raw = ingest.parse_log(log_path)
    nl = synthetic.read_labels(node_labels) if node_labels else {}
    tl = synthetic.read_labels(tx_labels) if tx_labels else {}
    return pipeline.build_dataset(raw, nl, tl, cfg.features)


# -- commands -----------------------------------------------------------------

def cmd_gen_synthetic(args, cfg):
    out = _out(args)
    data = synthetic.generate(cfg.synthetic)
    data.write(out)
    return {"transactions": len(data.transactions), "collectors": len(data.collectors)}


def cmd_ingest(args, cfg):
    out = _out(args)
    raw = ingest.parse_log(args.input)
    txs, stats, registry = ingest.normalize(ingest.filter_and_categorize(raw))
    ingest.save_transactions(out / "transactions.csv", txs)
    stats.save(out / "norm_stats.json")
    _write_json(out / "registry.json", registry.to_json())
    return {"transactions": len(txs), "addresses": len(registry)}


def cmd_build_graph(args, cfg):
    out = _out(args)
    src = Path(args.input)
    txs = ingest.load_transactions(src / "transactions.csv")
    registry = ingest.AddressRegistry.from_json(json.loads((src / "registry.json").read_text()))
    g = htamg.build(txs, kinds=registry.kind_array(), num_nodes=len(registry))
    g.save(out / GRAPH_FILE, metadata={"registry": registry.to_json()})
    return {"nodes": g.num_nodes, "edges": g.num_edges}


def cmd_extract_features(args, cfg):
    out = _out(args)
    g, _ = _load_graph(args.graph)
    table, stats = features.extract(g, cfg.features)
    features.export_csv(out / FEATURES_FILE, table)
    _write_json(out / "feature_stats.json", dataclasses.asdict(stats))
    return {"nodes": int(table.shape[0]), "columns": int(table.shape[1])}


def cmd_pretrain(args, cfg):
    out = _out(args)
    g, _ = _load_graph(args.graph, args.features)
    model = PhishTGL(cfg.model, g.node_features.shape[1])
    res = pretrain(g, g.node_features, model, cfg.contrastive, log_path=out / "pretrain_log.jsonl")
    (out / ENCODER_FILE).write_text(nm.dumps_checkpoint(model.checkpoint()))
    last = res.history[-1] if res.history else {}
    return {"epochs": cfg.contrastive.epochs, "final_loss": last.get("loss"), "final_theta": last.get("theta", last.get("train_theta"))}


def cmd_embed(args, cfg):
    out = _out(args)
    g, registry = _load_graph(args.graph, args.features)
    model = _load_encoder(args.checkpoint)
    mem = model.memory(g)
    nodes = np.arange(g.num_nodes)
    Z = pipeline.node_representations(model, g, nodes, None, cfg.concat_features, mem)
    Ze = pipeline.edge_representations(model, g, None, mem)
    with open(out / "node_embeddings.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "node_id"] + [f"z{i}" for i in range(Z.shape[1])])
        for v in nodes:
            key = registry.address_of(v) if registry else str(v)
            w.writerow([key, int(v)] + [repr(float(x)) for x in Z[v]])
    with open(out / "edge_embeddings.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "edge_id"] + [f"z{i}" for i in range(Ze.shape[1])])
        for e in range(g.num_edges):
            w.writerow([g.tx_hashes[e], e] + [repr(float(x)) for x in Ze[e]])
    return {"nodes": int(Z.shape[0]), "edges": int(Ze.shape[0])}


def _read_embeddings(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        keys, rows = [], []
        for r in reader:
            keys.append(r[0].lower())
            rows.append([float(x) for x in r[2:]])
    return keys, np.asarray(rows, dtype=float)


def cmd_train_classifier(args, cfg):
    out = _out(args)
    keys, Z = _read_embeddings(args.embeddings)
    labels = synthetic.read_labels(args.labels)
    pos = {k: i for i, k in enumerate(keys)}
    rows = [(pos[k], y) for k, y in sorted(labels.items()) if k in pos]
    idx = np.asarray([r[0] for r in rows], dtype=np.int64)
    y = np.asarray([r[1] for r in rows], dtype=np.int64)
    gcfg = cfg.node_gbdt if args.task == "node" else cfg.edge_gbdt
    rng = np.random.default_rng(cfg.protocol.seed)
    clf = pipeline.fit_classifier(args.task, Z[idx], y, gcfg, cfg.protocol, rng, cfg.holdout)
    (out / f"gbdt_{args.task}.json").write_text(clf.to_json())
    return {"rows": int(len(y)), "positives": int(y.sum()), "trees": len(clf.trees)}


def _read_targets(path):
    targets = []
    with open(path, newline="") as fh:
        for r in csv.reader(fh):
            if not r or r[0].strip().lower() == "kind" or r[0].startswith("#"):
                continue
            targets.append((r[0].strip().lower(), r[1].strip()))
    return targets


def cmd_detect(args, cfg):
    out = _out(args)
    g, registry = _load_graph(args.graph, args.features)
    targets = _read_targets(args.targets)
    node_model = gbdt.GbdtModel.from_json(Path(args.node_model).read_text()) if args.node_model else None
    edge_model = gbdt.GbdtModel.from_json(Path(args.edge_model).read_text()) if args.edge_model else None
    preds = []
    if targets:
        ds = pipeline.Dataset(g, registry, None, np.zeros(0, np.int64), np.zeros(0, np.int64),
                              np.zeros(0, np.int64), np.zeros(0, np.int64), cfg.features)
        preds = pipeline.run_detection(ds, _load_encoder(args.checkpoint), node_model, edge_model,
                                       targets, cfg.concat_features)
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "id", "score", "label"])
        for p in preds:
            w.writerow([p["kind"], p["id"], repr(p["score"]), p["label"]])
    return {"predictions": len(preds)}


def cmd_eval(args, cfg):
    out = _out(args)
    ds = _dataset_from_log(cfg, args.input, args.node_labels, args.tx_labels)
    report, model = pipeline.run_experiment(ds, cfg.experiment(), log_path=out / "pretrain_log.jsonl",
                                            return_model=True)
    (out / "report.json").write_text(pipeline.report_json(report) + "\n")
    (out / ENCODER_FILE).write_text(nm.dumps_checkpoint(model.checkpoint()))
    return {t: r["mean"] for t, r in report["tasks"].items()}


def cmd_trace_funds(args, cfg):
    out = _out(args)
    raw = ingest.parse_log(args.input)
    labels = fundflow.EntityLabels.load(args.entities) if args.entities else fundflow.EntityLabels()
    roots = list(args.root or [])
    if args.roots_file:
        roots += [r for r in Path(args.roots_file).read_text().split() if r]
    if not roots:
        raise ConfigError("trace-funds needs --root or --roots-file")
    ledger = fundflow.Ledger(raw)
    traces = [fundflow.trace(ledger, r, labels, cfg.trace) for r in roots]
    for tr in traces:
        fundflow.conservation_check(tr)
    _write_json(out / "traces.json", [tr.to_dict() for tr in traces])
    tokens = sorted({k for tr in traces for k in tr.trees})
    reports = {k: fundflow.aggregate(traces, labels, k) for k in tokens}
    _write_json(out / "destinations.json", {k: r.to_dict() for k, r in reports.items()})
    (out / "destinations.txt").write_text(
        "\n\n".join(f"[{k}]\n{r.to_table()}" for k, r in reports.items()) + "\n")
    return {"roots": len(roots), "tokens": len(tokens)}


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic, "ingest": cmd_ingest, "build-graph": cmd_build_graph,
    "extract-features": cmd_extract_features, "pretrain": cmd_pretrain, "embed": cmd_embed,
    "train-classifier": cmd_train_classifier, "detect": cmd_detect, "eval": cmd_eval,
    "trace-funds": cmd_trace_funds,
}


def build_parser():
    p = argparse.ArgumentParser(prog="ethphish", description="Phishing detection on Ethereum transaction logs.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def command(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--config", help="JSON or YAML run configuration")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. model.dim=64 (repeatable)")
        sp.add_argument("--seed", type=int, help="global seed")
        return sp

    sp = command("gen-synthetic", "write a synthetic ledger with planted phishing collectors")
    sp.add_argument("--n-benign", type=int)
    sp.add_argument("--n-collectors", type=int)
    sp.add_argument("--victims", type=int, dest="victims_per_collector")
    sp.add_argument("--burst-window", type=float)
    sp.add_argument("--launder-depth", type=int)

    sp = command("ingest", "validate, filter and normalize a raw log (JSONL or CSV)")
    sp.add_argument("--input", required=True)

    sp = command("build-graph", "build the temporal multigraph from an ingest directory")
    sp.add_argument("--input", required=True, help="directory written by 'ingest'")

    sp = command("extract-features", "compute the standardized node feature table")
    sp.add_argument("--graph", required=True)

    for name, help_ in (("pretrain", "self-supervised encoder pretraining"),
                        ("embed", "node and edge representations from a trained encoder"),
                        ("detect", "score node/edge targets")):
        sp = command(name, help_)
        sp.add_argument("--graph", required=True)
        sp.add_argument("--features", required=True)
        if name != "pretrain":
            sp.add_argument("--checkpoint", required=True)
        if name == "detect":
            sp.add_argument("--targets", required=True, help="CSV rows 'node,<address>' or 'edge,<tx_hash>'")
            sp.add_argument("--node-model")
            sp.add_argument("--edge-model")

    sp = command("train-classifier", "fit the boosted classifier on stored representations")
    sp.add_argument("--embeddings", required=True)
    sp.add_argument("--labels", required=True)
    sp.add_argument("--task", choices=("node", "edge"), required=True)

    sp = command("eval", "end-to-end evaluation under a split protocol")
    sp.add_argument("--input", required=True, help="raw transaction log")
    sp.add_argument("--node-labels")
    sp.add_argument("--tx-labels")
    sp.add_argument("--protocol", choices=pipeline.MODES)
    sp.add_argument("--folds", type=int)

    sp = command("trace-funds", "trace tainted funds out of phishing addresses")
    sp.add_argument("--input", required=True, help="raw transaction log")
    sp.add_argument("--root", action="append")
    sp.add_argument("--roots-file")
    sp.add_argument("--entities", help="CSV address,category,name")
    return p


def resolve_config(args):
    overrides = list(args.set)
    if args.seed is not None:
        overrides.insert(0, f"seed={args.seed}")
    for flag, key in (("protocol", "protocol.mode"), ("folds", "protocol.folds"),
                      ("n_benign", "synthetic.n_benign"), ("n_collectors", "synthetic.n_collectors"),
                      ("victims_per_collector", "synthetic.victims_per_collector"),
                      ("burst_window", "synthetic.burst_window"),
                      ("launder_depth", "synthetic.launder_depth")):
        val = getattr(args, flag, None)
        if val is not None:
            overrides.append(f"{key}={val}")
    return rc.resolve(args.config, overrides)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        Path(args.out).mkdir(parents=True, exist_ok=True)
        cfg.dump(args.out)
        summary = COMMANDS[args.command](args, cfg)
    except ConfigError as e:
        print(json.dumps({"error": e.code, "message": str(e)}), file=sys.stderr)
        return 2
    except EthPhishError as e:
        print(json.dumps({"error": e.code, "message": str(e)}), file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as e:
        print(json.dumps({"error": "E_IO" if isinstance(e, OSError) else "E_INVALID",
                          "message": str(e)}), file=sys.stderr)
        return 1
    print(json.dumps({"command": args.command, **(summary or {})}, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
