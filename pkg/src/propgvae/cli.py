"""Command-line workbench: dataset generation, kernel jobs, training,
evaluation and debugging utilities.

Every command resolves its settings from defaults, an optional JSON config
file (sections: generator, encoder, training, kernel; unknown keys are
rejected) and explicit flags, in that order, and writes the resolved values
next to its outputs.  Exit codes: 0 success, 2 config error, 3 data error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from dataclasses import fields as dc_fields

import numpy as np

from . import decoder as dec
from . import encoder as enc
from . import evaluation as ev
from . import semantics as sm
from . import training as tr
from .errors import ConfigError, DataError, NumericError, PropGvaeError
from .formulas import (
    Formula,
    FormulaError,
    GeneratorConfig,
    ParseError,
    depth,
    generate_formula,
    node_count,
    parse,
    print_canonical,
    read_dataset,
    sample_stream,
    write_dataset,
)
from .graphs import to_ast_graph, to_dot
from .gvae import CVAE, VAE, GvaeModel
from .semantics import SemanticSignature

_CONFIG_SECTIONS = {
    "generator": GeneratorConfig,
    "encoder": enc.EncoderConfig,
    "training": tr.TrainConfig,
    "kernel": None,  # free-form: mode, samples, components, seed
}
_KERNEL_KEYS = {"mode", "samples", "components", "seed"}


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    if not os.path.exists(path):
        raise DataError(f"config file {path} does not exist")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    for section, payload in data.items():
        if section not in _CONFIG_SECTIONS:
            raise ConfigError(f"{path}: unknown config section {section!r}")
        if not isinstance(payload, dict):
            raise ConfigError(f"{path}: section {section!r} must be an object")
        schema = _CONFIG_SECTIONS[section]
        allowed = _KERNEL_KEYS if schema is None else {f.name for f in dc_fields(schema)}
        for key in payload:
            if key not in allowed:
                raise ConfigError(f"{path}: unknown key {section}.{key!r}")
    return data


def _resolve(config: dict, section: str, key: str, flag_value, default):
    if flag_value is not None:
        return flag_value
    if section in config and key in config[section]:
        return config[section][key]
    return default


def _write_resolved(out: str, payload: dict) -> None:
    """Resolved settings land next to the output (inside it, for dirs)."""
    if os.path.isdir(out):
        target = os.path.join(out, "run.json")
    else:
        target = out + ".run.json"
    with open(target, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _emit(args, human: str, payload: dict) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        print(human)


def _config_fingerprint(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


# ---------------------------------------------------------------------------
# gen-dataset
# ---------------------------------------------------------------------------


def cmd_gen_dataset(args) -> int:
    config = load_config(args.config)
    n = int(_resolve(config, "generator", "n", args.n, 3))
    p_leaf = float(_resolve(config, "generator", "p_leaf", args.p_leaf, 0.4))
    max_nodes = int(_resolve(config, "generator", "max_nodes", args.max_nodes, 30))
    seed = int(_resolve(config, "generator", "seed", args.seed, 0))
    count = int(args.count)
    cfg = GeneratorConfig(n=n, p_leaf=p_leaf, max_nodes=max_nodes, seed=seed)
    try:
        cfg.validate()
    except FormulaError as exc:
        raise ConfigError(str(exc)) from exc

    def make(i: int) -> Formula:
        return generate_formula(cfg, sample_stream(seed, i))

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            formulas = list(pool.map(make, range(count)))
    else:
        formulas = [make(i) for i in range(count)]
    meta = {"n": n, "p_leaf": p_leaf, "max_nodes": max_nodes, "seed": seed,
            "count": count}
    write_dataset(args.out, formulas, meta)
    _write_resolved(args.out, {"command": "gen-dataset", **meta})
    counts = [node_count(f) for f in formulas]
    depths = [depth(f) for f in formulas]
    stats = {
        "mean_node_count": float(np.mean(counts)),
        "mean_depth": float(np.mean(depths)),
        "count": count,
    }
    _emit(args,
          f"wrote {count} formulae to {args.out} "
          f"(mean nodes {stats['mean_node_count']:.4f}, "
          f"mean depth {stats['mean_depth']:.4f})",
          stats)
    return 0


# ---------------------------------------------------------------------------
# kernel gram | pca | embed
# ---------------------------------------------------------------------------


def _read_formulas(path: str, n: int | None = None):
    if not os.path.exists(path):
        raise DataError(f"dataset {path} does not exist")
    formulas, meta = read_dataset(path, n)
    if not formulas:
        raise DataError(f"dataset {path} holds no formulae")
    return formulas, meta


def _kernel_settings(args, config):
    mode = _resolve(config, "kernel", "mode", args.mode, sm.EXACT)
    samples = int(_resolve(config, "kernel", "samples", args.samples, 1000))
    seed = int(_resolve(config, "kernel", "seed", args.seed, 0))
    if mode not in (sm.EXACT, sm.MONTE_CARLO):
        raise ConfigError(f"unknown kernel mode {mode!r}")
    return mode, samples, seed


def cmd_kernel_gram(args) -> int:
    config = load_config(args.config)
    mode, samples, seed = _kernel_settings(args, config)
    formulas, meta = _read_formulas(args.dataset)
    gram = sm.gram_matrix(formulas, meta["n"], mode, m=samples, seed=seed,
                          threads=args.threads)
    sm.save_gram(gram, args.out)
    _write_resolved(args.out, {"command": "kernel gram", "dataset": args.dataset,
                               "mode": mode, "samples": samples, "seed": seed,
                               "n": meta["n"], "anchors": gram.size})
    _emit(args, f"gram matrix of {gram.size} anchors written to {args.out}",
          {"anchors": gram.size, "out": args.out})
    return 0


def cmd_kernel_pca(args) -> int:
    config = load_config(args.config)
    mode, samples, seed = _kernel_settings(args, config)
    components = int(_resolve(config, "kernel", "components", args.components, 100))
    formulas, meta = _read_formulas(args.dataset)
    gram = sm.gram_matrix(formulas, meta["n"], mode, m=samples, seed=seed,
                          threads=args.threads)
    model = sm.kernel_pca_fit(gram, min(components, gram.size))
    sm.save_pca(model, args.out)
    _write_resolved(args.out, {"command": "kernel pca", "dataset": args.dataset,
                               "mode": mode, "samples": samples, "seed": seed,
                               "components": model.k, "n": meta["n"]})
    evr = float(np.sum(model.explained_variance_ratio[: model.k]))
    _emit(args,
          f"kernel PCA ({model.k} components, {evr:.4f} of variance) written to {args.out}",
          {"components": model.k, "explained_variance": evr, "out": args.out})
    return 0


def _signature_from_valuations(path: str, model: sm.PcaModel) -> SemanticSignature:
    """CSV rows bit_1,...,bit_n,value with value in {+1,-1}; exact mode needs
    every assignment exactly once."""
    if model.mode != sm.EXACT:
        raise DataError("valuation files are supported for exact-mode models only")
    n = model.n
    values = np.zeros(2**n, dtype=np.int8)
    seen = np.zeros(2**n, dtype=bool)
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#") or line.lower().startswith("bit"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != n + 1:
                raise DataError(f"{path}:{lineno}: expected {n} bits plus a value")
            bits = [int(p) for p in parts[:n]]
            value = int(parts[n])
            if any(b not in (0, 1) for b in bits) or value not in (1, -1):
                raise DataError(f"{path}:{lineno}: bits must be 0/1 and value +1/-1")
            index = sum(b << j for j, b in enumerate(bits))
            if seen[index]:
                raise DataError(f"{path}:{lineno}: duplicate assignment")
            seen[index] = True
            values[index] = value
    if not seen.all():
        raise DataError(f"{path}: valuations must cover all {2**n} assignments")
    return SemanticSignature(values, n, sm.EXACT)


def cmd_kernel_embed(args) -> int:
    model = sm.load_pca(args.pca)
    rows: list[tuple[str, np.ndarray]] = []
    anchor_sigs = model.anchor_signatures()
    if args.formula:
        for text in args.formula:
            f = parse(text, model.n)
            rows.append((print_canonical(f), sm.embed(f, model, anchor_sigs)))
    if args.dataset:
        formulas, _ = _read_formulas(args.dataset, model.n)
        for f in formulas:
            rows.append((print_canonical(f), sm.embed(f, model, anchor_sigs)))
    if args.valuations:
        sig = _signature_from_valuations(args.valuations, model)
        rows.append(("<valuations>", sm.embed_signature(sig, model, anchor_sigs)))
    if not rows:
        raise ConfigError("kernel embed needs --formula, --dataset or --valuations")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("formula," + ",".join(f"y{i}" for i in range(model.k)) + "\n")
            for name, y in rows:
                fh.write(f'"{name}",' + ",".join(f"{v:.17g}" for v in y) + "\n")
        _write_resolved(args.out, {"command": "kernel embed", "pca": args.pca,
                                   "rows": len(rows)})
        _emit(args, f"wrote {len(rows)} context vectors to {args.out}",
              {"rows": len(rows), "out": args.out})
    else:
        for name, y in rows:
            if args.json:
                print(json.dumps({"formula": name, "y": [float(v) for v in y]}))
            else:
                print(name, " ".join(f"{v:.6g}" for v in y))
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

_PAPER_SCALE = {"hidden_size": 250, "latent_size": 56, "max_epochs": 900,
                "validate_every": 30, "patience": 3, "batch_size": 32}
_DESK_SCALE = {"hidden_size": 64, "latent_size": 16, "max_epochs": 200,
               "validate_every": 10, "patience": 3, "batch_size": 32}


def cmd_train(args) -> int:
    config = load_config(args.config)
    scale = _PAPER_SCALE if args.paper_scale else _DESK_SCALE
    formulas, meta = _read_formulas(args.dataset)
    n = meta["n"]
    mode = _resolve(config, "training", "mode", args.mode, VAE)
    if mode == CVAE and not args.pca:
        raise ConfigError("cvae training needs --pca pointing at a kernel-PCA artifact")
    pca = sm.load_pca(args.pca) if args.pca else None
    if pca is not None and pca.n != n:
        raise DataError(f"pca built for n={pca.n} but dataset has n={n}")

    cell = _resolve(config, "encoder", "cell", args.encoder, "gru")
    hidden = int(_resolve(config, "encoder", "hidden_size", args.hidden, scale["hidden_size"]))
    latent = int(_resolve(config, "encoder", "latent_size", args.latent, scale["latent_size"]))
    bidirectional = _resolve(config, "encoder", "bidirectional", args.bidirectional, True)
    base = enc.default_encoder_config(cell, n, hidden_size=hidden,
                                      latent_size=latent, bidirectional=bidirectional)
    layers = int(_resolve(config, "encoder", "layers", args.layers, base.layers))
    heads = _resolve(config, "encoder", "gat_heads", None, base.gat_heads)
    enc_cfg = enc.EncoderConfig(cell=cell, layers=layers, gat_heads=tuple(heads),
                                bidirectional=bidirectional, hidden_size=hidden,
                                latent_size=latent, n_vars=n)
    train_cfg = tr.TrainConfig(
        beta=float(_resolve(config, "training", "beta", args.beta, 1e-3)),
        lr=float(_resolve(config, "training", "lr", args.lr, 1e-3)),
        batch_size=int(_resolve(config, "training", "batch_size", None, scale["batch_size"])),
        validate_every=int(_resolve(config, "training", "validate_every", None,
                                    scale["validate_every"])),
        patience=int(_resolve(config, "training", "patience", None, scale["patience"])),
        max_epochs=int(_resolve(config, "training", "max_epochs", args.epochs,
                                scale["max_epochs"])),
        seed=int(_resolve(config, "training", "seed", args.seed, 0)),
        mode=mode,
    )
    result = tr.train(formulas, train_cfg, enc_cfg, pca=pca, max_v=args.max_v)
    os.makedirs(args.out, exist_ok=True)
    tr.write_run_dir(args.out, result, train_cfg, enc_cfg)
    _write_resolved(args.out, {"command": "train", "dataset": args.dataset,
                               "encoder": asdict(enc_cfg) | {"gat_heads": list(enc_cfg.gat_heads)},
                               "training": asdict(train_cfg),
                               "pca": args.pca})
    last = result.history[-1]
    _emit(args,
          f"trained {train_cfg.mode} ({cell}) for {result.stopped_epoch} epochs; "
          f"final nll {last.nll:.4f}, best val {result.best_val:.4f}; run dir {args.out}",
          {"epochs": result.stopped_epoch, "final_nll": last.nll,
           "best_val": result.best_val, "out": args.out})
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _load_model(path: str) -> GvaeModel:
    if not os.path.isdir(path):
        raise DataError(f"checkpoint directory {path} does not exist")
    return GvaeModel.load(path)


def _write_report(report: ev.EvalReport, out: str | None, args) -> None:
    if out:
        os.makedirs(out, exist_ok=True)
        report.write_json(os.path.join(out, f"{report.name}.json"))
        report.write_csv(os.path.join(out, f"{report.name}.csv"))
        _write_resolved(out, {"command": f"eval {report.name}", **report.protocol})
    _emit(args, report.to_json(),
          {"name": report.name, "metrics": report.metrics, "protocol": report.protocol})


def cmd_eval_accuracy(args) -> int:
    model = _load_model(args.model)
    formulas, _ = _read_formulas(args.dataset, model.config.encoder.n_vars)
    pca = sm.load_pca(args.pca) if args.pca else None
    report = ev.reconstruction_accuracy(
        model, formulas, z_samples=args.z_samples,
        decodes_per_z=args.decodes, seed=args.seed, pca=pca)
    _write_report(report, args.out, args)
    return 0


def cmd_eval_prior(args) -> int:
    model = _load_model(args.model)
    formulas, _ = _read_formulas(args.dataset, model.config.encoder.n_vars)
    report = ev.prior_generation_metrics(
        model, formulas, prior_samples=args.samples,
        decodes_per_z=args.decodes, seed=args.seed)
    _write_report(report, args.out, args)
    return 0


def cmd_eval_cvae(args) -> int:
    model = _load_model(args.model)
    pca = sm.load_pca(args.pca)
    formulas, _ = _read_formulas(args.dataset, model.config.encoder.n_vars)
    contexts = sm.embed_many(formulas, pca)
    report = ev.cvae_semantic_metrics(
        model, pca, contexts, z_per_y=args.z_per_y,
        decodes_per_z=args.decodes, seed=args.seed)
    _write_report(report, args.out, args)
    return 0


def cmd_eval_baseline(args) -> int:
    pca = sm.load_pca(args.pca)
    report = ev.baseline_pool_stats(args.pool_size, pca.n, pca, seed=args.seed)
    _write_report(report, args.out, args)
    return 0


def cmd_eval_slerp(args) -> int:
    model = _load_model(args.model)
    anchor = parse(args.formula, model.config.encoder.n_vars)
    result = ev.slerp_interpolate(model, anchor, num_points=args.points,
                                  decodes_per_point=args.decodes, seed=args.seed)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "slerp.csv"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(result.csv_rows()) + "\n")
        with open(os.path.join(args.out, "slerp.dot"), "w", encoding="utf-8") as fh:
            fh.write(result.to_dot(model.config.encoder.n_vars) + "\n")
        _write_resolved(args.out, {"command": "eval slerp", "formula": args.formula,
                                   "points": args.points, "seed": args.seed})
    payload = {
        "points": len(result.points),
        "mean_edit_count": result.mean_edit_count(),
        "formulas": [print_canonical(f) if f else None for _, f in result.points],
    }
    _emit(args,
          f"slerp over {len(result.points)} points; mean node edits "
          f"{result.mean_edit_count():.3f}",
          payload)
    return 0


# ---------------------------------------------------------------------------
# roundtrip
# ---------------------------------------------------------------------------


def cmd_roundtrip(args) -> int:
    model = _load_model(args.model)
    f = parse(args.formula, model.config.encoder.n_vars)
    if model.config.mode != VAE:
        raise ConfigError("roundtrip supports vae checkpoints")
    mu, _ = model.posterior_np(f)
    trace = model.decode_trace(mu, mode=dec.GREEDY)
    decoded = print_canonical(trace.formula) if trace.formula else None
    match = decoded == print_canonical(f)
    fingerprint = _config_fingerprint(model.config.to_dict())
    payload = {
        "input": print_canonical(f),
        "posterior_mean": [float(v) for v in mu],
        "decoded": decoded,
        "match": match,
        "config_fingerprint": fingerprint,
    }
    human = (
        f"input:   {payload['input']}\n"
        f"mu:      {' '.join(f'{v:.4f}' for v in mu)}\n"
        f"decoded: {decoded}\n"
        f"match:   {match}\n"
        f"config:  {fingerprint}"
    )
    _emit(args, human, payload)
    return 0


def cmd_show_graph(args) -> int:
    f = parse(args.formula, args.n)
    print(to_dot(to_ast_graph(f, args.n)))
    return 0


# ---------------------------------------------------------------------------
# Parser wiring
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="propgvae",
        description="Workbench for semantics-aware embeddings of propositional formulae",
    )
    parser.add_argument("--json", action="store_true", help="machine-readable stdout")
    parser.add_argument("--threads", type=int, default=1, help="worker cap for parallel sections")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-dataset", help="generate a random formula dataset")
    g.add_argument("--n", type=int)
    g.add_argument("--p-leaf", dest="p_leaf", type=float)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--max-nodes", dest="max_nodes", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_dataset)

    k = sub.add_parser("kernel", help="semantic kernel jobs")
    ksub = k.add_subparsers(dest="kernel_command", required=True)
    for name, fn in (("gram", cmd_kernel_gram), ("pca", cmd_kernel_pca)):
        kp = ksub.add_parser(name)
        kp.add_argument("--dataset", required=True)
        kp.add_argument("--mode", choices=[sm.EXACT, sm.MONTE_CARLO])
        kp.add_argument("--samples", type=int)
        kp.add_argument("--seed", type=int)
        if name == "pca":
            kp.add_argument("--components", type=int)
        kp.add_argument("--config")
        kp.add_argument("--out", required=True)
        kp.set_defaults(func=fn)
    ke = ksub.add_parser("embed")
    ke.add_argument("--pca", required=True)
    ke.add_argument("--formula", action="append")
    ke.add_argument("--dataset")
    ke.add_argument("--valuations", help="CSV of assignment bits and a +1/-1 value per row")
    ke.add_argument("--out")
    ke.set_defaults(func=cmd_kernel_embed)

    t = sub.add_parser("train", help="train a vae or cvae")
    t.add_argument("--dataset", required=True)
    t.add_argument("--encoder", choices=["gru", "gcn", "gat"])
    t.add_argument("--layers", type=int)
    t.add_argument("--bidirectional", action=argparse.BooleanOptionalAction)
    t.add_argument("--mode", choices=[VAE, CVAE])
    t.add_argument("--pca")
    t.add_argument("--hidden", type=int)
    t.add_argument("--latent", type=int)
    t.add_argument("--beta", type=float)
    t.add_argument("--lr", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--max-v", dest="max_v", type=int, default=30)
    t.add_argument("--seed", type=int)
    t.add_argument("--paper-scale", action="store_true")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluation protocols")
    esub = e.add_subparsers(dest="eval_command", required=True)

    ea = esub.add_parser("accuracy")
    ea.add_argument("--model", required=True)
    ea.add_argument("--dataset", required=True)
    ea.add_argument("--pca")
    ea.add_argument("--z-samples", dest="z_samples", type=int, default=10)
    ea.add_argument("--decodes", type=int, default=10)
    ea.add_argument("--seed", type=int, default=0)
    ea.add_argument("--out")
    ea.set_defaults(func=cmd_eval_accuracy)

    ep = esub.add_parser("prior")
    ep.add_argument("--model", required=True)
    ep.add_argument("--dataset", required=True, help="training set for novelty")
    ep.add_argument("--samples", type=int, default=1000)
    ep.add_argument("--decodes", type=int, default=10)
    ep.add_argument("--seed", type=int, default=0)
    ep.add_argument("--out")
    ep.set_defaults(func=cmd_eval_prior)

    ec = esub.add_parser("cvae-metrics")
    ec.add_argument("--model", required=True)
    ec.add_argument("--pca", required=True)
    ec.add_argument("--dataset", required=True, help="formulae providing the contexts")
    ec.add_argument("--z-per-y", dest="z_per_y", type=int, default=100)
    ec.add_argument("--decodes", type=int, default=10)
    ec.add_argument("--seed", type=int, default=0)
    ec.add_argument("--out")
    ec.set_defaults(func=cmd_eval_cvae)

    eb = esub.add_parser("baseline")
    eb.add_argument("--pca", required=True)
    eb.add_argument("--pool-size", dest="pool_size", type=int, default=5000)
    eb.add_argument("--seed", type=int, default=0)
    eb.add_argument("--out")
    eb.set_defaults(func=cmd_eval_baseline)

    es = esub.add_parser("slerp")
    es.add_argument("--model", required=True)
    es.add_argument("--formula", required=True)
    es.add_argument("--points", type=int, default=35)
    es.add_argument("--decodes", type=int, default=10)
    es.add_argument("--seed", type=int, default=0)
    es.add_argument("--out")
    es.set_defaults(func=cmd_eval_slerp)

    r = sub.add_parser("roundtrip", help="encode and greedily decode one formula")
    r.add_argument("--formula", required=True)
    r.add_argument("--model", required=True)
    r.set_defaults(func=cmd_roundtrip)

    d = sub.add_parser("show-graph", help="print the DOT graph of a formula")
    d.add_argument("--formula", required=True)
    d.add_argument("--n", type=int, default=5)
    d.set_defaults(func=cmd_show_graph)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ParseError, DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, FormulaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except PropGvaeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
