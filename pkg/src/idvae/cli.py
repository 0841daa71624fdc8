"""Command-line entry point.

Subcommands: gen-data, train, diagnose, oracle {ppca,gmm}, repro {pinwheel,appendix-a}.
Exit codes: 0 success, 1 runtime failure (JSON error on stderr), 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .data import (Dataset, gen_gmvae_synthetic, gen_pinwheel, gen_sequences, load_idx, provenance_header,
                   read_csv, write_csv)
from .diagnostics import DiagnosticsReport, diagnose
from .icnn import ConvexityConstraintError
from .inference import Adam, TrainConfig, TrainTrace, iw_log_likelihood_points, train
from .models import Encoder, Model, ModelSpec, build_encoder, build_model
from . import oracles

FORMAT_VERSION = 1
OUT_ENV = "IDVAE_OUT"


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    model: Model
    encoder: Encoder
    optimizer: Adam | None = None
    rng_state: dict | None = None
    trace: TrainTrace | None = None
    extra: dict | None = None  # e.g. standardization used for training


def _pack(arr) -> dict:
    arr = np.asarray(arr, dtype=float)
    return {"shape": list(arr.shape), "data": [float(v) for v in arr.reshape(-1)]}


def _unpack(name: str, d: dict) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in d["shape"])
        data = np.asarray(d["data"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{name}: malformed array record ({exc})") from None
    if data.size != int(np.prod(shape)):
        raise CheckpointError(f"{name}: {data.size} values do not fill shape {shape}")
    return data.reshape(shape)


def checkpoint_text(ck: Checkpoint) -> str:
    doc = {
        "format_version": FORMAT_VERSION,
        "artifact_version": __version__,
        "spec": ck.model.spec.to_dict(),
        "frozen": sorted(ck.model.frozen),
        "params": {k: _pack(v) for k, v in ck.model.params.items()},
        "encoder": ck.encoder.to_dict(),
        "encoder_params": {k: _pack(v) for k, v in ck.encoder.params.items()},
        "optimizer": None,
        "rng_state": ck.rng_state,
        "trace": ck.trace.to_dict() if ck.trace is not None else None,
        "extra": ck.extra,
    }
    if ck.optimizer is not None:
        st = ck.optimizer.state_dict()
        st["m"] = {k: _pack(v) for k, v in st["m"].items()}
        st["v"] = {k: _pack(v) for k, v in st["v"].items()}
        doc["optimizer"] = st
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def save_checkpoint(path, ck: Checkpoint) -> None:
    Path(path).write_text(checkpoint_text(ck))


def load_checkpoint(path) -> Checkpoint:
    """Parse and validate a checkpoint; any violated invariant names its field."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"not valid JSON: {exc}") from None
    if "format_version" not in doc:
        raise CheckpointError("format_version: missing")
    if doc["format_version"] != FORMAT_VERSION:
        raise CheckpointError(f"format_version: expected {FORMAT_VERSION}, found {doc['format_version']!r}")
    for key in ("spec", "params", "encoder", "encoder_params"):
        if key not in doc:
            raise CheckpointError(f"{key}: missing")
    try:
        spec = ModelSpec.from_dict(doc["spec"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"spec: {exc}") from None
    template = build_model(spec, 0)
    params = {}
    for name, ref in template.params.items():
        if name not in doc["params"]:
            raise CheckpointError(f"params.{name}: missing")
        arr = _unpack(f"params.{name}", doc["params"][name])
        if arr.shape != ref.shape:
            raise CheckpointError(f"params.{name}: shape {arr.shape}, expected {ref.shape}")
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"params.{name}: non-finite entries")
        params[name] = arr
    unknown = set(doc["params"]) - set(template.params)
    if unknown:
        raise CheckpointError(f"params.{sorted(unknown)[0]}: unexpected entry")
    model = Model(spec, params, template.decoder, set(doc.get("frozen", [])))
    if model.decoder is not None:
        model.sync()
        for k, g in enumerate(model.decoder.maps):
            for l in range(1, len(g.W)):
                if np.any(g.W[l] < 0):
                    raise CheckpointError(f"params.dec.g{k + 1}.W{l}: negative entries violate convexity")
            try:
                g.validate()
            except (ValueError, ConvexityConstraintError) as exc:
                raise CheckpointError(f"params.dec.g{k + 1}: {exc}") from None
    if "mix.logvar" in params and not np.all(np.isfinite(params["mix.logvar"])):
        raise CheckpointError("params.mix.logvar: non-finite entries")
    e = doc["encoder"]
    enc_params = {k: _unpack(f"encoder_params.{k}", v) for k, v in doc["encoder_params"].items()}
    encoder = Encoder(enc_params, int(e["in_dim"]), int(e["latent_dim"]), tuple(e["hidden"]), e.get("vocab"))
    sizes = [encoder.in_dim] + list(encoder.hidden) + [2 * encoder.latent_dim]
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        for name, shape in ((f"enc.W{i}", (a, b)), (f"enc.b{i}", (b,))):
            if name not in enc_params or enc_params[name].shape != shape:
                raise CheckpointError(f"encoder_params.{name}: missing or wrong shape")
    if encoder.latent_dim != spec.M:
        raise CheckpointError("encoder.latent_dim: does not match the model")
    opt = None
    if doc.get("optimizer") is not None:
        st = dict(doc["optimizer"])
        st["m"] = {k: _unpack(f"optimizer.m.{k}", v) for k, v in st["m"].items()}
        st["v"] = {k: _unpack(f"optimizer.v.{k}", v) for k, v in st["v"].items()}
        if st["t"] < 0:
            raise CheckpointError("optimizer.t: negative step count")
        opt = Adam.from_state(st)
    trace = TrainTrace.from_dict(doc["trace"]) if doc.get("trace") is not None else None
    return Checkpoint(model, encoder, opt, doc.get("rng_state"), trace, doc.get("extra"))


# ---------------------------------------------------------------------------
# CSV and SVG output

def write_rows(path, header: list, rows, provenance: dict) -> None:
    """CSV with a '# ' provenance line; floats written with full precision."""
    buf = io.StringIO()
    buf.write(provenance_header(dict(provenance, artifact_version=__version__)))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    Path(path).write_text(buf.getvalue())


def svg_plot(path, series: list[dict], title: str = "", provenance: dict | None = None, width: int = 480,
             height: int = 360) -> None:
    """Minimal SVG: each series is {"x", "y", "kind": "line"|"scatter", "color"}."""
    xs = np.concatenate([np.asarray(s["x"], float) for s in series])
    ys = np.concatenate([np.asarray(s["y"], float) for s in series])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0
    pad = 30

    def px(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def py(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    prov = json.dumps(dict(provenance or {}, artifact_version=__version__), sort_keys=True, default=str)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f"<!-- {prov.replace('--', '- -')} -->",
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{title}</text>']
    for s in series:
        color = s.get("color", "black")
        x, y = np.asarray(s["x"], float), np.asarray(s["y"], float)
        if s.get("kind", "line") == "line":
            pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, y))
            out.append(f'<polyline fill="none" stroke="{color}" points="{pts}"/>')
        else:
            out += [f'<circle cx="{px(a):.2f}" cy="{py(b):.2f}" r="1.5" fill="{color}"/>' for a, b in zip(x, y)]
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")


def report_rows(name: str, rep: DiagnosticsReport):
    return [(name, k, v if isinstance(v, str) else ("" if v is None else float(v))) for k, v in rep.rows()]


# ---------------------------------------------------------------------------
# experiments

def standardize_split(ds: Dataset, n_train: int):
    train_ds, test_ds = ds.split(n_train)
    tr, mean, std = train_ds.standardized()
    te = Dataset((test_ds.x - mean) / std, test_ds.labels, test_ds.latents,
                 dict(test_ds.provenance, standardized=True))
    return tr, te, mean, std


@dataclass
class PinwheelResult:
    reports: dict  # variant -> DiagnosticsReport (IW-LL on the original data scale)
    traces: dict
    trained: dict
    test: Dataset
    log_det_scale: float


def run_pinwheel(seed: int = 0, epochs: int = 200, n: int = 2500, n_train: int = 2000, iw_k: int = 200,
                 widths=(16,), batch: int = 128, lr: float = 1e-3) -> PinwheelResult:
    """Fit the baseline GMVAE and IDGMVAE (K = M = D = 2) to one pinwheel draw.

    Training uses standardized coordinates.  Test log-likelihoods are mapped
    back to the original scale by subtracting the log-determinant of the
    standardization.
    """
    ds = gen_pinwheel(n, seed=seed)
    tr, te, mean, std = standardize_split(ds, n_train)
    log_det = float(np.log(std).sum())
    reports, traces, trained = {}, {}, {}
    for variant in ("BaselineGMVAE", "IDGMVAE"):
        spec = ModelSpec(variant, K=2, D=2, M=2, widths=widths)
        model = build_model(spec, seed)
        enc = build_encoder(model, seed)
        tm, trace = train(model, enc, tr, TrainConfig(epochs=epochs, batch=batch, lr=lr, seed=seed))
        rep = diagnose(tm.model, tm.encoder, tr, seed=seed)
        rep.iw_ll = float(iw_log_likelihood_points(tm.model, tm.encoder, te, iw_k, seed).mean() - log_det)
        reports[variant], traces[variant], trained[variant] = rep, trace, tm
    return PinwheelResult(reports, traces, trained, te, log_det)


def _trace_rows(trace: TrainTrace):
    return [(e, a, b, c) for e, a, b, c in zip(trace.epoch, trace.elbo, trace.kl, trace.recon)]


def repro_pinwheel(out: Path, seed: int, epochs: int, config: dict) -> dict:
    res = run_pinwheel(seed=seed, epochs=epochs)
    prov = {"command": "repro pinwheel", "seed": seed, "epochs": epochs, "config": config}
    rows = []
    for name, rep in res.reports.items():
        rows += report_rows(name, rep)
        write_rows(out / f"pinwheel_trace_{name}.csv", ["epoch", "elbo", "kl", "recon"],
                   _trace_rows(res.traces[name]), prov)
    write_rows(out / "pinwheel_report.csv", ["model", "metric", "value"], rows, prov)
    from .models import latent_posterior
    tm = res.trained["IDGMVAE"]
    _, probs = latent_posterior(tm.model, tm.encoder, res.test.x, 64, seed)
    colors = np.where(probs[:, 0] > 0.5, "#1f77b4", "#d62728")
    series = [{"x": res.test.x[c == colors, 0], "y": res.test.x[c == colors, 1], "kind": "scatter", "color": c}
              for c in ("#1f77b4", "#d62728")]
    svg_plot(out / "pinwheel_idgmvae_clusters.svg", [s for s in series if len(s["x"])], "IDGMVAE clusters", prov)
    return {name: {"au": rep.au, "au_latent": rep.au_latent, "kl": rep.kl, "iw_ll": rep.iw_ll,
                   "verdict": rep.verdict} for name, rep in res.reports.items()}


def oracle_gmm(out: Path, scenarios, seed: int, n: int, n_nodes: int, config: dict) -> dict:
    summary = {}
    for s in scenarios:
        r = oracles.gmm_scenario(s, n=n, seed=seed, n_nodes=n_nodes)
        post = r.posterior
        prov = {"command": "oracle gmm", "scenario": s, "seed": seed, "n": n, "n_nodes": n_nodes,
                "config": config}
        order = np.argsort(post.nodes)
        rows = [(post.nodes[i], post.log_lik[i] - post.log_lik.max(), post.prior_density()[i], post.posterior[i])
                for i in order]
        write_rows(out / f"gmm_scenario{s}.csv", ["alpha", "log_lik_shifted", "prior_density", "posterior_density"],
                   rows, prov)
        summary[s] = {"name": r.name, "kl": r.kl, "mode": post.mode, "flatness": r.probe.flatness,
                      "verdict": r.verdict, "probe": r.probe.verdict,
                      "equivalence_holds": r.probe.equivalence_holds}
        write_rows(out / f"gmm_scenario{s}_report.csv", ["metric", "value"],
                   [(k, v if isinstance(v, (str, bool)) else float(v)) for k, v in sorted(summary[s].items())], prov)
    return summary


def oracle_ppca(out: Path, seed: int, sigmas, config: dict) -> dict:
    prov = {"command": "oracle ppca", "seed": seed, "sigmas": list(sigmas), "config": config}
    truth = oracles.ppca_one_dim_truth()
    data = truth.sample(500, seed)
    fit = oracles.ppca_padded_maximizer(truth)
    mean, cov = oracles.ppca_posterior(fit, data.x)
    truth2 = oracles.ppca_two_dim_truth()
    data2 = truth2.sample(500, seed + 1)
    mean2, cov2 = oracles.ppca_posterior(truth2, data2.x)
    rows = []
    for label, mu, c in (("one_dim_data", mean, cov), ("two_dim_data", mean2, cov2)):
        for d in range(2):
            rows.append((label, d + 1, float(np.abs(mu[:, d]).max()), float(mu[:, d].var(ddof=1)), float(c[d, d])))
    write_rows(out / "ppca_collapse.csv", ["dataset", "latent_dim", "max_abs_post_mean", "var_post_mean",
                                           "post_variance"], rows, prov)
    g = np.linspace(-3, 3, 61)
    ll = oracles.ppca_log_lik_grid(fit, data.x[0], g, g)
    write_rows(out / "ppca_one_dim_likelihood.csv", ["z1", "z2", "log_lik"],
               [(g[i], g[j], ll[i, j]) for i in range(len(g)) for j in range(len(g))], prov)
    sweep = oracles.ppca_noise_sweep(sigmas=sigmas, seed=seed)
    write_rows(out / "ppca_noise_sweep.csv", ["sigma", "mean_kl", "flatness"],
               [(r.sigma, r.kl, r.flatness) for r in sweep], prov)
    svg_plot(out / "ppca_noise_sweep.svg", [{"x": [r.sigma for r in sweep], "y": [r.kl for r in sweep]}],
             "mean KL(posterior || prior) against sigma", prov)
    return {"dim1_post_var": float(cov[0, 0]), "dim2_post_var": float(cov[1, 1]),
            "sweep_kl": [r.kl for r in sweep]}


# ---------------------------------------------------------------------------
# argument parsing

def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default=None, help=f"output path (default: ${OUT_ENV} or ./out)")
    common.add_argument("--config", default=None, help="JSON file whose keys override flags")

    p = argparse.ArgumentParser(prog="idvae", description="Identifiable VAEs and posterior-collapse diagnostics")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic or IDX dataset as CSV")
    g.add_argument("kind", choices=["pinwheel", "gmvae", "sequences", "idx"])
    g.add_argument("--n", type=int, default=None)
    g.add_argument("--arms", type=int, default=5)
    g.add_argument("--separation", type=float, default=10.0)
    g.add_argument("--length", type=int, default=10)
    g.add_argument("--vocab", type=int, default=16)
    g.add_argument("--path", default=None, help="IDX file for kind=idx")

    t = sub.add_parser("train", parents=[common], help="fit a model to a CSV dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--variant", default="IDVAE")
    t.add_argument("--K", type=int, default=2)
    t.add_argument("--M", type=int, default=None)
    t.add_argument("--H", type=int, default=None)
    t.add_argument("--family", default="gaussian", choices=["gaussian", "bernoulli", "categorical"])
    t.add_argument("--widths", default="16")
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--batch", type=int, default=128)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--beta", type=float, default=1.0)
    t.add_argument("--standardize", action="store_true")

    d = sub.add_parser("diagnose", parents=[common], help="collapse metrics of a checkpoint on a dataset")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--iw-k", type=int, default=0)

    o = sub.add_parser("oracle", parents=[common], help="exact-inference reference experiments")
    o.add_argument("which", choices=["ppca", "gmm"])
    o.add_argument("--scenario", default="all", choices=["1", "2", "3", "all"])
    o.add_argument("--n", type=int, default=100_000)
    o.add_argument("--nodes", type=int, default=2048)
    o.add_argument("--sigmas", default="0.2,0.5,1.0,1.5")

    r = sub.add_parser("repro", parents=[common], help="end-to-end reproduction runs")
    r.add_argument("which", choices=["pinwheel", "appendix-a"])
    r.add_argument("--epochs", type=int, default=200)
    return p


def _out_dir(args, default_name: str | None = None) -> Path:
    base = args.out or os.environ.get(OUT_ENV) or "out"
    path = Path(base)
    if default_name is None:
        path.mkdir(parents=True, exist_ok=True)
        return path
    if path.suffix:
        path.parent.mkdir(parents=True, exist_ok=True)
        return path
    path.mkdir(parents=True, exist_ok=True)
    return path / default_name


def _apply_config(args, parser) -> dict:
    if not args.config:
        return {}
    cfg = json.loads(Path(args.config).read_text())
    if not isinstance(cfg, dict):
        parser.error("--config must hold a JSON object")
    for k, v in cfg.items():
        key = k.replace("-", "_")
        if not hasattr(args, key):
            parser.error(f"unknown config key {k!r}")
        setattr(args, key, v)
    return cfg


def _flags(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("config",)}


def _cmd_gen_data(args):
    defaults = {"pinwheel": 2500, "gmvae": 5000, "sequences": 1000}
    n = args.n or defaults.get(args.kind)
    if args.kind == "pinwheel":
        ds = gen_pinwheel(n, arms=args.arms, seed=args.seed)
    elif args.kind == "gmvae":
        ds = gen_gmvae_synthetic(n, separation=args.separation, seed=args.seed)
    elif args.kind == "sequences":
        ds = gen_sequences(n, length=args.length, vocab=args.vocab, seed=args.seed)
    else:
        if not args.path:
            raise ValueError("kind=idx needs --path")
        ds = load_idx(args.path)
    path = _out_dir(args, f"{args.kind}.csv")
    write_csv(ds, path)
    print(f"wrote {len(ds)} rows to {path}")


def _cmd_train(args):
    ds = read_csv(args.data)
    extra = None
    if args.standardize:
        ds, mean, std = ds.standardized()
        extra = {"standardize_mean": mean.tolist(), "standardize_std": std.tolist()}
    widths = tuple(int(w) for w in str(args.widths).split(",") if w)
    D = ds.vocab if ds.vocab else ds.x.shape[1]
    spec = ModelSpec(args.variant, K=args.K, D=D, M=args.M, H=args.H, family=args.family, widths=widths)
    model = build_model(spec, args.seed)
    enc = build_encoder(model, args.seed, seq_len=ds.x.shape[1] if ds.vocab else None)
    cfg = TrainConfig(epochs=args.epochs, batch=args.batch, lr=args.lr, beta_weight=args.beta, seed=args.seed)
    tm, trace = train(model, enc, ds, cfg)
    path = _out_dir(args, "checkpoint.json")
    save_checkpoint(path, Checkpoint(tm.model, tm.encoder, tm.optimizer, tm.rng_state, trace, extra))
    write_rows(path.with_suffix(".trace.csv"), ["epoch", "elbo", "kl", "recon"], _trace_rows(trace),
               {"command": "train", "flags": _flags(args)})
    print(f"final ELBO {trace.elbo[-1] if trace.elbo else float('nan'):.6g}; checkpoint {path}")


def _cmd_diagnose(args):
    ck = load_checkpoint(args.checkpoint)
    ds = read_csv(args.data)
    if ck.extra and "standardize_mean" in ck.extra:
        ds = Dataset((ds.x - np.asarray(ck.extra["standardize_mean"])) / np.asarray(ck.extra["standardize_std"]),
                     ds.labels, ds.latents, dict(ds.provenance, standardized=True), ds.vocab)
    rep = diagnose(ck.model, ck.encoder, ds, seed=args.seed, iw_k=args.iw_k or None)
    path = _out_dir(args, "diagnostics.csv")
    write_rows(path, ["model", "metric", "value"], report_rows(ck.model.spec.variant, rep),
               {"command": "diagnose", "flags": _flags(args)})
    print(rep.summary())


def _cmd_oracle(args, cfg):
    out = _out_dir(args)
    if args.which == "gmm":
        scen = (1, 2, 3) if args.scenario == "all" else (int(args.scenario),)
        summary = oracle_gmm(out, scen, args.seed, args.n, args.nodes, cfg)
        for s, v in summary.items():
            print(f"scenario {s} ({v['name']}): KL {v['kl']:.3e}  flatness {v['flatness']:.3e}  "
                  f"verdict {v['verdict']}  probe: {v['probe']}")
    else:
        sigmas = [float(s) for s in str(args.sigmas).split(",")]
        summary = oracle_ppca(out, args.seed, sigmas, cfg)
        print(json.dumps(summary, indent=1))


def _cmd_repro(args, cfg):
    out = _out_dir(args)
    if args.which == "pinwheel":
        summary = repro_pinwheel(out, args.seed, args.epochs, cfg)
    else:
        summary = {"ppca": oracle_ppca(out, args.seed, oracles.SWEEP_SIGMAS, cfg),
                   "gmm": oracle_gmm(out, (1, 2, 3), args.seed, 100_000, 2048, cfg)}
    print(json.dumps(summary, indent=1, sort_keys=True, default=str))


def run(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _apply_config(args, parser)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "gen-data":
            _cmd_gen_data(args)
        elif args.command == "train":
            _cmd_train(args)
        elif args.command == "diagnose":
            _cmd_diagnose(args)
        elif args.command == "oracle":
            _cmd_oracle(args, cfg)
        else:
            _cmd_repro(args, cfg)
    except Exception as exc:  # runtime failures become exit code 1
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}),
              file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())
