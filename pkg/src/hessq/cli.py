"""Command line interface.

Subcommands cover the full workflow: train a float baseline, probe
per-layer Hessian eigenvalues, turn sensitivities into a bit allocation,
quantization-aware fine-tune (mixed precision or uniform direct
quantization), evaluate, slice loss landscapes, compare attention
distributions, and collect a report. ``pipeline`` runs all of it.

Every stage re-derives its inputs from artifacts on disk plus the config,
is seeded, and never records wall-clock state, so rerunning a stage (or
the whole pipeline) with the same config produces byte-identical output.

Exit codes: 0 success, 2 config error, 3 numeric failure, 4 I/O error.
Failures print a one-line JSON object to stderr.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from . import tensor as T
from .allocation import (
    AllocationError,
    BitAllocation,
    EmbeddingBits,
    allocate_bits,
    reverse_allocation,
)
from .data import DataError, load_csv_dataset, synth_dataset
from .groups import GroupPolicy
from .hessian import (
    PowerIterationError,
    eig_distribution,
    landscape_grid,
    sensitivity,
    top2_eigen,
)
from .model import ConfigError, ModelConfig, build_model
from .quantizer import QuantError
from .reporting import attention_kl, write_csv, write_json, write_jsonl
from .training import (
    QuantizationContext,
    QuantSettings,
    TrainConfig,
    TrainingDiverged,
    activation_only_context,
    directq,
    evaluate,
    qat_finetune,
    train_baseline,
)

DEFAULT_CONFIG: dict = {
    "compute": "f32",
    "out": "runs/default",
    "model": {
        "vocab": 64,
        "max_len": 16,
        "d_model": 32,
        "n_heads": 4,
        "n_layers": 2,
        "ffn_dim": 64,
        "n_classes": 2,
        "seed": 0,
        "attn_scale": "model_dim",
        "activation": "gelu",
    },
    "task": {
        "name": "contains_pattern",
        "train_size": 768,
        "eval_size": 256,
        "seed": 1,
        "csv_train": None,
        "csv_eval": None,
    },
    "train": {"epochs": 12, "batch_size": 32, "lr": 0.01, "momentum": 0.9, "seed": 2},
    "qat": {"epochs": 4, "batch_size": 32, "lr": 0.005, "momentum": 0.9, "seed": 2},
    "probe": {
        "shard_fraction": 0.10,
        "runs": 10,
        "tol": 1e-3,
        "max_iters": 100,
        "seed": 3,
    },
    "allocation": {
        "menu": [2, 3],
        "high_count": None,
        "band_sizes": None,
        "e_bits": {"word": 8, "position": 8},
        "a_bits": 8,
    },
    "groups": {"mode": "per_head", "bucket_size": None, "count": None},
    "quant": {"range_policy": "minmax", "percentile": None},
    "directq": {"bits": 2, "ptq": False},
    "landscape": {"layer": None, "extent": 1.0, "resolution": 11, "batch": 128},
    "kl": {"fraction": 0.10, "seed": 5},
}


def _deep_merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and isinstance(val, dict):
            out[key] = _deep_merge(base[key], val, where)
        else:
            out[key] = val
    return out


def load_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if args.config:
        p = Path(args.config)
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {p} is not valid JSON: {e}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
        cfg = _deep_merge(cfg, raw)
    if args.seed is not None:
        # one master seed rebases every stage deterministically
        cfg["model"]["seed"] = args.seed
        cfg["task"]["seed"] = args.seed + 1
        cfg["train"]["seed"] = args.seed + 2
        cfg["qat"]["seed"] = args.seed + 2
        cfg["probe"]["seed"] = args.seed + 3
        cfg["kl"]["seed"] = args.seed + 4
    if args.out:
        cfg["out"] = args.out
    if getattr(args, "bits", None):
        cfg["allocation"]["menu"] = args.bits
    if getattr(args, "groups", None):
        g = args.groups
        if g in ("layerwise", "per-head", "per_head"):
            cfg["groups"] = {"mode": g.replace("-", "_"), "bucket_size": None, "count": None}
        else:
            cfg["groups"] = {"mode": "count", "bucket_size": None, "count": int(g)}
    if getattr(args, "compute", None):
        cfg["compute"] = args.compute
    if getattr(args, "ptq", False):
        cfg["directq"]["ptq"] = True
    return cfg


def config_hash(cfg: dict) -> str:
    """Hash of the resolved config, excluding the artifact path itself."""
    to_hash = {k: v for k, v in cfg.items() if k != "out"}
    blob = json.dumps(to_hash, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _dtype(cfg: dict):
    name = cfg.get("compute", "f32")
    if name not in ("f32", "f64"):
        raise ConfigError(f"compute must be f32|f64, got {name!r}")
    return np.float32 if name == "f32" else np.float64


def _model_config(cfg: dict) -> ModelConfig:
    try:
        return ModelConfig(**cfg["model"])
    except TypeError as e:
        raise ConfigError(f"bad model config: {e}") from None


def _train_config(cfg: dict, section: str) -> TrainConfig:
    try:
        return TrainConfig(**cfg[section])
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad {section} config: {e}") from None


def _datasets(cfg: dict, mcfg: ModelConfig):
    t = cfg["task"]
    if t["csv_train"]:
        train = load_csv_dataset(t["csv_train"], mcfg, t["name"])
        if not t["csv_eval"]:
            raise ConfigError("csv_train given without csv_eval")
        evalds = load_csv_dataset(t["csv_eval"], mcfg, t["name"])
        return train, evalds
    train = synth_dataset(t["name"], t["train_size"], mcfg, t["seed"])
    evalds = synth_dataset(t["name"], t["eval_size"], mcfg, t["seed"] + 1)
    return train, evalds


def _group_policy(cfg: dict) -> GroupPolicy:
    g = cfg["groups"]
    try:
        return GroupPolicy(g["mode"], g.get("bucket_size"), g.get("count"))
    except (QuantError, KeyError) as e:
        raise ConfigError(f"bad groups config: {e}") from None


def _stamp(out: Path, cfg: dict, command: str) -> None:
    write_json(
        out / "meta.json",
        {"config_hash": config_hash(cfg), "seed": cfg["model"]["seed"], "command": command},
    )


def _threads() -> int:
    raw = os.environ.get("QB_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"QB_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def _load_baseline(cfg: dict, dtype=None):
    mcfg = _model_config(cfg)
    model = build_model(mcfg, dtype or _dtype(cfg))
    path = Path(cfg["out"]) / "baseline" / "checkpoint.qbtc"
    if not path.exists():
        raise ConfigError(f"baseline checkpoint {path} not found; run `train` first")
    model.load_arrays(checkpoint.load_tensors(path))
    return model


def _allocation_from_json(obj: dict) -> BitAllocation:
    try:
        e = obj["e_bits"]
        return BitAllocation(
            {k: int(v) for k, v in obj["layer_bits"].items()},
            EmbeddingBits(int(e["word"]), int(e["position"])),
            int(obj["a_bits"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"malformed allocation file: {e}") from None


def _load_allocation(cfg: dict, reverse: bool) -> BitAllocation:
    name = "allocation_reversed.json" if reverse else "allocation.json"
    path = Path(cfg["out"]) / name
    if not path.exists():
        raise ConfigError(f"{path} not found; run `allocate` first")
    return _allocation_from_json(json.loads(path.read_text()))


# -- subcommands ----------------------------------------------------------------


def cmd_train(cfg: dict, args) -> None:
    out = Path(cfg["out"]) / "baseline"
    mcfg = _model_config(cfg)
    model = build_model(mcfg, _dtype(cfg))
    train_ds, eval_ds = _datasets(cfg, mcfg)
    metrics = train_baseline(model, train_ds, eval_ds, _train_config(cfg, "train"))
    checkpoint.save_tensors(out / "checkpoint.qbtc", model.param_arrays())
    write_jsonl(out / "metrics.jsonl", metrics)
    _stamp(out, cfg, "train")
    last = metrics[-1] if metrics else {}
    print(json.dumps({"command": "train", "eval_acc": last.get("eval_acc")}, sort_keys=True))


def cmd_probe(cfg: dict, args) -> None:
    out = Path(cfg["out"]) / "probe"
    mcfg = _model_config(cfg)
    model = _load_baseline(cfg, dtype=np.float64)  # probe in f64
    train_ds, _ = _datasets(cfg, mcfg)
    graph = model.as_graph()
    p = cfg["probe"]
    eig_rows = []
    sens_rows = []
    omegas = {}
    for layer in model.encoder_layer_names():
        lams = eig_distribution(
            graph,
            train_ds,
            layer,
            shard_fraction=p["shard_fraction"],
            runs=p["runs"],
            seed=p["seed"],
            max_iters=p["max_iters"],
            tol=p["tol"],
            threads=_threads(),
        )
        for r, lam in enumerate(lams):
            eig_rows.append([train_ds.task, layer, r, lam])
        arr = np.asarray(lams)
        omega = sensitivity(lams)
        omegas[layer] = omega
        sens_rows.append([train_ds.task, layer, float(arr.mean()), float(arr.std()), omega])
    write_csv(out / "eigenvalues.csv", ["task", "layer", "run", "eigenvalue"], eig_rows)
    write_csv(out / "sensitivity.csv", ["task", "layer", "mean_eig", "std_eig", "omega"], sens_rows)
    _stamp(out, cfg, "probe")
    print(json.dumps({"command": "probe", "omegas": omegas}, sort_keys=True))


def _read_omegas(cfg: dict) -> dict[str, float]:
    path = Path(cfg["out"]) / "probe" / "sensitivity.csv"
    if not path.exists():
        raise ConfigError(f"{path} not found; run `probe` first")
    import csv as _csv

    omegas: dict[str, float] = {}
    with path.open(newline="") as fh:
        for row in _csv.DictReader(fh):
            omegas[row["layer"]] = float(row["omega"])
    if not omegas:
        raise ConfigError(f"{path} has no rows")
    return omegas


def cmd_allocate(cfg: dict, args) -> None:
    out = Path(cfg["out"])
    omegas = _read_omegas(cfg)
    a = cfg["allocation"]
    high = a["high_count"]
    if high is None and a["band_sizes"] is None and len(set(a["menu"])) == 2:
        high = (len(omegas) + 1) // 2
    try:
        alloc = allocate_bits(
            omegas,
            list(a["menu"]),
            high_count=high,
            band_sizes=a["band_sizes"],
            e_bits=EmbeddingBits(a["e_bits"]["word"], a["e_bits"]["position"]),
            a_bits=a["a_bits"],
        )
    except AllocationError as e:
        raise ConfigError(str(e)) from None
    payload = {
        "layer_bits": alloc.layer_bits,
        "e_bits": {"word": alloc.e_bits.word, "position": alloc.e_bits.position},
        "a_bits": alloc.a_bits,
        "omegas": omegas,
        "config_hash": config_hash(cfg),
    }
    write_json(out / "allocation.json", payload)
    if args.reverse:
        rev = reverse_allocation(alloc, omegas)
        write_json(
            out / "allocation_reversed.json",
            {**payload, "layer_bits": rev.layer_bits},
        )
    print(json.dumps({"command": "allocate", "layer_bits": alloc.layer_bits}, sort_keys=True))


def _save_quant_run(out: Path, model, result, cfg: dict, command: str) -> None:
    codes = {name: gq.codes for name, gq in result.weights.items()}
    meta = {
        "config_hash": config_hash(cfg),
        "a_bits": result.qctx.alloc.a_bits,
        "observers": result.qctx.observer_state(),
        "weights": {
            name: {
                "bits": gq.bits,
                "mode": gq.spec.mode,
                "starts": list(gq.spec.starts),
                "ranges": [[r.q0, r.q_max] for r in gq.ranges],
            }
            for name, gq in sorted(result.weights.items())
        },
    }
    checkpoint.save_quantized(out / "checkpoint.qbtc", codes, meta)
    checkpoint.save_tensors(out / "master.qbtc", model.param_arrays())
    write_jsonl(out / "metrics.jsonl", result.metrics)
    write_json(
        out / "summary.json",
        {
            "config_hash": config_hash(cfg),
            "eval_loss": result.eval_loss,
            "eval_acc": result.eval_acc,
            "size_mb": result.size_mb,
            "metadata_mb": result.metadata_mb,
        },
    )
    _stamp(out, cfg, command)


def cmd_qat(cfg: dict, args) -> None:
    sub = "qat_reversed" if args.reverse else "qat"
    out = Path(cfg["out"]) / sub
    mcfg = _model_config(cfg)
    model = _load_baseline(cfg)
    train_ds, eval_ds = _datasets(cfg, mcfg)
    alloc = _load_allocation(cfg, args.reverse)
    settings = QuantSettings(
        alloc,
        _group_policy(cfg),
        range_policy=cfg["quant"]["range_policy"],
        percentile=cfg["quant"]["percentile"],
        ptq=bool(getattr(args, "ptq", False)),
    )
    result = qat_finetune(model, train_ds, eval_ds, _train_config(cfg, "qat"), settings)
    _save_quant_run(out, model, result, cfg, sub)
    print(
        json.dumps(
            {"command": sub, "eval_acc": result.eval_acc, "size_mb": result.size_mb},
            sort_keys=True,
        )
    )


def cmd_directq(cfg: dict, args) -> None:
    out = Path(cfg["out"]) / "directq"
    mcfg = _model_config(cfg)
    model = _load_baseline(cfg)
    train_ds, eval_ds = _datasets(cfg, mcfg)
    alloc = _load_allocation(cfg, reverse=False)
    d = cfg["directq"]
    result = directq(
        model,
        train_ds,
        eval_ds,
        _train_config(cfg, "qat"),
        bits=int(d["bits"]),
        allocation=alloc,
        ptq=bool(d["ptq"]),
    )
    _save_quant_run(out, model, result, cfg, "directq")
    print(
        json.dumps(
            {"command": "directq", "eval_acc": result.eval_acc, "size_mb": result.size_mb},
            sort_keys=True,
        )
    )


def _baked_quantized_model(cfg: dict, sub: str):
    """Rebuild a quantized run for inference: dequantized weights baked into
    the masters plus frozen activation observers."""
    from .groups import GroupSpec, GroupQuantizedTensor, groupwise_dequantize
    from .quantizer import QuantRange

    out = Path(cfg["out"]) / sub
    path = out / "checkpoint.qbtc"
    if not path.exists():
        raise ConfigError(f"{path} not found; run `{sub.split('_')[0]}` first")
    codes, meta = checkpoint.load_quantized(path)
    model = _load_baseline(cfg)
    model.load_arrays(checkpoint.load_tensors(out / "master.qbtc"))
    arrays = model.param_arrays()
    for name, wmeta in meta["weights"].items():
        bits = int(wmeta["bits"])
        starts = tuple(int(s) for s in wmeta["starts"])
        rows = starts[-1]
        gspec = GroupSpec(wmeta["mode"], rows, 1, None, starts)
        ranges = [QuantRange.from_bounds(lo, hi, bits) for lo, hi in wmeta["ranges"]]
        gq = GroupQuantizedTensor(codes[name], ranges, gspec, bits)
        arrays[name] = groupwise_dequantize(gq, dtype=arrays[name].dtype)
    model.load_arrays(arrays)
    qctx = activation_only_context(model, int(meta["a_bits"]), meta["observers"])
    return model, qctx


def cmd_evaluate(cfg: dict, args) -> None:
    out = Path(cfg["out"]) / "evaluate"
    mcfg = _model_config(cfg)
    _, eval_ds = _datasets(cfg, mcfg)
    rows = []
    base = _load_baseline(cfg)
    loss, acc = evaluate(base, eval_ds)
    rows.append(["baseline", "eval", loss, acc])
    for sub in ("qat", "qat_reversed", "directq"):
        if (Path(cfg["out"]) / sub / "checkpoint.qbtc").exists():
            model, qctx = _baked_quantized_model(cfg, sub)
            loss, acc = evaluate(model, eval_ds, qctx)
            rows.append([sub, "eval", loss, acc])
    write_csv(out / "accuracy.csv", ["run", "split", "loss", "accuracy"], rows)
    _stamp(out, cfg, "evaluate")
    print(json.dumps({"command": "evaluate", "rows": rows}, sort_keys=True))


def cmd_landscape(cfg: dict, args) -> None:
    out = Path(cfg["out"]) / "landscape"
    mcfg = _model_config(cfg)
    model = _load_baseline(cfg, dtype=np.float64)
    train_ds, _ = _datasets(cfg, mcfg)
    graph = model.as_graph()
    ls = cfg["landscape"]
    layer = ls["layer"] or (
        model.encoder_layer_names()[0] if mcfg.n_layers else "embedding.word"
    )
    if layer not in model.groups:
        raise ConfigError(f"unknown landscape layer {layer!r}")
    p = cfg["probe"]
    rng = np.random.default_rng(p["seed"])
    take = min(len(train_ds), int(ls["batch"]))
    idx = rng.choice(len(train_ds), size=take, replace=False)
    batch = (train_ds.tokens[idx], train_ds.labels[idx])
    e1, e2 = top2_eigen(
        graph, batch, layer, max_iters=p["max_iters"], tol=p["tol"], seed=p["seed"]
    )
    grid = landscape_grid(
        graph, batch, layer, e1.eigenvector, e2.eigenvector,
        extent=float(ls["extent"]), resolution=int(ls["resolution"]),
    )
    rows = []
    for i, a in enumerate(grid.offsets):
        for j, b in enumerate(grid.offsets):
            val = grid.losses[i, j]
            rows.append([a, b, None if np.isnan(val) else val])
    safe = layer.replace(".", "_")
    write_csv(out / f"{safe}.csv", ["a", "b", "loss"], rows)
    write_json(
        out / f"{safe}.json",
        {
            "config_hash": config_hash(cfg),
            "layer": layer,
            "extent": grid.extent,
            "resolution": int(ls["resolution"]),
            "center_loss": grid.center_loss,
            "eigenvalue_1": e1.eigenvalue,
            "eigenvalue_2": e2.eigenvalue,
            "orthogonality": float(abs(e1.eigenvector @ e2.eigenvector)),
        },
    )
    _stamp(out, cfg, "landscape")
    print(json.dumps({"command": "landscape", "layer": layer}, sort_keys=True))


def cmd_kl(cfg: dict, args) -> None:
    out = Path(cfg["out"]) / "kl"
    mcfg = _model_config(cfg)
    _, eval_ds = _datasets(cfg, mcfg)
    base = _load_baseline(cfg)
    head_rows = []
    layer_rows = []
    for sub in ("qat", "qat_reversed", "directq"):
        if not (Path(cfg["out"]) / sub / "checkpoint.qbtc").exists():
            continue
        qmodel, qctx = _baked_quantized_model(cfg, sub)
        qctx.eval_mode()
        report = attention_kl(
            lambda toks: qmodel.attention_traces(toks, qctx),
            lambda toks: base.attention_traces(toks),
            eval_ds,
            fraction=cfg["kl"]["fraction"],
            seed=cfg["kl"]["seed"],
        )
        for layer in range(report.per_head.shape[0]):
            for head in range(report.per_head.shape[1]):
                head_rows.append([sub, layer, head, float(report.per_head[layer, head])])
            layer_rows.append([sub, layer, float(report.per_layer[layer])])
    if not head_rows:
        raise ConfigError("no quantized runs found; run `qat` or `directq` first")
    write_csv(out / "kl_heads.csv", ["run", "layer", "head", "kl"], head_rows)
    write_csv(out / "kl_layers.csv", ["run", "layer", "kl"], layer_rows)
    _stamp(out, cfg, "kl")
    print(json.dumps({"command": "kl", "runs": sorted({r[0] for r in head_rows})}, sort_keys=True))


def cmd_report(cfg: dict, args) -> None:
    import csv as _csv

    root = Path(cfg["out"])
    out = root / "report"
    tables: dict[str, list] = {}

    def copy_csv(src: Path, key: str, transform=None):
        if src.exists():
            with src.open(newline="") as fh:
                rows = list(_csv.reader(fh))[1:]
            tables[key] = [transform(r) if transform else r for r in rows]

    copy_csv(root / "probe" / "sensitivity.csv", "sensitivity")
    copy_csv(root / "probe" / "eigenvalues.csv", "eigenvalues")
    alloc_path = root / "allocation.json"
    if alloc_path.exists():
        alloc = json.loads(alloc_path.read_text())
        tables["allocation"] = sorted(alloc["layer_bits"].items())
    sizes = []
    accuracy = []
    for sub in ("qat", "qat_reversed", "directq"):
        s = root / sub / "summary.json"
        if s.exists():
            obj = json.loads(s.read_text())
            sizes.append([sub, obj["size_mb"], None, obj["metadata_mb"]])
            accuracy.append([sub, "eval", obj["eval_loss"], obj["eval_acc"]])
    ev = root / "evaluate" / "accuracy.csv"
    if ev.exists():
        with ev.open(newline="") as fh:
            for row in list(_csv.reader(fh))[1:]:
                if row[0] == "baseline":
                    accuracy.insert(0, row)
    if sizes:
        tables["sizes"] = sizes
    if accuracy:
        tables["accuracy"] = accuracy
    klp = root / "kl" / "kl_heads.csv"
    if klp.exists():
        with klp.open(newline="") as fh:
            tables["kl"] = list(_csv.reader(fh))[1:]
    from .reporting import emit_report

    tables["meta"] = {"config_hash": config_hash(cfg), "seed": cfg["model"]["seed"]}
    written = emit_report(tables, out)
    print(json.dumps({"command": "report", "files": [p.name for p in sorted(written)]}, sort_keys=True))


def cmd_pipeline(cfg: dict, args) -> None:
    class A:
        reverse = True
        ptq = False

    cmd_train(cfg, args)
    cmd_probe(cfg, args)
    cmd_allocate(cfg, A())
    a = A()
    a.reverse = False
    cmd_qat(cfg, a)
    r = A()
    r.reverse = True
    cmd_qat(cfg, r)
    cmd_directq(cfg, args)
    cmd_evaluate(cfg, args)
    cmd_landscape(cfg, args)
    cmd_kl(cfg, args)
    cmd_report(cfg, args)


# -- entry point ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="hessq",
        description="Hessian-guided mixed-precision quantization workflow",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (merged over defaults)")
        p.add_argument("--seed", type=int, help="master seed rebasing every stage")
        p.add_argument("--out", help="artifact directory (default runs/default)")
        p.add_argument(
            "--compute", choices=("f32", "f64"), help="training compute dtype"
        )

    for name, fn in [
        ("train", cmd_train),
        ("probe", cmd_probe),
        ("allocate", cmd_allocate),
        ("qat", cmd_qat),
        ("directq", cmd_directq),
        ("evaluate", cmd_evaluate),
        ("landscape", cmd_landscape),
        ("kl", cmd_kl),
        ("report", cmd_report),
        ("pipeline", cmd_pipeline),
    ]:
        p = sub.add_parser(name)
        common(p)
        p.set_defaults(func=fn)
        if name in ("allocate", "qat"):
            p.add_argument(
                "--reverse",
                action="store_true",
                help="swap the two bit levels (ablation control)",
            )
        if name in ("qat", "directq"):
            p.add_argument(
                "--ptq",
                action="store_true",
                help="skip fine-tuning; only calibrate activation ranges",
            )
        if name in ("allocate", "qat", "directq", "pipeline"):
            p.add_argument(
                "--bits",
                type=lambda s: [int(b) for b in s.split(",")],
                help="bit menu, e.g. 2,3",
            )
            p.add_argument(
                "--groups",
                help="weight grouping: layerwise | per-head | <count>",
            )
    return ap


_NUMERIC_ERRORS = (
    T.NonFiniteError,
    TrainingDiverged,
    PowerIterationError,
    OverflowError,
    QuantError,
    AllocationError,
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if not hasattr(args, "reverse"):
        args.reverse = False
    try:
        cfg = load_config(args)
        args.func(cfg, args)
    except (ConfigError, DataError) as e:
        _fail(e, 2)
        return 2
    except _NUMERIC_ERRORS as e:
        _fail(e, 3)
        return 3
    except OSError as e:
        _fail(e, 4)
        return 4
    return 0


def _fail(e: Exception, code: int) -> None:
    print(
        json.dumps(
            {"error": type(e).__name__, "message": str(e), "exit_code": code},
            sort_keys=True,
        ),
        file=sys.stderr,
    )


if __name__ == "__main__":
    sys.exit(main())
