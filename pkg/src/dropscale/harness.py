"""Experiment harness: flat key=value configs and the CLI command bodies.

Commands: train a model, evaluate inference methods, optimize a scale
vector, run the repeated split/train/optimize/evaluate experiment, and
print approximation gaps against the exact oracle.  All outputs are CSV
files that embed the fully resolved config as `#` comment lines, floats
are written with repr, and no timestamps appear anywhere, so reruns with
the same config are byte-identical.  Error rates in reports are percent.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .data import Dataset, SplitSpec, read_delimited, read_idx, split, synth_gaussians
from .errors import ConfigError
from .inference import (InferenceMethod, McConfig, classification_error,
                        predict, predict_scaled, predict_weight_scaled)
from .network import DropoutGate, LayerSpec, load_network, save_network
from .scaleopt import (ConstraintSet, PenaltyConfig, ScaleOptConfig,
                       check_scale_for_gate, load_scale, optimize_scale,
                       save_scale)
from .tensor import RngStream
from .trainer import TrainConfig, init_params, train

EXPERIMENT_METHODS = ("uniform", "mc_arithmetic", "nonuniform")

_METHOD_ALIASES = {
    "uniform": InferenceMethod.WEIGHT_SCALED,
    "weight_scaled": InferenceMethod.WEIGHT_SCALED,
    "mc_arithmetic": InferenceMethod.MC_ARITHMETIC,
    "mc_geometric": InferenceMethod.MC_GEOMETRIC,
    "nonuniform": InferenceMethod.SCALED,
    "scaled": InferenceMethod.SCALED,
    "exact_arithmetic": InferenceMethod.EXACT_ARITHMETIC,
    "exact_geometric": InferenceMethod.EXACT_GEOMETRIC,
}


def _choice(*options):
    def parse(text):
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    return parse


def _bool(text):
    lowered = text.lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise ValueError("expected true or false")


def _int_list(text):
    items = [t.strip() for t in text.split(",") if t.strip()]
    return [int(t) for t in items]


_SCHEMA = {
    "seed": (int, 0),
    "out": (str, "runs"),
    "dataset.kind": (_choice("synth", "idx", "delimited"), "synth"),
    "dataset.images": (str, ""),
    "dataset.labels": (str, ""),
    "dataset.test_images": (str, ""),
    "dataset.test_labels": (str, ""),
    "dataset.path": (str, ""),
    "dataset.test_path": (str, ""),
    "synth.classes": (int, 10),
    "synth.dim": (int, 784),
    "synth.per_class": (int, 1000),
    "synth.spread": (float, 0.3),
    "synth.test_per_class": (int, 200),
    "arch.hidden": (_int_list, [256]),
    "dropout.p": (float, 0.5),
    "dropout.convention": (_choice("classical", "inverted"), "inverted"),
    "train.optimizer": (_choice("sgd_momentum", "adam"), "adam"),
    "train.learning_rate": (float, 0.001),
    "train.momentum": (float, 0.9),
    "train.adam_beta1": (float, 0.9),
    "train.adam_beta2": (float, 0.999),
    "train.adam_eps": (float, 1e-8),
    "train.batch_size": (int, 32),
    "train.max_epochs": (int, 50),
    "train.patience": (int, 8),
    "mc.samples": (int, 128),
    "scale.lambda": (float, 10000.0),
    "scale.learning_rate": (float, 0.001),
    "scale.adam_beta1": (float, 0.9),
    "scale.adam_beta2": (float, 0.999),
    "scale.adam_eps": (float, 1e-8),
    "scale.batch_size": (int, 128),
    "scale.max_epochs": (int, 50),
    "scale.optimize_on_validation": (_bool, False),
    "split.val_fraction": (float, 0.2),
    "experiment.repeats": (int, 8),
    "experiment.test_fraction": (float, 0.2),
    "eval.methods": (str, "uniform,mc_arithmetic"),
}


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    return str(value)


@dataclass
class RunConfig:
    """Fully resolved settings for one run (defaults plus file plus flags)."""

    values: Dict[str, object] = field(default_factory=dict)
    source: str = "<defaults>"

    def __getitem__(self, key: str):
        return self.values[key]

    def override(self, key: str, value) -> None:
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = value

    def echo_lines(self) -> List[str]:
        return [f"{k}={_fmt(v)}" for k, v in sorted(self.values.items())]


def default_config() -> RunConfig:
    return RunConfig({k: default for k, (_, default) in _SCHEMA.items()})


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse flat key=value lines; `#` comments and blank lines are skipped.

    Unknown keys and malformed values are rejected with the source and
    line number in the message.
    """
    cfg = default_config()
    cfg.source = source
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{ln}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"{source}:{ln}: unknown config key {key!r}")
        parser, _ = _SCHEMA[key]
        try:
            cfg.values[key] = parser(value)
        except ValueError as exc:
            raise ConfigError(
                f"{source}:{ln}: bad value for {key!r}: {exc}") from None
    return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(p.read_text(encoding="utf-8"), source=str(path))


def load_datasets(cfg: RunConfig) -> Tuple[Dataset, Optional[Dataset]]:
    """Resolve (pool, test set or None) from the dataset config keys.

    Synthetic test examples share the class centers of the pool but use
    fresh noise: one oversized cluster is drawn per class and the last
    `synth.test_per_class` rows of each are carved off as the test set.
    """
    kind = cfg["dataset.kind"]
    if kind == "synth":
        per, extra = cfg["synth.per_class"], cfg["synth.test_per_class"]
        total = per + extra
        full = synth_gaussians(cfg["synth.classes"], cfg["synth.dim"], total,
                               cfg["synth.spread"], cfg["seed"])
        if extra == 0:
            return full, None
        blocks = np.arange(cfg["synth.classes"])[:, None] * total
        pool = full.subset((blocks + np.arange(per)).ravel())
        test = full.subset((blocks + per + np.arange(extra)).ravel())
        return pool, test
    if kind == "idx":
        if not cfg["dataset.images"] or not cfg["dataset.labels"]:
            raise ConfigError(
                "dataset.kind=idx needs dataset.images and dataset.labels")
        pool = read_idx(cfg["dataset.images"], cfg["dataset.labels"])
        t_img, t_lab = cfg["dataset.test_images"], cfg["dataset.test_labels"]
        if bool(t_img) != bool(t_lab):
            raise ConfigError(
                "dataset.test_images and dataset.test_labels must be set together")
        if t_img:
            return pool, read_idx(t_img, t_lab, class_count=pool.class_count)
        return pool, None
    if not cfg["dataset.path"]:
        raise ConfigError("dataset.kind=delimited needs dataset.path")
    pool = read_delimited(cfg["dataset.path"])
    if cfg["dataset.test_path"]:
        return pool, read_delimited(cfg["dataset.test_path"],
                                    class_count=pool.class_count)
    return pool, None


def build_network(cfg: RunConfig, in_dim: int,
                  class_count: int) -> Tuple[List[LayerSpec], DropoutGate]:
    """ReLU hidden layers, softmax output, dropout gating the output input."""
    hidden = cfg["arch.hidden"]
    dims = [in_dim] + list(hidden) + [class_count]
    specs = [LayerSpec(dims[i], dims[i + 1], "relu")
             for i in range(len(dims) - 2)]
    specs.append(LayerSpec(dims[-2], dims[-1], "softmax"))
    gate = DropoutGate(position=len(hidden), p=cfg["dropout.p"],
                       convention=cfg["dropout.convention"])
    return specs, gate


def train_config(cfg: RunConfig, seed: int) -> TrainConfig:
    return TrainConfig(
        optimizer=cfg["train.optimizer"],
        learning_rate=cfg["train.learning_rate"],
        momentum=cfg["train.momentum"],
        adam_beta1=cfg["train.adam_beta1"],
        adam_beta2=cfg["train.adam_beta2"],
        adam_eps=cfg["train.adam_eps"],
        batch_size=cfg["train.batch_size"],
        max_epochs=cfg["train.max_epochs"],
        early_stop_patience=cfg["train.patience"],
        seed=seed,
    )


def scale_opt_config(cfg: RunConfig, seed: int) -> ScaleOptConfig:
    return ScaleOptConfig(
        learning_rate=cfg["scale.learning_rate"],
        adam_beta1=cfg["scale.adam_beta1"],
        adam_beta2=cfg["scale.adam_beta2"],
        adam_eps=cfg["scale.adam_eps"],
        batch_size=cfg["scale.batch_size"],
        max_epochs=cfg["scale.max_epochs"],
        seed=seed,
        optimize_on_validation=cfg["scale.optimize_on_validation"],
    )


def _write_csv(path, comments: List[str], header: List[str], rows) -> None:
    lines = [f"# {c}" for c in comments]
    lines.append(",".join(header))
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_scale_histogram(path, s, upper: float, comments: List[str]) -> None:
    counts, edges = np.histogram(np.asarray(s, dtype=np.float64), bins=20,
                                 range=(0.0, upper))
    rows = [(edges[j], edges[j + 1], int(counts[j])) for j in range(20)]
    _write_csv(path, comments + ["20 bins over the box [0, upper bound]"],
               ["bin_lo", "bin_hi", "count"], rows)


def _pct(err: float) -> float:
    return 100.0 * err


def cmd_train(cfg: RunConfig) -> dict:
    """Train one model on the config's dataset; writes model.net + log CSV."""
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    pool, _ = load_datasets(cfg)
    train_ds, val_ds = split(pool, SplitSpec(cfg["split.val_fraction"],
                                             cfg["seed"]))
    specs, gate = build_network(cfg, pool.dim, pool.class_count)
    sink = io.StringIO()
    ckpt = train(specs, gate, train_ds, val_ds, train_config(cfg, cfg["seed"]),
                 log_sink=sink)
    model_path = out / "model.net"
    save_network(model_path, ckpt.params, gate)
    log_path = out / "train_log.csv"
    echo = "".join(f"# {line}\n" for line in cfg.echo_lines())
    log_path.write_text(echo + sink.getvalue(), encoding="utf-8")
    print(f"model -> {model_path}")
    print(f"training log -> {log_path}")
    print(f"best epoch {ckpt.epoch}, validation error "
          f"{_pct(ckpt.val_error):.2f}%")
    return {"model": model_path, "log": log_path, "checkpoint": ckpt}


def _resolve_methods(text: str) -> List[str]:
    names = [t.strip() for t in text.split(",") if t.strip()]
    if not names:
        raise ConfigError("no inference methods requested")
    for name in names:
        if name not in _METHOD_ALIASES:
            raise ConfigError(
                f"unknown inference method {name!r}; valid names: "
                f"{', '.join(sorted(_METHOD_ALIASES))}")
    return names


def cmd_eval(cfg: RunConfig, model_path, methods: Optional[str] = None,
             mc_samples: Optional[int] = None,
             scale_path=None) -> List[Tuple[str, float]]:
    """Error-rate table for the requested methods on the eval dataset.

    Uses the configured test set when one exists, otherwise the full
    pool.  Non-uniform scaling loads `scale.json` next to the model
    unless an explicit scale path is given.
    """
    params, gate = load_network(model_path)
    pool, test = load_datasets(cfg)
    ds = test if test is not None else pool
    names = _resolve_methods(methods if methods is not None
                             else cfg["eval.methods"])
    samples = mc_samples if mc_samples is not None else cfg["mc.samples"]

    rows = []
    for name in names:
        method = _METHOD_ALIASES[name]
        if method is InferenceMethod.SCALED:
            spath = Path(scale_path) if scale_path is not None \
                else Path(model_path).parent / "scale.json"
            if not spath.is_file():
                raise ConfigError(
                    f"non-uniform scaling needs a scale file; expected "
                    f"{spath} (run optimize-scale first)")
            s, cs, _ = load_scale(spath)
            check_scale_for_gate(s, cs, gate, params.gated_width(gate))
            probs = predict_scaled(params, gate, s, ds.features)
        else:
            mc = McConfig(samples=samples, seed=cfg["seed"])
            probs = predict(params, gate, ds.features, method, mc=mc)
        rows.append((name, _pct(classification_error(probs, ds.labels))))

    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    table_path = out / "eval.csv"
    _write_csv(table_path, cfg.echo_lines() + ["errors in percent"],
               ["method", "error"], rows)
    width = max(len(name) for name, _ in rows)
    for name, err in rows:
        print(f"{name:<{width}}  {err:6.2f}%")
    print(f"table -> {table_path}")
    return rows


def cmd_optimize_scale(cfg: RunConfig, model_path) -> dict:
    """Fit a scale vector for a trained model; writes scale.json + CSVs."""
    params, gate = load_network(model_path)
    pool, _ = load_datasets(cfg)
    train_ds, val_ds = split(pool, SplitSpec(cfg["split.val_fraction"],
                                             cfg["seed"]))
    cs = ConstraintSet.for_gate(gate)
    result = optimize_scale(params, gate, cs, PenaltyConfig(cfg["scale.lambda"]),
                            scale_opt_config(cfg, cfg["seed"]),
                            train_ds, val_ds)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    scale_file = out / "scale.json"
    save_scale(scale_file, result.scale, cs, result.val_error)
    comments = cfg.echo_lines() + ["val_error is a fraction in [0, 1]"]
    trace_file = out / "scale_trace.csv"
    _write_csv(trace_file, comments,
               ["epoch", "objective", "penalty", "val_error"],
               [(r.epoch, r.objective, r.penalty, r.val_error)
                for r in result.trace])
    hist_file = out / "scale_hist.csv"
    _write_scale_histogram(hist_file, result.scale, cs.upper_bound,
                           cfg.echo_lines())
    print(f"scale vector -> {scale_file}")
    print(f"trace -> {trace_file}")
    print(f"histogram -> {hist_file}")
    print(f"selected epoch {result.epoch}, validation error "
          f"{_pct(result.val_error):.2f}%")
    return {"scale": scale_file, "trace": trace_file, "histogram": hist_file,
            "result": result}


@dataclass
class ExperimentReport:
    """Per-split error records plus the aggregate mean/sd table."""

    per_split: List[dict]
    aggregate: List[dict]
    config_lines: List[str]
    out_dir: Path


def cmd_experiment(cfg: RunConfig) -> ExperimentReport:
    """The repeated protocol: split, train, optimize scale, evaluate.

    Repeat i splits the pool with seed `seed + i`, trains a fresh model,
    fits its scale vector, and scores uniform scaling, Monte Carlo
    arithmetic averaging, and non-uniform scaling on the validation and
    test sets.  A fixed test set is carved from the pool once (seed
    `seed`) when the config does not supply one.  Any failed repeat is
    recorded with its error class and excluded from the aggregates.
    """
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    pool, test = load_datasets(cfg)
    if test is None:
        pool, test = split(pool, SplitSpec(cfg["experiment.test_fraction"],
                                           cfg["seed"]))
    echo = cfg.echo_lines()
    pcfg = PenaltyConfig(cfg["scale.lambda"])
    repeats = cfg["experiment.repeats"]
    if repeats < 1:
        raise ConfigError("experiment.repeats must be at least 1")

    per_split: List[dict] = []
    for i in range(repeats):
        sseed = cfg["seed"] + i
        try:
            train_ds, val_ds = split(pool, SplitSpec(cfg["split.val_fraction"],
                                                     sseed))
            specs, gate = build_network(cfg, pool.dim, pool.class_count)
            sink = io.StringIO()
            ckpt = train(specs, gate, train_ds, val_ds,
                         train_config(cfg, sseed), log_sink=sink)
            (out / f"train_log_split{i}.csv").write_text(
                "".join(f"# {line}\n" for line in echo) + sink.getvalue(),
                encoding="utf-8")
            save_network(out / f"model_split{i}.net", ckpt.params, gate)

            cs = ConstraintSet.for_gate(gate)
            result = optimize_scale(ckpt.params, gate, cs, pcfg,
                                    scale_opt_config(cfg, sseed),
                                    train_ds, val_ds)
            save_scale(out / f"scale_split{i}.json", result.scale, cs,
                       result.val_error)
            _write_csv(out / f"scale_trace_split{i}.csv",
                       echo + ["val_error is a fraction in [0, 1]"],
                       ["epoch", "objective", "penalty", "val_error"],
                       [(r.epoch, r.objective, r.penalty, r.val_error)
                        for r in result.trace])
            _write_scale_histogram(out / f"scale_hist_split{i}.csv",
                                   result.scale, cs.upper_bound, echo)

            mc = McConfig(samples=cfg["mc.samples"], seed=sseed)
            for name in EXPERIMENT_METHODS:
                errors = {}
                for split_name, ds in (("val", val_ds), ("test", test)):
                    if name == "uniform":
                        probs = predict_weight_scaled(ckpt.params, gate,
                                                      ds.features)
                    elif name == "mc_arithmetic":
                        probs = predict(ckpt.params, gate, ds.features,
                                        InferenceMethod.MC_ARITHMETIC, mc=mc)
                    else:
                        probs = predict_scaled(ckpt.params, gate, result.scale,
                                               ds.features)
                    errors[split_name] = _pct(
                        classification_error(probs, ds.labels))
                per_split.append({"split": i, "seed": sseed, "status": "ok",
                                  "method": name,
                                  "val_error": errors["val"],
                                  "test_error": errors["test"]})
        except (ValueError, RuntimeError) as exc:
            print(f"split {i} failed: {type(exc).__name__}: {exc}")
            per_split.append({"split": i, "seed": sseed,
                              "status": f"failed:{type(exc).__name__}",
                              "method": "", "val_error": "",
                              "test_error": ""})

    aggregate: List[dict] = []
    for name in EXPERIMENT_METHODS:
        vals = [r["val_error"] for r in per_split
                if r["method"] == name and r["status"] == "ok"]
        tests = [r["test_error"] for r in per_split
                 if r["method"] == name and r["status"] == "ok"]
        n = len(vals)
        row = {"method": name, "n": n}
        if n:
            row["val_err_mean"] = float(np.mean(vals))
            row["val_err_sd"] = float(np.std(vals, ddof=1)) if n > 1 else 0.0
            row["test_err_mean"] = float(np.mean(tests))
            row["test_err_sd"] = float(np.std(tests, ddof=1)) if n > 1 else 0.0
        else:
            row.update({"val_err_mean": "", "val_err_sd": "",
                        "test_err_mean": "", "test_err_sd": ""})
        aggregate.append(row)

    comments = echo + ["errors in percent"]
    _write_csv(out / "experiment_per_split.csv", comments,
               ["split", "seed", "status", "method", "val_error", "test_error"],
               [(r["split"], r["seed"], r["status"], r["method"],
                 r["val_error"], r["test_error"]) for r in per_split])
    _write_csv(out / "experiment_summary.csv",
               comments + ["n = completed repeats"],
               ["method", "val_err_mean", "val_err_sd", "test_err_mean",
                "test_err_sd", "n"],
               [(r["method"], r["val_err_mean"], r["val_err_sd"],
                 r["test_err_mean"], r["test_err_sd"], r["n"])
                for r in aggregate])

    for row in aggregate:
        if row["n"]:
            print(f"{row['method']:<14} val {row['val_err_mean']:5.2f} "
                  f"± {row['val_err_sd']:4.2f}   test "
                  f"{row['test_err_mean']:5.2f} ± {row['test_err_sd']:4.2f} "
                  f"  (n={row['n']})")
        else:
            print(f"{row['method']:<14} no completed repeats")
    print(f"report -> {out / 'experiment_summary.csv'}")
    return ExperimentReport(per_split, aggregate, echo, out)


def cmd_oracle_check(seed: int = 0, out_dir=None) -> List[Tuple[str, str, float]]:
    """Print max |approximation - exact average| on three seeded instances.

    Instances: an all-linear network (uniform scaling should be exact),
    a ReLU head (a genuine gap appears), and a softmax head (uniform
    scaling matches the geometric average; the extra row reports that
    difference against the geometric rather than arithmetic oracle).
    """
    from .oracle import exact_geometric

    rng = RngStream(seed)
    rows: List[Tuple[str, str, float]] = []

    def gap(tag, params, gate, x, method, mc=None):
        from .oracle import approximation_gap
        value = float(np.max(approximation_gap(params, gate, x, method, mc=mc)))
        rows.append((tag, InferenceMethod(method).value, value))

    def make(tag, specs, scale_factor=1.0):
        params = init_params(specs, int(rng.derive(tag).words(1)[0] >> 1))
        for w in params.weights:
            w *= scale_factor
        return params

    mc = McConfig(samples=4096, seed=seed)

    linear = make("linear", [LayerSpec(5, 8, "linear"), LayerSpec(8, 4, "linear")])
    gate = DropoutGate(position=1, p=0.5, convention="classical")
    x = RngStream(seed).derive("probe", 0).normals(5)
    for method in (InferenceMethod.WEIGHT_SCALED, InferenceMethod.MC_ARITHMETIC,
                   InferenceMethod.EXACT_ARITHMETIC):
        gap("linear", linear, gate, x, method, mc=mc)

    relu = make("relu", [LayerSpec(5, 8, "relu"), LayerSpec(8, 4, "relu")])
    for method in (InferenceMethod.WEIGHT_SCALED, InferenceMethod.MC_ARITHMETIC,
                   InferenceMethod.EXACT_ARITHMETIC):
        gap("relu_head", relu, gate, x, method, mc=mc)

    soft = make("softmax", [LayerSpec(5, 10, "relu"), LayerSpec(10, 4, "softmax")])
    sgate = DropoutGate(position=1, p=0.5, convention="classical")
    for method in (InferenceMethod.WEIGHT_SCALED, InferenceMethod.MC_ARITHMETIC,
                   InferenceMethod.MC_GEOMETRIC, InferenceMethod.EXACT_ARITHMETIC):
        gap("softmax_head", soft, sgate, x, method, mc=mc)
    ws = predict_weight_scaled(soft, sgate, x)
    geo = exact_geometric(soft, sgate, x)
    rows.append(("softmax_head", "weight_scaled_vs_geometric",
                 float(np.max(np.abs(ws - geo)))))

    width = max(len(r[1]) for r in rows)
    for tag, method, value in rows:
        print(f"{tag:<13} {method:<{width}}  max gap {value:.3e}")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "oracle_check.csv", [f"seed={seed}"],
                   ["instance", "method", "max_abs_gap"], rows)
        print(f"table -> {out / 'oracle_check.csv'}")
    return rows
