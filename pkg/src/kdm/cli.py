"""``kdm`` command line: fit, eval, infer, sample and llp-bench.

Exit codes: 0 success, 1 internal or numerical failure, 2 usage or input
error. Failures print one JSON line ``{"error", "message", "exit_code"}`` on
stderr.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from kdm import __version__, kernels, metrics, sampling, training
from kdm.bench import BenchConfig, run_bench
from kdm.data import (Encoder, Standardizer, TabularSchema, load_csv,
                      make_bags, read_bags, resolve_schema, split, standardize)
from kdm.density import JointKDM, KernelDensityMatrix, density, log_likelihood
from kdm.errors import KDMError, ModelDataMismatch, NonFiniteLoss
from kdm.inference import infer, infer_points, point_kdm, reverse
from kdm.rng import RngState
from kdm.training import TrainConfig

TASKS = ("density", "classify", "regress", "llp")
MODEL_FORMAT = "kdm-model"
METRICS_BY_TASK = {
    "density": ("nll",),
    "classify": ("accuracy", "auc", "nll"),
    "llp": ("accuracy", "auc", "nll"),
    "regress": ("mse", "nll"),
}


class UsageError(Exception):
    """Bad flags or config (exit code 2)."""


def dumps(obj):
    # stable key order; repr floats round-trip exactly
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


# ------------------------------------------------------------------ config


@dataclass
class ExperimentConfig:
    task: str = "classify"
    data: str = ""
    schema: str | None = None
    x_kernel: dict = field(default_factory=lambda: {"kind": "rbf", "sigma": 1.0})
    y_kernel: dict | None = None
    loss: str | None = None
    standardize: bool = True
    train: dict = field(default_factory=dict)
    bags: dict = field(default_factory=lambda: {"bag_size": 8, "lp_range": [0.0, 0.5],
                                                "n_bags": None})
    validation_fraction: float = 0.0
    out: str | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise UsageError(f"task must be one of {TASKS}, got {self.task!r}")
        if not self.data:
            raise UsageError("config needs a data path")
        if self.loss is None:
            self.loss = {"regress": "mse"}.get(self.task, "cross-entropy")
        if self.y_kernel is None and self.task != "density":
            self.y_kernel = {"kind": "rbf", "sigma": 1.0} if self.task == "regress" else {"kind": "cosine"}
        self.train = TrainConfig.from_json(self.train).to_json()
        if not 0.0 <= self.validation_fraction < 1.0:
            raise UsageError("validation_fraction must be in [0, 1)")

    @classmethod
    def from_json(cls, obj):
        unknown = set(obj) - {f.name for f in fields(cls)}
        if unknown:
            raise UsageError(f"unknown config fields {sorted(unknown)}")
        return cls(**obj)

    def to_json(self):
        return asdict(self)

    def fingerprint(self):
        return hashlib.sha256(dumps(self.to_json()).encode()).hexdigest()


@dataclass
class MetricsReport:
    metrics: dict
    seed: int
    wall_time: float
    config_fingerprint: str
    n: int

    def __post_init__(self):
        bad = {k: v for k, v in self.metrics.items() if not math.isfinite(v)}
        if bad:
            raise NonFiniteLoss(f"non-finite metrics {sorted(bad)}", bad)

    def to_json(self):
        return asdict(self)


def _resolve_schema(ref):
    if ref is None:
        raise UsageError("a schema is required for CSV data")
    return resolve_schema(ref)


def _kernel(obj, dim):
    obj = dict(obj)
    obj["dim"] = dim
    return kernels.KernelSpec.from_json(obj)


# ------------------------------------------------------------- model files


def save_model(path, model, task, fingerprint, schema=None, encoder=None, standardizer=None):
    obj = {
        "format": MODEL_FORMAT,
        "version": 1,
        "task": task,
        "type": "joint" if isinstance(model, JointKDM) else "kdm",
        "model": model.to_json(),
        "schema": None if schema is None else schema.to_json(),
        "encoder": None if encoder is None else encoder.to_json(),
        "standardizer": None if standardizer is None else standardizer.to_json(),
        "config_fingerprint": fingerprint,
    }
    Path(path).write_text(dumps(obj) + "\n")


@dataclass
class LoadedModel:
    model: object
    task: str
    schema: TabularSchema | None
    encoder: Encoder | None
    standardizer: Standardizer | None
    fingerprint: str | None


def _read_json_object(path, row=0):
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise
        return json.loads(lines[row])


def load_model(path, row=0):
    obj = _read_json_object(path, row)
    if obj.get("format") == MODEL_FORMAT:
        cls = JointKDM if obj["type"] == "joint" else KernelDensityMatrix
        return LoadedModel(
            cls.from_json(obj["model"]), obj["task"],
            None if obj["schema"] is None else TabularSchema.from_json(obj["schema"]),
            None if obj["encoder"] is None else Encoder.from_json(obj["encoder"]),
            None if obj["standardizer"] is None else Standardizer.from_json(obj["standardizer"]),
            obj.get("config_fingerprint"))
    # bare KDM / joint JSON, optionally carrying a standardizer
    st = obj.get("standardizer")
    st = None if st is None else Standardizer.from_json(st)
    if "x_components" in obj:
        return LoadedModel(JointKDM.from_json(obj), "joint", None, None, st, None)
    return LoadedModel(KernelDensityMatrix.from_json(obj), "density", None, None, st, None)


# ----------------------------------------------------------------- helpers


def _load_labeled(cfg, schema):
    if cfg.task == "llp" and cfg.data.endswith(".jsonl"):
        return None
    return load_csv(cfg.data, schema, numeric_label=cfg.task == "regress")


def _write_lines(path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(dumps(r) + "\n")


def _pmf_scores(joint, X):
    from kdm.inference import pmf_points
    return pmf_points(joint, X)


def _model_x_dim(model):
    return model.x_kernel.dim if isinstance(model, JointKDM) else model.kernel.dim


def _prepare_inputs(lm, path, labeled=True):
    if lm.schema is None:
        raise UsageError("model file has no schema; cannot read CSV inputs")
    D = load_csv(path, lm.schema, encoder=lm.encoder, labeled=labeled,
                 numeric_label=lm.task == "regress")
    if D.X.shape[1] != _model_x_dim(lm.model):
        raise ModelDataMismatch(f"data has {D.X.shape[1]} features, model expects "
                                f"{_model_x_dim(lm.model)}")
    X = D.X if lm.standardizer is None else lm.standardizer.apply(D.X)
    return X, D.Y


# ---------------------------------------------------------------- commands


def cmd_fit(args):
    cfg = _experiment_config(args)
    t0 = time.perf_counter()
    tcfg = TrainConfig.from_json(cfg.train)
    schema = encoder = st = None
    trace = []
    if cfg.task == "llp" and cfg.data.endswith(".jsonl"):
        B = read_bags(cfg.data)
        X_all = np.vstack(B.bags)
        Ytrain = None
    else:
        schema = _resolve_schema(cfg.schema)
        D = _load_labeled(cfg, schema)
        encoder = D.encoder
        if cfg.standardize:
            (Xs,), st = standardize(D.X, [], D.numeric_columns)
            D.X = Xs
        X_all, Ytrain = D.X, D.Y
    val = None
    if cfg.validation_fraction > 0 and cfg.task != "llp":
        parts = split(len(D), (1 - cfg.validation_fraction, cfg.validation_fraction, 0.0), tcfg.seed)
        val = D.subset(parts.validation)
        D = D.subset(parts.train)
    kx = _kernel(cfg.x_kernel, X_all.shape[1])
    if cfg.task == "density":
        model = training.fit_mle(D.X, kx, None, tcfg, trace.append,
                                 None if val is None else val.X)
        scores = {"nll": -log_likelihood(model, D.X) / len(D)}
    elif cfg.task in ("classify", "regress"):
        ky = _kernel(cfg.y_kernel, D.Y.shape[1])
        model = training.fit_discriminative(D, kx, ky, cfg.loss, tcfg, trace.append, val)
        scores = _eval_joint(model, D.X, D.Y, cfg.task, METRICS_BY_TASK[cfg.task])
    else:
        if not cfg.data.endswith(".jsonl"):
            rng = RngState(tcfg.seed, 1)
            bag_size = int(cfg.bags["bag_size"])
            n_bags = cfg.bags.get("n_bags") or len(D) // bag_size
            B = make_bags(D, bag_size, cfg.bags["lp_range"], n_bags, rng)
        ky = _kernel(cfg.y_kernel, B.proportions.shape[1])
        model = training.fit_llp(B, kx, ky, tcfg, trace.append)
        scores = {"objective": trace[-1]["objective"] if trace else math.nan}
        if Ytrain is not None:
            scores.update(_eval_joint(model, X_all, Ytrain, "classify", METRICS_BY_TASK["llp"]))
    out = Path(args.out or cfg.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    fp = cfg.fingerprint()
    save_model(out / "model.json", model, cfg.task, fp, schema, encoder, st)
    report = MetricsReport(scores, tcfg.seed, time.perf_counter() - t0, fp, int(X_all.shape[0]))
    # timings live in their own file so model.json and metrics.jsonl are byte-reproducible
    stable = {k: v for k, v in report.to_json().items() if k != "wall_time"}
    _write_lines(out / "metrics.jsonl",
                 [{k: v for k, v in r.items() if k != "wall_time"} for r in trace] + [{"report": stable}])
    _write_lines(out / "timing.jsonl",
                 [{"epoch": r["epoch"], "wall_time": r["wall_time"]} for r in trace]
                 + [{"wall_time": report.wall_time}])
    _emit(args, {"model": str(out / "model.json"), "report": report.to_json()}, to_file=False)
    return 0


def _eval_joint(joint, X, Y, task, names):
    res = {}
    if task == "regress":
        R = infer_points(joint, X)
        yhat = R @ joint.y_components
        for name in names:
            if name == "mse":
                res["mse"] = metrics.mse(yhat, Y)
            elif name == "nll":
                d = _conditional_densities(joint, X, Y)
                res["nll"] = metrics.nll(d)
            else:
                raise UsageError(f"metric {name!r} not available for regression models")
        return res
    pi = _pmf_scores(joint, X)
    truth = Y.argmax(axis=1)
    for name in names:
        if name == "accuracy":
            res["accuracy"] = metrics.accuracy(pi.argmax(axis=1), truth)
        elif name == "auc":
            if pi.shape[1] != 2:
                raise UsageError("auc needs a binary model")
            res["auc"] = metrics.auc(pi[:, 1], truth == 1)
        elif name == "nll":
            p_true = np.clip(pi[np.arange(len(truth)), truth], training.PMF_EPS, 1.0)
            res["nll"] = float(-np.mean(np.log(p_true)))
        else:
            raise UsageError(f"metric {name!r} not available for classifiers")
    return res


def _conditional_densities(joint, X, Y):
    from kdm.inference import conditional_density
    return np.array([conditional_density(joint, x, y) for x, y in zip(X, Y)])


def cmd_eval(args):
    if not args.model or not args.data:
        raise UsageError("eval needs --model and --data")
    t0 = time.perf_counter()
    lm = load_model(args.model)
    X, Y = _prepare_inputs(lm, args.data)
    names = _metric_names(args, lm.task)
    if lm.task == "density":
        res = {}
        for name in names:
            if name != "nll":
                raise UsageError(f"metric {name!r} not available for density models")
            res["nll"] = metrics.nll(density(lm.model, X))
    else:
        if Y.shape[1] != lm.model.y_kernel.dim:
            raise ModelDataMismatch("label dimension does not match the model")
        res = _eval_joint(lm.model, X, Y, "regress" if lm.task == "regress" else "classify", names)
    report = MetricsReport(res, args.seed if args.seed is not None else 0,
                           time.perf_counter() - t0, lm.fingerprint or "", int(X.shape[0]))
    _emit(args, report.to_json())
    return 0


def _metric_names(args, task):
    if not args.metric:
        return METRICS_BY_TASK.get(task, ("nll",))
    names = []
    for m in args.metric:
        names.extend(s for s in m.split(",") if s)
    return tuple(names)


def _read_numeric_rows(path, classes=None):
    rows = []
    with open(path, newline="") as fh:
        for lineno, raw in enumerate(csv.reader(fh), start=1):
            if not raw or all(not f.strip() for f in raw):
                continue
            fields_ = [f.strip() for f in raw]
            if classes and len(fields_) == 1 and fields_[0] in classes:
                row = [0.0] * len(classes)
                row[classes.index(fields_[0])] = 1.0
                rows.append(row)
                continue
            try:
                rows.append([float(f) for f in fields_])
            except ValueError:
                from kdm.errors import ParseError
                bad = next(j for j, f in enumerate(fields_) if not _is_float(f))
                raise ParseError(lineno, bad + 1, f"not a number: {fields_[bad]!r}") from None
    return np.array(rows, dtype=np.float64).reshape(len(rows), -1)


def _is_float(s):
    try:
        float(s)
    except ValueError:
        return False
    return True


def cmd_infer(args):
    if not args.model or not args.data:
        raise UsageError("infer needs --model and --data")
    lm = load_model(args.model)
    joint = lm.model
    if not isinstance(joint, JointKDM):
        raise UsageError("infer needs a joint (classify / regress / llp) model")
    records = []
    if args.direction == "forward":
        X, _ = _prepare_inputs(lm, args.data, labeled=False)
        R = infer_points(joint, X)
        if joint.y_kernel.kind == "cosine":
            sq = joint.y_components ** 2
            pi = R @ (sq / sq.sum(axis=1, keepdims=True))
            classes = lm.encoder.classes if lm.encoder is not None else None
            for row in pi:
                k = int(np.argmax(row))
                rec = {"pi": row.tolist(), "index": k}
                if classes:
                    rec["label"] = classes[k]
                records.append(rec)
        else:
            for w in R:
                records.append({"weights": w.tolist(), "y_hat": (w @ joint.y_components).tolist()})
    else:
        classes = lm.encoder.classes if lm.encoder is not None else None
        Yq = _read_numeric_rows(args.data, classes)
        rev = reverse(joint)
        if Yq.shape[1] != rev.x_kernel.dim:
            raise ModelDataMismatch(f"inputs have {Yq.shape[1]} columns, model y side has "
                                    f"{rev.x_kernel.dim}")
        for y in Yq:
            out = infer(point_kdm(y, rev.x_kernel), rev).output
            rec = out.to_json()
            rec["standardizer"] = None if lm.standardizer is None else lm.standardizer.to_json()
            records.append(rec)
    _emit_lines(args, records)
    return 0


def cmd_sample(args):
    if not args.model:
        raise UsageError("sample needs --model")
    if args.n is None or args.n < 0:
        raise UsageError("sample needs --n >= 0")
    lm = load_model(args.model, args.row)
    rho = lm.model
    if not isinstance(rho, KernelDensityMatrix):
        raise UsageError("sample needs a KDM; run infer --direction reverse on a joint model first")
    seed = args.seed if args.seed is not None else 0
    S = sampling.sample(rho, args.n, RngState(seed))
    buf = io.StringIO()
    if rho.kernel.kind == "cosine":
        for v in S:
            buf.write(f"{int(v)}\n")
    else:
        if lm.standardizer is not None and S.shape[0]:
            S = S.copy()
            st = lm.standardizer
            S[:, st.columns] = S[:, st.columns] * st.scale + st.mean
        for row in S:
            buf.write(",".join(repr(float(v)) for v in row) + "\n")
    _emit_text(args, buf.getvalue())
    return 0


def cmd_llp_bench(args):
    obj = {}
    if args.config:
        obj = json.loads(Path(args.config).read_text())
        obj = obj.get("bench", obj)
    cfg = BenchConfig.from_json(obj)
    if args.data:
        cfg.data = args.data
    if args.schema:
        cfg.schema = args.schema
    if args.seed is not None:
        cfg.seed = args.seed
    if args.repetitions is not None:
        cfg.repetitions = args.repetitions
    if args.subsample is not None:
        cfg.subsample = args.subsample
    if args.grid:
        cfg.grid = True
    if args.workers is not None:
        cfg.workers = args.workers
    if not cfg.data:
        raise UsageError("llp-bench needs a data path (--data or config)")
    if not Path(cfg.data).exists():
        raise FileNotFoundError(cfg.data)
    fp = hashlib.sha256(dumps(cfg.to_json()).encode()).hexdigest()
    t0 = time.perf_counter()
    summaries = run_bench(cfg)
    for s in summaries:
        s["config_fingerprint"] = fp
        s["seed"] = cfg.seed
        s["wall_time"] = time.perf_counter() - t0
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_lines(out / "bench.jsonl", summaries)
    for s in summaries:
        print(dumps(s))
    return 0


# -------------------------------------------------------------- plumbing


def _experiment_config(args):
    if not args.config:
        raise UsageError("fit needs --config")
    obj = json.loads(Path(args.config).read_text())
    if args.data:
        obj["data"] = args.data
    if args.schema:
        obj["schema"] = args.schema
    if args.seed is not None:
        obj.setdefault("train", {})["seed"] = args.seed
    cfg = ExperimentConfig.from_json(obj)
    if not Path(cfg.data).exists():
        raise FileNotFoundError(cfg.data)
    return cfg


def _emit(args, obj, to_file=True):
    text = dumps(obj) + "\n"
    if to_file and getattr(args, "out", None):
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def _emit_lines(args, records):
    _emit_text(args, "".join(dumps(r) + "\n" for r in records))


def _emit_text(args, text):
    if args.out:
        with open(args.out, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="kdm", description="Kernel density matrices: fit, evaluate, infer, sample.")
    p.add_argument("--version", action="version", version=f"kdm {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp):
        sp.add_argument("--config", help="experiment config JSON")
        sp.add_argument("--seed", type=int, help="unsigned 64-bit seed")
        sp.add_argument("--out", help="output directory (fit, llp-bench) or file")
        sp.add_argument("--model", help="model or KDM JSON file")
        sp.add_argument("--data", help="input CSV (or bag JSON-lines for llp)")
        sp.add_argument("--schema", help="schema JSON or a bundled name (adult, magic)")
        return sp

    common(sub.add_parser("fit", help="train a model from a config"))
    e = common(sub.add_parser("eval", help="evaluate a model on labeled data"))
    e.add_argument("--metric", action="append", help="metric name(s): auc, accuracy, nll, mse")
    i = common(sub.add_parser("infer", help="batch inference through a joint model"))
    i.add_argument("--direction", choices=("forward", "reverse"), default="forward")
    s = common(sub.add_parser("sample", help="draw samples from a KDM"))
    s.add_argument("--n", type=int, help="number of samples")
    s.add_argument("--row", type=int, default=0, help="line of a JSON-lines KDM file to use")
    b = common(sub.add_parser("llp-bench", help="label-proportion benchmark"))
    b.add_argument("--repetitions", type=int)
    b.add_argument("--subsample", type=int, help="use this many rows (smoke runs)")
    b.add_argument("--grid", action="store_true", help="select m' and lr on the validation bags")
    b.add_argument("--workers", type=int)
    return p


COMMANDS = {"fit": cmd_fit, "eval": cmd_eval, "infer": cmd_infer, "sample": cmd_sample,
            "llp-bench": cmd_llp_bench}

_INPUT_ERRORS = (UsageError, FileNotFoundError, IsADirectoryError, PermissionError,
                 json.JSONDecodeError, UnicodeDecodeError)


def _fail(exc, code):
    sys.stderr.write(dumps({"error": type(exc).__name__, "message": str(exc),
                            "exit_code": code}) + "\n")
    return code


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise UsageError("--seed must be an unsigned 64-bit integer")
        return COMMANDS[args.command](args)
    except NonFiniteLoss as exc:
        return _fail(exc, 1)
    except _INPUT_ERRORS as exc:
        return _fail(exc, 2)
    except (KDMError, ValueError) as exc:
        # library validation errors are input problems; anything else is a bug
        return _fail(exc, 2)
    except Exception as exc:  # noqa: BLE001
        return _fail(exc, 1)


if __name__ == "__main__":
    sys.exit(main())
