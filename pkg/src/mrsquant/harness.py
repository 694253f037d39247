"""Experiment orchestration: basis -> datasets -> CNN / VARPRO-LM -> reports.

Every stage writes its outputs under one run directory and records a stamp
(a hash of its inputs and settings); a rerun with the same stamp is skipped.
``manifest.json`` ties every output file to the config hash and the basis
fingerprint.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .basis import basis_from_bytes, fixture_bytes
from .datagen import Dataset, GenConfig, generate, load, save, split
from .fitlsq import FitOptions, fit_many
from .metrics import EvalReport
from .nnet import TrainConfig, TrainingDivergedError, default_spec, load_weights, predict, \
    save_weights, train
from .nnet.train import as_arrays, evaluate_loss

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "mrsquant experiment config",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "basis_path": {"type": ["string", "null"]},
        "train_size": {"type": "integer", "minimum": 1},
        "test_size": {"type": "integer", "minimum": 1},
        "snr_list": {"type": "array", "minItems": 1,
                     "items": {"anyOf": [{"type": "number", "exclusiveMinimum": 0},
                                         {"enum": ["inf", "Infinity"]}]}},
        "train_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "network": {"type": "object", "additionalProperties": False, "properties": {
            "widths": {"type": "array", "items": {"type": "integer", "minimum": 1},
                       "minItems": 1},
            "kernel": {"type": "integer", "minimum": 1},
            "pool": {"type": "integer", "minimum": 1},
            "hidden": {"type": "integer", "minimum": 1}}},
        "train": {"type": "object", "additionalProperties": False, "properties": {
            f.name: {} for f in fields(TrainConfig)}},
        "fit": {"type": "object", "additionalProperties": False, "properties": {
            f.name: {} for f in fields(FitOptions)}},
        "learning_curve": {"type": "object", "additionalProperties": False, "properties": {
            "sizes": {"type": "array", "items": {"type": "integer", "minimum": 1}},
            "snr": {"anyOf": [{"type": "number", "exclusiveMinimum": 0},
                              {"enum": ["inf", "Infinity"]}]},
            "max_iters": {"type": ["integer", "null"], "minimum": 1}}},
    },
}


class HarnessError(RuntimeError):
    pass


class MissingArtifactError(HarnessError):
    pass


class FingerprintMismatchError(HarnessError):
    pass


class ConfigError(HarnessError):
    pass


def _snr_value(v) -> float:
    return math.inf if isinstance(v, str) else float(v)


def _snr_json(v: float):
    return "inf" if math.isinf(v) else v


def snr_tag(snr: float) -> str:
    return "inf" if math.isinf(snr) else f"{snr:g}"


@dataclass(frozen=True)
class NetworkConfig:
    widths: tuple[int, ...] = (16, 32, 64)
    kernel: int = 9
    pool: int = 4
    hidden: int = 512


@dataclass(frozen=True)
class LearningCurveConfig:
    sizes: tuple[int, ...] = (1000, 4000, 16000)
    snr: float = 10.0
    max_iters: int | None = None  # None: the training budget of ``train``


@dataclass(frozen=True)
class ExperimentConfig:
    basis_path: str | None = None  # None: the bundled fixture basis
    train_size: int = 20_000
    test_size: int = 2_000
    snr_list: tuple[float, ...] = (math.inf, 10.0)
    train_fraction: float = 0.8
    seed: int = 0
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    fit: FitOptions = field(default_factory=FitOptions)
    learning_curve: LearningCurveConfig = field(default_factory=LearningCurveConfig)

    @classmethod
    def from_json(cls, doc: dict) -> "ExperimentConfig":
        try:
            jsonschema.validate(doc, CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"config error at {where}: {exc.message}") from None
        d = dict(doc)
        if "snr_list" in d:
            d["snr_list"] = tuple(_snr_value(v) for v in d["snr_list"])
        if "network" in d:
            net = dict(d["network"])
            if "widths" in net:
                net["widths"] = tuple(net["widths"])
            d["network"] = NetworkConfig(**net)
        try:
            if "train" in d:
                d["train"] = TrainConfig(**d["train"])
            if "fit" in d:
                fo = dict(d["fit"])
                if "continuation_hz" in fo:
                    fo["continuation_hz"] = tuple(fo["continuation_hz"])
                d["fit"] = FitOptions(**fo)
            if "learning_curve" in d:
                lc = dict(d["learning_curve"])
                if "sizes" in lc:
                    lc["sizes"] = tuple(lc["sizes"])
                if "snr" in lc:
                    lc["snr"] = _snr_value(lc["snr"])
                d["learning_curve"] = LearningCurveConfig(**lc)
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config error: {exc}") from None

    def to_json(self) -> dict:
        d = asdict(self)
        d["snr_list"] = [_snr_json(s) for s in self.snr_list]
        d["learning_curve"]["snr"] = _snr_json(self.learning_curve.snr)
        for key in ("network", "fit", "learning_curve"):
            for k, v in d[key].items():
                if isinstance(v, tuple):
                    d[key][k] = list(v)
        return d

    def config_hash(self) -> str:
        return _sha(_canon(self.to_json()))

    def __post_init__(self):
        if not self.snr_list:
            raise ConfigError("snr_list must not be empty")
        if self.train_size < 1 or self.test_size < 1:
            raise ConfigError("dataset sizes must be >= 1")


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return ExperimentConfig.from_json(doc)


def _canon(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _file_sha(path: Path) -> str:
    return _sha(path.read_bytes())


def derive_seed(seed: int, *labels) -> int:
    """Independent 64-bit seed for a named sub-stream of the global seed."""
    digest = hashlib.sha256(_canon([seed, *labels])).digest()
    return int.from_bytes(digest[:8], "little")


class Run:
    """One run directory: paths, stamps and the manifest."""

    def __init__(self, out: str | Path, cfg: ExperimentConfig, workers: int = 1):
        self.root = Path(out)
        self.cfg = cfg
        self.workers = max(1, int(workers))
        self.root.mkdir(parents=True, exist_ok=True)
        self.log: list[str] = []

    # paths
    @property
    def basis_file(self) -> Path:
        return self.root / "basis.json"

    def dataset(self, role: str, snr: float) -> Path:
        return self.root / "data" / f"{role}_snr{snr_tag(snr)}.mrsd"

    def weights(self, snr: float) -> Path:
        return self.root / "weights" / f"cnn_snr{snr_tag(snr)}.mrsw"

    def train_curve(self, snr: float) -> Path:
        return self.root / "curves" / f"train_snr{snr_tag(snr)}.csv"

    def fits(self, snr: float) -> Path:
        return self.root / "fits" / f"fit_snr{snr_tag(snr)}.csv"

    def table(self, snr: float) -> Path:
        return self.root / "reports" / f"table_snr{snr_tag(snr)}.csv"

    def scatter(self, snr: float) -> Path:
        return self.root / "reports" / f"scatter_snr{snr_tag(snr)}.csv"

    @property
    def learning_curve_file(self) -> Path:
        return self.root / "reports" / "learning_curve.csv"

    # manifest
    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.json"

    def read_manifest(self) -> dict:
        if self.manifest_path.exists():
            return json.loads(self.manifest_path.read_text(encoding="utf-8"))
        return {}

    def write_manifest(self, **updates) -> None:
        man = self.read_manifest()
        man.update({"tool": "mrsquant", "version": __version__,
                    "config_hash": self.cfg.config_hash(), "config": self.cfg.to_json()})
        if self.basis_file.exists():
            man["basis_fingerprint"] = _file_sha(self.basis_file)
        for key, val in updates.items():
            if isinstance(val, dict):
                man.setdefault(key, {}).update(val)
            else:
                man[key] = val
        self.manifest_path.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")
        (self.root / "config.schema.json").write_text(
            json.dumps(CONFIG_SCHEMA, indent=2) + "\n", encoding="utf-8")

    # stamps
    def _stamp_path(self, unit: str) -> Path:
        return self.root / ".stamps" / f"{unit}.json"

    def up_to_date(self, unit: str, key: str, outputs: list[Path]) -> bool:
        sp = self._stamp_path(unit)
        if not sp.exists() or not all(p.exists() for p in outputs):
            return False
        stamp = json.loads(sp.read_text())
        if stamp.get("key") != key:
            return False
        return all(stamp["outputs"].get(self.rel(p)) == _file_sha(p) for p in outputs)

    def record(self, unit: str, key: str, outputs: list[Path], seconds: float) -> None:
        sp = self._stamp_path(unit)
        sp.parent.mkdir(exist_ok=True)
        hashes = {self.rel(p): _file_sha(p) for p in outputs}
        sp.write_text(json.dumps({"key": key, "outputs": hashes}, sort_keys=True))
        self.write_manifest(stages={unit: {"seconds": round(seconds, 3)}}, outputs=hashes)

    def rel(self, p: Path) -> str:
        return p.relative_to(self.root).as_posix()

    def stage(self, unit: str, deps: dict, outputs: list[Path], body) -> bool:
        """Run ``body()`` unless the stamp for ``unit`` matches; returns True if it ran."""
        key = _sha(_canon({"unit": unit, "version": __version__, "deps": deps}))
        if self.up_to_date(unit, key, outputs):
            self.log.append(f"{unit}: up to date")
            return False
        for p in outputs:
            p.parent.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        body()
        self.record(unit, key, outputs, time.perf_counter() - t0)
        self.log.append(f"{unit}: done")
        return True

    # upstream access
    def require(self, path: Path, what: str) -> Path:
        if not path.exists():
            raise MissingArtifactError(f"missing {what}: {path} (run the upstream stage first)")
        return path

    def basis(self):
        raw = self.require(self.basis_file, "basis").read_bytes()
        return basis_from_bytes(raw)

    def load_dataset(self, role: str, snr: float, basis) -> Dataset:
        ds = load(self.require(self.dataset(role, snr), f"{role} dataset"))
        if ds.basis_fingerprint != basis.fingerprint:
            raise FingerprintMismatchError(
                f"{self.dataset(role, snr)} was generated from basis {ds.basis_fingerprint[:12]}, "
                f"run basis is {basis.fingerprint[:12]}")
        return ds


def output_names(basis) -> list[str]:
    return basis.names + [basis.background.name]


def network_spec(cfg: ExperimentConfig, basis):
    n = cfg.network
    return default_spec(basis.n_points, basis.n_metabolites + 1, widths=n.widths,
                        kernel=n.kernel, pool=n.pool, hidden=n.hidden)


def _write_csv(path: Path, header: list[str], rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


def _fmt(x: float) -> str:
    return repr(float(x))


# stages

def cmd_gen_basis(run: Run) -> None:
    cfg = run.cfg
    raw = Path(cfg.basis_path).read_bytes() if cfg.basis_path else fixture_bytes()
    basis_from_bytes(raw)  # validate before writing

    def body():
        run.basis_file.write_bytes(raw)

    run.write_manifest()
    run.stage("gen-basis", {"basis": _sha(raw)}, [run.basis_file], body)


def cmd_gen_data(run: Run) -> None:
    cfg = run.cfg
    basis = run.basis()
    run.write_manifest()
    for snr in cfg.snr_list:
        for role, count in (("train", cfg.train_size), ("test", cfg.test_size)):
            gen = GenConfig(count=count, snr=snr, seed=derive_seed(cfg.seed, role, snr_tag(snr)))
            path = run.dataset(role, snr)

            def body(gen=gen, path=path):
                ds = generate(basis, gen, workers=run.workers)
                ds.extra = {"role": role}
                save(ds, path)

            run.stage(f"gen-data_{role}_snr{snr_tag(snr)}",
                      {"basis": basis.fingerprint, "gen": gen.to_json()}, [path], body)


def _train_cfg(cfg: ExperimentConfig, snr: float) -> TrainConfig:
    return replace(cfg.train, seed=derive_seed(cfg.seed, "train", snr_tag(snr), cfg.train.seed))


def cmd_train(run: Run, progress=None) -> None:
    cfg = run.cfg
    basis = run.basis()
    spec = network_spec(cfg, basis)
    run.write_manifest()
    for snr in cfg.snr_list:
        data_path = run.dataset("train", snr)
        tcfg = _train_cfg(cfg, snr)
        out_w, out_c = run.weights(snr), run.train_curve(snr)

        def body(snr=snr, tcfg=tcfg, out_w=out_w, out_c=out_c):
            ds = run.load_dataset("train", snr, basis)
            tr, va = split(ds, cfg.train_fraction)
            net, curve = train(spec, tr, va, tcfg, progress)
            save_weights(net, out_w)
            _write_csv(out_c, ["iteration", "train_loss", "val_loss"],
                       [(i, _fmt(a), _fmt(b)) for i, a, b in curve.rows()])

        deps = {"data": _file_sha(run.require(data_path, "train dataset")),
                "train": asdict(tcfg), "spec": spec.to_json(),
                "train_fraction": cfg.train_fraction}
        run.stage(f"train_snr{snr_tag(snr)}", deps, [out_w, out_c], body)


def cmd_fit(run: Run) -> None:
    cfg = run.cfg
    basis = run.basis()
    names = output_names(basis)
    run.write_manifest()
    for snr in cfg.snr_list:
        data_path = run.dataset("test", snr)
        out = run.fits(snr)

        def body(snr=snr, out=out):
            ds = run.load_dataset("test", snr, basis)
            results = fit_many(basis, ds.signals.astype(np.complex128), cfg.fit, run.workers)
            rows = [[i, *(_fmt(v) for v in r.params.linear()), _fmt(r.residual_norm),
                     r.iterations, int(r.converged), r.termination]
                    for i, r in enumerate(results)]
            _write_csv(out, ["sample", *names, "residual_norm", "iterations", "converged",
                             "termination"], rows)

        deps = {"data": _file_sha(run.require(data_path, "test dataset")),
                "fit": asdict(cfg.fit)}
        run.stage(f"fit_snr{snr_tag(snr)}", deps, [out], body)


def read_fit_estimates(path: Path, names: list[str]) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([[float(r[n]) for n in names] for r in rows])


def cmd_eval(run: Run) -> dict[float, EvalReport]:
    cfg = run.cfg
    basis = run.basis()
    names = output_names(basis)
    run.write_manifest()
    reports = {}
    for snr in cfg.snr_list:
        test_path = run.dataset("test", snr)
        w_path = run.require(run.weights(snr), "network weights")
        f_path = run.require(run.fits(snr), "fit results")
        out_t, out_s = run.table(snr), run.scatter(snr)

        def body(snr=snr, out_t=out_t, out_s=out_s, w_path=w_path, f_path=f_path):
            ds = run.load_dataset("test", snr, basis)
            truth = ds.labels.astype(np.float64)
            cnn = predict(load_weights(w_path), ds.signals).astype(np.float64)
            fitted = np.maximum(read_fit_estimates(f_path, names), 0.0)
            if fitted.shape != truth.shape:
                raise HarnessError(f"{f_path} holds {len(fitted)} fits for {len(truth)} samples")
            report = EvalReport.from_estimates(names, truth, {"CNN": cnn, "VARPRO-LM": fitted})
            out_t.write_text(report.to_csv(), encoding="utf-8")
            rows = [(method, name, i, _fmt(truth[i, k]), _fmt(est[i, k]))
                    for method, est in (("CNN", cnn), ("VARPRO-LM", fitted))
                    for k, name in enumerate(names) for i in range(len(truth))]
            _write_csv(out_s, ["method", "metabolite", "sample", "truth", "estimate"], rows)

        deps = {"data": _file_sha(run.require(test_path, "test dataset")),
                "weights": _file_sha(w_path), "fits": _file_sha(f_path)}
        run.stage(f"eval_snr{snr_tag(snr)}", deps, [out_t, out_s], body)
        reports[snr] = EvalReport.from_csv(out_t.read_text(encoding="utf-8"))
    return reports


@dataclass(frozen=True)
class CurvePoint:
    size: int
    train_loss: float
    val_loss: float
    status: str = "ok"

    @property
    def gap(self) -> float:
        return self.val_loss - self.train_loss


def check_sizes(sizes) -> tuple[int, ...]:
    sizes = tuple(int(s) for s in sizes)
    if not sizes:
        raise ConfigError("learning-curve sizes must not be empty")
    if len(set(sizes)) != len(sizes):
        raise ConfigError(f"duplicate learning-curve size in {list(sizes)}")
    if list(sizes) != sorted(sizes) or sizes[0] < 1:
        raise ConfigError(f"learning-curve sizes must be positive and ascending: {list(sizes)}")
    return sizes


def gap_non_increasing(points: list[CurvePoint], tol: float = 0.1) -> bool:
    """True if every later gap is at most the first gap times ``1 + tol``."""
    ok = [p for p in points if p.status == "ok"]
    if len(ok) < 2:
        return True
    g0 = ok[0].gap
    return all(p.gap <= g0 + tol * abs(g0) for p in ok[1:])


def cmd_learning_curve(run: Run, sizes=None, progress=None) -> list[CurvePoint]:
    """Train one network per size on nested prefixes of the training partition.

    The losses reported per point are the final network's mean squared error
    on (up to ``train.eval_max`` samples of) its own training subset and on
    the shared validation partition.
    """
    cfg = run.cfg
    lc = cfg.learning_curve
    sizes = check_sizes(sizes if sizes is not None else lc.sizes)
    basis = run.basis()
    spec = network_spec(cfg, basis)
    snr = lc.snr
    data_path = run.require(run.dataset("train", snr), "train dataset")
    tcfg = _train_cfg(cfg, snr)
    if lc.max_iters is not None:
        tcfg = replace(tcfg, max_iters=lc.max_iters)
    out = run.learning_curve_file
    run.write_manifest()
    points: list[CurvePoint] = []

    def body():
        ds = run.load_dataset("train", snr, basis)
        tr, va = split(ds, cfg.train_fraction)
        if sizes[-1] > len(tr):
            raise ConfigError(f"largest learning-curve size {sizes[-1]} exceeds the "
                              f"{len(tr)}-sample training partition")
        xv, yv = as_arrays(va)
        xv, yv = xv[:tcfg.eval_max], yv[:tcfg.eval_max]
        for n in sizes:
            xt, yt = as_arrays(tr.subset(0, n))
            try:
                net, _ = train(spec, (xt, yt), (xv, yv), tcfg, progress)
            except TrainingDivergedError:
                points.append(CurvePoint(n, math.nan, math.nan, "diverged"))
                continue
            k = tcfg.eval_max or n
            points.append(CurvePoint(n, evaluate_loss(net, xt[:k], yt[:k]),
                                     evaluate_loss(net, xv, yv)))
        _write_csv(out, ["size", "train_loss", "val_loss", "gap", "status"],
                   [(p.size, _fmt(p.train_loss), _fmt(p.val_loss), _fmt(p.gap), p.status)
                    for p in points])

    deps = {"data": _file_sha(data_path), "train": asdict(tcfg), "spec": spec.to_json(),
            "sizes": list(sizes), "train_fraction": cfg.train_fraction}
    run.stage("learning-curve", deps, [out], body)
    return read_learning_curve(out)


def read_learning_curve(path: Path) -> list[CurvePoint]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [CurvePoint(int(r["size"]), float(r["train_loss"]), float(r["val_loss"]),
                           r["status"]) for r in csv.DictReader(fh)]


def cmd_run(run: Run, progress=None) -> dict[float, EvalReport]:
    """The whole pipeline: basis, data, training, fitting and evaluation."""
    cmd_gen_basis(run)
    cmd_gen_data(run)
    cmd_train(run, progress)
    cmd_fit(run)
    return cmd_eval(run)
