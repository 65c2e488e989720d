"""Cross-validated training, checkpoints, reports and KM plot output."""

from __future__ import annotations

import copy
import io
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autograd as ag
from .encoders import (
    Cohort,
    SynthConfig,
    read_expression,
    read_patch_file,
    synth_cohort,
    write_expression,
    write_patch_file,
)
from .metrics import CohortEvaluation, evaluate_cohort, log_rank
from .model import GenePrep, ModelConfig, SurvivalFusionModel
from .survival import SurvivalRecord, cox_loss

log = logging.getLogger(__name__)

POOL_RATIO_PRESETS = {"brca": 0.5, "luad": 0.9}


@dataclass
class RunConfig:
    seed: int = 0
    C: int = 8
    d: int = 32
    d_k: int = 16
    d_model: int | None = None
    heads: int = 4
    depth: int = 2
    pool_heads: int = 2
    pool_ratio: float = 0.5
    head_hidden: tuple[int, int] = (64, 32)
    gene_hidden: int = 32
    use_sigmoid: bool = True
    renormalize_pool: bool = False
    lr: float = 1e-4
    weight_decay: float = 5e-4
    decoupled_weight_decay: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 15
    max_epochs: int = 300
    folds: int = 5
    val_fraction: float = 0.25
    tie_score: float = 0.0
    data_dir: str | None = None
    out_dir: str | None = None

    def __post_init__(self):
        self.head_hidden = tuple(self.head_hidden)
        for name in ("C", "d", "d_k", "heads", "depth", "pool_heads", "max_epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.pool_ratio <= 1:
            raise ValueError("pool_ratio must lie in (0, 1]")
        if self.folds < 2:
            raise ValueError("need at least 2 folds")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            C=self.C,
            d=self.d,
            d_k=self.d_k,
            d_model=self.d_model,
            heads=self.heads,
            depth=self.depth,
            pool_heads=self.pool_heads,
            pool_ratio=self.pool_ratio,
            head_hidden=self.head_hidden,
            gene_hidden=self.gene_hidden,
            use_sigmoid=self.use_sigmoid,
            renormalize_pool=self.renormalize_pool,
        )

    def to_dict(self, paths: bool = True) -> dict:
        d = asdict(self)
        d["head_hidden"] = list(self.head_hidden)
        if not paths:
            # run snapshots must not depend on where the run was written
            del d["data_dir"], d["out_dir"]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# ----------------------------------------------------------------- dataset on disk


def write_dataset(cohort: Cohort, directory) -> Path:
    """``manifest.tsv`` + ``expression.tsv`` + one patch file per patient."""
    directory = Path(directory)
    (directory / "patches").mkdir(parents=True, exist_ok=True)
    with open(directory / "manifest.tsv", "w") as fh:
        fh.write("patient_id\tpatch_file\ttime\tevent\n")
        for ps, rec in zip(cohort.patch_sets, cohort.records):
            rel = f"patches/{ps.patient_id}.txt"
            write_patch_file(directory / rel, ps)
            fh.write(f"{rec.patient_id}\t{rel}\t{rec.time!r}\t{rec.event}\n")
    write_expression(directory / "expression.tsv", cohort.ids, cohort.gene_names, cohort.expression)
    return directory


def read_dataset(directory) -> tuple[Cohort, list[str]]:
    """Load a dataset directory; patients missing a modality are dropped and listed."""
    directory = Path(directory)
    expr_ids, genes, expr = read_expression(directory / "expression.tsv")
    expr_row = {pid: i for i, pid in enumerate(expr_ids)}
    patch_sets, records, rows, excluded = [], [], [], []
    seen = set()
    with open(directory / "manifest.tsv") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header[:4] != ["patient_id", "patch_file", "time", "event"]:
            raise ValueError(f"{directory}/manifest.tsv: unexpected header {header}")
        for line in fh:
            if not line.strip():
                continue
            pid, rel, t, e = line.rstrip("\n").split("\t")[:4]
            seen.add(pid)
            path = directory / rel
            if pid not in expr_row or not rel or not path.exists():
                excluded.append(pid)
                continue
            patch_sets.append(read_patch_file(path, pid))
            records.append(SurvivalRecord(pid, float(t), int(e)))
            rows.append(expr_row[pid])
    excluded.extend(pid for pid in expr_ids if pid not in seen)
    for pid in excluded:
        log.warning("patient %s lacks a modality and is excluded", pid)
    return Cohort(patch_sets, expr[rows], genes, records), excluded


# ----------------------------------------------------------------- checkpoints

_MAGIC = "SURVFUSE-CHECKPOINT 1"


@dataclass
class Checkpoint:
    config: RunConfig
    params: dict[str, np.ndarray]  # dotted name -> array
    gene_mean: np.ndarray
    gene_scale: np.ndarray
    membership: np.ndarray
    epoch: int
    best_val_loss: float
    model_seed: int = 0

    @classmethod
    def from_model(cls, model: SurvivalFusionModel, config: RunConfig, epoch: int, best_val_loss: float) -> "Checkpoint":
        return cls(
            config,
            {name: t.data.copy() for name, t in model.named_parameters()},
            model.gene_prep.mean.copy(),
            model.gene_prep.scale.copy(),
            model.gene_prep.membership.copy(),
            epoch,
            best_val_loss,
            model.seed,
        )

    def to_model(self) -> SurvivalFusionModel:
        cfg = self.config.model_config()
        widths = [int(np.sum(self.membership == j)) for j in range(cfg.C)]
        prep = GenePrep(self.gene_mean.copy(), self.gene_scale.copy(), self.membership.copy(), widths)
        model = SurvivalFusionModel(cfg, prep, seed=self.model_seed)
        named = dict(model.named_parameters())
        if set(named) != set(self.params):
            raise ValueError("checkpoint parameters do not match the configured model")
        for name, t in named.items():
            if t.shape != self.params[name].shape:
                raise ValueError(f"{name}: checkpoint shape {self.params[name].shape}, model {t.shape}")
            t.data[...] = self.params[name]
        return model

    def save(self, path) -> None:
        arrays = [(f"param.{k}", v) for k, v in self.params.items()]
        arrays += [("state.gene_mean", self.gene_mean), ("state.gene_scale", self.gene_scale)]
        meta = {
            "epoch": self.epoch,
            "best_val_loss": self.best_val_loss,
            "model_seed": self.model_seed,
            "membership": [int(v) for v in self.membership],
        }
        head = io.StringIO()
        head.write(_MAGIC + "\n")
        head.write("config " + json.dumps(self.config.to_dict(paths=False), sort_keys=True) + "\n")
        head.write("meta " + json.dumps(meta, sort_keys=True) + "\n")
        for name, arr in arrays:
            head.write(f"tensor {name} {','.join(map(str, arr.shape)) or '-'}\n")
        head.write("end\n")
        with open(path, "wb") as fh:
            fh.write(head.getvalue().encode())
            for _, arr in arrays:
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as fh:
            if fh.readline().decode().rstrip("\n") != _MAGIC:
                raise ValueError(f"{path}: not a checkpoint")
            config = meta = None
            specs = []
            while True:
                line = fh.readline().decode().rstrip("\n")
                if line == "end":
                    break
                if not line:
                    raise ValueError(f"{path}: truncated header")
                kind, rest = line.split(" ", 1)
                if kind == "config":
                    config = RunConfig.from_dict(json.loads(rest))
                elif kind == "meta":
                    meta = json.loads(rest)
                elif kind == "tensor":
                    name, shape = rest.rsplit(" ", 1)
                    specs.append((name, () if shape == "-" else tuple(int(s) for s in shape.split(","))))
            blob = fh.read()
        arrays, offset = {}, 0
        for name, shape in specs:
            count = int(np.prod(shape)) if shape else 1
            arrays[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
            offset += 8 * count
        if offset != len(blob):
            raise ValueError(f"{path}: payload size does not match header")
        params = {k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")}
        return cls(
            config,
            params,
            arrays["state.gene_mean"],
            arrays["state.gene_scale"],
            np.array(meta["membership"], dtype=np.int64),
            int(meta["epoch"]),
            float(meta["best_val_loss"]),
            int(meta.get("model_seed", 0)),
        )


# ----------------------------------------------------------------- training


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    model: SurvivalFusionModel
    epochs_trained: int
    train_loss: list[float]
    val_loss: list[float]


@dataclass
class EarlyStopping:
    """Stop once ``patience`` consecutive epochs fail to beat the best loss."""

    patience: int
    best_loss: float = math.inf
    best_epoch: int = 0
    stale: int = 0

    def update(self, epoch: int, loss: float) -> tuple[bool, bool]:
        """Returns ``(improved, stop)``."""
        if loss < self.best_loss:
            self.best_loss, self.best_epoch, self.stale = loss, epoch, 0
            return True, False
        self.stale += 1
        return False, self.stale >= self.patience


def build_model(config: RunConfig, train: Cohort, seed: int) -> SurvivalFusionModel:
    prep = GenePrep.fit(train.expression, config.C, seed, train.gene_names)
    for w in prep.warnings:
        log.warning(w)
    return SurvivalFusionModel(config.model_config(), prep, seed=seed)


def train_fold(config: RunConfig, train: Cohort, val: Cohort, seed: int | None = None) -> TrainResult:
    """Full-cohort Cox loss per epoch, one Adam step, early stopping on validation loss."""
    if set(train.ids) & set(val.ids):
        raise ValueError("training and validation sets overlap")
    if not any(r.event for r in train.records):
        raise ValueError(
            f"training fold of {len(train)} patients has no observed events; "
            "the partial likelihood is empty and nothing can be learned"
        )
    seed = config.seed if seed is None else seed
    model = build_model(config, train, seed)
    b_train, b_val = model.prepare(train), model.prepare(val)
    params = model.parameters()
    opt = ag.AdamState(
        lr=config.lr,
        weight_decay=config.weight_decay,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.eps,
        decoupled=config.decoupled_weight_decay,
    )
    val_has_events = any(r.event for r in val.records)
    stopper = EarlyStopping(config.patience)
    best_state = None
    train_hist, val_hist = [], []
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        with ag.Tape() as tape:
            loss = cox_loss(model.forward(b_train).R, train.records)
        ag.zero_grad(params)
        ag.backward(tape, loss)
        ag.adam_step(opt, params, [p.grad for p in params])
        train_hist.append(loss.item())
        if val_has_events:
            vloss = cox_loss(model.risks(b_val), val.records).item()
        else:
            vloss = train_hist[-1]
        val_hist.append(vloss)
        improved, stop = stopper.update(epoch, vloss)
        if improved:
            best_state = [p.data.copy() for p in params]
        if stop:
            break
    for p, saved in zip(params, best_state):
        p.data[...] = saved
    ckpt = Checkpoint.from_model(model, config, stopper.best_epoch, stopper.best_loss)
    return TrainResult(ckpt, model, epoch, train_hist, val_hist)


# ----------------------------------------------------------------- cross-validation


def fold_assignment(n: int, folds: int, seed: int) -> np.ndarray:
    """Fold id per patient: a seeded permutation cut into near-equal chunks."""
    if n < folds:
        raise ValueError(f"cannot split {n} patients into {folds} folds")
    order = np.random.default_rng(seed).permutation(n)
    fold = np.empty(n, dtype=np.int64)
    for f, chunk in enumerate(np.array_split(order, folds)):
        fold[chunk] = f
    return fold


def inner_split(idx: np.ndarray, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    idx = np.sort(idx)
    perm = np.random.default_rng(seed).permutation(len(idx))
    n_val = max(1, int(round(val_fraction * len(idx))))
    return np.sort(idx[perm[n_val:]]), np.sort(idx[perm[:n_val]])


@dataclass
class FoldReport:
    fold_id: int
    c_index: float
    pair_count: int
    logrank_p: float | None
    logrank_stat: float | None
    epochs_trained: int
    best_epoch: int
    best_val_loss: float
    n_train: int
    n_val: int
    n_test: int
    predictions: list[dict] = field(default_factory=list)


@dataclass
class CVReport:
    folds: list[FoldReport]
    c_index_mean: float
    c_index_std: float
    pooled_logrank_p: float | None
    pooled_logrank_stat: float | None
    excluded: list[str]
    config: dict

    @property
    def c_index_summary(self) -> str:
        return format_mean_std(self.c_index_mean, self.c_index_std)

    def to_dict(self) -> dict:
        return {
            "aggregate": {
                "c_index_mean": self.c_index_mean,
                "c_index_std": self.c_index_std,
                "c_index_summary": self.c_index_summary,
                "pooled_logrank_p": self.pooled_logrank_p,
                "pooled_logrank_stat": self.pooled_logrank_stat,
                "n_folds": len(self.folds),
            },
            "folds": [asdict(f) for f in self.folds],
            "excluded": list(self.excluded),
            "config": self.config,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def format_mean_std(mean: float, std: float) -> str:
    return f"{mean:.3f}±({std:.3f})"


def predictions_table(ids, risks, records, high) -> list[dict]:
    return [
        {"patient_id": pid, "risk": float(r), "time": rec.time, "event": rec.event, "group": "high" if h else "low"}
        for pid, r, rec, h in zip(ids, risks, records, high)
    ]


def _run_fold(config: RunConfig, cohort: Cohort, fold: np.ndarray, f: int, out_dir: Path | None):
    test_idx = np.flatnonzero(fold == f)
    rest = np.flatnonzero(fold != f)
    tr_idx, va_idx = inner_split(rest, config.val_fraction, config.seed * 7919 + f)
    train, val, test = cohort.subset(tr_idx), cohort.subset(va_idx), cohort.subset(test_idx)
    result = train_fold(config, train, val, seed=config.seed * 7919 + f)
    risks = result.model.risks(result.model.prepare(test))
    ev = evaluate_cohort(risks, test.records, config.tie_score)
    if out_dir is not None:
        result.checkpoint.save(out_dir / f"fold{f}.ckpt")
    report = FoldReport(
        fold_id=f,
        c_index=float(ev.c_index),
        pair_count=ev.pair_count,
        logrank_p=None if ev.logrank is None else ev.logrank.p_value,
        logrank_stat=None if ev.logrank is None else ev.logrank.statistic,
        epochs_trained=result.epochs_trained,
        best_epoch=result.checkpoint.epoch,
        best_val_loss=result.checkpoint.best_val_loss,
        n_train=len(train),
        n_val=len(val),
        n_test=len(test),
        predictions=predictions_table(test.ids, risks, test.records, ev.high_risk),
    )
    return report


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("SURVFUSE_THREADS", "1")))
    except ValueError:
        return 1


def run_cv(config: RunConfig, cohort: Cohort, out_dir=None, excluded=()) -> CVReport:
    """Seeded k-fold CV.  Each fold trains on 75/25 train/validation of the non-test part.

    Patients are stratified into risk groups by the median of their own fold's
    test predictions; the pooled log-rank test runs on the union of those labels.
    """
    fold = fold_assignment(len(cohort), config.folds, config.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    jobs = range(config.folds)
    workers = min(_workers(), config.folds)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            reports = list(pool.map(lambda f: _run_fold(config, cohort, fold, f, out), jobs))
    else:
        reports = [_run_fold(config, cohort, fold, f, out) for f in jobs]
    cs = np.array([r.c_index for r in reports])
    pooled = [p for r in reports for p in r.predictions]
    low = [SurvivalRecord(p["patient_id"], p["time"], p["event"]) for p in pooled if p["group"] == "low"]
    high = [SurvivalRecord(p["patient_id"], p["time"], p["event"]) for p in pooled if p["group"] == "high"]
    lr = log_rank(low, high) if low and high else None
    report = CVReport(
        reports,
        float(cs.mean()),
        float(cs.std(ddof=1)) if len(cs) > 1 else 0.0,
        None if lr is None else lr.p_value,
        None if lr is None else lr.statistic,
        list(excluded),
        config.to_dict(paths=False),
    )
    if out is not None:
        (out / "report.json").write_text(report.dumps(), encoding="utf-8")
    return report


def evaluate_checkpoint(ckpt: Checkpoint, cohort: Cohort) -> tuple[CohortEvaluation, list[dict]]:
    model = ckpt.to_model()
    risks = model.risks(model.prepare(cohort))
    ev = evaluate_cohort(risks, cohort.records, ckpt.config.tie_score)
    return ev, predictions_table(cohort.ids, risks, cohort.records, ev.high_risk)


def eval_report(ev: CohortEvaluation, predictions: list[dict]) -> dict:
    return {
        "c_index": float(ev.c_index),
        "pair_count": ev.pair_count,
        "logrank_p": None if ev.logrank is None else ev.logrank.p_value,
        "logrank_stat": None if ev.logrank is None else ev.logrank.statistic,
        "predictions": predictions,
    }


def evaluation_from_predictions(predictions: list[dict]) -> CohortEvaluation:
    """Rebuild an evaluation (with its stored group labels) from report rows."""
    records = [SurvivalRecord(p["patient_id"], float(p["time"]), int(p["event"])) for p in predictions]
    risks = np.array([p["risk"] for p in predictions])
    high = np.array([p["group"] == "high" for p in predictions])
    return evaluate_cohort(risks, records, high_risk=high)


# ----------------------------------------------------------------- KM plot output


def format_p(p: float) -> str:
    return f"{p:.2e}"


def curve_rows(ev: CohortEvaluation) -> list[tuple[str, float, float, int]]:
    rows = []
    for name, curve in (("low", ev.km_low), ("high", ev.km_high)):
        if curve is None:
            continue
        for t, s, n in zip(curve.times, curve.survival, curve.at_risk):
            rows.append((name, float(t), float(s), int(n)))
    return rows


def curve_gap(ev: CohortEvaluation) -> float:
    """|S_low - S_high| at the median observed time."""
    if ev.km_low is None or ev.km_high is None:
        raise ValueError("curve gap needs both risk groups")
    t_med = float(np.median([r.time for r in ev.records]))
    return float(abs(ev.km_low(t_med) - ev.km_high(t_med)))


def _step_path(curve, t_max, x, y) -> str:
    pts = [(0.0, 1.0)]
    s = 1.0
    for t, s_new in zip(curve.times, curve.survival):
        pts.append((t, s))
        pts.append((t, s_new))
        s = s_new
    pts.append((t_max, s))
    return " ".join(f"{'M' if i == 0 else 'L'}{x(a):.2f},{y(b):.2f}" for i, (a, b) in enumerate(pts))


def km_svg(ev: CohortEvaluation, width: int = 480, height: int = 320) -> str:
    """Step plot: high risk in red, low risk in blue, log-rank p in the corner."""
    left, right, top, bottom = 50, 20, 20, 40
    t_max = max(r.time for r in ev.records) or 1.0

    def x(t):
        return left + (width - left - right) * t / t_max

    def y(s):
        return top + (height - top - bottom) * (1.0 - s)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{left}" y1="{y(0):.2f}" x2="{width - right}" y2="{y(0):.2f}" stroke="black"/>',
        f'<line x1="{left}" y1="{y(0):.2f}" x2="{left}" y2="{y(1):.2f}" stroke="black"/>',
        f'<text x="{width / 2:.0f}" y="{height - 8}" font-size="12" text-anchor="middle">time (months)</text>',
        f'<text x="12" y="{height / 2:.0f}" font-size="12" transform="rotate(-90 12 {height / 2:.0f})" '
        'text-anchor="middle">survival probability</text>',
    ]
    for name, curve, colour in (("low", ev.km_low, "blue"), ("high", ev.km_high, "red")):
        if curve is None:
            continue
        parts.append(
            f'<path class="km-{name}" d="{_step_path(curve, t_max, x, y)}" fill="none" stroke="{colour}" stroke-width="1.5"/>'
        )
    if ev.logrank is not None and ev.km_low is not None and ev.km_high is not None:
        parts.append(
            f'<text class="logrank" x="{width - right - 4}" y="{top + 14}" font-size="12" text-anchor="end">'
            f"log-rank p = {format_p(ev.logrank.p_value)}</text>"
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_km_plot(ev: CohortEvaluation, out_dir, stem: str = "km") -> tuple[Path, Path | None]:
    """Write ``<stem>.tsv`` (group, time, survival, at_risk) and, with two groups, ``<stem>.svg``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tsv = out_dir / f"{stem}.tsv"
    with open(tsv, "w") as fh:
        fh.write("group\ttime\tsurvival\tat_risk\n")
        for g, t, s, n in curve_rows(ev):
            fh.write(f"{g}\t{t!r}\t{s!r}\t{n}\n")
    if ev.km_low is None or ev.km_high is None:
        return tsv, None
    svg = out_dir / f"{stem}.svg"
    svg.write_text(km_svg(ev))
    return tsv, svg


def synth_to_disk(cfg: SynthConfig, directory) -> Path:
    return write_dataset(synth_cohort(cfg), directory)


def clone_config(config: RunConfig, **changes) -> RunConfig:
    d = copy.deepcopy(config.to_dict())
    d.update(changes)
    return RunConfig.from_dict(d)
