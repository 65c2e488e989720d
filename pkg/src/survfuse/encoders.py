"""Patient-level representations for the two modalities.

Image side: per-patient k-means groups patch features into C phenotypes; a
weight-shared affine map + ReLU is applied to every patch and the results are
averaged per phenotype.  Gene side: genes are grouped into C co-expression
modules by k-means on z-scored profiles and each module gets its own small MLP.

Patch rows inside a phenotype are put into a canonical (lexicographic) order
when the layout is built, so phenotype vectors do not depend on the order in
which patches were supplied.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .layers import init_linear, init_mlp, mlp
from .survival import SurvivalRecord

log = logging.getLogger(__name__)


# ----------------------------------------------------------------- data types


@dataclass
class PatchFeatureSet:
    patient_id: str
    patches: np.ndarray  # (m, d)

    def __post_init__(self):
        self.patches = np.atleast_2d(np.asarray(self.patches, dtype=np.float64))
        if self.patches.shape[0] < 1:
            raise ValueError(f"{self.patient_id}: a patch set needs at least one patch")

    @property
    def dim(self) -> int:
        return self.patches.shape[1]

    def __len__(self) -> int:
        return self.patches.shape[0]


@dataclass
class FeatureBag:
    phenotypes: Tensor  # (C, d_k)
    counts: np.ndarray  # (C,) patches per phenotype


@dataclass
class GeneModuleSet:
    modules: Tensor  # (C, d_k)
    membership: np.ndarray  # module id per gene


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    history: list[float]
    n_iter: int


@dataclass
class GeneClustering:
    membership: np.ndarray
    warnings: list[str] = field(default_factory=list)

    def modules(self) -> list[np.ndarray]:
        """Member gene indices per module, ascending."""
        k = int(self.membership.max()) + 1
        return [np.flatnonzero(self.membership == j) for j in range(k)]


# ----------------------------------------------------------------- k-means


def _sq_dist(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _inertia(points, labels, centroids) -> float:
    diff = points - centroids[labels]
    return float(np.einsum("ij,ij->", diff, diff))


def _kmeanspp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centroids = [points[rng.integers(n)]]
    d2 = _sq_dist(points, np.array(centroids))[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with a centroid
            idx = rng.integers(n)
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids.append(points[idx])
        d2 = np.minimum(d2, _sq_dist(points, points[idx][None])[:, 0])
    return np.array(centroids, dtype=np.float64)


def _repair_empty(points, labels, centroids, k) -> None:
    """Move the point farthest from its centroid into each empty cluster."""
    for _ in range(k):
        sizes = np.bincount(labels, minlength=k)
        empty = np.flatnonzero(sizes == 0)
        if not len(empty):
            return
        dist = np.einsum("ij,ij->i", points - centroids[labels], points - centroids[labels])
        # never strip a singleton cluster
        dist[sizes[labels] <= 1] = -1.0
        far = int(np.argmax(dist))
        labels[far] = empty[0]
        centroids[empty[0]] = points[far]


def _lloyd(points: np.ndarray, C: int, rng: np.random.Generator, max_iter: int) -> KMeansResult:
    centroids = _kmeanspp(points, C, rng)
    labels = np.argmin(_sq_dist(points, centroids), axis=1)
    _repair_empty(points, labels, centroids, C)
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        for j in range(C):
            centroids[j] = points[labels == j].mean(axis=0)
        history.append(_inertia(points, labels, centroids))
        new = np.argmin(_sq_dist(points, centroids), axis=1)
        _repair_empty(points, new, centroids, C)
        if np.array_equal(new, labels):
            break
        labels = new
    return KMeansResult(labels, centroids, history[-1], history, it)


def kmeans(points, C: int, seed: int = 0, max_iter: int = 100, n_init: int = 10) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding; every cluster ends non-empty.

    ``n_init`` seeded restarts are run and the lowest-inertia one is kept
    (the first wins ties).
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = len(points)
    if C < 1:
        raise ValueError("C must be at least 1")
    if n < C:
        raise ValueError(f"cannot form {C} clusters from {n} points")
    if n_init < 1:
        raise ValueError("n_init must be at least 1")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        res = _lloyd(points, C, rng, max_iter)
        if best is None or res.inertia < best.inertia:
            best = res
    return best


# ----------------------------------------------------------------- image encoder


def init_fcn(rng: np.random.Generator, d: int, d_k: int) -> dict:
    return init_linear(rng, d, d_k)


@dataclass
class PhenotypeLayout:
    """All patches of a batch of patients in canonical order.

    Rows are grouped by patient, then phenotype; inside a phenotype they are
    sorted lexicographically.  Segment ``p * C + c`` holds phenotype ``c`` of
    patient ``p``.
    """

    patches: np.ndarray  # (M, d)
    starts: np.ndarray
    counts: np.ndarray
    n_patients: int
    C: int


def canonical_order(patches: np.ndarray) -> np.ndarray:
    return np.lexsort(patches.T[::-1])


def build_layout(
    patch_sets: list[PatchFeatureSet], assignments: list[np.ndarray], C: int
) -> PhenotypeLayout:
    blocks, counts = [], []
    for ps, lab in zip(patch_sets, assignments):
        lab = np.asarray(lab)
        if lab.shape != (len(ps),):
            raise ValueError(f"{ps.patient_id}: assignment does not cover all patches")
        for c in range(C):
            rows = ps.patches[lab == c]
            if not len(rows):
                raise ValueError(f"{ps.patient_id}: phenotype {c} is empty")
            blocks.append(rows[canonical_order(rows)])
            counts.append(len(rows))
    counts = np.array(counts, dtype=np.intp)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.intp)
    return PhenotypeLayout(np.vstack(blocks), starts, counts, len(patch_sets), C)


def phenotype_features(fcn: dict, layout: PhenotypeLayout) -> Tensor:
    """(n_patients, C, d_k) phenotype vectors."""
    h = ag.relu(ag.linear(layout.patches, fcn["W"], fcn["b"]))
    pooled = ag.segment_mean(h, layout.starts, layout.counts)
    lead = pooled.shape[:-2]
    return ag.reshape(pooled, (*lead, layout.n_patients, layout.C, pooled.shape[-1]))


def encode_phenotypes(patches: PatchFeatureSet, assignment, fcn: dict) -> FeatureBag:
    assignment = np.asarray(assignment)
    C = int(assignment.max()) + 1
    layout = build_layout([patches], [assignment], C)
    P = phenotype_features(fcn, layout)
    return FeatureBag(ag.reshape(P, P.shape[1:]), layout.counts.copy())


def assign_phenotypes(patches: PatchFeatureSet, C: int, seed: int) -> np.ndarray:
    return kmeans(patches.patches, C, seed=seed).labels


# ----------------------------------------------------------------- gene encoder


def cluster_genes(expression, C: int, seed: int = 0, names=None) -> GeneClustering:
    """Group genes into ``C`` modules by k-means on z-scored across-patient profiles."""
    x = np.asarray(expression, dtype=np.float64)
    n_pat, n_genes = x.shape
    if n_pat < 2:
        raise ValueError("need at least 2 patients to z-score gene profiles")
    if n_genes < C:
        raise ValueError(f"cannot form {C} modules from {n_genes} genes")
    centered = x - x.mean(axis=0)
    sd = centered.std(axis=0)
    flat = sd == 0
    profiles = centered.copy()
    profiles[:, ~flat] /= sd[~flat]
    warnings = []
    for g in np.flatnonzero(flat):
        label = names[g] if names is not None else str(g)
        warnings.append(f"gene {label} has zero variance; clustered on its centered profile")
    membership = kmeans(profiles.T, C, seed=seed).labels
    return GeneClustering(membership, warnings)


def init_gene_mlps(rng, widths: list[int], d_k: int, hidden: int) -> list[dict]:
    return [init_mlp(rng, [w, hidden, d_k]) for w in widths]


def gather_module_inputs(expression: np.ndarray, modules: list[np.ndarray], widths) -> list[np.ndarray]:
    """Module inputs padded with zeros / truncated to each module's fixed width."""
    expression = np.atleast_2d(expression)
    out = []
    for idx, w in zip(modules, widths):
        idx = np.asarray(idx, dtype=np.intp)
        if len(idx) and (idx.min() < 0 or idx.max() >= expression.shape[1]):
            raise IndexError(f"module member index out of range for {expression.shape[1]} genes")
        vals = expression[:, np.sort(idx)[:w]]
        if vals.shape[1] < w:
            vals = np.pad(vals, ((0, 0), (0, w - vals.shape[1])))
        out.append(vals)
    return out


def module_features(mlps: list[dict], inputs: list[np.ndarray]) -> Tensor:
    """(n_patients, C, d_k) module vectors."""
    outs = [mlp(p, x, act=ag.relu) for p, x in zip(mlps, inputs)]
    return ag.stack(outs, axis=-2)


def encode_gene_modules(row, membership, mlps: list[dict]) -> GeneModuleSet:
    membership = np.asarray(membership)
    row = np.asarray(row, dtype=np.float64).reshape(1, -1)
    if membership.shape[0] != row.shape[1]:
        raise IndexError("membership does not match the expression row length")
    modules = [np.flatnonzero(membership == j) for j in range(len(mlps))]
    widths = [p["layers"][0]["W"].shape[0] for p in mlps]
    G = module_features(mlps, gather_module_inputs(row, modules, widths))
    return GeneModuleSet(ag.reshape(G, G.shape[1:]), membership)


# ----------------------------------------------------------------- synthetic cohort


@dataclass
class SynthConfig:
    patients: int = 200
    C: int = 8
    d: int = 32
    genes: int = 64
    effect_size: float = 3.0
    censoring_rate: float = 0.2
    seed: int = 0
    min_patches: int = 24
    max_patches: int = 48
    severity_scale: float = 1.0
    base_hazard: float = 1.0 / 24.0  # per month


@dataclass
class Cohort:
    patch_sets: list[PatchFeatureSet]
    expression: np.ndarray  # (patients, genes)
    gene_names: list[str]
    records: list[SurvivalRecord]
    group: np.ndarray | None = None  # latent group, synthetic cohorts only
    latent_risk: np.ndarray | None = None

    @property
    def ids(self) -> list[str]:
        return [r.patient_id for r in self.records]

    def subset(self, idx) -> "Cohort":
        idx = list(idx)
        return Cohort(
            [self.patch_sets[i] for i in idx],
            self.expression[idx],
            self.gene_names,
            [self.records[i] for i in idx],
            None if self.group is None else self.group[idx],
            None if self.latent_risk is None else self.latent_risk[idx],
        )

    def __len__(self) -> int:
        return len(self.records)


def _censoring_rate_for(times: np.ndarray, u: np.ndarray, target: float) -> float:
    """Exponential censoring rate whose realized censored fraction hits ``target``."""
    if target <= 0:
        return 0.0

    def frac(rate):
        return np.mean(-np.log(u) / rate < times)

    lo, hi = 1e-12, 1.0
    while frac(hi) < target:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if frac(mid) < target:
            lo = mid
        else:
            hi = mid
    return hi


def synth_cohort(cfg: SynthConfig) -> Cohort:
    """Two latent risk groups with continuous within-group severity.

    Latent risk is ``group + severity_scale * N(0, 1)``.  Patch means, gene
    module means and the exponential log-hazard all shift by
    ``effect_size * latent``; with ``effect_size == 0`` no modality carries any
    survival information.
    """
    if min(cfg.patients, cfg.C, cfg.d, cfg.genes) < 1:
        raise ValueError("all counts must be positive")
    if not 0 <= cfg.censoring_rate < 1:
        raise ValueError("censoring rate must lie in [0, 1)")
    if cfg.min_patches < cfg.C:
        raise ValueError("min_patches must be at least C")
    rng = np.random.default_rng(cfg.seed)
    n = cfg.patients
    group = rng.integers(0, 2, n)
    latent = group + cfg.severity_scale * rng.standard_normal(n)
    signal = cfg.effect_size * (latent - latent.mean())

    # image: shared phenotype prototypes plus a latent-aligned shift
    protos = 2.0 * rng.standard_normal((cfg.C, cfg.d))
    direction = rng.standard_normal(cfg.d)
    direction /= np.linalg.norm(direction)
    patch_sets = []
    for i in range(n):
        m = int(rng.integers(cfg.min_patches, cfg.max_patches + 1))
        which = np.concatenate([np.arange(cfg.C), rng.integers(0, cfg.C, m - cfg.C)])
        x = protos[which] + 0.5 * signal[i] * direction + rng.standard_normal((m, cfg.d))
        patch_sets.append(PatchFeatureSet(f"P{i:04d}", x))

    # genes: planted co-expression blocks, half of them latent-loaded
    block = np.arange(cfg.genes) % cfg.C
    loading = np.where(np.arange(cfg.C) % 2 == 0, 1.0, -1.0) * (np.arange(cfg.C) < max(1, cfg.C // 2))
    factors = rng.standard_normal((n, cfg.C))
    expr = (
        factors[:, block]
        + 0.5 * rng.standard_normal((n, cfg.genes))
        + 0.5 * signal[:, None] * loading[block][None, :]
    )
    names = [f"G{g:04d}" for g in range(cfg.genes)]

    hazard = cfg.base_hazard * np.exp(signal)
    t_event = rng.exponential(1.0 / hazard)
    u = rng.uniform(size=n)
    rate = _censoring_rate_for(t_event, u, cfg.censoring_rate)
    if rate == 0.0:
        times, events = t_event, np.ones(n, dtype=int)
    else:
        t_cens = -np.log(u) / rate
        events = (t_event <= t_cens).astype(int)
        times = np.minimum(t_event, t_cens)
    records = [SurvivalRecord(f"P{i:04d}", float(times[i]), int(events[i])) for i in range(n)]
    return Cohort(patch_sets, expr, names, records, group, latent)


# ----------------------------------------------------------------- file formats


def read_patch_file(path, patient_id: str | None = None) -> PatchFeatureSet:
    """Text file: first line ``d m``, then ``m`` rows of ``d`` reals."""
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ValueError(f"{path}: header must be 'd m'")
        d, m = int(header[0]), int(header[1])
        data = np.loadtxt(fh, dtype=np.float64, ndmin=2)
    if data.shape != (m, d):
        raise ValueError(f"{path}: expected {m} rows of {d} values, found {data.shape}")
    return PatchFeatureSet(patient_id or str(path), data)


def write_patch_file(path, patches: PatchFeatureSet) -> None:
    m, d = patches.patches.shape
    with open(path, "w") as fh:
        fh.write(f"{d} {m}\n")
        np.savetxt(fh, patches.patches, fmt="%.17g")


def read_expression(path, delimiter: str = "\t") -> tuple[list[str], list[str], np.ndarray]:
    """Returns (patient ids, gene names, matrix)."""
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split(delimiter)
        ids, rows = [], []
        for line in fh:
            if not line.strip():
                continue
            parts = line.rstrip("\n").split(delimiter)
            ids.append(parts[0])
            rows.append([float(v) for v in parts[1:]])
    genes = header[1:]
    mat = np.array(rows, dtype=np.float64).reshape(len(ids), len(genes))
    return ids, genes, mat


def write_expression(path, ids, genes, matrix, delimiter: str = "\t") -> None:
    with open(path, "w") as fh:
        fh.write(delimiter.join(["patient_id", *genes]) + "\n")
        for pid, row in zip(ids, matrix):
            fh.write(delimiter.join([pid, *(repr(float(v)) for v in row)]) + "\n")
