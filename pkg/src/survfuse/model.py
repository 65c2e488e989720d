"""Full fusion model: encoders -> two-stream transformer -> attention pooling -> risk head."""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .autograd import Tensor
from .encoders import (
    Cohort,
    PhenotypeLayout,
    assign_phenotypes,
    build_layout,
    cluster_genes,
    gather_module_inputs,
    init_fcn,
    init_gene_mlps,
    module_features,
    phenotype_features,
)
from .layers import flatten
from .mhap import init_mhap, mhap_forward
from .survival import RiskOutput, init_head, mlp_head
from .tsmcat import init_tsmcat, tsmcat_forward


@dataclass
class ModelConfig:
    C: int = 8
    d: int = 32
    d_k: int = 16
    d_model: int | None = None  # defaults to 2 * d_k
    heads: int = 4
    depth: int = 2
    pool_heads: int = 2
    pool_ratio: float = 0.5
    head_hidden: tuple[int, int] = (64, 32)
    gene_hidden: int = 32
    block_hidden: int | None = None  # transformer MLP width, defaults to 2 * d_model
    use_sigmoid: bool = True
    renormalize_pool: bool = False

    def __post_init__(self):
        if self.d_model is None:
            self.d_model = 2 * self.d_k
        self.head_hidden = tuple(self.head_hidden)
        for name in ("C", "d", "d_k", "d_model", "heads", "depth", "pool_heads", "gene_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if not 0 < self.pool_ratio <= 1:
            raise ValueError("pool_ratio must lie in (0, 1]")


@dataclass
class Batch:
    """Model-ready inputs for a list of patients."""

    ids: list[str]
    layout: PhenotypeLayout
    gene_inputs: list[np.ndarray]

    def probed(self) -> "Batch":
        """Same inputs with a leading singleton probe axis on every array."""
        lay = self.layout
        layout = PhenotypeLayout(lay.patches[None], lay.starts, lay.counts, lay.n_patients, lay.C)
        return Batch(self.ids, layout, [x[None] for x in self.gene_inputs])


@dataclass
class GenePrep:
    """Fold-level gene preprocessing: standardisation and module membership."""

    mean: np.ndarray
    scale: np.ndarray
    membership: np.ndarray
    widths: list[int]
    warnings: list[str] = field(default_factory=list)

    @property
    def modules(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.membership == j) for j in range(len(self.widths))]

    def standardize(self, expression: np.ndarray) -> np.ndarray:
        return (expression - self.mean) / self.scale

    @classmethod
    def fit(cls, expression: np.ndarray, C: int, seed: int, names=None) -> "GenePrep":
        mean = expression.mean(axis=0)
        sd = expression.std(axis=0)
        scale = np.where(sd > 0, sd, 1.0)
        clustering = cluster_genes(expression, C, seed=seed, names=names)
        widths = [int(np.sum(clustering.membership == j)) for j in range(C)]
        return cls(mean, scale, clustering.membership, widths, clustering.warnings)


def patient_seed(seed: int, patient_id: str) -> int:
    return (seed * 1_000_003 + zlib.crc32(patient_id.encode())) % (2**63)


class SurvivalFusionModel:
    """Parameters plus the fold-level preprocessing needed to score patients."""

    def __init__(self, config: ModelConfig, gene_prep: GenePrep, seed: int = 0, params=None):
        self.config = config
        self.gene_prep = gene_prep
        self.seed = seed
        self.params = params if params is not None else init_params(config, gene_prep.widths, seed)
        self._assign_cache: dict[tuple[str, int], np.ndarray] = {}

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(flatten(self.params))

    def parameters(self) -> list[Tensor]:
        return [t for _, t in flatten(self.params)]

    def phenotype_assignment(self, patch_set) -> np.ndarray:
        key = (patch_set.patient_id, len(patch_set))
        if key not in self._assign_cache:
            self._assign_cache[key] = assign_phenotypes(
                patch_set, self.config.C, patient_seed(self.seed, patch_set.patient_id)
            )
        return self._assign_cache[key]

    def prepare(self, cohort: Cohort) -> Batch:
        assignments = [self.phenotype_assignment(ps) for ps in cohort.patch_sets]
        layout = build_layout(cohort.patch_sets, assignments, self.config.C)
        expr = self.gene_prep.standardize(cohort.expression)
        gene_inputs = gather_module_inputs(expr, self.gene_prep.modules, self.gene_prep.widths)
        return Batch(cohort.ids, layout, gene_inputs)

    def forward(self, batch: Batch, states: list | None = None) -> RiskOutput:
        return forward(self.params, self.config, batch, states)

    def risks(self, batch: Batch) -> np.ndarray:
        return self.forward(batch).R.data.copy()


def init_params(cfg: ModelConfig, gene_widths: list[int], seed: int) -> dict:
    if len(gene_widths) != cfg.C:
        raise ValueError(f"{len(gene_widths)} gene modules for C={cfg.C} phenotypes")
    rng = np.random.default_rng(seed)
    d_fused = 2 * cfg.d_model
    return {
        "fcn": init_fcn(rng, cfg.d, cfg.d_k),
        "gene": init_gene_mlps(rng, gene_widths, cfg.d_k, cfg.gene_hidden),
        "tsmcat": init_tsmcat(rng, cfg.d_k, cfg.d_model, cfg.depth, cfg.block_hidden),
        "pool_p": init_mhap(rng, d_fused, cfg.pool_heads),
        "pool_g": init_mhap(rng, d_fused, cfg.pool_heads),
        "head": init_head(rng, 2 * cfg.pool_heads * d_fused, cfg.head_hidden),
    }


def forward(params: dict, cfg: ModelConfig, batch: Batch, states: list | None = None) -> RiskOutput:
    P0 = phenotype_features(params["fcn"], batch.layout)
    G0 = module_features(params["gene"], batch.gene_inputs)
    P, G = tsmcat_forward(params["tsmcat"], P0, G0, cfg.heads, states)
    y_p = mhap_forward(params["pool_p"], P, cfg.pool_ratio, cfg.renormalize_pool)
    y_g = mhap_forward(params["pool_g"], G, cfg.pool_ratio, cfg.renormalize_pool)
    return mlp_head(params["head"], y_p, y_g, cfg.use_sigmoid)


def config_dict(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    d["head_hidden"] = list(cfg.head_hidden)
    return d
