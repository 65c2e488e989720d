"""From raw patch features and an expression table to C x d_k token matrices."""

import numpy as np

from survfuse.encoders import (
    SynthConfig,
    assign_phenotypes,
    cluster_genes,
    encode_gene_modules,
    encode_phenotypes,
    init_fcn,
    init_gene_mlps,
    synth_cohort,
)

cohort = synth_cohort(SynthConfig(patients=30, C=4, d=16, genes=24, seed=1))
patient = cohort.patch_sets[0]
print(patient.patient_id, "has", len(patient), "patches of dimension", patient.dim)

# phenotypes: k-means over this patient's patches, then a shared affine + ReLU and a mean
labels = assign_phenotypes(patient, C=4, seed=0)
rng = np.random.default_rng(0)
fcn = init_fcn(rng, d=16, d_k=8)
bag = encode_phenotypes(patient, labels, fcn)
print("patches per phenotype", bag.counts.tolist())
print("P shape", bag.phenotypes.shape)

# shuffling the patches does not move a single bit
perm = rng.permutation(len(patient))
shuffled = type(patient)(patient.patient_id, patient.patches[perm])
again = encode_phenotypes(shuffled, labels[perm], fcn)
print("bit-identical after shuffling:", np.array_equal(bag.phenotypes.data, again.phenotypes.data))

# gene modules: k-means on z-scored gene profiles across patients
clusters = cluster_genes(cohort.expression, C=4, seed=0, names=cohort.gene_names)
sizes = [len(m) for m in clusters.modules()]
print("module sizes", sizes)
planted = np.arange(24) % 4
for j, members in enumerate(clusters.modules()):
    print(f"  module {j}: planted blocks {sorted(set(planted[members].tolist()))}")

mlps = init_gene_mlps(rng, sizes, d_k=8, hidden=16)
G = encode_gene_modules(cohort.expression[0], clusters.membership, mlps)
print("G shape", G.modules.shape)
