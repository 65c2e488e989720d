"""Cross-validated training on a synthetic cohort, then KM curves for the test predictions.

Small model and few epochs so it finishes in well under a minute; the
acceptance suite runs the full-size version.
"""

import sys
import tempfile
from pathlib import Path

from survfuse.encoders import SynthConfig, synth_cohort
from survfuse.harness import RunConfig, curve_gap, emit_km_plot, evaluation_from_predictions, format_p, run_cv

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="survfuse-demo-"))
cohort = synth_cohort(SynthConfig(patients=80, C=4, d=12, genes=24, seed=3))
config = RunConfig(C=4, d=12, d_k=8, heads=2, depth=1, folds=4, max_epochs=80, lr=1e-3, seed=3)

report = run_cv(config, cohort, out_dir=out)
for f in report.folds:
    print(f"fold {f.fold_id}: C={f.c_index:.3f}  best epoch {f.best_epoch}/{f.epochs_trained}")
print("C-index", report.c_index_summary, " pooled log-rank p =", format_p(report.pooled_logrank_p))

ev = evaluation_from_predictions([p for f in report.folds for p in f.predictions])
tsv, svg = emit_km_plot(ev, out)
print(f"curve gap at median follow-up {curve_gap(ev):.2f}")
print("wrote", tsv, "and", svg)
