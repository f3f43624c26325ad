"""Entropy-based selective prediction: rank answers by uncertainty, refer the
worst, and read the retained-set quality off the risk-coverage curve.

Run from the repository root:  python3 demos/04_selective_prediction.py
"""

import numpy as np

from molora.config import RunConfig
from molora.corpus import standard_corpora
from molora.evaluation import reject, risk_coverage
from molora.model import MODE_FULL, build_model
from molora.training import evaluate_model, train

cfg = RunConfig.from_dict({"data": {"train_size": 160, "val_size": 32}})
domain_a, _, vocab = standard_corpora(cfg.train_size, cfg.val_size, cfg.data_seed, cfg.model.vocab)
model = build_model(cfg.model, cfg.lora, cfg.mora, seed=0)
train(model, domain_a.train, vocab, MODE_FULL, epochs=4, seed=0,
      adam=cfg.adam, batch_size=cfg.batch_size)

scored = evaluate_model(model, domain_a.val, vocab, max_new=10)
print("most and least certain answers:")
for s in sorted(scored, key=lambda s: s.uncertainty)[:: len(scored) - 1]:
    print(f"  entropy {s.uncertainty:.3f}: {s.generated!r} (ref {s.reference!r})")

tau = float(np.median([s.uncertainty for s in scored]))
referred = sum(reject(s.uncertainty, tau) for s in scored)
print(f"\nat threshold {tau:.3f} nats, {referred} of {len(scored)} answers would be referred")

print("\nrisk-coverage curve (answer quality on the retained set):")
print(f"{'coverage':>9} {'threshold':>10} {'rougeL':>8} {'kept':>5}")
for p in risk_coverage(scored, [1.0, 0.9, 0.8, 0.7, 0.6, 0.5]):
    print(f"{p.coverage:>9.2f} {p.threshold:>10.3f} {p.value:>8.3f} {p.retained:>5d}")
