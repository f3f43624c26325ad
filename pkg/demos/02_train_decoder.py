"""Train the tiny adapted decoder on the workshop domain and watch it answer.

Uses a reduced corpus so the whole script finishes in about a minute.
Run from the repository root:  python3 demos/02_train_decoder.py
"""

import numpy as np

from molora.config import RunConfig
from molora.corpus import SEP_ID, STOP_ID, standard_corpora
from molora.model import MODE_FULL, build_model, generate_greedy
from molora.training import token_accuracy, train

cfg = RunConfig.from_dict({"data": {"train_size": 160, "val_size": 24}})
domain_a, _, vocab = standard_corpora(cfg.train_size, cfg.val_size, cfg.data_seed, cfg.model.vocab)
print(f"corpus: {len(domain_a.train)} train / {len(domain_a.val)} val, vocab {len(vocab)} words")

model = build_model(cfg.model, cfg.lora, cfg.mora, seed=0)
curve = train(model, domain_a.train, vocab, MODE_FULL, epochs=5, seed=0,
              adam=cfg.adam, batch_size=cfg.batch_size)
print("per-epoch mean loss:", [round(x, 3) for x in curve])

acc = np.mean([token_accuracy(model, s, vocab) for s in domain_a.val])
print(f"validation token accuracy: {acc:.3f}\n")

print("sample generations (entropy in nats after each token):")
for sample in domain_a.val[:5]:
    prompt = vocab.encode(sample.question) + [SEP_ID]
    trace = generate_greedy(model, prompt, max_new=10, stop_id=STOP_ID,
                            scene_id=sample.scene_id, vocab=vocab)
    mean_h = np.mean(trace.entropies)
    print(f"  Q: {sample.question}")
    print(f"  A: {trace.text!r}   (ref: {sample.answer!r}, mean entropy {mean_h:.2f})")
