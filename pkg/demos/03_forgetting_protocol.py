"""The two-stage transfer protocol at demo scale, one seed.

Stage 1 trains the backbone on the workshop domain; stage 2 moves to the
orchard domain either by full fine-tuning or by adapter-only tuning. The
adapter branch should keep much more of the first domain. Takes a couple of
minutes; the full five-seed protocol lives behind ``molora forget``.

Run from the repository root:  python3 demos/03_forgetting_protocol.py
"""

from molora.config import RunConfig
from molora.training import forgetting_experiment

cfg = RunConfig.from_dict({"data": {"train_size": 240, "val_size": 32}})
pairs = forgetting_experiment(cfg.model, cfg.lora, cfg.mora, seeds=[0],
                              n_train=cfg.train_size, n_val=cfg.val_size,
                              stage1_epochs=5, stage2_epochs=5,
                              adam=cfg.adam, batch_size=cfg.batch_size)

print(f"{'strategy':<10} {'new-domain acc':>15} {'old-domain acc':>15} "
      f"{'old rougeL':>11} {'old meteor':>11}")
for fft, ada in pairs:
    for rep in (fft, ada):
        print(f"{rep.strategy:<10} {rep.train_token_acc:>15.3f} {rep.pre_token_acc:>15.3f} "
              f"{rep.pre_rouge_l:>11.3f} {rep.pre_meteor:>11.3f}")
    kept = ada.pre_token_acc - fft.pre_token_acc
    print(f"\nadapter-only tuning retained {kept:+.3f} more old-domain token accuracy")
