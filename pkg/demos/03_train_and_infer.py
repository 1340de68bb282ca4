"""Train a small model on two seen classes and walk through inference.

Inference is four steps: (I) mask tokens partition the volume, (II) each
token picks its best-matching value per attribute aspect against the stored
bank (foreground = beating the background embedding), (III) tokens and
aggregated attribute embeddings are fused to predict the final masks, and
(IV) each lesion's attributes are matched against the knowledge table.
"""

import tempfile
from pathlib import Path

from malenia.metrics import dsc
from malenia.phantom import generate_dataset
from malenia.pipeline import (
    Config,
    export_bank,
    infer,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    train,
)

config = Config(epochs=12, seed=0)
train_set = generate_dataset(["liver_cyst", "kidney_stone"], 40, seed=1)
print(f"training on {len(train_set)} samples, {config.epochs} epochs")
result = train(config, train_set,
               log=lambda r: print(f"  epoch {r['epoch']:2d} total {r['total']:.3f}"))

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "model.mlnc"
    save_checkpoint(result.checkpoint_payload(), path)
    payload = load_checkpoint(path)
    model, config = model_from_checkpoint(payload)
    bank = export_bank(payload)  # inference never touches the text provider

test = generate_dataset(["liver_cyst"], 1, seed=99)[0]
out = infer(model, test.volume.data, bank, config=config)
print(f"\nforeground tokens: {out.foreground_tokens}")
gt = test.lesions[0][1].astype(bool)
for lesion in out.lesions:
    print(f"token {lesion['token']}: {int(lesion['mask'].sum())} voxels, "
          f"dice vs ground truth {dsc(lesion['mask'], gt):.3f}")
    for aspect, value in lesion["attributes"].items():
        print(f"    {aspect}: {value}")
    best, score = lesion["disease"][0]
    print(f"    -> {best} (score {score}/8)")
