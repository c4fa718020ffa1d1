"""Train a Brain Module against the frozen speech model and test it on noise.

A reduced synthetic dataset keeps this to roughly ten minutes on one core,
most of it spent pretraining the toy speech model the first time (the result
is cached). The full-size experiment is acceptance criterion 5:
``pytest tests/test_acceptance.py -k end_to_end``.
"""
import logging
import tempfile
from pathlib import Path

from mad.data import Dataset, SynthConfig, synth_generate
from mad.harness import EvalConfig, RunConfig, evaluate, noise_sweep, train

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

work = Path(tempfile.mkdtemp(prefix="mad-demo-"))
cfg = SynthConfig(sentences_per_story=[80, 20, 60, 60], n_subjects=4, seed=0)
synth_generate(cfg, work / "data")
ds = Dataset(work / "data")
print({split: len(ds.split(split)) for split in ("train", "validation", "test")}, "segments")

run = RunConfig(losses=["Lm", "Le"], epochs=3, batch_size=16)
ckpt, report = train(run, ds, out_dir=work / "ckpt")
print("validation loss per epoch:", [round(v, 4) for v in report.val_losses])

meg = evaluate(ckpt, ds)
noise = evaluate(ckpt, ds, EvalConfig(input="gaussian"))
forced = evaluate(ckpt, ds, EvalConfig(teacher_forcing=True))
print(f"\nBLEU-1 from MEG       {meg.bleu1_pct:6.2f}")
print(f"BLEU-1 from noise     {noise.bleu1_pct:6.2f}")
print(f"BLEU-1 teacher-forced {forced.bleu1_pct:6.2f}")

print("\nmixing MEG with Gaussian noise:")
for row in noise_sweep(ckpt, ds, ratios=(0.0, 0.25, 0.5, 0.75, 1.0)):
    print(f"  a = {row['ratio']:.2f}  BLEU-1 {row['bleu1']:6.2f}")
print("\ncheckpoint and report in", work / "ckpt")
