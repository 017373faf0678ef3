"""Train a reduced model for a few hundred steps and report metrics by setting.

Usage: python demos/train_small.py [steps]

The full recipe (``acceptance_config``) takes about half an hour on one CPU
core; this script shrinks data and steps so it finishes in a few minutes.
"""
import sys
import time

from dmmi.config import acceptance_config
from dmmi.synthetic import generate_split
from dmmi.text import template_vocab
from dmmi.training import Dataset, Trainer, evaluate_model

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
cfg = acceptance_config(total_steps=steps, data={"n_train": 600, "n_test": 100})
vocab = template_vocab()
train = Dataset.from_samples(generate_split(cfg.data, "train"), vocab, cfg.max_len)
test = Dataset.from_samples(generate_split(cfg.data, "test"), vocab, cfg.max_len)

trainer = Trainer(cfg, train, vocab)
t0 = time.time()
for stop in range(steps // 4, steps + 1, steps // 4):
    rec = trainer.run(until=stop, write_log=False)[-1]
    print(f"step {rec['step']:4d}  lr {rec['lr']:.2e}  ce {rec['l_ce']:.3f}  sim {rec['l_sim']:.3f}  "
          f"con {rec['l_con']:.3f}  ({time.time() - t0:.0f}s)")

overall, by_setting = evaluate_model(trainer.model, test)
print("overall", overall.to_dict())
for name, rep in by_setting.items():
    print(f"  {name:12s}", {k: v for k, v in rep.to_dict().items() if v is not None})
