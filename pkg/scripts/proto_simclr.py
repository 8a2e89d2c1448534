"""Contrastive-recipe grid: loss curves + linear-probe accuracy."""
import itertools
import time

import numpy as np

from zepad.harness.data import generate_shapes10
from zepad.nn.models import ConvEncoder
from zepad.bmp import Batch, ContrastiveConfig, HeadConfig, pretrain_bmp, train_head, predict_proba
from zepad.core import benign_accuracy

t0 = time.time()
def log(msg):
    print(f"[{time.time()-t0:7.1f}s] {msg}", flush=True)

n = 1600
x, y = generate_shapes10(n + 500, 21)
xt, yt = x[:n], y[:n]
xe, ye = x[n:], y[n:]
hcfg = HeadConfig(hidden_sizes=(512, 256), learning_rate=0.005, epochs=12, batch_size=256, seed=5)

grid = [
    dict(lr=1e-3, temperature=0.5, jitter=True, seed=7),
    dict(lr=5e-4, temperature=0.5, jitter=True, seed=7),
    dict(lr=1e-3, temperature=0.2, jitter=True, seed=7),
    dict(lr=1e-3, temperature=0.5, jitter=False, seed=7),
    dict(lr=5e-4, temperature=0.2, jitter=True, seed=7),
    dict(lr=1e-3, temperature=0.5, jitter=True, seed=1),
]
for g in grid:
    enc = ConvEncoder((8, 16, 32), 128, rng=np.random.default_rng(100 + g["seed"]))
    ccfg = ContrastiveConfig(temperature=g["temperature"], epochs=10, batch_size=256,
                             color_jitter=g["jitter"], seed=g["seed"])
    res = pretrain_bmp([Batch(xt)], ccfg, enc, learning_rate=g["lr"])
    losses = [f"{c['loss']:.2f}" for c in res.curves]
    head = train_head(enc, xt, yt, 10, hcfg).head
    ba = benign_accuracy(np.argmax(predict_proba(enc, head, xe), 1), ye)
    log(f"{g} -> losses {losses} BA {ba:.1f}")
