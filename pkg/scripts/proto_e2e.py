"""Desk-scale calibration prototype (not part of the package)."""
import time

import numpy as np

from zepad.harness.data import generate_shapes10
from zepad.nn.models import ConvEncoder
from zepad.bmp import Batch, ContrastiveConfig, HeadConfig, pretrain_bmp, train_head, predict_proba
from zepad.attack import UapConfig, generate_uap, apply_perturbation
from zepad.advtune import AdvTuneConfig, HybridLossConfig, adversarial_finetune
from zepad.core import PerturbationBudget, benign_accuracy, attack_success_rate
from zepad.rfdm import confidence_batch

t0 = time.time()


def log(msg):
    print(f"[{time.time()-t0:7.1f}s] {msg}", flush=True)


ntrain, neval = 2500, 600
x, y = generate_shapes10(ntrain + neval + 1000, 11)
xt, yt = x[:ntrain], y[:ntrain]
xs, ys = x[ntrain:ntrain + 1000], y[ntrain:ntrain + 1000]  # attacker stream
xe, ye = x[ntrain + 1000:], y[ntrain + 1000:]
log("data ready")

ccfg = ContrastiveConfig(temperature=0.5, epochs=6, batch_size=128, seed=1)
hcfg = HeadConfig(hidden_sizes=(512, 256), learning_rate=0.005, epochs=15, batch_size=256, seed=5)

vic = ConvEncoder((8, 16, 32), 128, rng=np.random.default_rng(100))
pretrain_bmp([Batch(xt)], ccfg, vic, learning_rate=1e-3)
log("victim pretrained")
vic_head = train_head(vic, xt, yt, 10, hcfg).head
p_clean = predict_proba(vic, vic_head, xe)
ba_vic = benign_accuracy(np.argmax(p_clean, 1), ye)
log(f"victim BA = {ba_vic:.1f}")

budget = PerturbationBudget(10 / 255)
uap = generate_uap(vic, xs, UapConfig(budget, epochs=5, batch_size=128, seed=2))
log(f"uap objective history: {[f'{v:.2f}' for v in uap.objective_per_epoch]}")
xadv = apply_perturbation(xe, uap.perturbation)
p_adv = predict_proba(vic, vic_head, xadv)
ra_vic = benign_accuracy(np.argmax(p_adv, 1), ye)
asr = attack_success_rate(np.argmax(p_clean, 1), np.argmax(p_adv, 1))
log(f"victim RA = {ra_vic:.1f}  ASR = {asr:.1f}")

# BMP branch
bmp_enc = ConvEncoder((8, 16, 32), 128, rng=np.random.default_rng(200))
pretrain_bmp([Batch(xt)], ContrastiveConfig(temperature=0.5, epochs=6, batch_size=128, seed=7), bmp_enc, learning_rate=1e-3)
bmp_head = train_head(bmp_enc, xt, yt, 10, hcfg).head
pb_clean = predict_proba(bmp_enc, bmp_head, xe)
pb_adv = predict_proba(bmp_enc, bmp_head, xadv)
log(f"bmp BA = {benign_accuracy(np.argmax(pb_clean,1), ye):.1f} RA = {benign_accuracy(np.argmax(pb_adv,1), ye):.1f}")

# advtune the victim
tcfg = AdvTuneConfig(epochs=4, batch_size=128, learning_rate=1e-4, loss=HybridLossConfig(20.0), seed=3)
res = adversarial_finetune(vic, xt, yt, 10, uap.perturbation, tcfg)
log(f"advtune curves: {[(f'{c[chr(104)+chr(121)+chr(98)+chr(114)+chr(105)+chr(100)]:.2f}') for c in res.curves]}")
tuned_head = train_head(vic, xt, yt, 10, hcfg).head
pt_clean = predict_proba(vic, tuned_head, xe)
pt_adv = predict_proba(vic, tuned_head, xadv)
ba_t = benign_accuracy(np.argmax(pt_clean, 1), ye)
ra_t = benign_accuracy(np.argmax(pt_adv, 1), ye)
log(f"tuned victim BA = {ba_t:.1f} RA = {ra_t:.1f}")

# confidence separation (tuned victim as sole mpae branch vs bmp)
for tag, pc, pa in [("mpae", pt_clean, pt_adv), ("bmp", pb_clean, pb_adv)]:
    cc = confidence_batch(pc.max(1))
    ca = confidence_batch(pa.max(1))
    log(f"{tag}: mean c clean {cc.mean():.3f}  adv {ca.mean():.3f}")

gap_clean = confidence_batch(pt_clean.max(1)) - confidence_batch(pb_clean.max(1))
gap_adv = confidence_batch(pt_adv.max(1)) - confidence_batch(pb_adv.max(1))
det_acc = 50 * ((gap_adv > 0.1).mean() + (gap_clean <= 0.1).mean())
log(f"detection acc (balanced): {det_acc:.1f}%  (flag rate clean {(gap_clean>0.1).mean():.2f}, adv {(gap_adv>0.1).mean():.2f})")
log("done")
