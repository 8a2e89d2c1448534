"""Attack-strength calibration: encoder quality vs UAP effectiveness."""
import sys
import time

import numpy as np

from zepad.harness.data import generate_shapes10
from zepad.nn.models import ConvEncoder, LinearHead
from zepad.nn.tensor import Tensor, softmax_cross_entropy
from zepad.nn.optim import Adam
from zepad.bmp import Batch, ContrastiveConfig, HeadConfig, pretrain_bmp, train_head, predict_proba
from zepad.attack import UapConfig, generate_uap, apply_perturbation, pgd_samplewise
from zepad.core import PerturbationBudget, benign_accuracy, attack_success_rate

t0 = time.time()
def log(msg):
    print(f"[{time.time()-t0:7.1f}s] {msg}", flush=True)

mode = sys.argv[1] if len(sys.argv) > 1 else "supervised"
ntrain, neval = 2500, 600
x, y = generate_shapes10(ntrain + neval + 1000, 11)
xt, yt = x[:ntrain], y[:ntrain]
xs = x[ntrain:ntrain+1000]
xe, ye = x[ntrain+1000:], y[ntrain+1000:]

enc = ConvEncoder((8,16,32), 128, rng=np.random.default_rng(100))
if mode == "supervised":
    head0 = LinearHead(128, 10, rng=np.random.default_rng(1))
    opt = Adam(enc.parameters()+head0.parameters(), 2e-3)
    rng = np.random.default_rng(0)
    for ep in range(5):
        order = rng.permutation(ntrain)
        for s in range(0, ntrain, 128):
            idx = order[s:s+128]
            loss = softmax_cross_entropy(head0(enc(Tensor(xt[idx]))), yt[idx])
            opt.zero_grad(); loss.backward(); opt.step()
    log("supervised pretrain done")
else:
    epochs = int(mode)
    ccfg = ContrastiveConfig(temperature=0.5, epochs=epochs, batch_size=256, seed=1)
    pretrain_bmp([Batch(xt)], ccfg, enc, learning_rate=2e-3)
    log(f"simclr-{epochs} pretrain done")

hcfg = HeadConfig(hidden_sizes=(512,256), learning_rate=0.005, epochs=15, batch_size=256, seed=5)
head = train_head(enc, xt, yt, 10, hcfg).head
p_clean = predict_proba(enc, head, xe)
ba = benign_accuracy(np.argmax(p_clean,1), ye)
log(f"BA = {ba:.1f}")

budget = PerturbationBudget(10/255)
for steps, step in [(8, None)]:
    uap = generate_uap(enc, xs, UapConfig(budget, epochs=steps, step_size=step, batch_size=128, seed=2))
    xadv = apply_perturbation(xe, uap.perturbation)
    p_adv = predict_proba(enc, head, xadv)
    ra = benign_accuracy(np.argmax(p_adv,1), ye)
    log(f"UAP(ep={steps}): RA = {ra:.1f} ASR = {attack_success_rate(np.argmax(p_clean,1), np.argmax(p_adv,1)):.1f} obj={uap.objective_per_epoch[-1]:.2f}")

xpgd = pgd_samplewise(enc, head, xe, ye, budget, steps=10)
p_pgd = predict_proba(enc, head, xpgd)
log(f"PGD-10: RA = {benign_accuracy(np.argmax(p_pgd,1), ye):.1f}")
log("done")
