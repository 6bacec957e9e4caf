"""Pretrain a small backbone, fit the jigsaw head on normal motion, score anomalies.

Run: python3 demos/03_pretrain_and_jigsaw.py
A few minutes on one core; the numbers are illustrative, not tuned.
"""
import numpy as np

from mofm.backbone import masked_accuracy, pretrain
from mofm.config import apply_overrides, desk_profile
from mofm.data import SynthSpec, gen_corpus, prepare
from mofm.dved import tokenize, train_dved
from mofm.heads import jigsaw_score, jigsaw_train
from mofm.heatmap import heatmaps
from mofm.masking import pose_keypoints
from mofm.metrics import anomaly_auc

prof = apply_overrides(desk_profile(), {"dved.epochs": "3", "backbone.epochs": "3", "jigsaw.epochs": "3"})


def corpus(per_class, anomaly_fraction, seed):
    poses = prepare(gen_corpus(SynthSpec(per_class=per_class, anomaly_fraction=anomaly_fraction, seed=seed)), prof)
    return poses, heatmaps(poses, prof.height, prof.width, prof.sigma)


train, u = corpus(60, 0.0, 0)
dved, _ = train_dved(u, prof, seed=0)
tokens = tokenize(dved, u)
kp = [pose_keypoints(p) for p in train]

backbone, state = pretrain(u, kp, tokens, prof, seed=0)
print("pretraining loss by epoch:", [round(h["loss"], 3) for h in state.history])
print(f"masked-token accuracy {masked_accuracy(backbone, u, kp, tokens, prof, seed=0):.3f} "
      f"(chance {1 / prof.dved.vocab:.3f})")

jig = jigsaw_train(backbone, u, prof, seed=0)

test, u_test = corpus(15, 0.3, 1)
abnormal = np.array([bool(p.abnormal) for p in test])
score = jigsaw_score(jig, u_test)
print(f"mean normality: normal {score[~abnormal].mean():.3f}, abnormal {score[abnormal].mean():.3f}")
print(f"jigsaw AUC-ROC on injected anomalies: {anomaly_auc(score, abnormal):.3f}")
