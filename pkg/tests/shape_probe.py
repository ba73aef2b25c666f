"""Forward a list of 224 px configs and print their stage and logit shapes as JSON.

Run in a child process so each group of large models starts from a fresh heap.
"""
import gc
import json
import sys

import numpy as np

from paratranscnn.config import ModelConfig
from paratranscnn.model import ParaTransCNN
from paratranscnn.tensor import Tensor, no_grad


def probe(cells):
    out = []
    for cell in cells:
        cfg = ModelConfig(**cell)
        model = ParaTransCNN(cfg).eval()
        x = Tensor(np.zeros((1, 3, cfg.input_size, cfg.input_size), dtype=model.dtype))
        with no_grad():
            logits, feats = model(x, return_features=True)
        out.append({"vit": [None if f is None else list(f.shape) for f in feats.vit], "logits": list(logits.shape)})
        del model, logits, feats
        gc.collect()
    return out


if __name__ == "__main__":
    print(json.dumps(probe(json.loads(sys.argv[1]))))
