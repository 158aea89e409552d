"""Two building blocks in isolation: the gated pyramid fusion and the single-pixel decoder.

Run with ``python demos/gate_and_decoder.py``.
"""
import numpy as np

from sprd import tensor as T
from sprd.backbone import gate_fuse, gate_scores, make_gate
from sprd.maskbranch import DecoderConfig, reconstruct_mask
from sprd.optim import ParamStore
from sprd.tensor import Tensor

rng = np.random.default_rng(0)
store = ParamStore(seed=0, dtype=np.float64)

with T.verification_mode():
    # the gate scores each branch per position and channel, then sums the weighted branches
    upper = Tensor(rng.normal(size=(1, 4, 6, 6)))
    lateral = Tensor(rng.normal(size=(1, 4, 6, 6)))
    gate = make_gate(store, "demo.gate", 4)
    s = gate_scores(upper, gate).data
    print(f"gate scores lie in ({s.min():.3f}, {s.max():.3f})")

    for p in gate.parameters():
        p.data[:] = 0
    fused = gate_fuse(upper, lateral, gate).data
    print("zero gate gives the plain average:", np.allclose(fused, 0.5 * (upper.data + lateral.data)))

    # one 1x1 pixel column grows into a 32x32 mask per class
    cfg = DecoderConfig(in_width=24, deconv_widths=(32, 16, 16), up_widths=(8, 8), num_classes=3, shortcut=True)
    trace = []
    masks = reconstruct_mask(Tensor(rng.normal(size=(5, 24, 1, 1))), cfg, store, trace=trace)
    print("spatial sizes along the decoder:", trace)
    print("output shape for 5 pixels:", masks.shape)
