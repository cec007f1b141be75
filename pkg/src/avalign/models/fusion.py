"""Fusion of the audio-visual LSTM state ``h`` with the visual context ``c``.

With ``NN_k(x) = W_k x + b_k``:

* baseline: ``NN([h; c])``
* m1: ``tanh(NN1(tanh(NN2([h; c]))))``
* m2: ``h + tanh(NN1(h)) + c + tanh(NN2(c)) + tanh(NN3([h; c]))``
* m3: m2 without the bare ``c`` term
* m4: ``h * sigmoid(NN1(h)) + c * sigmoid(NN2(c))``
* m5: ``h * sigmoid(NNa(h)) + tanh(NN1([h; c])) * sigmoid(NN2([h; c]))``
"""

from __future__ import annotations

from .. import autodiff as ad
from ..nn import Params, linear

_SHAPES = {
    "baseline": {"": 2},
    "m1": {"nn1": 1, "nn2": 2},
    "m2": {"nn1": 1, "nn2": 1, "nn3": 2},
    "m3": {"nn1": 1, "nn2": 1, "nn3": 2},
    "m4": {"nn1": 1, "nn2": 1},
    "m5": {"nna": 1, "nn1": 2, "nn2": 2},
}


def _name(prefix: str, sub: str) -> str:
    return f"{prefix}.{sub}" if sub else prefix


def init_fusion(params: Params, variant: str, n: int, rng, prefix: str = "fuse") -> None:
    if variant not in _SHAPES:
        raise ValueError(f"unknown fusion variant {variant!r}")
    for sub, mult in _SHAPES[variant].items():
        params.create(f"{_name(prefix, sub)}.W", (mult * n, n), rng)
        params.create(f"{_name(prefix, sub)}.b", (n,), rng, init="const")


def fuse(h, c, params: Params, variant: str = "baseline", prefix: str = "fuse"):
    def nn(sub, x):
        p = _name(prefix, sub)
        return linear(x, params[f"{p}.W"], params[f"{p}.b"])

    if variant == "baseline":
        return nn("", ad.concat([h, c], axis=-1))
    if variant == "m1":
        return ad.tanh(nn("nn1", ad.tanh(nn("nn2", ad.concat([h, c], axis=-1)))))
    if variant in ("m2", "m3"):
        hc = ad.concat([h, c], axis=-1)
        out = ad.add(h, ad.tanh(nn("nn1", h)))
        if variant == "m2":
            out = ad.add(out, c)
        out = ad.add(out, ad.tanh(nn("nn2", c)))
        return ad.add(out, ad.tanh(nn("nn3", hc)))
    if variant == "m4":
        return ad.add(ad.mul(h, ad.sigmoid(nn("nn1", h))), ad.mul(c, ad.sigmoid(nn("nn2", c))))
    if variant == "m5":
        hc = ad.concat([h, c], axis=-1)
        gated_h = ad.mul(h, ad.sigmoid(nn("nna", h)))
        return ad.add(gated_h, ad.mul(ad.tanh(nn("nn1", hc)), ad.sigmoid(nn("nn2", hc))))
    raise ValueError(f"unknown fusion variant {variant!r}")


def gates(h, c, params: Params, variant: str, prefix: str = "fuse"):
    """Modality confidence gates of m4 as arrays ``(audio_gate, video_gate)``."""
    if variant != "m4":
        raise ValueError("only m4 exposes per-modality gates")
    ga = ad.sigmoid(linear(h, params[f"{prefix}.nn1.W"], params[f"{prefix}.nn1.b"]))
    gv = ad.sigmoid(linear(c, params[f"{prefix}.nn2.W"], params[f"{prefix}.nn2.b"]))
    return ga.data, gv.data
