"""Time the numba kernels against the pure-numpy fallback.

Each backend runs in its own interpreter because the choice is made at
import time from PROMPTFORGE_DISABLE_NUMBA.

    python benchmarks/bench_kernels.py [--repeat 20]
"""

import argparse
import json
import os
import subprocess
import sys
import timeit


def measure(repeat):
    import numpy as np

    from promptforge.encoders import EncoderConfig, encode_visual, init_frozen_weights
    from promptforge.numerics import SeededRng, ad, backend, backward
    from promptforge.numerics import _kernels as K
    from promptforge.prompts import init_deep_stack

    rng = np.random.default_rng(0)
    x = rng.normal(size=(460, 256))
    dy = rng.normal(size=x.shape)
    xh, rstd = K.layernorm_fwd(x, 1e-5)
    sm = K.softmax_fwd(x)
    cases = {
        "layernorm_fwd": lambda: K.layernorm_fwd(x, 1e-5),
        "layernorm_bwd": lambda: K.layernorm_bwd(dy, xh, rstd),
        "softmax_fwd": lambda: K.softmax_fwd(x),
        "softmax_bwd": lambda: K.softmax_bwd(sm, dy),
        "gelu_fwd": lambda: K.gelu_fwd(x),
        "gelu_bwd": lambda: K.gelu_bwd(x, dy),
    }
    cfg = EncoderConfig()
    weights = init_frozen_weights(cfg, 0)
    images = rng.uniform(size=(20, 32, 32, 3))
    deep = init_deep_stack(cfg.layers, 5, cfg.embed_dim, SeededRng(0))

    def encode_step():
        out = encode_visual(images, None, deep.groups, weights)
        backward(ad.sum(ad.mul(out, out)))

    cases["encode_fwd_bwd(20 images)"] = encode_step
    for fn in cases.values():
        fn()  # compile / warm up
    result = {name: min(timeit.repeat(fn, number=1, repeat=repeat)) for name, fn in cases.items()}
    return backend(), result


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.child:
        name, result = measure(args.repeat)
        print(json.dumps({"backend": name, "times": result}))
        return
    runs = {}
    for label, flag in (("numba", "0"), ("numpy", "1")):
        env = dict(os.environ, PROMPTFORGE_DISABLE_NUMBA=flag)
        out = subprocess.run(
            [sys.executable, __file__, "--child", "--repeat", str(args.repeat)], env=env, capture_output=True, text=True, check=True
        )
        runs[label] = json.loads(out.stdout.strip().splitlines()[-1])
    print(f"{'kernel':28s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, t_nb in runs["numba"]["times"].items():
        t_np = runs["numpy"]["times"][name]
        print(f"{name:28s} {t_nb * 1e3:10.3f} {t_np * 1e3:10.3f} {t_np / t_nb:8.2f}x")
    print(f"(backends reported: {runs['numba']['backend']}, {runs['numpy']['backend']})")


if __name__ == "__main__":
    main()
