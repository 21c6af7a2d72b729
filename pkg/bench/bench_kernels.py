"""Time the compiled kernels against the numpy fallback.

    python3 bench/bench_kernels.py [--repeat N]

Prints one line per kernel and shape with the median time of each backend
and the speed-up, then times a full Hopfield attention forward/backward.
"""

import argparse
import statistics
import time

import numpy as np

from hopattn import _backend
from hopattn import autograd as ag
from hopattn.attention import init_layer, mha_layer


def _time(fn, repeat):
    fn()
    samples = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t)
    return statistics.median(samples)


def cases(rng):
    for shape in [(3, 197, 197), (64, 4, 5, 5), (8, 32, 32)]:
        a = rng.normal(size=shape)
        g = rng.normal(size=shape)
        p = _backend.softmax_lastaxis(a)
        causal = shape[-1] == shape[-2]
        yield f"softmax {shape}", lambda a=a: _backend.softmax_lastaxis(a)
        if causal:
            yield f"softmax causal {shape}", lambda a=a: _backend.softmax_lastaxis(a, causal=True)
        yield f"softmax backward {shape}", lambda p=p, g=g: _backend.softmax_lastaxis_backward(p, g)
        yield f"ema {shape}", lambda a=a, g=g: _backend.ema(a, g, 0.5)
    for shape in [(64, 5, 64), (16, 32, 128)]:
        x = rng.normal(size=shape)
        g = rng.normal(size=shape)
        y, r = _backend.layer_norm(x)
        yield f"layer_norm {shape}", lambda x=x: _backend.layer_norm(x)
        yield f"layer_norm backward {shape}", lambda y=y, r=r, g=g: _backend.layer_norm_backward(y, r, g)
        yield f"gelu {shape}", lambda x=x: _backend.gelu(x)
        yield f"gelu backward {shape}", lambda x=x, g=g: _backend.gelu_backward(x, g)
    m = rng.normal(size=(197, 192))
    yield "norm_one (197, 192)", lambda: _backend.norm_one(m)
    yield "norm_inf (197, 192)", lambda: _backend.norm_inf(m)


def layer_step(rng):
    params = init_layer(rng, 64, 4, 16, 0.2, alpha=0.5, alpha_prime=0.5)
    params = params.replace(**{k: ag.parameter(getattr(params, k))
                               for k in ("w_q", "w_k", "w_v", "w_o")})
    x = rng.normal(size=(32, 17, 64))

    def run():
        out, h = mha_layer(x, None, params)
        ag.backward((out * out).mean())
    return run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=30)
    args = ap.parse_args()
    if "cython" not in _backend.available():
        print("compiled kernels not built; only the numpy fallback is available")
        return
    print(f"{'kernel':<36}{'cython ms':>11}{'numpy ms':>11}{'speed-up':>10}")
    rows = list(cases(np.random.default_rng(0))) + [("mha layer fwd+bwd (32x17x64)",
                                                     layer_step(np.random.default_rng(1)))]
    for name, fn in rows:
        times = {}
        for backend in ("cython", "python"):
            _backend.use(backend)
            times[backend] = _time(fn, args.repeat)
        print(f"{name:<36}{times['cython'] * 1e3:>11.3f}{times['python'] * 1e3:>11.3f}"
              f"{times['python'] / times['cython']:>9.2f}x")
    _backend.use("cython")


if __name__ == "__main__":
    main()
