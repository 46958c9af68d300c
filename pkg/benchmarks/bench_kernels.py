"""Time the compiled and pure-Python kernels on the same inputs and check
that their outputs agree bit for bit.

    python3 benchmarks/bench_kernels.py --tokens 200000 --repeat 5
"""
import argparse
import sys
import timeit

import numpy as np

from cotope._kernels import compiled_backend, python_backend


def make_inputs(tokens: int, vocab: int, k: int, seed: int):
    rng = np.random.default_rng(seed)
    lengths = rng.integers(3, 9, size=tokens // 5)
    so = np.concatenate([[0], np.cumsum(lengths)])
    steps_per_ep = rng.integers(1, 5, size=len(lengths))
    eo = np.concatenate([[0], np.cumsum(steps_per_ep)])
    eo = eo[eo <= len(lengths)]
    if eo[-1] != len(lengths):
        eo = np.append(eo, len(lengths))
    values = rng.normal(size=so[-1])

    key_mod = vocab**k
    table = lambda: np.cumsum(rng.dirichlet(np.ones(vocab), size=key_mod), axis=1)
    n_eps = 200
    ep_off = np.linspace(0, so[-1], n_eps + 1).astype(np.int64)
    sample_args = (
        rng.integers(0, key_mod, size=n_eps), rng.random(so[-1]) < 0.3, ep_off, rng.random(so[-1]),
        np.arange(key_mod), table(), np.arange(key_mod), table(), vocab, key_mod,
    )
    return (values, so, eo), sample_args


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--tokens", type=int, default=200_000)
    ap.add_argument("--vocab", type=int, default=30)
    ap.add_argument("--k", type=int, default=2)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args(argv)

    if compiled_backend is None:
        print("compiled extension not built; only the Python kernels are available")
        return 1
    nested, sample = make_inputs(a.tokens, a.vocab, a.k, a.seed)
    values = nested[0]
    cases = {
        "kahan_sum": (values,),
        "nested_means": nested,
        "sample_tokens": sample,
    }
    print(f"{'kernel':<14} {'python s':>10} {'compiled s':>11} {'speedup':>8}  identical")
    for name, args in cases.items():
        py, c = getattr(python_backend, name), getattr(compiled_backend, name)
        out_py, out_c = py(*args), c(*args)
        if isinstance(out_py, tuple):
            same = all(np.array_equal(x, y) for x, y in zip(out_py, out_c))
        else:
            same = bool(np.array_equal(out_py, out_c))
        t_py = min(timeit.repeat(lambda: py(*args), number=1, repeat=a.repeat))
        t_c = min(timeit.repeat(lambda: c(*args), number=1, repeat=a.repeat))
        print(f"{name:<14} {t_py:>10.4f} {t_c:>11.4f} {t_py / t_c:>7.1f}x  {same}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
