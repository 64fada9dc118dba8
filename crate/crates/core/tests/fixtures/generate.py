"""Regenerates the accountant fixtures with 50-digit arithmetic.

    python3 generate.py

Inputs are drawn as binary64 values and written with repr(), so the Rust side
reads back exactly the numbers evaluated here.
"""
import csv
import random

import mpmath as mp

mp.mp.dps = 50


def conversion(eps_rdp, lam, delta):
    eps_rdp, lam, delta = mp.mpf(eps_rdp), mp.mpf(lam), mp.mpf(delta)
    return eps_rdp + mp.log((lam - 1) / lam) - (mp.log(delta) + mp.log(lam)) / (lam - 1)


def rdp_cases(rng, n=1000):
    rows = []
    for i in range(n):
        eps_rdp = 0.0 if i % 50 == 0 else 10 ** rng.uniform(-9, 1.7)
        if i % 7 == 0:
            lam = 1.0 + 10 ** rng.uniform(-3, 0)
        else:
            lam = 10 ** rng.uniform(0.01, 4)
        delta = 10 ** rng.uniform(-12, -0.5)
        rows.append((eps_rdp, lam, delta, conversion(eps_rdp, lam, delta)))
    return rows


def coefficient(c, n, sigma, mode):
    s = 2 * mp.mpf(c) * mp.sqrt(n)
    std = mp.mpf(sigma) if mode == "absolute" else mp.mpf(sigma) * mp.mpf(c)
    return s * s / (2 * std * std)


def best_epsilon(c, n, b, t, sigma, delta, mode, lo=1.5, hi=1024.0):
    """Continuous minimum over λ in [lo, hi]."""
    q = b * t
    coef = coefficient(c, n, sigma, mode)
    ld = mp.log(mp.mpf(delta))

    def f(lam):
        return coef * lam * q + mp.log((lam - 1) / lam) - (ld + mp.log(lam)) / (lam - 1)

    def df(lam):
        # d/dλ of the conversion collapses to coef·q + (log δ + log λ)/(λ−1)².
        return coef * q + (ld + mp.log(lam)) / (lam - 1) ** 2

    a, z = mp.mpf(lo), mp.mpf(hi)
    if df(a) >= 0:
        lam = a
    elif df(z) <= 0:
        lam = z
    else:
        for _ in range(200):
            m = (a + z) / 2
            if df(m) < 0:
                a = m
            else:
                z = m
        lam = (a + z) / 2
    return f(lam), lam


def epsilon_cases(rng, n=200):
    rows = []
    while len(rows) < n:
        c = 10 ** rng.uniform(-4, 0)
        k = rng.choice([2, 3, 10, 100])
        b = rng.choice([1, 16, 64, 256])
        t = rng.choice([1, 10, 100, 2000, 10000])
        sigma = 10 ** rng.uniform(-1, 3)
        delta = 10 ** rng.uniform(-10, -3)
        mode = rng.choice(["absolute", "consistent"])
        eps, lam = best_epsilon(c, k, b, t, sigma, delta, mode)
        if eps <= 0 or eps > 1e6:
            continue
        rows.append((c, k, b, t, sigma, delta, mode, eps, lam))
    return rows


def main():
    rng = random.Random(20240601)
    with open("rdp_to_dp.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["eps_rdp", "lambda", "delta", "epsilon"])
        for e, l, d, v in rdp_cases(rng):
            w.writerow([repr(e), repr(l), repr(d), mp.nstr(v, 30)])
    with open("optimal_epsilon.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["c", "n", "b", "t", "sigma", "delta", "mode", "epsilon", "lambda"])
        for c, k, b, t, s, d, m, e, l in epsilon_cases(rng):
            w.writerow([repr(c), k, b, t, repr(s), repr(d), m, mp.nstr(e, 30), mp.nstr(l, 20)])


if __name__ == "__main__":
    main()
