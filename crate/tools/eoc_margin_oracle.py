"""Monte Carlo estimate of single-pattern and max-pooled ensemble accuracy
under confidence-correlated noise.

Each trial draws a flat-Dirichlet conditional q over V tokens, scores all V
tokens under P patterns with independent noise, and records whether each
pattern's argmax and the pooled argmax hit argmax q.
"""
import argparse

import numpy as np


def corrupt(logq, z, sigma_wrong, sigma_right, flatten):
    top = logq.argmax(-1)
    trial = logq + sigma_wrong * z
    right = trial.argmax(-1) == top
    sigma = np.where(right, sigma_right, sigma_wrong)[..., None]
    x = (logq + sigma * z) / (1.0 + flatten * sigma)
    return x - np.logaddexp.reduce(x, axis=-1, keepdims=True)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--vocab", type=int, default=4)
    ap.add_argument("--patterns", type=int, default=10)
    ap.add_argument("--sigma-wrong", type=float, default=1.0)
    ap.add_argument("--sigma-right", type=float, default=0.1)
    ap.add_argument("--flatten", type=float, default=2.0)
    ap.add_argument("--trials", type=int, default=1_000_000)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    rng = np.random.default_rng(a.seed)
    single = ensemble = 0.0
    done = 0
    while done < a.trials:
        n = min(100_000, a.trials - done)
        q = rng.dirichlet(np.ones(a.vocab), size=n)
        logq = np.log(q)[:, None, :].repeat(a.patterns, axis=1)
        z = rng.standard_normal((n, a.patterns, a.vocab))
        s = corrupt(logq, z, a.sigma_wrong, a.sigma_right, a.flatten)
        gold = q.argmax(-1)
        single += (s.argmax(-1) == gold[:, None]).mean(axis=1).sum()
        pooled = s.max(axis=1).argmax(-1)
        ensemble += (pooled == gold).sum()
        done += n
    single /= a.trials
    ensemble /= a.trials
    print(f"single={single:.4f} ensemble={ensemble:.4f} margin={ensemble - single:.4f}")


if __name__ == "__main__":
    main()
