"""Independent brute-force reference implementations used by the metric tests.

They work in exact rational arithmetic with plain loops and share no code
with ``gridstd.metrics``.
"""

from fractions import Fraction


def ap_bruteforce(scores, labels):
    n = len(scores)

    def outranks(j, i):
        # j is ranked before i: higher score, or equal score and earlier input
        return scores[j] > scores[i] or (scores[j] == scores[i] and j < i)

    precisions = []
    for i in range(n):
        if not labels[i]:
            continue
        above = [j for j in range(n) if outranks(j, i)]
        rank = len(above) + 1
        hits = sum(1 for j in above if labels[j]) + 1
        precisions.append(Fraction(hits, rank))
    return sum(precisions) / len(precisions)


def twv_bruteforce(scores, labels, terms, theta, beta):
    beta = Fraction(beta)
    total = Fraction(0)
    names = sorted(set(terms))
    for name in names:
        idx = [i for i, t in enumerate(terms) if t == name]
        tgt = [i for i in idx if labels[i]]
        non = [i for i in idx if not labels[i]]
        miss = sum(1 for i in tgt if not scores[i] > theta)
        fa = sum(1 for i in non if scores[i] > theta)
        total += Fraction(miss, len(tgt)) + beta * Fraction(fa, len(non))
    return 1 - total / len(names)


def theta_grid(scores):
    u = sorted(set(scores))
    return [(a + b) / 2.0 for a, b in zip(u, u[1:])] + [u[-1] + 1.0]


def mtwv_bruteforce(scores, labels, terms, beta=1):
    best_theta, best = None, None
    for theta in theta_grid(scores):
        v = twv_bruteforce(scores, labels, terms, theta, beta)
        if best is None or v > best or (v == best and theta < best_theta):
            best_theta, best = theta, v
    return best_theta, best
