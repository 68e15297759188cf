"""Brute-force fixed points over explicit successor sets, kept independent of the
vectorised prefix-sum implementation in ``simgap.symctrl``."""
import numpy as np


def successor_lists(abs_):
    return [[None if abs_.unsafe[c, j] else set(abs_.successors(c, j).tolist())
             for j in range(abs_.igrid.size)] for c in range(abs_.sgrid.size)]


def oracle_invariance(abs_, safe):
    succ = successor_lists(abs_)
    W = set(safe)
    while True:
        keep = {c for c in W if any(s is not None and s <= W for s in succ[c])}
        if keep == W:
            break
        W = keep
    choice = {c: min(j for j, s in enumerate(succ[c]) if s is not None and s <= W) for c in W}
    return W, choice


def oracle_reach_avoid(abs_, target, avoid):
    succ = successor_lists(abs_)
    rank = {c: 0 for c in target}
    k = 0
    while True:
        k += 1
        W = set(rank)
        new = [c for c in range(abs_.sgrid.size) if c not in W and c not in avoid
               and any(s is not None and s <= W for s in succ[c])]
        if not new:
            break
        for c in new:
            rank[c] = k
    choice = {}
    for c, r in rank.items():
        if r == 0:
            continue
        worst = [max(rank[t] for t in s) if s is not None and all(rank.get(t, np.inf) < r for t in s)
                 else np.inf for s in succ[c]]
        choice[c] = int(np.argmin(worst))
    return rank, choice
