"""Compiled inner loop of one trajectory.

Mirrors the scalar rules in :mod:`auction_bandit.mechanisms` exactly. Quality
scores are drawn from the lane's ``Generator`` one participant at a time in
ad_id order, which consumes the stream identically to one array-valued
``Generator.beta`` call per auction.
"""

import math

import numpy as np
from numba import njit

# indices into the float accumulator vector
A_DEC0, A_DEC1, A_DEC2, A_EFF, A_TH = 0, 1, 2, 3, 4
N_FACC = 5
# indices into the integer accumulator vector
A_NEFF, A_NALLOC, A_NENT, A_NTH = 0, 1, 2, 3
N_IACC = 4


@njit(cache=True)
def critical_bid(r, q, tie_wins):
    # smallest float bid b with b*q beating r; see mechanisms.payment
    p = r / q
    while not (p * q > r or (tie_wins and p * q == r)):
        p = np.nextafter(p, np.inf)
    while True:
        b = np.nextafter(p, -np.inf)
        if b * q > r or (tie_wins and b * q == r):
            p = b
        else:
            return p


@njit(cache=True)
def simulate_lane(
    rng, conv_u, part_ptr, part_idx, v, mu, ent, reserve, apd,
    ts, a0, b0, rho,
    I, C, cap, capped, imp_cap, use_imp_cap,
    facc, iacc, daily,
    record, r_winner, r_setter, r_price, r_conv, r_rev, r_eff, r_top, r_second,
    r_cat, r_erank, r_q, r_elig, r_spend,
):
    n = v.size
    T = conv_u.size
    I0 = I.copy()
    spend = np.zeros(n)
    blocked = np.zeros(n, dtype=np.bool_)
    score = np.empty(n)
    qv = np.empty(n)
    ninf = -np.inf
    for t in range(T):
        d = t // apd
        if capped and t % apd == 0:
            for j in range(n):
                spend[j] = 0.0
                blocked[j] = False
        lo = part_ptr[t]
        hi = part_ptr[t + 1]
        top = ninf
        wj = -1
        sec = ninf
        sj = -1
        bestvm = ninf
        for p in range(lo, hi):
            j = part_idx[p]
            if use_imp_cap and I[j] - I0[j] >= imp_cap[j]:
                blocked[j] = True
            if blocked[j]:
                score[j] = ninf
                continue
            if ts:
                q = rng.beta(a0[j] + C[j], b0[j] + (I[j] - C[j]))
            else:
                n1 = I[j] + 1.0
                q = C[j] / n1 + rho * math.sqrt(math.log(t + 2) / n1)
            s = v[j] * q
            score[j] = s
            qv[j] = q
            if record:
                r_q[t, j] = q
                r_elig[t, j] = True
            if s > top:
                sec = top
                sj = wj
                top = s
                wj = j
            elif s > sec:
                sec = s
                sj = j
            vmj = v[j] * mu[j]
            if vmj > bestvm:
                bestvm = vmj

        alloc = wj >= 0 and top >= reserve and top > 0.0
        real_setter = alloc and sj >= 0 and sec >= reserve
        price = 0.0
        conv = False
        charge = 0.0
        eff = 0.0
        cat = -1
        if alloc:
            runner = sec if sec > reserve else reserve
            if runner > 0.0:
                price = critical_bid(runner, qv[wj], not real_setter or wj < sj)
            conv = conv_u[t] < mu[wj]
            if conv:
                charge = price
                eff = v[wj]
            if capped:
                # same summation order as the daily spend, so a derived cap never binds on its own run
                if conv and spend[wj] + price > cap[wj]:
                    charge = cap[wj] - spend[wj]
                    blocked[wj] = True
                    spend[wj] = cap[wj]
                else:
                    spend[wj] += charge
                daily[d, wj] = spend[wj]
            else:
                daily[d, wj] += charge
            I[wj] += 1
            if conv:
                C[wj] += 1
            if ent[wj]:
                cat = 0
            elif real_setter and ent[sj]:
                cat = 1
            else:
                cat = 2
            facc[cat] += charge
            facc[A_EFF] += eff
            iacc[A_NALLOC] += 1
            if ent[wj]:
                iacc[A_NENT] += 1
            if v[wj] * mu[wj] == bestvm:
                iacc[A_NEFF] += 1
        elif not (bestvm >= reserve and bestvm > 0.0):
            iacc[A_NEFF] += 1
        if sj >= 0 and top > 0.0:
            facc[A_TH] += sec / top
            iacc[A_NTH] += 1

        if record:
            r_winner[t] = wj if alloc else -1
            r_setter[t] = (sj if real_setter else -1) if alloc else -2
            r_price[t] = price
            r_conv[t] = conv
            r_rev[t] = charge
            r_eff[t] = eff
            r_top[t] = top if top > ninf else np.nan
            r_second[t] = sec if sec > ninf else np.nan
            r_cat[t] = cat
            # best rank of an eligible entrant under (score desc, ad_id asc)
            be = -1
            for p in range(lo, hi):
                j = part_idx[p]
                if ent[j] and score[j] > ninf and (be < 0 or score[j] > score[be]):
                    be = j
            if be >= 0:
                rank = 1
                for p in range(lo, hi):
                    j = part_idx[p]
                    if j != be and score[j] > ninf and (score[j] > score[be] or (score[j] == score[be] and j < be)):
                        rank += 1
                r_erank[t] = rank
            if capped:
                for j in range(n):
                    r_spend[t, j] = spend[j]

