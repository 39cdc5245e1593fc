"""Independent reference values for the integration tests.

Everything here is computed with numpy/scipy/networkx from the defining
formulas; nothing is read back from the Rust code. Rerun with

    python3 generate_fixtures.py

from this directory. Output is deterministic.
"""

import json
import math
import os

import networkx as nx
import numpy as np
import scipy.linalg as sla
from scipy.sparse.csgraph import floyd_warshall

HERE = os.path.dirname(os.path.abspath(__file__))


def dump(name, obj):
    with open(os.path.join(HERE, name), "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def triplets(a):
    a = np.atleast_2d(np.asarray(a, dtype=float))
    rows, cols = a.shape
    entries = [[int(i), int(j), float(a[i, j])] for i in range(rows) for j in range(cols) if a[i, j] != 0.0]
    return {"rows": rows, "cols": cols, "entries": entries}


def problem_json(A, c, M, N, b, p):
    return {"A": triplets(A) if A.shape[0] else {"rows": 0, "cols": A.shape[1], "entries": []},
            "c": list(map(float, c)), "M": triplets(M), "N": triplets(N),
            "b": list(map(float, b)), "p": float(p)}


def incidence(n, edges):
    B = np.zeros((len(edges), n))
    for e, (u, v) in enumerate(edges):
        B[e, u] += 1.0
        B[e, v] -= 1.0
    return B


def connected_graph(rng, n, m, simple=False):
    """Random spanning tree plus extra edges."""
    order = rng.permutation(n)
    edges = []
    for i in range(1, n):
        j = int(rng.integers(0, i))
        edges.append((int(order[j]), int(order[i])))
    seen = {frozenset(e) for e in edges}
    while len(edges) < m:
        u, v = map(int, rng.choice(n, 2, replace=False))
        if simple and frozenset((u, v)) in seen:
            continue
        seen.add(frozenset((u, v)))
        edges.append((u, v))
    return edges


def log_uniform(rng, lo, hi, size):
    return np.exp(rng.uniform(math.log(lo), math.log(hi), size))


# ---------------------------------------------------------------------------
# reference optimizer: damped Newton on an explicit kernel basis


def objective(x, b, M, N, p):
    return float(b @ x + np.sum((M @ x) ** 2) + np.sum(np.abs(N @ x) ** p))


def newton(A, c, M, N, b, p, iters=500):
    n = M.shape[1]
    if A.shape[0]:
        x0 = np.linalg.lstsq(A, c, rcond=None)[0]
        Z = sla.null_space(A, rcond=1e-12)
    else:
        x0 = np.zeros(n)
        Z = np.eye(n)
    if Z.shape[1] == 0:
        return x0, objective(x0, b, M, N, p)
    y = np.zeros(Z.shape[1])
    f = lambda y: objective(x0 + Z @ y, b, M, N, p)
    for _ in range(iters):
        x = x0 + Z @ y
        nx_ = N @ x
        grad = Z.T @ (b + 2 * M.T @ (M @ x) + p * N.T @ (np.abs(nx_) ** (p - 2) * nx_))
        H = Z.T @ (2 * M.T @ M + p * (p - 1) * N.T @ (np.abs(nx_)[:, None] ** (p - 2) * N)) @ Z
        H = H + 1e-14 * np.trace(H) / max(H.shape[0], 1) * np.eye(H.shape[0])
        d = -np.linalg.lstsq(H, grad, rcond=None)[0]
        dec = -grad @ d
        if dec <= 1e-26 * (1 + abs(f(y))):
            break
        t, f0 = 1.0, f(y)
        while f(y + t * d) > f0 - 0.25 * t * dec and t > 1e-20:
            t *= 0.5
        y = y + t * d
    x = x0 + Z @ y
    return x, objective(x, b, M, N, p)


# ---------------------------------------------------------------------------


def linsolve(rng):
    G = rng.standard_normal((10, 10))
    A = G @ G.T + 0.5 * np.eye(10)
    rhs = rng.standard_normal(10)
    x = sla.solve(A, rhs, assume_a="sym")
    dump("linsolve_spd.json", {"a": A.tolist(), "rhs": rhs.tolist(), "x": x.tolist()})


def cycle_projection(rng):
    cases = []
    tri = [(0, 1), (1, 2), (2, 0)]
    for n, edges, grad in [(3, tri, np.array([1.0, 0.0, 0.0])),
                           (8, connected_graph(rng, 8, 16), rng.standard_normal(16))]:
        B = incidence(n, edges)
        proj = grad - B @ np.linalg.pinv(B.T @ B) @ (B.T @ grad)
        cases.append({"graph": {"n": n, "edges": edges}, "grad": grad.tolist(), "projection": proj.tolist()})
    dump("cycle_projection.json", cases)


def shortest_paths(rng):
    n = 20
    edges = connected_graph(rng, n, 45, simple=True)
    lengths = rng.uniform(0.5, 5.0, len(edges))
    W = np.zeros((n, n))
    for (u, v), l in zip(edges, lengths):
        W[u, v] = W[v, u] = l
    D = floyd_warshall(W, directed=False)
    dump("shortest_paths.json", {"graph": {"n": n, "edges": edges}, "lengths": lengths.tolist(), "distances": D.tolist()})


def instance_eval(rng):
    p = 3.5
    A = rng.standard_normal((2, 5))
    c = rng.standard_normal(2)
    M = rng.standard_normal((3, 5))
    N = rng.standard_normal((4, 5))
    b = rng.standard_normal(5)
    x = np.linalg.lstsq(A, c, rcond=None)[0] + sla.null_space(A) @ rng.standard_normal(3)
    Z = sla.null_space(A)
    nx_ = N @ x
    g = b / p + 2 / p * M.T @ (M @ x) + N.T @ (np.abs(nx_) ** (p - 2) * nx_)
    R = 2 / p**2 * M.T @ M + 2 * N.T @ np.diag(np.abs(nx_) ** (p - 2)) @ N
    deltas = []
    for scale in [1e-2, 1e-1, 1.0]:
        d = scale * (Z @ rng.standard_normal(3))
        res = float(g @ d - d @ R @ d - np.sum(np.abs(N @ d) ** p))
        deltas.append({"delta": d.tolist(), "res": res, "f_after": objective(x - d / p, b, M, N, p)})
    matrix = {"problem": problem_json(A, c, M, N, b, p), "x": x.tolist(), "f": objective(x, b, M, N, p),
              "gradient_residual": g.tolist(), "deltas": deltas}

    tri = [(0, 1), (1, 2), (2, 0)]
    gf, r, s, pf = rng.standard_normal(3), log_uniform(rng, 0.1, 10, 3), log_uniform(rng, 0.1, 10, 3), 4.0
    demands = np.array([1.0, -0.25, -0.75])
    B = incidence(3, tri)
    f0 = np.linalg.lstsq(B.T, demands, rcond=None)[0]
    flows = []
    for _ in range(100):
        f = f0 + rng.standard_normal() * np.ones(3)
        obj = float(gf @ f - np.sum(r * f**2) - np.sum(s * np.abs(f) ** pf))
        prob_val = float(gf @ f + np.sum(r * f**2) + np.sum(s * np.abs(f) ** pf))
        flows.append({"f": f.tolist(), "obj": obj, "problem_objective": prob_val})
    flow = {"instance": {"graph": {"n": 3, "edges": tri}, "g": gf.tolist(), "r": r.tolist(), "s": s.tolist(), "p": pf},
            "demands": demands.tolist(), "flows": flows}
    dump("instance_eval.json", {"matrix": matrix, "flow": flow})


def mwu_arithmetic():
    def params(m1, p):
        den = p * (3 * p - 2)
        alpha = m1 ** (-(p * p - 5 * p + 2) / den) / p
        beta = m1 ** ((p - 2) / (3 * p - 2))
        rho = m1 ** ((p * p - 4 * p + 2) / den)
        tau = m1 ** ((p - 1) * (p - 2) / (3 * p - 2))
        T = math.ceil(m1 ** (1 / p) / alpha)
        K = math.ceil(2 ** (-p / (p - 2)) * rho**2 * m1 ** (2 / p) * beta ** (-2 / (p - 2)))
        return {"m1": m1, "p": p, "alpha": alpha, "beta": beta, "rho": rho, "tau": tau, "t": T, "k_max": K,
                "exponents": [(p - 2) / (3 * p - 2), (p - 1) * (p - 2) / (3 * p - 2), (p * p - 4 * p + 2) / den,
                              (p * p - 5 * p + 2) / den]}

    # ν = 16 with p = 4 on a problem whose feasible set is a line
    A = np.array([[1.0, 2.0]])
    c = np.array([3.0])
    M = np.array([[1.0, -0.5]])
    N = np.array([[0.7, 0.2], [-0.3, 1.1]])
    p, nu = 4.0, 16.0
    _, opt = newton(A, c, M, N, np.zeros(2), p)
    Ms, cs = nu ** (-(p - 2) / (2 * p)) * M, nu ** (-1 / p) * c
    _, opt_s = newton(A, cs, Ms, N, np.zeros(2), p)

    # the symmetric two-coordinate instance
    psi = (1 / 3 ** (4 - 2)) * 0.5
    sym_opt = 2 * 0.5**4

    # reduction of a p = 32 residual to ⌈ln m⌉ with m = 256, ν = 1, b = 40
    pr, m, nur, bb, a = 32.0, 256, 1.0, 40.0, 1 / 33
    q = math.ceil(math.log(m))
    gap = 1 / q - 1 / pr
    e = pr / (pr - 1) * gap
    reduction = {"p": pr, "m": m, "nu": nur, "b": bb, "q": q,
                 "mu1": a / (4 * bb) * m ** (-e - 1 / (q - 1)),
                 "kappa1": 8 * bb / a**2 * m ** (e + 1 / (q - 1)),
                 "pow_scale": 2 ** (-1 / q) * (nur / m) ** gap}

    # halving schedule f0 = 8, κ = 1, p = 2, ε = 1
    sched, v = [], 8.0
    while v >= 1.0 * 8.0 / (1.0 * 2.0):
        sched.append(v)
        v /= 2
    dump("mwu_arithmetic.json", {
        "params": [params(16, 4.0), params(256, 8.0)],
        "scaling": {"problem": problem_json(A, c, M, N, np.zeros(2), p), "nu": nu, "optimum": opt, "scaled_optimum": opt_s},
        "symmetric": {"optimum": sym_opt, "psi_unit": psi, "p": 4.0},
        "reduction": reduction,
        "schedule": {"f0": 8.0, "kappa": 1.0, "p": 2.0, "epsilon": 1.0, "nu": sched},
        "decision_mu": {"a": 0.5, "b": 1.0, "alpha": 1.0, "beta": 1.0, "p": 4.0, "mu": 0.5 / (4 * 1.0 * 1.0 * 1.0)},
    })


def kkt_oracle(rng):
    p, m1 = 4.0, 5
    A = rng.standard_normal((2, 4))
    c = rng.standard_normal(2)
    M = rng.standard_normal((3, 4))
    N = rng.standard_normal((m1, 4))
    w = 1 + rng.uniform(0, 3, m1)
    r = w ** (p - 2)
    Q = 2 * m1 ** ((p - 2) / p) * M.T @ M + 2 / 3 ** (p - 2) * N.T @ np.diag(r) @ N
    K = np.block([[Q, A.T], [A, np.zeros((2, 2))]])
    sol = np.linalg.solve(K, np.concatenate([np.zeros(4), c]))
    dump("kkt_oracle.json", {"A": triplets(A), "c": c.tolist(), "M": triplets(M), "N": triplets(N), "w": w.tolist(),
                             "p": p, "m1": m1, "delta": sol[:4].tolist()})


def mwu_witness(rng):
    cases = []
    for k in range(3):
        n, m, p = 8 + 2 * k, 18 + 4 * k, [4.0, 6.0, 8.0][k]
        edges = connected_graph(rng, n, m)
        B = incidence(n, edges)
        g = rng.standard_normal(m)
        ghat = g - B @ np.linalg.pinv(B.T @ B) @ (B.T @ g)
        ghat /= np.linalg.norm(ghat)
        A = np.vstack([B.T, ghat])
        c = np.concatenate([np.zeros(n), [1.0]])
        M = np.diag(np.sqrt(log_uniform(rng, 0.1, 10, m)))
        N = np.diag(log_uniform(rng, 0.1, 10, m) ** (1 / p))
        x, nu = newton(A, c, M, N, np.zeros(m), p)
        cases.append({"graph": {"n": n, "edges": edges}, "A": triplets(A), "c": c.tolist(), "M": triplets(M),
                      "N": triplets(N), "p": p, "nu": nu, "x": x.tolist()})
    dump("mwu_witness.json", cases)


def flow_instance(rng, n, m, p):
    edges = connected_graph(rng, n, m)
    demands = np.zeros(n)
    demands[0], demands[-1] = 1.0, -1.0
    noise = rng.standard_normal(n)
    demands += noise - noise.mean()
    inst = {"graph": {"n": n, "edges": edges}, "g": rng.standard_normal(m).tolist(),
            "r": log_uniform(rng, 0.1, 10, m).tolist(), "s": log_uniform(rng, 0.1, 10, m).tolist(), "p": p}
    return inst, demands


def flow_optimum(inst, demands):
    n = inst["graph"]["n"]
    B = incidence(n, inst["graph"]["edges"])
    p = inst["p"]
    M = np.diag(np.sqrt(inst["r"]))
    N = np.diag(np.asarray(inst["s"]) ** (1 / p))
    return newton(B.T, demands, M, N, np.asarray(inst["g"]), p)[1]


def driver(rng):
    out = []
    for n, m, p in [(30, 120, 8.0), (12, 30, 4.0)]:
        inst, d = flow_instance(rng, n, m, p)
        out.append({"file": {"kind": "flow", "instance": inst, "demands": d.tolist()}, "optimum": flow_optimum(inst, d)})
    dump("driver_flow.json", out)


def decision_energy(rng):
    p = 4.0
    A = rng.standard_normal((2, 6))
    c = rng.standard_normal(2)
    M = rng.standard_normal((4, 6))
    N = rng.standard_normal((8, 6))
    b = rng.standard_normal(6)
    x = np.linalg.lstsq(A, c, rcond=None)[0] + sla.null_space(A) @ rng.standard_normal(4)
    nx_ = N @ x
    g = b / p + 2 / p * M.T @ (M @ x) + N.T @ (np.abs(nx_) ** (p - 2) * nx_)
    R = 2 / p**2 * M.T @ M + 2 * N.T @ np.diag(np.abs(nx_) ** (p - 2)) @ N
    L = np.linalg.cholesky(R + 1e-300 * np.eye(6))
    a, nu = 0.5, 0.3
    Z = sla.null_space(A)
    gp = Z @ (Z.T @ g)
    Aaug = np.vstack([A, gp])
    caug = np.concatenate([np.zeros(2), [a * nu]])
    _, opt = newton(Aaug, caug, L.T, N, np.zeros(6), p)
    dump("decision_energy.json", {"problem": problem_json(A, c, M, N, b, p), "x": x.tolist(), "a": a, "nu": nu,
                                  "optimum": opt})


def select_step(rng):
    p = 3.0
    A = rng.standard_normal((1, 4))
    c = rng.standard_normal(1)
    M = rng.standard_normal((3, 4))
    N = rng.standard_normal((5, 4))
    b = rng.standard_normal(4)
    x = np.linalg.lstsq(A, c, rcond=None)[0] + sla.null_space(A) @ rng.standard_normal(3)
    Z = sla.null_space(A)
    f = lambda y: objective(y, b, M, N, p)
    cases = []
    for spread in [1.0, 1e-3]:
        cands = [spread * (Z @ rng.standard_normal(3)) for _ in range(6)]
        vals = [f(x - d / p) for d in cands]
        best = int(np.argmin(vals))
        cases.append({"candidates": [d.tolist() for d in cands], "objectives": vals,
                      "best": best if vals[best] < f(x) else None})
    # all worse than standing still: steps along +gradient
    grad = b + 2 * M.T @ (M @ x) + p * N.T @ (np.abs(N @ x) ** (p - 2) * (N @ x))
    pg = Z @ (Z.T @ grad)
    cands = [-k * pg for k in (0.5, 1.0, 2.0)]
    cases.append({"candidates": [d.tolist() for d in cands], "objectives": [f(x - d / p) for d in cands], "best": None})
    dump("select_step.json", {"problem": problem_json(A, c, M, N, b, p), "x": x.tolist(), "f": f(x), "cases": cases})


def spanner_cases(rng):
    tri = {"graph": {"n": 3, "edges": [(0, 1), (1, 2), (2, 0)]}, "lengths": [1.0] * 3, "k": 2}
    k20 = {"graph": {"n": 20, "edges": [(i, j) for i in range(20) for j in range(i + 1, 20)]}, "lengths": [1.0] * 190, "k": 3}
    out = []
    for case in [tri, k20]:
        n = case["graph"]["n"]
        W = np.zeros((n, n))
        for (u, v), l in zip(case["graph"]["edges"], case["lengths"]):
            W[u, v] = W[v, u] = l
        case["distances"] = floyd_warshall(W, directed=False).tolist()
        out.append(case)
    dump("spanner.json", out)


def spectral(rng):
    n, m = 30, 200
    edges = connected_graph(rng, n, m)
    w = log_uniform(rng, 0.1, 10, m)
    B = incidence(n, edges)
    L = B.T @ np.diag(w) @ B
    lam, V = np.linalg.eigh(L)
    keep = lam > 1e-10 * lam.max()
    W = V[:, keep] / np.sqrt(lam[keep])
    dump("spectral.json", {"graph": {"n": n, "edges": edges}, "w": w.tolist(), "half_pinv": W.tolist()})


def voltage_instances(rng):
    out = []
    for n, m, p in [(40, 600, 4.0), (40, 400, 4.0)]:
        edges = connected_graph(rng, n, m)
        d = rng.standard_normal(n)
        out.append({"kind": "voltage", "instance": {"graph": {"n": n, "edges": edges},
                                                     "w": log_uniform(rng, 0.1, 10, m).tolist(),
                                                     "s": log_uniform(rng, 0.1, 10, m).tolist(),
                                                     "d": (d - d.mean()).tolist(), "p": p}})
    dump("voltage_instances.json", out)


def leverage(A):
    U, sv, _ = np.linalg.svd(A, full_matrices=False)
    keep = sv > 1e-10 * sv.max()
    return np.sum(U[:, keep] ** 2, axis=1)


def lewis(A, p, tol=1e-14, iters=20000):
    w = leverage(A)
    for _ in range(iters):
        G = A.T @ (w[:, None] ** (1 - 2 / p) * A)
        q = np.einsum("ij,jk,ik->i", A, np.linalg.pinv(G), A)
        nw = q ** (p / 2)
        if np.max(np.abs(nw - w) / w) < tol:
            return nw
        w = nw
    return w


def lewis_cases(rng):
    foster = rng.standard_normal((50, 5))
    lw = []
    for p in [2.5, 3.0, 3.9]:
        A = rng.standard_normal((30, 4)) * log_uniform(rng, 0.2, 5, 30)[:, None]
        lw.append({"a": triplets(A), "p": p, "tau": lewis(A, p).tolist()})
    C = rng.standard_normal((6, 4))
    D = rng.standard_normal((6, 4))
    p, Cc, n = 3.0, 2.0, 4
    tc, td = leverage(C), lewis(D, p)
    ln = max(math.log(n), 1.0)
    nu = Cc * np.maximum(tc * ln, td * n ** (p / 2 - 1) * ln)
    dump("lewis.json", {
        "foster": {"a": triplets(foster), "tau": leverage(foster).tolist()},
        "weights": lw,
        "duplicate": [{"p": p, "tau": lewis(np.array([[1.0], [1.0]]), p).tolist()} for p in [2.0, 2.5, 3.0, 3.9]],
        "sampling": {"c": triplets(C), "d": triplets(D), "p": p, "c_const": Cc, "n": n,
                     "tau_c": tc.tolist(), "tau_d": td.tolist(), "nu": nu.tolist()},
    })


def unbounded_cases(rng):
    """Random instances on ≤ 12 vertices with the truth from enumerating
    every simple cycle of the untouched subgraph."""
    out = []
    for i in range(200):
        n = int(rng.integers(3, 13))
        m = int(rng.integers(n - 1, min(n * (n - 1) // 2, n + 8) + 1))
        edges = connected_graph(rng, n, m, simple=True)
        phi = rng.integers(-3, 4, n)
        mode = i % 4
        if mode == 0:
            # untouched edges form a spanning forest only: every cycle has a touched edge
            forest = nx.minimum_spanning_tree(nx.Graph([(u, v, {"id": e}) for e, (u, v) in enumerate(edges)]))
            untouched = {d["id"] for _, _, d in forest.edges(data=True) if rng.random() < 0.8}
        else:
            untouched = {e for e in range(m) if rng.random() < 0.7}
        g = [float(phi[u] - phi[v]) for (u, v) in edges]
        if mode in (1, 2) and untouched:
            e = int(rng.choice(sorted(untouched)))
            g[e] += 1.0
        r, s = [], []
        for e in range(m):
            if e in untouched:
                r.append(0.0)
                s.append(0.0)
            else:
                g[e] = float(rng.integers(-5, 6))
                r.append(1.0 if rng.random() < 0.5 else 0.0)
                s.append(0.0 if r[-1] else 2.0)
        H = nx.Graph()
        H.add_nodes_from(range(n))
        eid = {}
        for e in untouched:
            u, v = edges[e]
            H.add_edge(u, v)
            eid[(u, v)] = (e, 1.0)
            eid[(v, u)] = (e, -1.0)
        unbounded = False
        for cyc in nx.simple_cycles(H):
            total = 0.0
            for a, b in zip(cyc, cyc[1:] + cyc[:1]):
                e, sign = eid[(a, b)]
                total += sign * g[e]
            if total != 0.0:
                unbounded = True
                break
        out.append({"instance": {"graph": {"n": n, "edges": edges}, "g": g, "r": r, "s": s, "p": 4.0},
                    "unbounded": unbounded})
    dump("unbounded.json", out)


def pow2_floor(x):
    if x == 0.0:
        return 0.0
    mant, exp = math.frexp(x)
    return math.ldexp(1.0, exp - 1)


def bucket_cases(rng):
    n, m = 20, 120
    edges = connected_graph(rng, n, m)
    r = log_uniform(rng, 2.0**-6, 2.0**6, m)
    s = log_uniform(rng, 2.0**-6, 2.0**6, m)
    r[rng.random(m) < 0.3] = 0.0
    s[(rng.random(m) < 0.3) & (r > 0)] = 0.0
    rr = [pow2_floor(v) for v in r]
    sr = [pow2_floor(v) for v in s]
    distinct = {(a, b) for a, b in zip(rr, sr)}
    nz = [v for v in np.concatenate([r, s]) if v > 0]
    span = math.log2(max(nz) / min(nz))
    dump("buckets.json", {"instance": {"graph": {"n": n, "edges": edges}, "g": rng.standard_normal(m).tolist(),
                                       "r": r.tolist(), "s": s.tolist(), "p": 4.0},
                          "rounded_r": rr, "rounded_s": sr, "distinct_pairs": len(distinct),
                          "bound": (span + 2) ** 2})


def two_method(rng):
    out = []
    for k in range(4):
        p = [2.5, 4.0, 6.0, 8.0][k]
        n = 6 + k
        A = rng.standard_normal((2, n))
        c = rng.standard_normal(2)
        M = rng.standard_normal((n, n)) / math.sqrt(n)
        N = rng.standard_normal((2 * n, n)) / math.sqrt(n)
        b = rng.standard_normal(n)
        out.append({"problem": problem_json(A, c, M, N, b, p), "optimum": newton(A, c, M, N, b, p)[1]})
    dump("two_method.json", out)


def main():
    rng = np.random.default_rng(20240917)
    linsolve(rng)
    cycle_projection(rng)
    shortest_paths(rng)
    instance_eval(rng)
    mwu_arithmetic()
    kkt_oracle(rng)
    mwu_witness(rng)
    driver(rng)
    decision_energy(rng)
    select_step(rng)
    spanner_cases(rng)
    spectral(rng)
    voltage_instances(rng)
    lewis_cases(rng)
    unbounded_cases(rng)
    bucket_cases(rng)
    two_method(rng)


if __name__ == "__main__":
    main()
