"""Independent reference implementations used as test oracles."""

import numpy as np


def unicycle(x, u, dt):
    return np.array([x[0] + dt * x[3] * np.cos(x[2]), x[1] + dt * x[3] * np.sin(x[2]),
                     x[2] + dt * u[0], x[3] + dt * u[1]])


def unicycle_jac(x, u, dt):
    A = np.eye(4)
    A[0, 2] = -dt * x[3] * np.sin(x[2])
    A[0, 3] = dt * np.cos(x[2])
    A[1, 2] = dt * x[3] * np.cos(x[2])
    A[1, 3] = dt * np.sin(x[2])
    B = np.zeros((4, 2))
    B[2, 0] = dt
    B[3, 1] = dt
    return A, B


def ilqr_tracking(x0, refs, w, rw, dt, iters=200, tol=1e-12):
    """Textbook iLQR for ``sum_t w |p_t - r_t|^2 + sum_t u_t' diag(rw) u_t``.

    No control or speed bounds: callers pick instances where they stay inactive.
    ``refs`` has shape ``(T+1, 2)``; ``refs[0]`` is unused.
    """
    T = refs.shape[0] - 1
    R = np.diag(rw)
    us = np.zeros((T, 2))

    def roll(us):
        xs = [np.asarray(x0, float)]
        for t in range(T):
            xs.append(unicycle(xs[-1], us[t], dt))
        return np.array(xs)

    def cost(xs, us):
        return w * ((xs[1:, :2] - refs[1:]) ** 2).sum() + (us @ R * us).sum()

    xs = roll(us)
    J = cost(xs, us)
    for _ in range(iters):
        Vx = np.zeros(4)
        Vxx = np.zeros((4, 4))
        Vx[:2] = 2 * w * (xs[T, :2] - refs[T])
        Vxx[:2, :2] = 2 * w * np.eye(2)
        ks, Ks = [None] * T, [None] * T
        for t in range(T - 1, -1, -1):
            A, B = unicycle_jac(xs[t], us[t], dt)
            Qx = A.T @ Vx
            Qu = 2 * R @ us[t] + B.T @ Vx
            Qxx = A.T @ Vxx @ A
            Quu = 2 * R + B.T @ Vxx @ B
            Qux = B.T @ Vxx @ A
            k = -np.linalg.solve(Quu, Qu)
            K = -np.linalg.solve(Quu, Qux)
            ks[t], Ks[t] = k, K
            Vx = Qx + K.T @ Quu @ k + K.T @ Qu + Qux.T @ k
            Vxx = Qxx + K.T @ Quu @ K + K.T @ Qux + Qux.T @ K
            Vxx = 0.5 * (Vxx + Vxx.T)
            if t > 0:
                Vx[:2] += 2 * w * (xs[t, :2] - refs[t])
                Vxx[:2, :2] += 2 * w * np.eye(2)
        alpha = 1.0
        while alpha > 1e-8:
            xn = [xs[0]]
            un = np.zeros_like(us)
            for t in range(T):
                un[t] = us[t] + alpha * ks[t] + Ks[t] @ (xn[-1] - xs[t])
                xn.append(unicycle(xn[-1], un[t], dt))
            xn = np.array(xn)
            Jn = cost(xn, un)
            if Jn < J:
                break
            alpha *= 0.5
        else:
            break
        change = np.max(np.abs(un - us))
        xs, us, J = xn, un, Jn
        if change < tol:
            break
    return us, xs


def pairwise_expected_cost_bruteforce(weights, samples, cost):
    """Exhaustive ``sum_{i<j} sum_k sum_k' w_ik w_jk' l(x_ik, x_jk')``."""
    total = 0.0
    n = len(samples)
    for i in range(n):
        for j in range(i + 1, n):
            for k, a in enumerate(samples[i]):
                for kk, b in enumerate(samples[j]):
                    total += weights[i][k] * weights[j][kk] * cost(a, b)
    return total


def quartiles_by_sort(values):
    """Linear-interpolation quartiles (spreadsheet QUARTILE.INC) from a sorted list."""
    v = sorted(values)
    n = len(v)

    def q(p):
        pos = p * (n - 1)
        lo = int(np.floor(pos))
        hi = min(lo + 1, n - 1)
        return v[lo] + (pos - lo) * (v[hi] - v[lo])

    return q(0.25), q(0.5), q(0.75)
