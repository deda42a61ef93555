# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled sampler core.

Mirror of ``abmcmc._purecore`` with identical evaluation order, so both
cores walk bit-identical chains from the same seed.  Any behavioural
change must be made in both files.
"""

import numpy as np

from libc.math cimport exp, isnan, lgamma, log, nearbyint

cdef double NEG_INF = float("-inf")

cdef int KIND_CONSTRAINT = 0
cdef int KIND_COUNT_ACTION = 1
cdef int KIND_COUNT_ROWSUM = 2
cdef int KIND_AFFINE = 3


def libm_lgamma(double x):
    """C-library lgamma, exposed so the pure-python core can match it bitwise."""
    return lgamma(x)


cdef class SumTree:
    cdef public long capacity
    cdef public long num_leaves
    cdef double[::1] nodes
    cdef object nodes_np

    def __init__(self, long num_leaves):
        cdef long cap = 1
        while cap < max(num_leaves, 1):
            cap *= 2
        self.capacity = cap
        self.num_leaves = num_leaves
        self.nodes_np = np.zeros(2 * cap, dtype=np.float64)
        self.nodes = self.nodes_np

    cpdef double total(self):
        return self.nodes[1]

    cpdef double get(self, long leaf):
        return self.nodes[self.capacity + leaf]

    cpdef update(self, long leaf, double weight):
        if weight < 0:
            raise ValueError("sum tree weights must be non-negative")
        cdef long pos = self.capacity + leaf
        self.nodes[pos] = weight
        pos >>= 1
        while pos >= 1:
            self.nodes[pos] = self.nodes[2 * pos] + self.nodes[2 * pos + 1]
            pos >>= 1

    cpdef long find(self, double value):
        cdef long pos = 1
        cdef double left
        while pos < self.capacity:
            left = self.nodes[2 * pos]
            if value < left:
                pos = 2 * pos
            else:
                value -= left
                pos = 2 * pos + 1
        cdef long leaf = pos - self.capacity
        if leaf >= self.num_leaves or self.nodes[self.capacity + leaf] == 0.0:
            if leaf > self.num_leaves - 1:
                leaf = self.num_leaves - 1
            while leaf > 0 and self.nodes[self.capacity + leaf] == 0.0:
                leaf -= 1
        return leaf

    def draw(self, rng):
        cdef double total = self.total()
        if total <= 0.0:
            raise ValueError("cannot draw from an all-zero sum tree")
        return self.find(rng.random() * total)


cdef inline long _isort(long* buf, long count) noexcept nogil:
    # Insertion sort: touched sets are small and nearly sorted.
    cdef long a, b, key
    for a in range(1, count):
        key = buf[a]
        b = a - 1
        while b >= 0 and buf[b] > key:
            buf[b + 1] = buf[b]
            b -= 1
        buf[b + 1] = key
    return 0


cdef class Engine:
    cdef object p
    cdef long n, total_dims, n_traj, num_timesteps, num_states, num_actions
    cdef long n_factors, n_constraint, n_trackers
    cdef double inv_tau, weight_floor

    cdef double[::1] h_n
    cdef unsigned char[::1] is_int
    cdef long long[::1] f_indptr
    cdef int[::1] f_var
    cdef double[::1] f_coef
    cdef double[::1] f_off
    cdef unsigned char[::1] f_kind
    cdef double[::1] f_p0, f_p1, f_p2
    cdef long long[::1] v_indptr
    cdef int[::1] v_fid
    cdef double[::1] v_coef
    cdef long long[::1] m_indptr
    cdef int[::1] m_row
    cdef double[::1] m_coef
    cdef double[::1] v_base
    cdef int[::1] rowsum_fid
    cdef int[::1] action_fid
    cdef long long[::1] rinf_indptr
    cdef int[::1] rinf_state
    cdef double[::1] inj0
    cdef double[::1] tr_off
    cdef long long[::1] trv_indptr
    cdef int[::1] trv_tid
    cdef double[::1] trv_coef

    cdef object pi, start_exact, start_approx

    # mutable state
    cdef object x_np, x_full_np, occ_np, args_np, tr_args_np
    cdef object cell_val_np, cell_exact_np, r_np, w_np
    cdef double[::1] x, x_full, occ, args, tr_args, cell_val, R, w
    cdef unsigned char[::1] cell_exact
    cdef SumTree tree
    cdef double cell_sum, start_val, pen_sum, s_total
    cdef bint start_ok
    cdef long n_violated, n_approx
    cdef public long steps, accepted

    # scratch buffers
    cdef object _cells_buf_np, _vars_buf_np, _cflag_np, _vflag_np
    cdef long[::1] _cells_buf, _vars_buf
    cdef unsigned char[::1] _cflag, _vflag
    cdef object _u_args_j, _u_args_v, _u_full_d, _u_full_v, _u_occ_c, _u_occ_v
    cdef object _u_cell_c, _u_cell_v, _u_cell_e, _u_r_l, _u_r_v, _u_tr_t, _u_tr_v
    cdef object _tu_leaf, _tu_old, _tu_new, _ch_j, _ch_old, _ch_new

    def __init__(self, prob):
        self.p = prob
        self.n = prob.n
        self.total_dims = prob.total_dims
        self.n_traj = prob.n_traj
        self.num_timesteps = prob.num_timesteps
        self.num_states = prob.num_states
        self.num_actions = prob.num_actions
        self.n_factors = len(prob.f_kind)
        self.n_constraint = prob.n_constraint
        self.n_trackers = prob.n_trackers
        self.inv_tau = prob.inv_tau
        self.weight_floor = prob.weight_floor

        self.h_n = np.ascontiguousarray(prob.h_n, dtype=np.float64)
        self.is_int = np.ascontiguousarray(prob.is_int, dtype=np.uint8)
        self.f_indptr = np.ascontiguousarray(prob.f_indptr, dtype=np.int64)
        self.f_var = np.ascontiguousarray(prob.f_var, dtype=np.int32)
        self.f_coef = np.ascontiguousarray(prob.f_coef, dtype=np.float64)
        self.f_off = np.ascontiguousarray(prob.f_off, dtype=np.float64)
        self.f_kind = np.ascontiguousarray(prob.f_kind, dtype=np.uint8)
        self.f_p0 = np.ascontiguousarray(prob.f_p0, dtype=np.float64)
        self.f_p1 = np.ascontiguousarray(prob.f_p1, dtype=np.float64)
        self.f_p2 = np.ascontiguousarray(prob.f_p2, dtype=np.float64)
        self.v_indptr = np.ascontiguousarray(prob.v_indptr, dtype=np.int64)
        self.v_fid = np.ascontiguousarray(prob.v_fid, dtype=np.int32)
        self.v_coef = np.ascontiguousarray(prob.v_coef, dtype=np.float64)
        self.m_indptr = np.ascontiguousarray(prob.m_indptr, dtype=np.int64)
        self.m_row = np.ascontiguousarray(prob.m_row, dtype=np.int32)
        self.m_coef = np.ascontiguousarray(prob.m_coef, dtype=np.float64)
        self.v_base = np.ascontiguousarray(prob.v_base, dtype=np.float64)
        self.rowsum_fid = np.ascontiguousarray(prob.rowsum_fid, dtype=np.int32)
        self.action_fid = np.ascontiguousarray(prob.action_fid, dtype=np.int32)
        self.rinf_indptr = np.ascontiguousarray(prob.rinf_indptr, dtype=np.int64)
        self.rinf_state = np.ascontiguousarray(prob.rinf_state, dtype=np.int32)
        self.inj0 = np.ascontiguousarray(prob.inj0, dtype=np.float64)
        self.tr_off = np.ascontiguousarray(prob.tr_off, dtype=np.float64)
        self.trv_indptr = np.ascontiguousarray(prob.trv_indptr, dtype=np.int64)
        self.trv_tid = np.ascontiguousarray(prob.trv_tid, dtype=np.int32)
        self.trv_coef = np.ascontiguousarray(prob.trv_coef, dtype=np.float64)

        self.pi = prob.pi
        self.start_exact = prob.start_exact
        self.start_approx = prob.start_approx

        cdef long n = self.n
        cdef long ns = self.num_timesteps * self.num_states
        self.x_np = np.zeros(n, dtype=np.float64)
        self.x_full_np = np.zeros(self.total_dims, dtype=np.float64)
        self.occ_np = np.zeros(ns, dtype=np.float64)
        self.args_np = np.zeros(self.n_factors, dtype=np.float64)
        self.tr_args_np = np.array(prob.tr_off, dtype=np.float64).copy()
        self.cell_val_np = np.zeros(ns, dtype=np.float64)
        self.cell_exact_np = np.ones(ns, dtype=np.uint8)
        self.r_np = np.zeros(2 * n, dtype=np.float64)
        self.w_np = np.zeros(2 * n, dtype=np.float64)
        self.x = self.x_np
        self.x_full = self.x_full_np
        self.occ = self.occ_np
        self.args = self.args_np
        self.tr_args = self.tr_args_np
        self.cell_val = self.cell_val_np
        self.cell_exact = self.cell_exact_np
        self.R = self.r_np
        self.w = self.w_np
        self.tree = SumTree(2 * n)
        self.steps = 0
        self.accepted = 0

        self._cells_buf_np = np.zeros(ns + 1, dtype=np.int64)
        self._vars_buf_np = np.zeros(n + 1, dtype=np.int64)
        self._cflag_np = np.zeros(ns, dtype=np.uint8)
        self._vflag_np = np.zeros(n, dtype=np.uint8)
        self._cells_buf = self._cells_buf_np
        self._vars_buf = self._vars_buf_np
        self._cflag = self._cflag_np
        self._vflag = self._vflag_np

        cdef long deg_v = 0, deg_m = 0, k, bound, qq, jj
        cdef long max_r = 2
        for k in range(n):
            if self.v_indptr[k + 1] - self.v_indptr[k] > deg_v:
                deg_v = self.v_indptr[k + 1] - self.v_indptr[k]
            if self.m_indptr[k + 1] - self.m_indptr[k] > deg_m:
                deg_m = self.m_indptr[k + 1] - self.m_indptr[k]
            bound = 2
            for qq in range(self.v_indptr[k], self.v_indptr[k + 1]):
                jj = self.v_fid[qq]
                bound += 2 * (self.f_indptr[jj + 1] - self.f_indptr[jj])
            if bound > max_r:
                max_r = bound
        self._u_args_j = np.zeros(max(deg_v, 1), dtype=np.int64)
        self._u_args_v = np.zeros(max(deg_v, 1), dtype=np.float64)
        self._u_full_d = np.zeros(max(deg_m, 1), dtype=np.int64)
        self._u_full_v = np.zeros(max(deg_m, 1), dtype=np.float64)
        self._u_occ_c = np.zeros(max(deg_m, 1), dtype=np.int64)
        self._u_occ_v = np.zeros(max(deg_m, 1), dtype=np.float64)
        self._u_cell_c = np.zeros(ns + 1, dtype=np.int64)
        self._u_cell_v = np.zeros(ns + 1, dtype=np.float64)
        self._u_cell_e = np.zeros(ns + 1, dtype=np.uint8)
        self._u_r_l = np.zeros(max_r, dtype=np.int64)
        self._u_r_v = np.zeros(max_r, dtype=np.float64)
        self._u_tr_t = np.zeros(max(self.n_trackers, 1), dtype=np.int64)
        self._u_tr_v = np.zeros(max(self.n_trackers, 1), dtype=np.float64)
        self._tu_leaf = np.zeros(2 * n + 2, dtype=np.int64)
        self._tu_old = np.zeros(2 * n + 2, dtype=np.float64)
        self._tu_new = np.zeros(2 * n + 2, dtype=np.float64)
        self._ch_j = np.zeros(max(deg_v, 1), dtype=np.int64)
        self._ch_old = np.zeros(max(deg_v, 1), dtype=np.float64)
        self._ch_new = np.zeros(max(deg_v, 1), dtype=np.float64)

    # -- factor evaluation --------------------------------------------------

    cdef inline double _eval(self, long j, double x) noexcept:
        cdef int kind = self.f_kind[j]
        cdef double lo, hi, xc
        if kind == KIND_CONSTRAINT:
            lo = self.f_p0[j]
            hi = self.f_p1[j]
            if x > hi:
                return -(x - hi) * self.f_p2[j]
            if x < lo:
                return -(lo - x) * self.f_p2[j]
            return 0.0
        if kind == KIND_COUNT_ACTION:
            hi = self.f_p1[j]
            xc = 0.0 if x < 0.0 else (hi if x > hi else x)
            return xc * self.f_p0[j] - lgamma(xc + 1.0)
        if kind == KIND_COUNT_ROWSUM:
            hi = self.f_p0[j]
            xc = 0.0 if x < 0.0 else (hi if x > hi else x)
            return lgamma(xc + 1.0)
        hi = self.f_p2[j]
        xc = 0.0 if x < 0.0 else (hi if x > hi else x)
        return self.f_p0[j] * xc + self.f_p1[j]

    cdef inline double _iota(self, long j, double x) noexcept:
        cdef double lo = self.f_p0[j]
        cdef double hi = self.f_p1[j]
        if x > hi:
            return x - hi
        if x < lo:
            return lo - x
        return 0.0

    # -- cell and start terms -------------------------------------------------

    cdef tuple _cell_eval(self, long c):
        cdef long A = self.num_actions
        cdef long S = self.num_states
        cdef long base = c * A
        cdef long a, t, psi
        cdef double val, cnt, prob
        cdef bint any_nonzero = False, any_negative = False, exact
        for a in range(A):
            cnt = self.x_full[base + a]
            if cnt != 0.0:
                any_nonzero = True
                if cnt < 0.0:
                    any_negative = True
        if not any_nonzero:
            return 0.0, 1
        exact = not any_negative
        if exact:
            t = c // S
            psi = c - t * S
            occ_view = self.occ_np[t * S : (t + 1) * S]
            val = lgamma(self.occ[c] + 1.0)
            for a in range(A):
                cnt = self.x_full[base + a]
                if cnt == 0.0:
                    continue
                prob = self.pi(psi, occ_view, a)
                if prob <= 0.0:
                    exact = False
                    break
                val += cnt * log(prob) - lgamma(cnt + 1.0)
            if exact:
                return val, 1
        val = self._eval(self.rowsum_fid[c], self.occ[c])
        for a in range(A):
            cnt = self.x_full[base + a]
            if cnt != 0.0:
                val += self._eval(self.action_fid[base + a], cnt)
        return val, 0

    cdef tuple _start_eval(self):
        cdef long S = self.num_states
        start_occ = self.occ_np[:S] - np.asarray(self.inj0)
        cdef double exact
        if (start_occ < 0.0).any():
            exact = NEG_INF
        else:
            exact = self.start_exact(start_occ)
        if exact > NEG_INF and not isnan(exact):
            return exact, True
        if self.start_approx is not None:
            return float(self.start_approx(start_occ)), False
        return 0.0, False

    # -- proposal weights ---------------------------------------------------------

    cdef inline double _rounded(self, long k) noexcept:
        if self.is_int[k]:
            return self.x[k]
        return nearbyint(self.x[k])

    cdef void _recompute_r(self, long k):
        cdef double rounded = self._rounded(k)
        cdef double rho = rounded - self.x[k]
        cdef long bit, q, j
        cdef int direction
        cdef double total, coef, arg
        for bit in range(2):
            direction = 1 if bit else -1
            if not (0.0 <= rounded + direction <= self.h_n[k]):
                self.R[2 * k + bit] = 0.0
                continue
            total = 0.0
            for q in range(self.v_indptr[k], self.v_indptr[k + 1]):
                j = self.v_fid[q]
                coef = self.v_coef[q]
                arg = self.args[j]
                total += self._eval(j, arg + coef * (rho + direction)) - self._eval(j, arg + coef * rho)
            self.R[2 * k + bit] = total

    cdef inline double _weight(self, long k, long bit) noexcept:
        cdef int direction = 1 if bit else -1
        cdef double rounded = self._rounded(k)
        if not (0.0 <= rounded + direction <= self.h_n[k]):
            return 0.0
        cdef double r = self.R[2 * k + bit]
        cdef double w = exp(r) if r < 0.0 else 1.0
        return w if w > self.weight_floor else self.weight_floor

    # -- state construction ---------------------------------------------------------

    def set_state(self, x0):
        cdef long n = self.n
        x0 = np.ascontiguousarray(x0, dtype=np.float64)
        if len(x0) != n:
            raise ValueError(f"expected {n} coordinates")
        cdef long k, q, j, c
        cdef double v, iota, wv
        for k in range(n):
            self.x[k] = x0[k]
        for j in range(self.total_dims):
            self.x_full[j] = self.v_base[j]
        for k in range(n):
            v = self.x[k]
            if v != 0.0:
                for q in range(self.m_indptr[k], self.m_indptr[k + 1]):
                    self.x_full[self.m_row[q]] += self.m_coef[q] * v
        cdef long ns = self.num_timesteps * self.num_states
        cdef long A = self.num_actions
        cdef long a
        for c in range(ns):
            v = 0.0
            for a in range(A):
                v += self.x_full[c * A + a]
            self.occ[c] = v
        for j in range(self.n_factors):
            self.args[j] = self.f_off[j]
        for k in range(n):
            v = self.x[k]
            if v != 0.0:
                for q in range(self.v_indptr[k], self.v_indptr[k + 1]):
                    self.args[self.v_fid[q]] += self.v_coef[q] * v
        for j in range(self.n_trackers):
            self.tr_args[j] = self.tr_off[j]
        for k in range(n):
            v = self.x[k]
            if v != 0.0:
                for q in range(self.trv_indptr[k], self.trv_indptr[k + 1]):
                    self.tr_args[self.trv_tid[q]] += self.trv_coef[q] * v

        self.pen_sum = 0.0
        self.n_violated = 0
        for j in range(self.n_constraint):
            iota = self._iota(j, self.args[j])
            if iota > 0.0:
                self.pen_sum -= iota * self.inv_tau
                self.n_violated += 1

        self.cell_sum = 0.0
        self.n_approx = 0
        cdef double cv
        cdef int ce
        for c in range(ns):
            cv, ce = self._cell_eval(c)
            self.cell_val[c] = cv
            self.cell_exact[c] = ce
            self.cell_sum += cv
            if not ce:
                self.n_approx += 1
        self.start_val, self.start_ok = self._start_eval()

        self.s_total = 0.0
        for k in range(n):
            self._recompute_r(k)
            for q in range(2):
                wv = self._weight(k, q)
                self.w[2 * k + q] = wv
                self.tree.update(2 * k + q, wv)
                self.s_total += wv

    # -- introspection -----------------------------------------------------------------

    def is_feasible(self):
        return self.n_violated == 0 and self.n_approx == 0 and self.start_ok

    def log_prob(self):
        return self.cell_sum + self.start_val + self.pen_sum

    def state_vector(self):
        return self.x_np.copy()

    def lifted(self):
        return self.x_full_np.copy()

    def tracker_values(self):
        return self.tr_args_np.copy()

    def weights(self):
        return self.w_np.copy()

    def proposal_total(self):
        return self.s_total

    def find_leaf(self, double value):
        return self.tree.find(value)

    def integer_mask(self):
        return np.asarray(self.is_int).astype(bool)

    def counters(self):
        return {"steps": self.steps, "accepted": self.accepted}

    # -- the hot loop ----------------------------------------------------------------------

    def step(self, rng, bint accept_all=False):
        cdef long i, bit, leaf
        cdef int direction
        cdef double w_fwd, old_xi, rounded, new_xi, dx

        leaf = self.tree.find(rng.random() * self.tree.total())
        i = leaf >> 1
        bit = leaf & 1
        direction = 1 if bit else -1
        w_fwd = self.w[leaf]

        old_xi = self.x[i]
        rounded = old_xi if self.is_int[i] else nearbyint(old_xi)
        if self.is_int[i]:
            new_xi = rounded + direction
        else:
            new_xi = rounded + direction + (rng.random() - 0.5)
        dx = new_xi - old_xi

        cdef double old_cell_sum = self.cell_sum
        cdef double old_start_val = self.start_val
        cdef bint old_start_ok = self.start_ok
        cdef double old_pen = self.pen_sum
        cdef long old_violated = self.n_violated
        cdef long old_approx = self.n_approx
        cdef double old_s = self.s_total
        cdef double old_markov = old_cell_sum + old_start_val + old_pen

        cdef long long[::1] u_args_j = self._u_args_j
        cdef double[::1] u_args_v = self._u_args_v
        cdef long long[::1] u_full_d = self._u_full_d
        cdef double[::1] u_full_v = self._u_full_v
        cdef long long[::1] u_occ_c = self._u_occ_c
        cdef double[::1] u_occ_v = self._u_occ_v
        cdef long long[::1] u_cell_c = self._u_cell_c
        cdef double[::1] u_cell_v = self._u_cell_v
        cdef unsigned char[::1] u_cell_e = self._u_cell_e
        cdef long long[::1] u_r_l = self._u_r_l
        cdef double[::1] u_r_v = self._u_r_v
        cdef long long[::1] u_tr_t = self._u_tr_t
        cdef double[::1] u_tr_v = self._u_tr_v
        cdef long long[::1] tu_leaf = self._tu_leaf
        cdef double[::1] tu_old = self._tu_old
        cdef double[::1] tu_new = self._tu_new
        cdef long long[::1] ch_j = self._ch_j
        cdef double[::1] ch_old = self._ch_old
        cdef double[::1] ch_new = self._ch_new

        cdef long n_args = 0, n_full = 0, n_occ = 0, n_cell = 0, n_r = 0, n_tr = 0
        cdef long n_tu = 0, n_ch = 0

        self.x[i] = new_xi

        cdef long q, j, d, c, t, phi, r, k, qq
        cdef double old_arg, new_arg, oi, ni, coef

        for q in range(self.v_indptr[i], self.v_indptr[i + 1]):
            j = self.v_fid[q]
            old_arg = self.args[j]
            new_arg = old_arg + self.v_coef[q] * dx
            self.args[j] = new_arg
            u_args_j[n_args] = j
            u_args_v[n_args] = old_arg
            n_args += 1
            ch_j[n_ch] = j
            ch_old[n_ch] = old_arg
            ch_new[n_ch] = new_arg
            n_ch += 1
            if j < self.n_constraint:
                oi = self._iota(j, old_arg)
                ni = self._iota(j, new_arg)
                if ni != oi:
                    self.pen_sum -= (ni - oi) * self.inv_tau
                self.n_violated += (1 if ni > 0.0 else 0) - (1 if oi > 0.0 else 0)

        for q in range(self.trv_indptr[i], self.trv_indptr[i + 1]):
            j = self.trv_tid[q]
            u_tr_t[n_tr] = j
            u_tr_v[n_tr] = self.tr_args[j]
            n_tr += 1
            self.tr_args[j] += self.trv_coef[q] * dx

        # Lift, occupancy and the set of cells needing re-evaluation.
        cdef long[::1] cells = self._cells_buf
        cdef unsigned char[::1] cflag = self._cflag
        cdef long n_cells = 0
        cdef bint t0_changed = False
        cdef long S = self.num_states
        cdef long c2
        for q in range(self.m_indptr[i], self.m_indptr[i + 1]):
            d = self.m_row[q]
            u_full_d[n_full] = d
            u_full_v[n_full] = self.x_full[d]
            n_full += 1
            self.x_full[d] = self.x_full[d] + self.m_coef[q] * dx
            if d < self.n_traj:
                c = d // self.num_actions
                u_occ_c[n_occ] = c
                u_occ_v[n_occ] = self.occ[c]
                n_occ += 1
                self.occ[c] += self.m_coef[q] * dx
                if not cflag[c]:
                    cflag[c] = 1
                    cells[n_cells] = c
                    n_cells += 1
                t = c // S
                phi = c - t * S
                if t == 0:
                    t0_changed = True
                for r in range(self.rinf_indptr[phi], self.rinf_indptr[phi + 1]):
                    c2 = t * S + self.rinf_state[r]
                    if not cflag[c2]:
                        cflag[c2] = 1
                        cells[n_cells] = c2
                        n_cells += 1

        _isort(&cells[0], n_cells)
        cdef double new_v, old_v
        cdef int new_e, old_e
        for q in range(n_cells):
            c = cells[q]
            cflag[c] = 0
            old_v = self.cell_val[c]
            old_e = self.cell_exact[c]
            new_v, new_e = self._cell_eval(c)
            self.cell_val[c] = new_v
            self.cell_exact[c] = new_e
            self.cell_sum += new_v - old_v
            self.n_approx += (1 - new_e) - (1 - old_e)
            u_cell_c[n_cell] = c
            u_cell_v[n_cell] = old_v
            u_cell_e[n_cell] = old_e
            n_cell += 1

        if t0_changed:
            self.start_val, self.start_ok = self._start_eval()

        # Proposal-weight ratio deltas for variables sharing a factor with i.
        cdef long[::1] vars_buf = self._vars_buf
        cdef unsigned char[::1] vflag = self._vflag
        cdef long n_vars = 0
        vflag[i] = 1
        vars_buf[n_vars] = i
        n_vars += 1
        cdef double xk, rounded_k, rho, s0, s1, d_r
        cdef long bit_k
        cdef int dir_k
        cdef bint touched
        for q in range(n_ch):
            j = ch_j[q]
            old_arg = ch_old[q]
            new_arg = ch_new[q]
            for qq in range(self.f_indptr[j], self.f_indptr[j + 1]):
                k = self.f_var[qq]
                if k == i:
                    continue
                coef = self.f_coef[qq]
                xk = self.x[k]
                rounded_k = xk if self.is_int[k] else nearbyint(xk)
                rho = rounded_k - xk
                touched = False
                for bit_k in range(2):
                    dir_k = 1 if bit_k else -1
                    if not (0.0 <= rounded_k + dir_k <= self.h_n[k]):
                        continue
                    s0 = coef * rho
                    s1 = coef * (rho + dir_k)
                    d_r = (self._eval(j, new_arg + s1) - self._eval(j, new_arg + s0)) - (
                        self._eval(j, old_arg + s1) - self._eval(j, old_arg + s0)
                    )
                    if d_r != 0.0:
                        u_r_l[n_r] = 2 * k + bit_k
                        u_r_v[n_r] = self.R[2 * k + bit_k]
                        n_r += 1
                        self.R[2 * k + bit_k] += d_r
                        touched = True
                if touched and not vflag[k]:
                    vflag[k] = 1
                    vars_buf[n_vars] = k
                    n_vars += 1

        u_r_l[n_r] = 2 * i
        u_r_v[n_r] = self.R[2 * i]
        n_r += 1
        u_r_l[n_r] = 2 * i + 1
        u_r_v[n_r] = self.R[2 * i + 1]
        n_r += 1
        self._recompute_r(i)

        _isort(&vars_buf[0], n_vars)
        cdef double s_new = self.s_total
        cdef double new_w
        for q in range(n_vars):
            k = vars_buf[q]
            vflag[k] = 0
            for bit_k in range(2):
                new_w = self._weight(k, bit_k)
                if new_w != self.w[2 * k + bit_k]:
                    tu_leaf[n_tu] = 2 * k + bit_k
                    tu_old[n_tu] = self.w[2 * k + bit_k]
                    tu_new[n_tu] = new_w
                    n_tu += 1
                    s_new += new_w - self.w[2 * k + bit_k]

        cdef double new_markov = self.cell_sum + self.start_val + self.pen_sum

        cdef bint accepted
        cdef double w_rev, log_ratio
        if accept_all:
            accepted = True
        else:
            w_rev = self._weight(i, 1 - bit)
            if w_rev <= 0.0 or s_new <= 0.0:
                accepted = False
            else:
                log_ratio = (
                    (new_markov - old_markov)
                    + log(w_rev)
                    - log(w_fwd)
                    + log(old_s)
                    - log(s_new)
                )
                accepted = log(rng.random()) < log_ratio

        self.steps += 1
        if accepted:
            for q in range(n_tu):
                self.w[tu_leaf[q]] = tu_new[q]
                self.tree.update(tu_leaf[q], tu_new[q])
            self.s_total = s_new
            self.accepted += 1
        else:
            self.x[i] = old_xi
            for q in range(n_args - 1, -1, -1):
                self.args[u_args_j[q]] = u_args_v[q]
            for q in range(n_full - 1, -1, -1):
                self.x_full[u_full_d[q]] = u_full_v[q]
            for q in range(n_occ - 1, -1, -1):
                self.occ[u_occ_c[q]] = u_occ_v[q]
            for q in range(n_cell - 1, -1, -1):
                self.cell_val[u_cell_c[q]] = u_cell_v[q]
                self.cell_exact[u_cell_c[q]] = u_cell_e[q]
            for q in range(n_r - 1, -1, -1):
                self.R[u_r_l[q]] = u_r_v[q]
            for q in range(n_tr - 1, -1, -1):
                self.tr_args[u_tr_t[q]] = u_tr_v[q]
            self.cell_sum = old_cell_sum
            self.start_val = old_start_val
            self.start_ok = old_start_ok
            self.pen_sum = old_pen
            self.n_violated = old_violated
            self.n_approx = old_approx

        return accepted, (self.n_violated == 0 and self.n_approx == 0 and self.start_ok)

    def seek_feasible(self, rng, long max_proposals):
        cdef long used = 0
        while not (self.n_violated == 0 and self.n_approx == 0 and self.start_ok):
            if used >= max_proposals:
                raise RuntimeError(f"no feasible state found within {max_proposals} proposals")
            self.step(rng, accept_all=True)
            used += 1
        return used

    def run(
        self,
        rng,
        long num_steps,
        long record_stride=0,
        stats_out=None,
        collector=None,
        bint record_infeasible=False,
        long target_records=0,
    ):
        cdef long recorded = 0
        cdef long infeasible_steps = 0
        cdef long accepted_before = self.accepted
        cdef long s = 0
        cdef bint feasible
        cdef double[:, ::1] stats_view = stats_out if stats_out is not None else None
        cdef long jt
        while s < num_steps:
            _, feasible = self.step(rng)
            s += 1
            if not feasible:
                infeasible_steps += 1
            if record_stride and s % record_stride == 0 and (feasible or record_infeasible):
                if stats_view is not None:
                    for jt in range(self.n_trackers):
                        stats_view[recorded, jt] = self.tr_args[jt]
                if collector is not None:
                    collector(self.x_full_np)
                recorded += 1
                if target_records and recorded >= target_records:
                    break
        return {
            "steps": s,
            "accepted": self.accepted - accepted_before,
            "infeasible_steps": infeasible_steps,
            "recorded": recorded,
        }
