"""Pure-python sampler core.

Reference implementation of the Markov-chain hot loop; the compiled
extension (``abmcmc._core``) mirrors it operation-for-operation, in the
same evaluation order, so both cores produce bit-identical chains from
identical seeds.  Keep any behavioural change here in sync with the
extension.

State kept per chain: the free coordinates x, the lifted full vector,
per-timestep occupancies, all factor arguments, per-cell exact/stand-in
log terms, constraint penalty totals, the log proposal-weight ratios
R(k, dir) with their sum tree, and the current hybrid log probability.
Every proposal is applied speculatively with undo logs and rolled back
when rejected, so acceptance and rejection both cost O(touched values).
"""

from __future__ import annotations

import math

import numpy as np

from .engine_build import (
    EngineProblem,
    KIND_AFFINE,
    KIND_CONSTRAINT,
    KIND_COUNT_ACTION,
    KIND_COUNT_ROWSUM,
)

try:
    # python's own lgamma is not the C library's; borrow libm through the
    # extension when it exists so both cores agree bit-for-bit.
    from ._core import libm_lgamma as _lgamma
except ImportError:  # pragma: no cover - extension-less installs
    _lgamma = math.lgamma

NEG_INF = float("-inf")


class SumTree:
    """Complete binary tree over non-negative leaf weights with subtree sums.

    ``update`` is O(log n); ``find`` maps a value in [0, total) to the leaf
    whose cumulative-weight interval contains it.
    """

    def __init__(self, num_leaves: int):
        cap = 1
        while cap < max(num_leaves, 1):
            cap *= 2
        self.capacity = cap
        self.num_leaves = num_leaves
        self.nodes = np.zeros(2 * cap, dtype=np.float64)

    def total(self) -> float:
        return float(self.nodes[1])

    def get(self, leaf: int) -> float:
        return float(self.nodes[self.capacity + leaf])

    def update(self, leaf: int, weight: float) -> None:
        if weight < 0:
            raise ValueError("sum tree weights must be non-negative")
        pos = self.capacity + leaf
        self.nodes[pos] = weight
        pos >>= 1
        while pos >= 1:
            self.nodes[pos] = self.nodes[2 * pos] + self.nodes[2 * pos + 1]
            pos >>= 1

    def find(self, value: float) -> int:
        """Leaf whose cumulative interval contains ``value`` (0 <= value < total)."""
        pos = 1
        while pos < self.capacity:
            left = self.nodes[2 * pos]
            if value < left:
                pos = 2 * pos
            else:
                value -= left
                pos = 2 * pos + 1
        leaf = pos - self.capacity
        if leaf >= self.num_leaves or self.nodes[self.capacity + leaf] == 0.0:
            leaf = min(leaf, self.num_leaves - 1)
            while leaf > 0 and self.nodes[self.capacity + leaf] == 0.0:
                leaf -= 1
        return leaf

    def draw(self, rng: np.random.Generator) -> int:
        total = self.total()
        if total <= 0.0:
            raise ValueError("cannot draw from an all-zero sum tree")
        return self.find(rng.random() * total)


class PureEngine:
    """One Markov chain over the free coordinates of a reduced model."""

    def __init__(self, prob: EngineProblem):
        self.p = prob
        n = prob.n
        self.x = np.zeros(n, dtype=np.float64)
        self.x_full = np.zeros(prob.total_dims, dtype=np.float64)
        self.occ = np.zeros(prob.num_timesteps * prob.num_states, dtype=np.float64)
        self.args = np.zeros(len(prob.f_kind), dtype=np.float64)
        self.tr_args = prob.tr_off.copy()
        self.cell_val = np.zeros(prob.num_timesteps * prob.num_states, dtype=np.float64)
        self.cell_exact = np.ones(prob.num_timesteps * prob.num_states, dtype=np.uint8)
        self.R = np.zeros(2 * n, dtype=np.float64)
        self.w = np.zeros(2 * n, dtype=np.float64)
        self.tree = SumTree(2 * n)
        self.cell_sum = 0.0
        self.start_val = 0.0
        self.start_ok = True
        self.pen_sum = 0.0
        self.n_violated = 0
        self.n_approx = 0
        self.s_total = 0.0
        self.steps = 0
        self.accepted = 0

    # -- factor evaluation ------------------------------------------------

    def _eval(self, j: int, x: float) -> float:
        p = self.p
        kind = p.f_kind[j]
        if kind == KIND_CONSTRAINT:
            lo, hi, inv_tau = p.f_p0[j], p.f_p1[j], p.f_p2[j]
            if x > hi:
                return -(x - hi) * inv_tau
            if x < lo:
                return -(lo - x) * inv_tau
            return 0.0
        if kind == KIND_COUNT_ACTION:
            lr, hi = p.f_p0[j], p.f_p1[j]
            xc = 0.0 if x < 0.0 else (hi if x > hi else x)
            return xc * lr - _lgamma(xc + 1.0)
        if kind == KIND_COUNT_ROWSUM:
            hi = p.f_p0[j]
            xc = 0.0 if x < 0.0 else (hi if x > hi else x)
            return _lgamma(xc + 1.0)
        if kind == KIND_AFFINE:
            hi = p.f_p2[j]
            xc = 0.0 if x < 0.0 else (hi if x > hi else x)
            return p.f_p0[j] * xc + p.f_p1[j]
        raise AssertionError(f"unknown factor kind {kind}")

    def _iota(self, j: int, x: float) -> float:
        lo, hi = self.p.f_p0[j], self.p.f_p1[j]
        if x > hi:
            return x - hi
        if x < lo:
            return lo - x
        return 0.0

    # -- cell and start terms ----------------------------------------------

    def _cell_eval(self, c: int) -> tuple[float, int]:
        p = self.p
        A = p.num_actions
        S = p.num_states
        base = c * A
        counts = self.x_full[base : base + A]
        nonzero = np.nonzero(counts)[0]
        if len(nonzero) == 0:
            return 0.0, 1
        exact = not (counts < 0.0).any()
        if exact:
            t, psi = divmod(c, S)
            occ_view = self.occ[t * S : (t + 1) * S]
            val = _lgamma(self.occ[c] + 1.0)
            for a in nonzero:
                prob = p.pi(int(psi), occ_view, int(a))
                if prob <= 0.0:
                    exact = False
                    break
                cnt = counts[a]
                val += cnt * math.log(prob) - _lgamma(cnt + 1.0)
            if exact:
                return val, 1
        val = self._eval(int(p.rowsum_fid[c]), self.occ[c])
        for a in nonzero:
            val += self._eval(int(p.action_fid[base + a]), counts[a])
        return val, 0

    def _start_eval(self) -> tuple[float, bool]:
        p = self.p
        start_occ = self.occ[: p.num_states] - p.inj0
        if (start_occ < 0.0).any():
            exact = NEG_INF
        else:
            exact = float(p.start_exact(start_occ))
        if exact > NEG_INF and not math.isnan(exact):
            return exact, True
        if p.start_approx is not None:
            return float(p.start_approx(start_occ)), False
        return 0.0, False

    # -- proposal weights ---------------------------------------------------

    def _leaf_valid(self, k: int, direction: int) -> bool:
        rounded = self.x[k] if self.p.is_int[k] else float(round(self.x[k]))
        target = rounded + direction
        return 0.0 <= target <= self.p.h_n[k]

    def _recompute_r(self, k: int) -> None:
        p = self.p
        rounded = self.x[k] if p.is_int[k] else float(round(self.x[k]))
        rho = rounded - self.x[k]
        for bit, direction in ((0, -1), (1, 1)):
            leaf = 2 * k + bit
            if not (0.0 <= rounded + direction <= p.h_n[k]):
                self.R[leaf] = 0.0
                continue
            total = 0.0
            for q in range(p.v_indptr[k], p.v_indptr[k + 1]):
                j = p.v_fid[q]
                coef = p.v_coef[q]
                arg = self.args[j]
                total += self._eval(j, arg + coef * (rho + direction)) - self._eval(j, arg + coef * rho)
            self.R[leaf] = total

    def _weight(self, k: int, bit: int) -> float:
        direction = 1 if bit else -1
        if not self._leaf_valid(k, direction):
            return 0.0
        r = self.R[2 * k + bit]
        w = math.exp(r) if r < 0.0 else 1.0
        return w if w > self.p.weight_floor else self.p.weight_floor

    # -- state construction --------------------------------------------------

    def set_state(self, x0: np.ndarray) -> None:
        """Rebuild every cache from scratch for the given free coordinates."""
        p = self.p
        n = p.n
        if len(x0) != n:
            raise ValueError(f"expected {n} coordinates")
        self.x[:] = np.asarray(x0, dtype=np.float64)
        self.x_full[:] = p.v_base
        for k in range(n):
            v = self.x[k]
            if v != 0.0:
                for q in range(p.m_indptr[k], p.m_indptr[k + 1]):
                    self.x_full[p.m_row[q]] += p.m_coef[q] * v
        traj = self.x_full[: p.n_traj].reshape(-1, p.num_actions)
        self.occ[:] = traj.sum(axis=1)
        self.args[:] = p.f_off
        for k in range(n):
            v = self.x[k]
            if v != 0.0:
                for q in range(p.v_indptr[k], p.v_indptr[k + 1]):
                    self.args[p.v_fid[q]] += p.v_coef[q] * v
        self.tr_args[:] = p.tr_off
        for k in range(n):
            v = self.x[k]
            if v != 0.0:
                for q in range(p.trv_indptr[k], p.trv_indptr[k + 1]):
                    self.tr_args[p.trv_tid[q]] += p.trv_coef[q] * v

        self.pen_sum = 0.0
        self.n_violated = 0
        for j in range(p.n_constraint):
            iota = self._iota(j, self.args[j])
            if iota > 0.0:
                self.pen_sum -= iota * p.inv_tau
                self.n_violated += 1

        self.cell_sum = 0.0
        self.n_approx = 0
        for c in range(len(self.cell_val)):
            val, exact = self._cell_eval(c)
            self.cell_val[c] = val
            self.cell_exact[c] = exact
            self.cell_sum += val
            if not exact:
                self.n_approx += 1
        self.start_val, self.start_ok = self._start_eval()

        self.s_total = 0.0
        for k in range(n):
            self._recompute_r(k)
            for bit in (0, 1):
                wv = self._weight(k, bit)
                self.w[2 * k + bit] = wv
                self.tree.update(2 * k + bit, wv)
                self.s_total += wv

    # -- introspection ---------------------------------------------------------

    def is_feasible(self) -> bool:
        return self.n_violated == 0 and self.n_approx == 0 and self.start_ok

    def log_prob(self) -> float:
        return self.cell_sum + self.start_val + self.pen_sum

    def state_vector(self) -> np.ndarray:
        return self.x.copy()

    def lifted(self) -> np.ndarray:
        return self.x_full.copy()

    def tracker_values(self) -> np.ndarray:
        return self.tr_args.copy()

    def weights(self) -> np.ndarray:
        return self.w.copy()

    def proposal_total(self) -> float:
        return self.s_total

    def find_leaf(self, value: float) -> int:
        return self.tree.find(value)

    def integer_mask(self) -> np.ndarray:
        return self.p.is_int.astype(bool)

    def counters(self) -> dict:
        return {"steps": self.steps, "accepted": self.accepted}

    # -- the hot loop ------------------------------------------------------------

    def step(self, rng: np.random.Generator, accept_all: bool = False) -> tuple[bool, bool]:
        """One proposal + acceptance test; returns (accepted, feasible-after)."""
        p = self.p
        leaf = self.tree.find(rng.random() * self.tree.total())
        i, bit = leaf >> 1, leaf & 1
        direction = 1 if bit else -1
        w_fwd = self.w[leaf]

        old_xi = self.x[i]
        rounded = old_xi if p.is_int[i] else float(round(old_xi))
        if p.is_int[i]:
            new_xi = rounded + direction
        else:
            new_xi = rounded + direction + (rng.random() - 0.5)
        dx = new_xi - old_xi

        old_cell_sum = self.cell_sum
        old_start_val, old_start_ok = self.start_val, self.start_ok
        old_pen, old_violated, old_approx = self.pen_sum, self.n_violated, self.n_approx
        old_s = self.s_total
        old_markov = old_cell_sum + old_start_val + old_pen

        und_args: list[tuple[int, float]] = []
        und_full: list[tuple[int, float]] = []
        und_occ: list[tuple[int, float]] = []
        und_cell: list[tuple[int, float, int]] = []
        und_r: list[tuple[int, float]] = []
        und_tr: list[tuple[int, float]] = []
        changed: list[tuple[int, float, float]] = []

        self.x[i] = new_xi

        for q in range(p.v_indptr[i], p.v_indptr[i + 1]):
            j = p.v_fid[q]
            old_arg = self.args[j]
            new_arg = old_arg + p.v_coef[q] * dx
            self.args[j] = new_arg
            und_args.append((j, old_arg))
            changed.append((j, old_arg, new_arg))
            if j < p.n_constraint:
                oi = self._iota(j, old_arg)
                ni = self._iota(j, new_arg)
                if ni != oi:
                    self.pen_sum -= (ni - oi) * p.inv_tau
                self.n_violated += (1 if ni > 0.0 else 0) - (1 if oi > 0.0 else 0)

        for q in range(p.trv_indptr[i], p.trv_indptr[i + 1]):
            tid = p.trv_tid[q]
            und_tr.append((tid, self.tr_args[tid]))
            self.tr_args[tid] += p.trv_coef[q] * dx

        affected_cells: set[int] = set()
        t0_changed = False
        S = p.num_states
        for q in range(p.m_indptr[i], p.m_indptr[i + 1]):
            d = p.m_row[q]
            old = self.x_full[d]
            self.x_full[d] = old + p.m_coef[q] * dx
            und_full.append((d, old))
            if d < p.n_traj:
                c = d // p.num_actions
                und_occ.append((c, self.occ[c]))
                self.occ[c] += p.m_coef[q] * dx
                affected_cells.add(c)
                t, phi = divmod(c, S)
                if t == 0:
                    t0_changed = True
                for r in range(p.rinf_indptr[phi], p.rinf_indptr[phi + 1]):
                    affected_cells.add(t * S + int(p.rinf_state[r]))

        for c in sorted(affected_cells):
            old_v, old_e = self.cell_val[c], int(self.cell_exact[c])
            new_v, new_e = self._cell_eval(c)
            self.cell_val[c] = new_v
            self.cell_exact[c] = new_e
            self.cell_sum += new_v - old_v
            self.n_approx += (1 - new_e) - (1 - old_e)
            und_cell.append((c, old_v, old_e))

        if t0_changed:
            self.start_val, self.start_ok = self._start_eval()

        affected_vars: set[int] = {i}
        for j, old_arg, new_arg in changed:
            for q in range(p.f_indptr[j], p.f_indptr[j + 1]):
                k = p.f_var[q]
                if k == i:
                    continue
                coef = p.f_coef[q]
                xk = self.x[k]
                rounded_k = xk if p.is_int[k] else float(round(xk))
                rho = rounded_k - xk
                touched = False
                for bit_k, dir_k in ((0, -1), (1, 1)):
                    if not (0.0 <= rounded_k + dir_k <= p.h_n[k]):
                        continue
                    s0 = coef * rho
                    s1 = coef * (rho + dir_k)
                    d_r = (self._eval(j, new_arg + s1) - self._eval(j, new_arg + s0)) - (
                        self._eval(j, old_arg + s1) - self._eval(j, old_arg + s0)
                    )
                    if d_r != 0.0:
                        lf = 2 * k + bit_k
                        und_r.append((lf, self.R[lf]))
                        self.R[lf] += d_r
                        touched = True
                if touched:
                    affected_vars.add(k)

        und_r.append((2 * i, self.R[2 * i]))
        und_r.append((2 * i + 1, self.R[2 * i + 1]))
        self._recompute_r(i)

        tree_updates: list[tuple[int, float, float]] = []
        s_new = self.s_total
        for k in sorted(affected_vars):
            for bit_k in (0, 1):
                lf = 2 * k + bit_k
                new_w = self._weight(k, bit_k)
                if new_w != self.w[lf]:
                    tree_updates.append((lf, self.w[lf], new_w))
                    s_new += new_w - self.w[lf]

        new_markov = self.cell_sum + self.start_val + self.pen_sum

        if accept_all:
            accepted = True
        else:
            w_rev = self._weight(i, 1 - bit)
            if w_rev <= 0.0 or s_new <= 0.0:
                accepted = False
            else:
                log_ratio = (
                    (new_markov - old_markov)
                    + math.log(w_rev)
                    - math.log(w_fwd)
                    + math.log(old_s)
                    - math.log(s_new)
                )
                accepted = math.log(rng.random()) < log_ratio

        self.steps += 1
        if accepted:
            for lf, _, new_w in tree_updates:
                self.w[lf] = new_w
                self.tree.update(lf, new_w)
            self.s_total = s_new
            self.accepted += 1
        else:
            self.x[i] = old_xi
            for j, v in reversed(und_args):
                self.args[j] = v
            for d, v in reversed(und_full):
                self.x_full[d] = v
            for c, v in reversed(und_occ):
                self.occ[c] = v
            for c, v, e in reversed(und_cell):
                self.cell_val[c] = v
                self.cell_exact[c] = e
            for lf, v in reversed(und_r):
                self.R[lf] = v
            for tid, v in reversed(und_tr):
                self.tr_args[tid] = v
            self.cell_sum = old_cell_sum
            self.start_val, self.start_ok = old_start_val, old_start_ok
            self.pen_sum, self.n_violated, self.n_approx = old_pen, old_violated, old_approx

        return accepted, self.is_feasible()

    def seek_feasible(self, rng: np.random.Generator, max_proposals: int) -> int:
        """Accept-all proposals until the state is feasible; returns proposals used."""
        used = 0
        while not self.is_feasible():
            if used >= max_proposals:
                raise RuntimeError(f"no feasible state found within {max_proposals} proposals")
            self.step(rng, accept_all=True)
            used += 1
        return used

    def run(
        self,
        rng: np.random.Generator,
        num_steps: int,
        record_stride: int = 0,
        stats_out: np.ndarray | None = None,
        collector=None,
        record_infeasible: bool = False,
        target_records: int = 0,
    ) -> dict:
        """Run the chain; optionally record tracker stats / lifted samples.

        Records at every ``record_stride``-th step while the state is
        feasible (or regardless, when ``record_infeasible``).  Stops early
        once ``target_records`` records were taken, when positive.
        """
        recorded = 0
        infeasible_steps = 0
        accepted_before = self.accepted
        s = 0
        while s < num_steps:
            _, feasible = self.step(rng)
            s += 1
            if not feasible:
                infeasible_steps += 1
            if record_stride and s % record_stride == 0 and (feasible or record_infeasible):
                if stats_out is not None:
                    stats_out[recorded, : self.p.n_trackers] = self.tr_args
                if collector is not None:
                    collector(self.x_full)
                recorded += 1
                if target_records and recorded >= target_records:
                    break
        return {
            "steps": s,
            "accepted": self.accepted - accepted_before,
            "infeasible_steps": infeasible_steps,
            "recorded": recorded,
        }
