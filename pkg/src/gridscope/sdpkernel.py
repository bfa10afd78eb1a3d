"""Dense conic solver for problems with Hermitian/symmetric PSD blocks plus
free and nonnegative scalar variables, a linear objective, and linear
equality/inequality constraints.

Primal form::

    min  sum_j <C_j, X_j> + cf' wf + cn' wn
    s.t. sum_j <A_ij, X_j> + fi' wf + gi' wn  (= | <=)  b_i
         X_j PSD,  wn >= 0,  wf free

Inequality rows get a fresh nonnegative slack at solve time. Hermitian blocks
are declared with their complex dimension and handled through the standard
real-symmetric embedding

    T(H) = [[Re H, -Im H], [Im H, Re H]]

which doubles traces; coefficient matrices are halved to compensate, so
problem data and reported objective values stay in the complex convention.
Solutions are un-embedded before they are returned.

The algorithm is an infeasible-start primal-dual path-following method with
Mehrotra predictor-corrector steps and the HKM scaling (the Newton step
linearizes X S = nu I and symmetrizes against S^-1). The Schur complement is
assembled densely and factored by Cholesky, with a small diagonal
regularization retried on failure. Free variables are handled exactly through
a bordered solve. The method is deterministic: no randomized choices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

_HERMITIAN_ATOL = 1e-12


# --------------------------------------------------------------------------
# Hermitian <-> real-symmetric embedding
# --------------------------------------------------------------------------


def embed_hermitian(H: np.ndarray) -> np.ndarray:
    """Real-symmetric 2n x 2n embedding of a Hermitian n x n matrix."""
    H = np.asarray(H, dtype=complex)
    re, im = H.real, H.imag
    return np.block([[re, -im], [im, re]])


def unembed_hermitian(X: np.ndarray) -> np.ndarray:
    """Inverse of :func:`embed_hermitian`, averaging the redundant copies."""
    X = np.asarray(X, dtype=float)
    n = X.shape[0] // 2
    re = 0.5 * (X[:n, :n] + X[n:, n:])
    im = 0.5 * (X[n:, :n] - X[:n, n:])
    H = re + 1j * im
    return 0.5 * (H + H.conj().T)


def _check_hermitian(M, label):
    M = np.asarray(M)
    scale = max(1.0, float(np.abs(M).max()) if M.size else 1.0)
    if np.iscomplexobj(M):
        err = np.abs(M - M.conj().T).max()
    else:
        err = np.abs(M - M.T).max()
    if err > _HERMITIAN_ATOL * scale:
        raise ValueError(f"{label}: coefficient matrix is not Hermitian (err {err:g})")


# --------------------------------------------------------------------------
# problem container
# --------------------------------------------------------------------------


@dataclass
class _Constraint:
    blocks: dict
    free: dict
    nonneg: dict
    rhs: float
    relation: str  # "=" or "<="


class SdpProblem:
    """Incrementally assembled conic problem; see the module docstring."""

    def __init__(self):
        self.block_dims: list[int] = []
        self.block_complex: list[bool] = []
        self.n_free = 0
        self.n_nonneg = 0
        self._obj_blocks: dict = {}
        self._obj_free: dict = {}
        self._obj_nonneg: dict = {}
        self.obj_constant = 0.0
        self.constraints: list[_Constraint] = []

    # -- declaration ------------------------------------------------------
    def add_psd_block(self, dim: int, complex: bool = False) -> int:
        if dim < 1:
            raise ValueError("block dimension must be positive")
        self.block_dims.append(dim)
        self.block_complex.append(bool(complex))
        return len(self.block_dims) - 1

    def add_free_scalar(self) -> int:
        self.n_free += 1
        return self.n_free - 1

    def add_nonneg_scalar(self) -> int:
        self.n_nonneg += 1
        return self.n_nonneg - 1

    def _coerce_block_coeff(self, j, M):
        if not 0 <= j < len(self.block_dims):
            raise ValueError(f"unknown block {j}")
        M = np.asarray(M, dtype=complex if self.block_complex[j] else float)
        if M.shape != (self.block_dims[j], self.block_dims[j]):
            raise ValueError(
                f"block {j} coefficient has shape {M.shape}, expected "
                f"{(self.block_dims[j], self.block_dims[j])}"
            )
        _check_hermitian(M, f"block {j}")
        return M

    def set_objective(self, blocks=None, free=None, nonneg=None, constant=0.0):
        self._obj_blocks = {
            j: self._coerce_block_coeff(j, M) for j, M in (blocks or {}).items()
        }
        self._obj_free = dict(free or {})
        self._obj_nonneg = dict(nonneg or {})
        self.obj_constant = float(constant)

    def add_constraint(self, blocks=None, free=None, nonneg=None, rhs=0.0, relation="="):
        if relation not in ("=", "<="):
            raise ValueError(f"relation must be '=' or '<=', got {relation!r}")
        coeffs = {j: self._coerce_block_coeff(j, M) for j, M in (blocks or {}).items()}
        if not coeffs and not free and not nonneg:
            raise ValueError("constraint touches no variable")
        self.constraints.append(
            _Constraint(coeffs, dict(free or {}), dict(nonneg or {}), float(rhs), relation)
        )

    @property
    def n_constraints(self) -> int:
        return len(self.constraints)


@dataclass
class SdpOptions:
    tol_feas: float = 1e-7
    tol_gap: float = 1e-7
    max_iters: int = 200
    step_fraction: float = 0.98  # fraction-to-boundary floor (early phase)
    step_cap: float = 0.999  # fraction-to-boundary ceiling (endgame)
    stall_iters: int = 10  # stop after this many non-improving iterations


@dataclass
class SdpSolution:
    blocks: list
    free: np.ndarray
    nonneg: np.ndarray
    y: np.ndarray
    objective_value: float
    status: str  # optimal | max_iters | infeasible | numerical_failure
    iterations: int
    residuals: tuple  # (primal, dual, relative gap)
    history: list = field(default_factory=list, repr=False)

    @property
    def scalars(self) -> np.ndarray:
        return np.concatenate([self.free, self.nonneg])


# --------------------------------------------------------------------------
# solver internals
# --------------------------------------------------------------------------


def _smallest_positive_root(a, b, c):
    """Smallest positive root of a x^2 + b x + c = 0, or inf."""
    if abs(a) < 1e-300:
        if b < 0 and c > 0:
            return c / -b
        return np.inf
    disc = b * b - 4.0 * a * c
    if disc < 0.0:
        return np.inf
    sq = np.sqrt(disc)
    roots = [r for r in ((-b - sq) / (2 * a), (-b + sq) / (2 * a)) if r > 0.0]
    return min(roots) if roots else np.inf


def _max_step_psd(X, dX):
    """Largest alpha with X + alpha dX PSD. Blocks of dimension <= 2 go
    through the determinant boundary condition; larger ones through the
    smallest eigenvalue of the (dX, X) pencil."""
    d = X.shape[0]
    if d == 1:
        return np.inf if dX[0, 0] >= 0.0 else X[0, 0] / -dX[0, 0]
    if d == 2:
        a = dX[0, 0] * dX[1, 1] - dX[0, 1] * dX[1, 0]
        b = (
            X[0, 0] * dX[1, 1]
            + X[1, 1] * dX[0, 0]
            - X[0, 1] * dX[1, 0]
            - X[1, 0] * dX[0, 1]
        )
        c = X[0, 0] * X[1, 1] - X[0, 1] * X[1, 0]
        return _smallest_positive_root(a, b, max(c, 0.0))
    try:
        lam = sla.eigh(
            dX,
            X,
            eigvals_only=True,
            subset_by_index=(0, 0),
            driver="gvx",
            check_finite=False,
        )[0]
    except (np.linalg.LinAlgError, sla.LinAlgError, ValueError):
        # X drifted to the PSD boundary by roundoff; lift it minimally
        shift = abs(float(np.linalg.eigvalsh(X).min())) + 1e-14
        lam = sla.eigh(
            dX,
            X + shift * np.eye(d),
            eigvals_only=True,
            subset_by_index=(0, 0),
            driver="gvx",
            check_finite=False,
        )[0]
    if lam >= 0.0:
        return np.inf
    return -1.0 / lam


def _max_step_pos(w, dw):
    neg = dw < 0
    if not np.any(neg):
        return np.inf
    return float(np.min(-w[neg] / dw[neg]))


class _Embedded:
    """Problem data after <= conversion and Hermitian embedding."""

    def __init__(self, prob: SdpProblem):
        self.prob = prob
        self.dims = [
            2 * d if cx else d for d, cx in zip(prob.block_dims, prob.block_complex)
        ]
        self.nf = prob.n_free
        self.nn_user = prob.n_nonneg
        n_slack = sum(1 for c in prob.constraints if c.relation == "<=")
        self.nn = self.nn_user + n_slack
        self.m = len(prob.constraints)
        if self.m == 0:
            raise ValueError("the problem needs at least one constraint")

        def emb(j, M):
            return 0.5 * embed_hermitian(M) if prob.block_complex[j] else np.asarray(M, float)

        # objective, normalized to unit data scale (undone on output)
        self.C = [np.zeros((d, d)) for d in self.dims]
        for j, M in prob._obj_blocks.items():
            self.C[j] = emb(j, M)
        self.cf = np.zeros(self.nf)
        for i, v in prob._obj_free.items():
            self.cf[i] = v
        self.cn = np.zeros(self.nn)
        for i, v in prob._obj_nonneg.items():
            self.cn[i] = v
        self.obj_scale = max(
            1.0,
            *(float(np.abs(C).max(initial=0.0)) for C in self.C),
            float(np.abs(self.cf).max(initial=0.0)),
            float(np.abs(self.cn).max(initial=0.0)),
        )
        self.C = [C / self.obj_scale for C in self.C]
        self.cf /= self.obj_scale
        self.cn /= self.obj_scale

        # constraints: per block, rows touching it + compact tensors; every
        # row is normalized by its Frobenius data norm so mixed-scale trace
        # matrices (magnitude vs admittance-weighted) condition the Schur
        # complement evenly
        self.b = np.array([c.rhs for c in prob.constraints])
        per_block = [[] for _ in self.dims]
        embedded = [dict() for _ in range(self.m)]
        for k, c in enumerate(prob.constraints):
            for j, M in c.blocks.items():
                embedded[k][j] = emb(j, M)

        self.F = np.zeros((self.m, self.nf))
        self.Gn = np.zeros((self.m, self.nn))
        slack = self.nn_user
        for k, c in enumerate(prob.constraints):
            for i, v in c.free.items():
                self.F[k, i] = v
            for i, v in c.nonneg.items():
                self.Gn[k, i] = v
            if c.relation == "<=":
                self.Gn[k, slack] = 1.0
                slack += 1

        self.row_scale = np.ones(self.m)
        for k in range(self.m):
            nrm2 = sum(float(np.sum(M**2)) for M in embedded[k].values())
            nrm2 += float(np.sum(self.F[k] ** 2) + np.sum(self.Gn[k] ** 2))
            self.row_scale[k] = max(np.sqrt(nrm2), 1e-10)
        self.b = self.b / self.row_scale
        self.F = self.F / self.row_scale[:, None]
        self.Gn = self.Gn / self.row_scale[:, None]
        for k in range(self.m):
            for j in embedded[k]:
                embedded[k][j] = embedded[k][j] / self.row_scale[k]

        self.rows_of_block = []
        self.A_of_block = []
        for j in range(len(self.dims)):
            touched = [(k, embedded[k][j]) for k in range(self.m) if j in embedded[k]]
            rows = np.array([k for k, _ in touched], dtype=int)
            stack = (
                np.stack([M for _, M in touched])
                if touched
                else np.zeros((0, self.dims[j], self.dims[j]))
            )
            self.rows_of_block.append(rows)
            self.A_of_block.append(stack)
        self.A_flat = [
            stack.reshape(stack.shape[0], -1) for stack in self.A_of_block
        ]

        self.cone_dim = sum(self.dims) + self.nn

        # Gram matrix of the normalized constraint rows, used to project
        # iterates back onto the affine constraint set (primal refinement);
        # it is independent of the iterates so it is factored once
        Gram = self.F @ self.F.T + self.Gn @ self.Gn.T
        for j, rows in enumerate(self.rows_of_block):
            if rows.size:
                Af = self.A_of_block[j].reshape(rows.size, -1)
                Gram[np.ix_(rows, rows)] += Af @ Af.T
        Gram = 0.5 * (Gram + Gram.T)
        self._gram = Gram
        try:
            self._gram_cho = sla.cho_factor(
                Gram + 1e-12 * np.eye(self.m), lower=True, check_finite=False
            )
        except np.linalg.LinAlgError:
            self._gram_cho = None

    def gram_solve(self, r):
        if self._gram_cho is None:
            return None
        sol = sla.cho_solve(self._gram_cho, r, check_finite=False)
        sol += sla.cho_solve(self._gram_cho, r - self._gram @ sol, check_finite=False)
        return sol

    # -- operators ---------------------------------------------------------
    def apply_A(self, X, wf, wn):
        out = self.F @ wf + self.Gn @ wn
        for j, rows in enumerate(self.rows_of_block):
            if rows.size:
                out[rows] += self.A_flat[j] @ X[j].ravel()
        return out

    def apply_AT_blocks(self, y):
        out = []
        for j, rows in enumerate(self.rows_of_block):
            d = self.dims[j]
            if rows.size:
                out.append((y[rows] @ self.A_flat[j]).reshape(d, d))
            else:
                out.append(np.zeros((d, d)))
        return out

    def pobj(self, X, wf, wn):
        val = self.cf @ wf + self.cn @ wn
        for j in range(len(self.dims)):
            val += float(np.sum(self.C[j] * X[j]))
        return val * self.obj_scale + self.prob.obj_constant

    def dobj(self, y):
        return float(self.b @ y) * self.obj_scale + self.prob.obj_constant


def solve_sdp(problem: SdpProblem, options: SdpOptions | None = None) -> SdpSolution:
    """Run the interior-point method; returns the best iterate found."""
    opt = options or SdpOptions()
    E = _Embedded(problem)
    m, nf, nn = E.m, E.nf, E.nn
    nblk = len(E.dims)

    bscale = 1.0 + float(np.linalg.norm(E.b))
    cscale = 1.0 + float(
        np.sqrt(
            sum(np.sum(C**2) for C in E.C) + np.sum(E.cf**2) + np.sum(E.cn**2)
        )
    )
    xi = max(1.0, float(np.abs(E.b).max(initial=0.0)))
    eta = max(
        1.0,
        max((float(np.abs(C).max(initial=0.0)) for C in E.C), default=0.0),
        float(np.abs(E.cn).max(initial=0.0)),
        float(np.abs(E.cf).max(initial=0.0)),
    )

    X = [xi * np.eye(d) for d in E.dims]
    S = [eta * np.eye(d) for d in E.dims]
    wn = xi * np.ones(nn)
    sn = eta * np.ones(nn)
    wf = np.zeros(nf)
    y = np.zeros(m)

    history = []
    best = None
    status = "max_iters"
    iters_done = 0

    def residuals():
        rp = E.b - E.apply_A(X, wf, wn)
        ATy = E.apply_AT_blocks(y)
        Rd = [E.C[j] - S[j] - ATy[j] for j in range(nblk)]
        rdn = E.cn - sn - E.Gn.T @ y
        rdf = E.cf - E.F.T @ y
        return rp, Rd, rdn, rdf

    def scores(rp, Rd, rdn, rdf):
        pres = float(np.linalg.norm(rp)) / bscale
        dres = (
            float(
                np.sqrt(
                    sum(np.sum(R**2) for R in Rd)
                    + np.sum(rdn**2)
                    + np.sum(rdf**2)
                )
            )
            / cscale
        )
        po, do = E.pobj(X, wf, wn), E.dobj(y)
        relgap = abs(po - do) / (1.0 + abs(po) + abs(do))
        return pres, dres, relgap, po, do

    def snapshot():
        return (
            [Xj.copy() for Xj in X],
            wf.copy(),
            wn.copy(),
            y.copy(),
            [Sj.copy() for Sj in S],
            sn.copy(),
        )

    for it in range(opt.max_iters):
        iters_done = it
        rp, Rd, rdn, rdf = residuals()
        pres, dres, relgap, po, do = scores(rp, Rd, rdn, rdf)
        history.append((po, do, pres, dres, relgap))
        score = max(pres, dres, relgap)
        if best is None or score < best[0]:
            best = (score, snapshot(), (pres, dres, relgap), it)

        if pres < opt.tol_feas and dres < opt.tol_feas and relgap < opt.tol_gap:
            status = "optimal"
            best = (score, snapshot(), (pres, dres, relgap), it)
            break
        if np.abs(y).max(initial=0.0) > 1e12 * xi:
            status = "infeasible"
            break
        # double precision bottoms out near the boundary: once the gap is
        # already small, stop when the best score stagnates instead of
        # polishing noise
        if relgap < 1e-4 and it - best[3] >= opt.stall_iters:
            break

        mu = (
            sum(float(np.sum(X[j] * S[j])) for j in range(nblk)) + float(wn @ sn)
        ) / E.cone_dim

        # Schur complement H_ik = sum_j tr(A_i X A_k S^-1) + G diag(wn/sn) G'
        H = np.zeros((m, m))
        Sinv = []
        try:
            for j in range(nblk):
                Sinv.append(np.linalg.inv(S[j]))
                rows = E.rows_of_block[j]
                if rows.size == 0:
                    continue
                Ast = E.A_of_block[j]
                d = E.dims[j]
                W = X[j][None, :, :] @ Ast @ Sinv[j][None, :, :]
                H[np.ix_(rows, rows)] += E.A_flat[j] @ W.reshape(rows.size, d * d).T
        except np.linalg.LinAlgError:
            status = "numerical_failure"
            break
        if nn:
            H += (E.Gn * (wn / sn)) @ E.Gn.T
        H = 0.5 * (H + H.T)

        # factor the (bordered) Schur system once per iteration under a
        # Jacobi scaling: Cholesky when there are no free columns, falling
        # back to pivoted LU when the matrix goes numerically indefinite
        # near the boundary; a 1e-12-scaled diagonal regularization is the
        # last resort
        dmax = float(np.max(np.diag(H), initial=0.0))
        if not np.isfinite(dmax) or dmax <= 0.0:
            status = "numerical_failure"
            break
        djac = np.sqrt(np.clip(np.diag(H), 1e-14 * dmax, None))
        Hs = H / djac[:, None] / djac[None, :]
        Fs = E.F / djac[:, None] if nf else E.F
        factor = None
        if nf == 0:
            try:
                cho = sla.cho_factor(Hs, lower=True, check_finite=False)
                factor = ("chol", cho, Hs)
            except np.linalg.LinAlgError:
                pass
        if factor is None:
            Kexact = (
                Hs
                if nf == 0
                else np.block([[Hs, Fs], [Fs.T, np.zeros((nf, nf))]])
            )
            for attempt in range(4):
                shift = 0.0 if attempt == 0 else 1e-12 * 100.0**attempt
                K = Kexact.copy()
                K[:m, :m] += shift * np.eye(m)
                if nf:
                    K[m:, m:] -= shift * np.eye(nf)
                try:
                    lu = sla.lu_factor(K, check_finite=False)
                except (np.linalg.LinAlgError, ValueError):
                    continue
                factor = ("lu", lu, Kexact)
                break
        if factor is None:
            status = "numerical_failure"
            break

        def solve_augmented(rhs, rhs_f):
            kind, fac, Kx = factor
            if kind == "chol":
                r = rhs / djac
                sol = sla.cho_solve(fac, r, check_finite=False)
                for _ in range(2):  # iterative refinement
                    sol += sla.cho_solve(fac, r - Kx @ sol, check_finite=False)
                return sol / djac, np.zeros(0)
            full = np.concatenate([rhs / djac, rhs_f])
            sol = sla.lu_solve(fac, full, check_finite=False)
            for _ in range(2):
                sol += sla.lu_solve(fac, full - Kx @ sol, check_finite=False)
            return sol[:m] / djac, sol[m:]

        def newton(K_blocks, k_n):
            rhs = rp.copy()
            for j in range(nblk):
                rows = E.rows_of_block[j]
                if rows.size == 0:
                    continue
                Mj = (K_blocks[j] - X[j] @ Rd[j]) @ Sinv[j]
                rhs[rows] -= E.A_flat[j] @ Mj.ravel()
            if nn:
                rhs -= E.Gn @ ((k_n - wn * rdn) / sn)
            dy, dwf = solve_augmented(rhs, rdf)
            dS = [Rd[j] - ATdy for j, ATdy in enumerate(E.apply_AT_blocks(dy))]
            dsn = rdn - E.Gn.T @ dy
            dX = []
            for j in range(nblk):
                M = (K_blocks[j] - X[j] @ dS[j]) @ Sinv[j]
                dX.append(0.5 * (M + M.T))
            dwn = (k_n - wn * dsn) / sn if nn else np.zeros(0)
            return dX, dwf, dwn, dy, dS, dsn

        # predictor (affine scaling)
        K_aff = [-(X[j] @ S[j]) for j in range(nblk)]
        kn_aff = -(wn * sn)
        try:
            aff = newton(K_aff, kn_aff)
        except np.linalg.LinAlgError:
            status = "numerical_failure"
            break
        dXa, dwfa, dwna, dya, dSa, dsna = aff

        ap = min(
            [1.0]
            + [_max_step_psd(X[j], dXa[j]) for j in range(nblk)]
            + ([_max_step_pos(wn, dwna)] if nn else [])
        )
        ad = min(
            [1.0]
            + [_max_step_psd(S[j], dSa[j]) for j in range(nblk)]
            + ([_max_step_pos(sn, dsna)] if nn else [])
        )
        gap = sum(float(np.sum(X[j] * S[j])) for j in range(nblk)) + float(wn @ sn)
        gap_aff = sum(
            float(np.sum((X[j] + ap * dXa[j]) * (S[j] + ad * dSa[j])))
            for j in range(nblk)
        ) + float((wn + ap * dwna) @ (sn + ad * dsna))
        sigma = min(1.0, max(1e-12, (max(gap_aff, 0.0) / gap) ** 3))
        if relgap < 1e-5:
            # damped deterministic path-following near the floor
            sigma = min(max(sigma, 0.05), 0.7)

        # corrector
        nu = sigma * mu
        K = [
            nu * np.eye(E.dims[j]) - X[j] @ S[j] - dXa[j] @ dSa[j]
            for j in range(nblk)
        ]
        kn = nu - wn * sn - dwna * dsna if nn else np.zeros(0)
        try:
            dX, dwf, dwn, dy, dS, dsn = newton(K, kn)
        except np.linalg.LinAlgError:
            status = "numerical_failure"
            break

        def min_step(dX_, dS_, dwn_, dsn_):
            a_p = min(
                [np.inf]
                + [_max_step_psd(X[j], dX_[j]) for j in range(nblk)]
                + ([_max_step_pos(wn, dwn_)] if nn else [])
            )
            a_d = min(
                [np.inf]
                + [_max_step_psd(S[j], dS_[j]) for j in range(nblk)]
                + ([_max_step_pos(sn, dsn_)] if nn else [])
            )
            return a_p, a_d

        a_p, a_d = min_step(dX, dS, dwn, dsn)
        # one extra centrality corrector (reusing the factorization) when the
        # combined direction would force short steps
        if min(a_p, a_d) < 0.5:
            K2 = [
                nu * np.eye(E.dims[j])
                - X[j] @ S[j]
                - a_p * a_d * (dX[j] @ dS[j])
                for j in range(nblk)
            ]
            kn2 = nu - wn * sn - a_p * a_d * (dwn * dsn) if nn else np.zeros(0)
            try:
                cand = newton(K2, kn2)
                c_p, c_d = min_step(cand[0], cand[4], cand[2], cand[5])
                if min(c_p, c_d) > min(a_p, a_d) * 1.1:
                    dX, dwf, dwn, dy, dS, dsn = cand
                    a_p, a_d = c_p, c_d
            except np.linalg.LinAlgError:
                pass
        finite = (
            all(np.isfinite(D).all() for D in dX)
            and all(np.isfinite(D).all() for D in dS)
            and np.isfinite(dwf).all()
            and np.isfinite(dwn).all()
            and np.isfinite(dy).all()
            and np.isfinite(dsn).all()
        )
        if not finite:
            status = "numerical_failure"
            break

        # push the step fraction towards 1 as the duality gap closes
        if relgap >= 1e-3:
            tau = opt.step_fraction
        elif relgap >= 1e-5:
            tau = max(opt.step_fraction, 0.99)
        else:
            tau = opt.step_cap
        ap = min(1.0, tau * a_p)
        ad = min(1.0, tau * a_d)

        for j in range(nblk):
            X[j] = 0.5 * ((X[j] + ap * dX[j]) + (X[j] + ap * dX[j]).T)
            S[j] = 0.5 * ((S[j] + ad * dS[j]) + (S[j] + ad * dS[j]).T)
        wf = wf + ap * dwf
        wn = wn + ap * dwn
        y = y + ad * dy
        sn = sn + ad * dsn

        # project the primal iterate back onto the affine constraint set
        # (minimum-norm correction from the pre-factored Gram system, damped
        # so the iterate stays in the cone interior); this stops roundoff
        # from the corrector accumulating as a primal-feasibility floor
        rp_new = E.b - E.apply_A(X, wf, wn)
        if 1e-15 < float(np.linalg.norm(rp_new)) < 1e-2 * bscale:
            lam = E.gram_solve(rp_new)
            if lam is not None:
                cX = E.apply_AT_blocks(lam)
                cwf = E.F.T @ lam
                cwn = E.Gn.T @ lam
                # fast path: the correction is usually tiny enough to apply
                # in full; otherwise damp it to stay inside the cone
                gamma = 1.0
                try:
                    for j in range(nblk):
                        np.linalg.cholesky(X[j] + cX[j])
                    if nn and np.any(wn + cwn <= 0.0):
                        raise np.linalg.LinAlgError
                except np.linalg.LinAlgError:
                    gamma = 0.0
                    damps = [np.inf]
                    for j in range(nblk):
                        if np.any(cX[j]):
                            damps.append(_max_step_psd(X[j], cX[j]))
                    if nn:
                        damps.append(_max_step_pos(wn, cwn))
                    gamma = min(1.0, 0.9 * min(damps))
                if gamma > 0.0:
                    for j in range(nblk):
                        X[j] = X[j] + gamma * cX[j]
                    wf = wf + gamma * cwf
                    wn = wn + gamma * cwn
    else:
        iters_done = opt.max_iters

    # report the best iterate seen
    _, (Xb, wfb, wnb, yb, Sb, snb), res, _it = best
    X, wf, wn, y = Xb, wfb, wnb, yb

    out_blocks = []
    for j in range(nblk):
        if problem.block_complex[j]:
            out_blocks.append(unembed_hermitian(X[j]))
        else:
            out_blocks.append(0.5 * (X[j] + X[j].T))
    return SdpSolution(
        blocks=out_blocks,
        free=wf,
        nonneg=wn[: E.nn_user],
        y=y * E.obj_scale / E.row_scale,
        objective_value=E.pobj(X, wf, wn),
        status=status,
        iterations=iters_done,
        residuals=res,
        history=history,
    )


solve = solve_sdp


def extract_rank_one(block: np.ndarray, tol_ratio: float = 1e-5):
    """Leading-eigenpair state extraction from a PSD matrix.

    Returns (vector, is_rank_one) with vector = sqrt(lambda_1) u_1, rotated so
    the first (substation) entry is real nonnegative. ``is_rank_one`` holds
    when lambda_2 / lambda_1 < tol_ratio.
    """
    M = np.asarray(block)
    if M.size == 0 or not np.any(np.abs(M) > 0.0):
        raise ValueError("cannot extract a state from the zero matrix")
    M = 0.5 * (M + M.conj().T)
    vals, vecs = np.linalg.eigh(M)
    lam1 = float(vals[-1])
    lam2 = float(vals[-2]) if vals.size > 1 else 0.0
    if lam1 <= 0:
        raise ValueError("matrix has no positive eigenvalue")
    u = vecs[:, -1]
    v = np.sqrt(lam1) * u
    if abs(v[0]) > 1e-12 * np.linalg.norm(v):
        v = v * np.conj(v[0] / abs(v[0]))
    is_rank_one = max(lam2, 0.0) / lam1 < tol_ratio
    return v, bool(is_rank_one)


def dump_problem(problem: SdpProblem, path):
    """Write the assembled problem in a plain sparse text format.

    Line types: ``block j dim c|r``, ``scalars nf nn``, ``obj ...`` /
    ``con k rhs rel ...`` followed by indented entries ``B j r c re [im]``,
    ``F i v``, ``N i v``. Intended for cross-checking against external
    solvers.
    """
    lines = ["# gridscope sdp dump v1"]
    for j, (d, cx) in enumerate(zip(problem.block_dims, problem.block_complex)):
        lines.append(f"block {j} {d} {'c' if cx else 'r'}")
    lines.append(f"scalars {problem.n_free} {problem.n_nonneg}")

    def mat_entries(j, M, out):
        cx = problem.block_complex[j]
        n = problem.block_dims[j]
        for r in range(n):
            for c in range(n):
                val = M[r, c]
                if val == 0:
                    continue
                if cx:
                    out.append(f"  B {j} {r} {c} {val.real!r} {val.imag!r}")
                else:
                    out.append(f"  B {j} {r} {c} {float(val)!r}")

    lines.append("obj")
    for j, M in problem._obj_blocks.items():
        mat_entries(j, M, lines)
    for i, v in problem._obj_free.items():
        lines.append(f"  F {i} {v!r}")
    for i, v in problem._obj_nonneg.items():
        lines.append(f"  N {i} {v!r}")
    for k, con in enumerate(problem.constraints):
        lines.append(f"con {k} {con.rhs!r} {con.relation}")
        for j, M in con.blocks.items():
            mat_entries(j, M, lines)
        for i, v in con.free.items():
            lines.append(f"  F {i} {v!r}")
        for i, v in con.nonneg.items():
            lines.append(f"  N {i} {v!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
