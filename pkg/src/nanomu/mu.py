"""Structured singular value bounds and robust-performance profiles.

Upper bounds come from the D,G scaling condition

    M* D M + j (G M - M* G) - beta^2 D <= 0,

with ``D > 0`` commuting with the block structure and real diagonal ``G``
supported on the real scalar blocks.  For fixed scalings the smallest
admissible ``beta^2`` is the largest eigenvalue of

    H = Mh* Mh + j (Gh Mh - Mh* Gh),   Mh = D^1/2 M D^-1/2,  Gh = G D^-1,

so the bound is minimized directly over ``(log d, gh)``.  Any scaling gives
a valid bound; the optimizer only controls how tight it is.  ``gh = 0``
recovers the complex D-scaling bound.

All routines accept a stack of matrices ``(F, n, n)`` and solve the
frequencies independently in one vectorized pass.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .lti import as_grid, feedback, freq_response, is_stable, rationalize

log = logging.getLogger(__name__)

KINDS = ("real", "complex", "full")


class MuError(ValueError):
    pass


@dataclass(frozen=True)
class Block:
    kind: str  # "real" scalar, "complex" scalar or complex "full"
    rows: int = 1
    cols: int = 1
    label: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise MuError(f"unknown block kind {self.kind!r}")
        if self.kind != "full" and (self.rows, self.cols) != (1, 1):
            raise MuError("scalar blocks are 1x1")
        if self.rows < 1 or self.cols < 1:
            raise MuError("block dimensions must be positive")


@dataclass(frozen=True)
class BlockStructure:
    blocks: tuple

    def __post_init__(self):
        if not self.blocks:
            raise MuError("a block structure needs at least one block")
        object.__setattr__(self, "blocks", tuple(self.blocks))

    @classmethod
    def of(cls, *kinds, labels=None):
        labels = labels or [""] * len(kinds)
        return cls(tuple(Block(k, label=lab) for k, lab in zip(kinds, labels)))

    @property
    def size(self):
        return sum(b.rows for b in self.blocks)

    @property
    def square(self):
        return all(b.rows == b.cols for b in self.blocks)

    def index_blocks(self, side="rows"):
        """Block number of every row of ``Delta`` (side='rows') or column."""
        out = []
        for i, b in enumerate(self.blocks):
            out += [i] * (b.rows if side == "rows" else b.cols)
        return np.array(out, dtype=int)

    @property
    def real_mask(self):
        return np.array([b.kind == "real" for b in self.blocks for _ in range(b.rows)])

    @property
    def has_real(self):
        return any(b.kind == "real" for b in self.blocks)

    def complexified(self):
        return BlockStructure(
            tuple(Block("complex" if b.kind == "real" else b.kind, b.rows, b.cols, b.label) for b in self.blocks)
        )

    def check(self, m):
        m = np.asarray(m)
        # Delta is (sum rows) x (sum cols); M maps w -> z so it is cols x rows
        n_z = sum(b.cols for b in self.blocks)
        n_w = sum(b.rows for b in self.blocks)
        if m.shape[-2:] != (n_z, n_w):
            raise MuError(f"matrix shape {m.shape[-2:]} does not match structure ({n_z}, {n_w})")


@dataclass
class MuBound:
    value: np.ndarray  # (F,)
    x: np.ndarray  # (F, p) optimizer state (log d, gh)
    fallback: np.ndarray  # (F,) bool: complexified bound returned


# --------------------------------------------------------------------------
# scaled Hermitian form and its gradient


class _Form:
    """Batched evaluation of the D,G form for a fixed structure."""

    def __init__(self, m, structure: BlockStructure, use_g: bool):
        if not structure.square:
            raise MuError("D,G scalings need square blocks")
        self.m = m
        self.nb = len(structure.blocks)
        self.idx = structure.index_blocks("rows")
        self.real = structure.real_mask if use_g else np.zeros(structure.size, dtype=bool)
        self.real_blocks = np.flatnonzero([b.kind == "real" for b in structure.blocks]) if use_g else np.array([], int)
        # block 0 carries the (irrelevant) overall scale of D
        self.nd = self.nb - 1
        self.ng = self.real_blocks.size
        self.p = self.nd + self.ng
        n = structure.size
        # map from block-level parameters to index-level
        self.dmap = np.zeros((self.nd, n))
        for b in range(1, self.nb):
            self.dmap[b - 1, self.idx == b] = 1.0
        self.gmap = np.zeros((self.ng, n))
        for k, b in enumerate(self.real_blocks):
            self.gmap[k, self.idx == b] = 1.0

    def split(self, x):
        xd = x[:, : self.nd] @ self.dmap
        g = x[:, self.nd :] @ self.gmap
        return xd, g

    def scaled(self, x, sel=slice(None)):
        xd, g = self.split(x)
        mh = self.m[sel] * np.exp(0.5 * (xd[:, :, None] - xd[:, None, :]))
        return mh, g

    def hermitian(self, mh, g):
        gm = g[:, :, None] * mh
        h = np.conj(np.swapaxes(mh, -1, -2)) @ mh + 1j * (gm - np.conj(np.swapaxes(gm, -1, -2)))
        return 0.5 * (h + np.conj(np.swapaxes(h, -1, -2)))

    def lam_max(self, x, sel=slice(None)):
        mh, g = self.scaled(x, sel)
        return np.linalg.eigvalsh(self.hermitian(mh, g))[:, -1]

    def smooth(self, x, temp, sel=slice(None)):
        """Soft-max of the eigenvalues and its gradient in ``x``."""
        mh, g = self.scaled(x, sel)
        lam, v = np.linalg.eigh(self.hermitian(mh, g))
        top = lam[:, -1]
        z = np.exp((lam - top[:, None]) / temp)
        zs = z.sum(axis=1)
        f = top + temp * np.log(zs)
        p = z / zs[:, None]
        u = mh @ v
        w = u - 1j * g[:, :, None] * v
        y = np.conj(np.swapaxes(mh, -1, -2)) @ w
        gx = np.einsum("fki,fi->fk", (np.conj(w) * u - np.conj(y) * v).real, p)
        gg = np.einsum("fki,fi->fk", -2.0 * (np.conj(v) * u).imag, p)
        grad = np.concatenate([gx @ self.dmap.T, gg @ self.gmap.T], axis=1)
        return f, grad, top


def _osborne(m, structure: BlockStructure, sweeps=20):
    """Log-D start from block Osborne balancing of ``|M|`` (batched)."""
    idx = structure.index_blocks("rows")
    nb = len(structure.blocks)
    a = np.abs(m) ** 2
    f = m.shape[0]
    xb = np.zeros((f, nb))
    same = idx[:, None] == idx[None, :]
    a = np.where(same[None], 0.0, a)
    for _ in range(sweeps):
        for b in range(nb):
            xd = xb[:, idx]
            s = a * np.exp(xd[:, :, None] - xd[:, None, :])
            rows = s[:, idx == b, :].sum(axis=(1, 2))
            cols = s[:, :, idx == b].sum(axis=(1, 2))
            ok = (rows > 0) & (cols > 0)
            xb[ok, b] += 0.5 * np.log(cols[ok] / rows[ok])
    xb = xb - xb[:, :1]
    return np.clip(xb[:, 1:], -60, 60)


def _bfgs(form: _Form, x, temps, iters=60, tol=1e-10):
    """Batched BFGS on the soft-max objective with a temperature schedule."""
    p = x.shape[1]
    best_x = x.copy()
    best = form.lam_max(x)
    if p == 0:
        return best_x, best
    for temp in temps:
        active = np.flatnonzero(best > 0)
        if active.size == 0:
            break
        xa = best_x[active].copy()
        hinv = np.broadcast_to(np.eye(p), (active.size, p, p)).copy()
        fval, grad, top = form.smooth(xa, temp, active)
        step0 = np.ones(active.size)
        live = np.ones(active.size, dtype=bool)
        stall = np.zeros(active.size, dtype=int)
        for _ in range(iters):
            li = np.flatnonzero(live)
            if li.size == 0:
                break
            d = -np.einsum("fij,fj->fi", hinv[li], grad[li])
            slope = np.einsum("fi,fi->f", d, grad[li])
            bad = slope >= 0
            if np.any(bad):
                hinv[li[bad]] = np.eye(p)
                d[bad] = -grad[li[bad]]
                slope[bad] = -np.einsum("fi,fi->f", grad[li[bad]], grad[li[bad]])
            # keep steps in log-d / g bounded
            norm = np.linalg.norm(d, axis=1)
            t = np.minimum(step0[li], 4.0 / np.maximum(norm, 1e-300))
            new_x = xa[li].copy()
            new_f = fval[li].copy()
            new_g = grad[li].copy()
            new_top = top[li].copy()
            pending = np.arange(li.size)
            for _ls in range(30):
                if pending.size == 0:
                    break
                xt = xa[li[pending]] + t[pending, None] * d[pending]
                ft, gt, tt = form.smooth(xt, temp, active[li[pending]])
                ok = ft <= fval[li[pending]] + 1e-4 * t[pending] * slope[pending]
                acc = pending[ok]
                new_x[acc], new_f[acc], new_g[acc], new_top[acc] = xt[ok], ft[ok], gt[ok], tt[ok]
                pending = pending[~ok]
                t[pending] *= 0.5
            failed = np.zeros(li.size, dtype=bool)
            failed[pending] = True
            s = new_x - xa[li]
            yv = new_g - grad[li]
            sy = np.einsum("fi,fi->f", s, yv)
            upd = (sy > 1e-14) & ~failed
            if np.any(upd):
                u = li[upd]
                rho = 1.0 / sy[upd]
                hy = np.einsum("fij,fj->fi", hinv[u], yv[upd])
                yhy = np.einsum("fi,fi->f", yv[upd], hy)
                hinv[u] = (
                    hinv[u]
                    - rho[:, None, None] * (hy[:, :, None] * s[upd][:, None, :] + s[upd][:, :, None] * hy[:, None, :])
                    + (rho**2 * yhy + rho)[:, None, None] * s[upd][:, :, None] * s[upd][:, None, :]
                )
            improve = fval[li] - new_f
            xa[li], fval[li], grad[li], top[li] = new_x, new_f, new_g, new_top
            step0[li] = 1.0
            small = improve <= tol * np.maximum(np.abs(fval[li]), 1e-300)
            stall[li] = np.where(small, stall[li] + 1, 0)
            done = (stall[li] >= 3) | (failed & small) | (top[li] <= 0)
            live[li[done]] = False
            # BFGS memory is restarted when the line search fails
            hinv[li[failed & ~done]] = np.eye(p)
        exact = form.lam_max(xa, active)
        better = exact < best[active]
        best[active[better]] = exact[better]
        best_x[active[better]] = xa[better]
    return best_x, best


PRECISE = (1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7)
FAST = (1e-2, 1e-3)


def _normalize(m):
    scale = np.sqrt(np.sum(np.abs(m) ** 2, axis=(-2, -1)))
    scale = np.where(scale > 0, scale, 1.0)
    return m / scale[:, None, None], scale


def _as_stack(m):
    m = np.asarray(m, dtype=complex)
    single = m.ndim == 2
    if single:
        m = m[None]
    if not np.all(np.isfinite(m)):
        raise MuError("matrix entries must be finite")
    return m, single


def mu_upper_complex_batch(m, structure: BlockStructure, temps=PRECISE, x0=None) -> MuBound:
    m, _ = _as_stack(m)
    structure.check(m)
    st = structure.complexified()
    mn, scale = _normalize(m)
    form = _Form(mn, st, use_g=False)
    x = _osborne(mn, st) if x0 is None else np.asarray(x0, dtype=float)[:, : form.nd].copy()
    x, lam = _bfgs(form, x, temps)
    val = np.sqrt(np.maximum(lam, 0.0)) * scale
    return MuBound(val, x, np.zeros(m.shape[0], dtype=bool))


def mu_upper_mixed_batch(m, structure: BlockStructure, temps=PRECISE, x0=None) -> MuBound:
    """D,G upper bound; never above the complexified D bound."""
    m, _ = _as_stack(m)
    structure.check(m)
    mn, scale = _normalize(m)
    form = _Form(mn, structure, use_g=True)
    fallback = np.zeros(m.shape[0], dtype=bool)
    if x0 is None:
        cform = _Form(mn, structure, use_g=False)
        xd, lam_c = _bfgs(cform, _osborne(mn, structure), temps)
        x = np.concatenate([xd, np.zeros((m.shape[0], form.ng))], axis=1)
    else:
        x = np.asarray(x0, dtype=float).copy()
        lam_c = None
    if form.ng:
        try:
            x_new, lam = _bfgs(form, x, temps)
            ok = np.isfinite(lam)
            fallback = ~ok
            x = np.where(ok[:, None], x_new, x)
            lam = np.where(ok, lam, form.lam_max(x))
        except np.linalg.LinAlgError:
            log.warning("D,G descent failed; returning complexified bound")
            fallback[:] = True
            lam = form.lam_max(x)
    else:
        lam = lam_c if lam_c is not None else _bfgs(form, x, temps)[1]
    val = np.sqrt(np.maximum(lam, 0.0)) * scale
    return MuBound(val, x, fallback)


def mu_upper_complex(m, structure: BlockStructure) -> float:
    m = np.asarray(m, dtype=complex)
    return float(mu_upper_complex_batch(m[None], structure).value[0])


def mu_upper_mixed(m, structure: BlockStructure) -> float:
    m = np.asarray(m, dtype=complex)
    return float(mu_upper_mixed_batch(m[None], structure).value[0])


def _random_delta(rng, structure: BlockStructure):
    parts = []
    for b in structure.blocks:
        if b.kind == "real":
            parts.append(np.array([[rng.uniform(-1, 1)]], dtype=complex))
        elif b.kind == "complex":
            parts.append(np.array([[np.exp(2j * np.pi * rng.uniform())]]))
        else:
            a = rng.standard_normal((b.rows, b.cols)) + 1j * rng.standard_normal((b.rows, b.cols))
            parts.append(a / np.linalg.norm(a, 2))
    n_r = sum(b.rows for b in structure.blocks)
    n_c = sum(b.cols for b in structure.blocks)
    out = np.zeros((n_r, n_c), dtype=complex)
    r = c = 0
    for p in parts:
        out[r : r + p.shape[0], c : c + p.shape[1]] = p
        r += p.shape[0]
        c += p.shape[1]
    return out


def _block_norm(delta, structure):
    out = 0.0
    r = c = 0
    for b in structure.blocks:
        out = max(out, np.linalg.norm(delta[r : r + b.rows, c : c + b.cols], 2))
        r += b.rows
        c += b.cols
    return out


def _destabilizing_gain(md):
    """Largest real positive eigenvalue of ``M Delta`` (0 if none)."""
    lam = np.linalg.eigvals(md)
    tol = 1e-9 * max(1.0, np.abs(lam).max(initial=0.0))
    real = lam[(np.abs(lam.imag) <= tol) & (lam.real > 0)]
    return float(real.real.max()) if real.size else 0.0


def mu_lower_sampling(m, structure: BlockStructure, n=1000, seed=0, phase_steps=24) -> float:
    """Lower bound from sampled admissible perturbation directions.

    Along a direction ``Delta`` the first destabilizing scale is
    ``1 / lambda`` for the largest real positive eigenvalue of ``M Delta``.
    Complex blocks get a common phase rotation scanned on a grid and refined
    by bisection on the imaginary part of the tracked eigenvalue.  Without
    real blocks the rotation is applied to the whole product, which makes the
    spectral radius directly attainable.
    """
    m = np.asarray(m, dtype=complex)
    structure.check(m)
    if not np.any(m):
        return 0.0
    rng = np.random.default_rng(seed)
    kinds = [b.kind for b in structure.blocks]
    all_complex = "real" not in kinds
    complex_mask = np.zeros(sum(b.rows for b in structure.blocks), dtype=bool)
    r = 0
    for b in structure.blocks:
        if b.kind != "real":
            complex_mask[r : r + b.rows] = True
        r += b.rows
    best = 0.0
    for _ in range(n):
        delta = _random_delta(rng, structure)
        nrm = _block_norm(delta, structure)
        if nrm == 0:
            continue
        md = m @ delta
        if all_complex:
            best = max(best, float(np.abs(np.linalg.eigvals(md)).max()) / nrm)
            continue
        best = max(best, _destabilizing_gain(md) / nrm, _destabilizing_gain(-md) / nrm)
        if complex_mask.any() and phase_steps:
            best = max(best, _phase_scan(m, delta, complex_mask, phase_steps) / nrm)
    return best


def _phase_scan(m, delta, complex_mask, steps):
    def eig(phi):
        rot = np.where(complex_mask, np.exp(1j * phi), 1.0)
        return np.linalg.eigvals(m @ (rot[:, None] * delta))

    phis = np.linspace(0, 2 * np.pi, steps + 1)
    rots = np.where(complex_mask[None, :], np.exp(1j * phis)[:, None], 1.0)
    lams = np.linalg.eigvals(m[None] @ (rots[:, :, None] * delta[None]))
    best = 0.0
    for k in range(steps):
        a, b = lams[k], lams[k + 1]
        for lam in a:
            if lam.real <= 0:
                continue
            j = int(np.argmin(np.abs(b - lam)))
            if np.sign(lam.imag) == np.sign(b[j].imag):
                continue
            lo, hi = phis[k], phis[k + 1]
            target = lam
            for _ in range(40):
                mid = 0.5 * (lo + hi)
                cand = eig(mid)
                c = cand[int(np.argmin(np.abs(cand - target)))]
                if np.sign(c.imag) == np.sign(lam.imag):
                    lo, target = mid, c
                else:
                    hi = mid
            cand = eig(0.5 * (lo + hi))
            c = cand[int(np.argmin(np.abs(cand - target)))]
            if c.real > 0:
                best = max(best, float(c.real))
    return best


# --------------------------------------------------------------------------
# interconnection and robust performance


@dataclass
class MuProfile:
    grid: np.ndarray
    upper: np.ndarray
    lower: np.ndarray
    peak_upper: float = field(init=False)
    peak_freq: float = field(init=False)
    fallback: np.ndarray | None = None

    def __post_init__(self):
        k = int(np.argmax(self.upper))
        self.peak_upper = float(self.upper[k])
        self.peak_freq = float(self.grid[k])


def rp_structure(plant) -> BlockStructure:
    """Real channel per active delta, then Delta_u, then the performance block."""
    blocks = [Block("real", label=c.label) for c in plant.channels]
    if plant.unstructured is not None:
        blocks.append(Block("complex", label="Delta_u"))
    blocks.append(Block("complex", label="performance"))
    return BlockStructure(tuple(blocks))


def interconnection(comp, controller_resp, perf_resp) -> np.ndarray:
    """Stack of ``M(j w)`` seen by ``diag(deltas, Delta_u, Delta_perf)``.

    The loop is ``x = G_p (d - u)``, ``u = C x`` and ``z_perf = W x``.  The
    chain is traversed mode by mode (numerator factor, denominator factor,
    nominal pair), then actuator and delay, then the output multiplicative
    block.  Every signal is tracked as ``a * e + b @ w`` with ``e`` the plant
    input; closing the loop around ``C`` gives ``M`` in closed form.
    """
    f = comp.grid.size
    n_r = comp.channel_weights.shape[0]
    has_u = comp.wu is not None
    n_w = n_r + int(has_u)
    a = np.ones(f, dtype=complex)
    b = np.zeros((f, n_w), dtype=complex)
    za = np.zeros((f, n_w), dtype=complex)
    zb = np.zeros((f, n_w, n_w), dtype=complex)
    for j in range(comp.modes.shape[0]):
        for inverse in (False, True):
            chans = np.flatnonzero((comp.channel_mode == j) & (comp.channel_inverse == inverse))
            if not inverse:
                for c in chans:
                    za[:, c] = comp.channel_weights[c] * a
                    zb[:, c, :] = comp.channel_weights[c][:, None] * b
                for c in chans:
                    b[:, c] += 1.0
            else:
                for c in chans:
                    b[:, c] += 1.0
                for c in chans:
                    za[:, c] = comp.channel_weights[c] * a
                    zb[:, c, :] = comp.channel_weights[c][:, None] * b
        a = a * comp.modes[j]
        b = b * comp.modes[j][:, None]
    a = a * comp.tail
    b = b * comp.tail[:, None]
    if has_u:
        za[:, n_r] = comp.wu * a
        zb[:, n_r, :] = comp.wu[:, None] * b
        b[:, n_r] += 1.0
    c = np.asarray(controller_resp, dtype=complex)
    den = 1.0 + c * a
    m = np.zeros((f, n_w + 1, n_w + 1), dtype=complex)
    m[:, :n_w, :n_w] = zb - za[:, :, None] * (c / den)[:, None, None] * b[:, None, :]
    m[:, :n_w, n_w] = za / den[:, None]
    wp = np.asarray(perf_resp, dtype=complex)
    m[:, n_w, :n_w] = (wp / den)[:, None] * b
    m[:, n_w, n_w] = wp * a / den
    return m


def interconnection_at(plant, controller, perf_weight, omega) -> np.ndarray:
    comp = plant.components([omega])
    return interconnection(comp, freq_response(controller, [omega]), freq_response(perf_weight, [omega]))[0]


class NominalInstabilityError(RuntimeError):
    def __init__(self, poles):
        worst = float(np.max(poles.real)) if len(poles) else float("nan")
        super().__init__(f"nominal closed loop is unstable (max pole real part {worst:.4g})")
        self.poles = poles


def nominal_closed_loop_poles(plant, controller, pade_order=2):
    loop = feedback(rationalize(plant.nominal_tf(), pade_order), controller)
    return is_stable(loop)


def robust_performance_profile(plant, controller, perf_weight, grid, n_lower=0, seed=0, temps=PRECISE):
    """Mixed-mu upper bound of the robust-performance problem over ``grid``."""
    stable, poles = nominal_closed_loop_poles(plant, controller)
    if not stable:
        raise NominalInstabilityError(poles)
    w = as_grid(grid)
    comp = plant.components(w)
    m = interconnection(comp, freq_response(controller, w), freq_response(perf_weight, w))
    st = rp_structure(plant)
    ub = mu_upper_mixed_batch(m, st, temps=temps)
    lower = np.zeros(w.size)
    if n_lower:
        lower = np.array([mu_lower_sampling(mk, st, n=n_lower, seed=seed) for mk in m])
    return MuProfile(w, ub.value, lower, fallback=ub.fallback)
