"""Multisample linear latent-variable model specification and evaluation.

A model describes, for each of I samples, how an observed vector of length
p(i) is generated as ``nu = beta + B @ xi`` where the latent vector xi stacks
a (possibly cross-sample correlated) factor block zeta, a normal error block
eps0 and further independent nonnormal error blocks eps1..epsL.  Intercepts,
coefficients and the normal-error covariance may be restricted through named
parameters shared within and across samples (the tau part of theta); factor
means/covariances and nonnormal error covariances are always free per sample
(the nu part) and are generated automatically.

Templates hold either fixed numeric constants or parameter names.  A sample
may instead declare a recursive simultaneous-equation layer (alpha, Gamma,
Delta); it is reduced numerically to (beta, B) via (I - Gamma)^(-1) at every
evaluation, which keeps template entries linear in the parameters.
"""

import re
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import kernels
from .errors import EvaluationError, OverParameterizedError, SpecError
from .linalg import vech_indices

_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_.]*$")


@dataclass(frozen=True)
class EntrySpec:
    """A template slot: either a fixed constant or a reference to a named parameter."""

    value: float | None = None
    name: str | None = None

    def __post_init__(self):
        if (self.value is None) == (self.name is None):
            raise SpecError("entry must have exactly one of value/name")
        if self.name is not None and not _NAME_RE.match(self.name):
            raise SpecError(f"invalid parameter name {self.name!r}")

    @property
    def is_fixed(self):
        return self.value is not None

    @staticmethod
    def fixed(value):
        return EntrySpec(value=float(value))

    @staticmethod
    def named(name):
        return EntrySpec(name=name)

    @staticmethod
    def of(x):
        """Coerce a number, string or EntrySpec into an EntrySpec."""
        if isinstance(x, EntrySpec):
            return x
        if isinstance(x, str):
            return EntrySpec.named(x)
        if isinstance(x, (int, float, np.integer, np.floating)) and not isinstance(x, bool):
            return EntrySpec.fixed(x)
        raise SpecError(f"cannot interpret template entry {x!r}")


def _entry_grid(raw, shape, what):
    if len(raw) != shape[0]:
        raise SpecError(f"{what}: expected {shape[0]} rows, got {len(raw)}")
    grid = []
    for r, row in enumerate(raw):
        if len(row) != shape[1]:
            raise SpecError(f"{what}: row {r} has {len(row)} entries, expected {shape[1]}")
        grid.append([EntrySpec.of(x) for x in row])
    return grid


def _entry_row(raw, length, what):
    if len(raw) != length:
        raise SpecError(f"{what}: expected {length} entries, got {len(raw)}")
    return [EntrySpec.of(x) for x in raw]


class SampleModel:
    """Templates and latent partition for one sample.

    Use :meth:`direct` when (beta, B) are written down explicitly, or
    :meth:`recursive` for a simultaneous-equation system
    ``nu = alpha + Gamma nu + Delta zeta + e`` whose reduced form is
    ``beta = (I-Gamma)^(-1) alpha`` and ``B = (I-Gamma)^(-1) [Delta, E]``.
    """

    def __init__(
        self,
        sample_id,
        variables,
        k_zeta,
        k_eps0,
        eps_blocks,
        alpha_tpl,
        bt_tpl,
        sigma_eps0_tpl,
        gamma_tpl=None,
    ):
        if not variables:
            raise SpecError(f"sample {sample_id!r}: no variables")
        if len(set(variables)) != len(variables):
            raise SpecError(f"sample {sample_id!r}: duplicate variable names")
        p = len(variables)
        k_xi = k_zeta + k_eps0 + sum(eps_blocks)
        if k_xi < 1:
            raise SpecError(f"sample {sample_id!r}: needs at least one latent coordinate")
        if any(m < 1 for m in eps_blocks):
            raise SpecError(f"sample {sample_id!r}: eps block dimensions must be >= 1")
        if len(alpha_tpl) != p:
            raise SpecError(f"sample {sample_id!r}: intercept template length != p")
        if len(bt_tpl) != p or any(len(row) != k_xi for row in bt_tpl):
            raise SpecError(
                f"sample {sample_id!r}: coefficient template must be {p} x {k_xi} "
                "(k_zeta + k_eps0 + sum of eps block dims)"
            )
        if len(sigma_eps0_tpl) != k_eps0 or any(len(r) != k_eps0 for r in sigma_eps0_tpl):
            raise SpecError(f"sample {sample_id!r}: sigma_eps0 template must be {k_eps0} x {k_eps0}")
        for i in range(k_eps0):
            for j in range(i):
                if sigma_eps0_tpl[i][j] != sigma_eps0_tpl[j][i]:
                    raise SpecError(
                        f"sample {sample_id!r}: sigma_eps0 template not symmetric at ({i},{j})"
                    )
        if gamma_tpl is not None and (
            len(gamma_tpl) != p or any(len(r) != p for r in gamma_tpl)
        ):
            raise SpecError(f"sample {sample_id!r}: gamma template must be {p} x {p}")
        self.sample_id = sample_id
        self.variables = list(variables)
        self.p = p
        self.k_zeta = int(k_zeta)
        self.k_eps0 = int(k_eps0)
        self.eps_blocks = [int(m) for m in eps_blocks]
        self.k_xi = k_xi
        self.alpha_tpl = alpha_tpl
        self.bt_tpl = bt_tpl
        self.gamma_tpl = gamma_tpl
        self.sigma_eps0_tpl = sigma_eps0_tpl

    @classmethod
    def direct(cls, sample_id, variables, k_zeta, k_eps0, eps_blocks, beta, B, sigma_eps0=None):
        """Build from explicit (beta, B, sigma_eps0) templates."""
        p = len(variables)
        k_xi = k_zeta + k_eps0 + sum(eps_blocks)
        alpha = _entry_row(beta, p, f"sample {sample_id!r} beta")
        bt = _entry_grid(B, (p, k_xi), f"sample {sample_id!r} B")
        s0 = _entry_grid(sigma_eps0 or [], (k_eps0, k_eps0), f"sample {sample_id!r} sigma_eps0")
        return cls(sample_id, variables, k_zeta, k_eps0, eps_blocks, alpha, bt, s0)

    @classmethod
    def recursive(
        cls,
        sample_id,
        variables,
        k_zeta,
        alpha,
        gamma,
        delta,
        normal_errors,
        sigma_eps0=None,
        error_blocks=None,
    ):
        """Build from a recursive-system layer.

        Each equation carries one error; errors of the variables listed in
        ``normal_errors`` form the normal block eps0, the remaining errors
        form independent nonnormal blocks (one per variable unless grouped
        through ``error_blocks``).
        """
        p = len(variables)
        alpha_tpl = _entry_row(alpha, p, f"sample {sample_id!r} alpha")
        gamma_tpl = _entry_grid(gamma, (p, p), f"sample {sample_id!r} gamma")
        delta_tpl = _entry_grid(delta, (p, k_zeta), f"sample {sample_id!r} delta")
        for v in normal_errors:
            if v not in variables:
                raise SpecError(f"sample {sample_id!r}: unknown normal-error variable {v!r}")
        if len(set(normal_errors)) != len(normal_errors):
            raise SpecError(f"sample {sample_id!r}: duplicate normal-error variable")
        remaining = [v for v in variables if v not in normal_errors]
        if error_blocks is None:
            error_blocks = [[v] for v in remaining]
        flat = [v for blk in error_blocks for v in blk]
        if sorted(flat) != sorted(remaining):
            raise SpecError(
                f"sample {sample_id!r}: error_blocks must partition the non-normal-error variables"
            )
        k_eps0 = len(normal_errors)
        eps_dims = [len(blk) for blk in error_blocks]
        k_xi = k_zeta + k_eps0 + sum(eps_dims)
        # error-loading template: each equation's error sits at its xi position
        col_of = {}
        for pos, v in enumerate(normal_errors):
            col_of[v] = k_zeta + pos
        off = k_zeta + k_eps0
        for blk in error_blocks:
            for pos, v in enumerate(blk):
                col_of[v] = off + pos
            off += len(blk)
        bt_tpl = []
        for r, v in enumerate(variables):
            row = list(delta_tpl[r]) + [EntrySpec.fixed(0.0)] * (k_xi - k_zeta)
            row[col_of[v]] = EntrySpec.fixed(1.0)
            bt_tpl.append(row)
        s0 = _entry_grid(sigma_eps0 or [], (k_eps0, k_eps0), f"sample {sample_id!r} sigma_eps0")
        return cls(
            sample_id, variables, k_zeta, k_eps0, eps_dims, alpha_tpl, bt_tpl, s0, gamma_tpl
        )

    def _named_in_order(self):
        """Parameter names in deterministic traversal order."""
        seen = []
        grids = [self.alpha_tpl]
        if self.gamma_tpl is not None:
            grids.append(self.gamma_tpl)
        grids.append(self.bt_tpl)
        grids.append(self.sigma_eps0_tpl)
        for grid in grids:
            rows = grid if grid and isinstance(grid[0], list) else [grid]
            for row in rows:
                for e in row:
                    if not e.is_fixed and e.name not in seen:
                        seen.append(e.name)
        return seen


@dataclass
class _NuEntry:
    name: str
    sample_pos: int
    kind: str  # mu_zeta | sigma_zeta | sigma_eps
    block: int  # eps block number (1-based) for sigma_eps, else 0
    i: int
    j: int


class ModelSpec:
    """Ordered collection of sample models with the shared parameter registry."""

    def __init__(self, samples, zeta_mode="random", tau_names=None):
        if not samples:
            raise SpecError("model needs at least one sample")
        ids = [s.sample_id for s in samples]
        if len(set(ids)) != len(ids):
            raise SpecError("duplicate sample ids")
        if zeta_mode not in ("fixed", "random"):
            raise SpecError(f"zeta_mode must be 'fixed' or 'random', got {zeta_mode!r}")
        self.samples = list(samples)
        self.zeta_mode = zeta_mode

        used = []
        for s in self.samples:
            for name in s._named_in_order():
                if name not in used:
                    used.append(name)
        if tau_names is None:
            self.tau_names = used
        else:
            registry = list(tau_names)
            if len(set(registry)) != len(registry):
                raise SpecError("duplicate names in tau registry")
            missing = [n for n in used if n not in registry]
            if missing:
                raise SpecError(f"unresolved parameter names: {missing}")
            unused = [n for n in registry if n not in used]
            if unused:
                raise SpecError(f"tau registry entries referenced by no template: {unused}")
            self.tau_names = registry
        self._tau_index = {n: i for i, n in enumerate(self.tau_names)}

        self.nu_entries: list[_NuEntry] = []
        for pos, s in enumerate(self.samples):
            sid = s.sample_id
            for k in range(s.k_zeta):
                self.nu_entries.append(_NuEntry(f"{sid}:mu_zeta[{k}]", pos, "mu_zeta", 0, k, k))
            rows, cols = vech_indices(s.k_zeta)
            for i, j in zip(rows, cols):
                self.nu_entries.append(
                    _NuEntry(f"{sid}:Sigma_zeta[{i},{j}]", pos, "sigma_zeta", 0, int(i), int(j))
                )
            for l, m in enumerate(s.eps_blocks, start=1):
                rows, cols = vech_indices(m)
                for i, j in zip(rows, cols):
                    self.nu_entries.append(
                        _NuEntry(f"{sid}:Sigma_eps{l}[{i},{j}]", pos, "sigma_eps", l, int(i), int(j))
                    )

        self.n_tau = len(self.tau_names)
        self.n_nu = len(self.nu_entries)
        self.d_theta = self.n_tau + self.n_nu
        self.param_names = self.tau_names + [e.name for e in self.nu_entries]
        self._param_index = {n: i for i, n in enumerate(self.param_names)}

        # moment layout: per sample a mean slice and a vech slice into c/gamma
        self.moment_slices = []
        off = 0
        for s in self.samples:
            mslice = slice(off, off + s.p)
            off += s.p
            vslice = slice(off, off + s.p * (s.p + 1) // 2)
            off += s.p * (s.p + 1) // 2
            self.moment_slices.append((mslice, vslice))
        self.moment_count = off

        self._compiled = None

    @property
    def sample_ids(self):
        return [s.sample_id for s in self.samples]

    def sample_index(self, sample_id):
        try:
            return self.sample_ids.index(sample_id)
        except ValueError:
            raise SpecError(f"unknown sample id {sample_id!r}") from None

    def param_index(self, name):
        try:
            return self._param_index[name]
        except KeyError:
            raise SpecError(f"unknown parameter {name!r}") from None

    def param_kind(self, index):
        """'tau' or the nu entry kind for a flat theta index."""
        if index < self.n_tau:
            return "tau"
        return self.nu_entries[index - self.n_tau].kind

    def nu_indices(self, sample_pos, kind, block=0):
        """Flat theta indices of one sample's nu entries of a given kind."""
        out = [
            self.n_tau + k
            for k, e in enumerate(self.nu_entries)
            if e.sample_pos == sample_pos and e.kind == kind and (kind != "sigma_eps" or e.block == block)
        ]
        return np.array(out, dtype=np.int64)

    def mu_zeta_indices(self, sample_pos):
        return self.nu_indices(sample_pos, "mu_zeta")

    def sigma_zeta_vech_indices(self, sample_pos):
        return self.nu_indices(sample_pos, "sigma_zeta")

    def tau_variance_names(self):
        """tau names that appear on a sigma_eps0 diagonal (variance-type entries)."""
        names = []
        for s in self.samples:
            for i in range(s.k_eps0):
                e = s.sigma_eps0_tpl[i][i]
                if not e.is_fixed and e.name not in names:
                    names.append(e.name)
        return names

    def compiled(self):
        if self._compiled is None:
            self._compiled = CompiledModel(self)
        return self._compiled


class ParamVector:
    """A flat theta = (tau, nu) vector tied to a model's index maps."""

    def __init__(self, spec, values):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (spec.d_theta,):
            raise SpecError(
                f"parameter vector has length {values.shape}, model needs ({spec.d_theta},)"
            )
        self.spec = spec
        self.values = values.copy()
        self.values.flags.writeable = False

    @property
    def tau(self):
        return self.values[: self.spec.n_tau]

    @property
    def nu(self):
        return self.values[self.spec.n_tau :]

    def __len__(self):
        return self.values.shape[0]

    def __getitem__(self, key):
        if isinstance(key, str):
            return self.values[self.spec.param_index(key)]
        return self.values[key]

    def with_updates(self, updates):
        """Return a copy with the named entries replaced."""
        vals = self.values.copy()
        for name, v in updates.items():
            vals[self.spec.param_index(name)] = v
        return ParamVector(self.spec, vals)

    def to_dict(self):
        return dict(zip(self.spec.param_names, self.values.tolist()))


def _template_arrays(spec, sample):
    """Constant/index array pair for each template of one sample."""
    def convert(grid, shape):
        const = np.zeros(shape, dtype=np.float64)
        idx = np.full(shape, -1, dtype=np.int64)
        if len(shape) == 1:
            for i, e in enumerate(grid):
                if e.is_fixed:
                    const[i] = e.value
                else:
                    idx[i] = spec._tau_index[e.name]
        else:
            for i, row in enumerate(grid):
                for j, e in enumerate(row):
                    if e.is_fixed:
                        const[i, j] = e.value
                    else:
                        idx[i, j] = spec._tau_index[e.name]
        return const, idx

    p, kxi = sample.p, sample.k_xi
    alpha_c, alpha_i = convert(sample.alpha_tpl, (p,))
    bt_c, bt_i = convert(sample.bt_tpl, (p, kxi))
    if sample.gamma_tpl is None:
        gamma_c = np.zeros((p, p))
        gamma_i = np.full((p, p), -1, dtype=np.int64)
    else:
        gamma_c, gamma_i = convert(sample.gamma_tpl, (p, p))
    has_gamma = bool((gamma_i >= 0).any() or (gamma_c != 0.0).any())
    return alpha_c, alpha_i, gamma_c, gamma_i, has_gamma, bt_c, bt_i


class CompiledSample:
    """Array form of one sample's templates, ready for the kernels."""

    def __init__(self, spec, pos):
        s = spec.samples[pos]
        self.pos = pos
        self.p = s.p
        self.k_zeta = s.k_zeta
        self.k_eps0 = s.k_eps0
        self.eps_blocks = list(s.eps_blocks)
        self.k_xi = s.k_xi
        alpha_c, alpha_i, gamma_c, gamma_i, has_gamma, bt_c, bt_i = _template_arrays(spec, s)

        kxi = s.k_xi
        phi_c = np.zeros((kxi, kxi))
        phi_i = np.full((kxi, kxi), -1, dtype=np.int64)
        n_tau = spec.n_tau
        for k, e in enumerate(spec.nu_entries):
            if e.sample_pos != pos:
                continue
            t = n_tau + k
            if e.kind == "sigma_zeta":
                phi_i[e.i, e.j] = t
                phi_i[e.j, e.i] = t
            elif e.kind == "sigma_eps":
                off = s.k_zeta + s.k_eps0 + sum(s.eps_blocks[: e.block - 1])
                phi_i[off + e.i, off + e.j] = t
                phi_i[off + e.j, off + e.i] = t
        off0 = s.k_zeta
        for i in range(s.k_eps0):
            for j in range(s.k_eps0):
                e = s.sigma_eps0_tpl[i][j]
                if e.is_fixed:
                    phi_c[off0 + i, off0 + j] = e.value
                else:
                    phi_i[off0 + i, off0 + j] = spec._tau_index[e.name]

        muz_i = spec.mu_zeta_indices(pos)
        sizes = [m for m in [s.k_zeta, s.k_eps0] + s.eps_blocks if m > 0]
        self.block_sizes = np.array(sizes, dtype=np.int64)
        self.vech_rows, self.vech_cols = vech_indices(s.p)
        self.tpl = (
            alpha_c,
            alpha_i,
            gamma_c,
            gamma_i,
            has_gamma,
            bt_c,
            bt_i,
            phi_c,
            phi_i,
            muz_i,
        )


class CompiledModel:
    """All samples compiled to arrays plus stacked-moment evaluation."""

    def __init__(self, spec):
        self.spec = spec
        self.samples = [CompiledSample(spec, pos) for pos in range(len(spec.samples))]
        self.d_theta = spec.d_theta

    def sample_moments(self, theta, pos):
        cs = self.samples[pos]
        ok, mu, sigma = kernels.implied_sample_moments(theta, *cs.tpl)
        if not ok:
            raise EvaluationError(
                f"singular recursive system in sample {self.spec.sample_ids[pos]!r}"
            )
        return mu, sigma

    def gamma(self, theta):
        """Stacked implied moments (means and vech covariances, sample order)."""
        theta = np.ascontiguousarray(theta, dtype=np.float64)
        out = np.empty(self.spec.moment_count)
        for pos, cs in enumerate(self.samples):
            mu, sigma = self.sample_moments(theta, pos)
            mslice, vslice = self.spec.moment_slices[pos]
            out[mslice] = mu
            out[vslice] = sigma[cs.vech_rows, cs.vech_cols]
        return out

    def discrepancy(self, theta, stats_arrays, require_blocks=False):
        """Pseudo-normal discrepancy; +inf at an infeasible point."""
        theta = np.ascontiguousarray(theta, dtype=np.float64)
        total = 0.0
        for cs, (ybar, s_mat, logdet_s, n) in zip(self.samples, stats_arrays):
            ok, val = kernels.sample_discrepancy(
                theta, *cs.tpl, cs.block_sizes, require_blocks, ybar, s_mat, logdet_s, n
            )
            if not ok:
                return np.inf
            total += val
        return total

    def discrepancy_and_grad(self, theta, stats_arrays, require_blocks=False):
        """Discrepancy and its analytic gradient; (+inf, None) when infeasible."""
        theta = np.ascontiguousarray(theta, dtype=np.float64)
        grad = np.zeros(self.d_theta)
        total = 0.0
        for cs, (ybar, s_mat, logdet_s, n) in zip(self.samples, stats_arrays):
            ok, val = kernels.sample_discrepancy_grad(
                theta, *cs.tpl, cs.block_sizes, require_blocks, ybar, s_mat, logdet_s, n, grad
            )
            if not ok:
                return np.inf, None
            total += val
        return total, grad


@dataclass
class AssembledSample:
    """Numeric matrices of one sample at a given theta."""

    sample_id: str
    beta: np.ndarray
    b: np.ndarray
    mu_zeta: np.ndarray
    sigma_zeta: np.ndarray
    sigma_eps0: np.ndarray
    sigma_eps: list
    filled: dict = field(repr=False, default_factory=dict)


def assemble(spec, theta):
    """Evaluate every template at ``theta``.

    Returns one :class:`AssembledSample` per sample, with the reduced
    coefficient matrix ``b`` and all variance blocks mirrored symmetric.
    """
    theta = _theta_values(spec, theta)
    compiled = spec.compiled()
    out = []
    for pos, cs in enumerate(compiled.samples):
        ok, beta, bmat, phi, mu, rmat = kernels.assemble_sample(theta, *cs.tpl)
        if not ok:
            raise EvaluationError(
                f"singular recursive system in sample {spec.sample_ids[pos]!r}"
            )
        s = spec.samples[pos]
        kz, k0 = s.k_zeta, s.k_eps0
        sigma_zeta = phi[:kz, :kz].copy()
        sigma_eps0 = phi[kz : kz + k0, kz : kz + k0].copy()
        sig_eps = []
        off = kz + k0
        for m in s.eps_blocks:
            sig_eps.append(phi[off : off + m, off : off + m].copy())
            off += m
        alpha_f = np.array(
            [e.value if e.is_fixed else theta[spec._tau_index[e.name]] for e in s.alpha_tpl]
        )
        bt_f = np.array(
            [
                [e.value if e.is_fixed else theta[spec._tau_index[e.name]] for e in row]
                for row in s.bt_tpl
            ]
        )
        if s.gamma_tpl is None:
            gamma_f = np.zeros((s.p, s.p))
        else:
            gamma_f = np.array(
                [
                    [e.value if e.is_fixed else theta[spec._tau_index[e.name]] for e in row]
                    for row in s.gamma_tpl
                ]
            )
        filled = {
            "alpha": alpha_f,
            "gamma": gamma_f,
            "bt": bt_f,
            "phi": phi,
            "mu_zeta": theta[spec.mu_zeta_indices(pos)].copy(),
        }
        out.append(
            AssembledSample(
                sample_id=s.sample_id,
                beta=beta,
                b=bmat,
                mu_zeta=filled["mu_zeta"],
                sigma_zeta=sigma_zeta,
                sigma_eps0=sigma_eps0,
                sigma_eps=sig_eps,
                filled=filled,
            )
        )
    return out


def read_back(spec, assembled):
    """Recover theta from assembled template values (inverse of :func:`assemble`)."""
    theta = np.full(spec.d_theta, np.nan)
    for pos, s in enumerate(spec.samples):
        a = assembled[pos]
        for i, e in enumerate(s.alpha_tpl):
            if not e.is_fixed:
                theta[spec._tau_index[e.name]] = a.filled["alpha"][i]
        if s.gamma_tpl is not None:
            for i, row in enumerate(s.gamma_tpl):
                for j, e in enumerate(row):
                    if not e.is_fixed:
                        theta[spec._tau_index[e.name]] = a.filled["gamma"][i, j]
        for i, row in enumerate(s.bt_tpl):
            for j, e in enumerate(row):
                if not e.is_fixed:
                    theta[spec._tau_index[e.name]] = a.filled["bt"][i, j]
        for i in range(s.k_eps0):
            for j in range(s.k_eps0):
                e = s.sigma_eps0_tpl[i][j]
                if not e.is_fixed:
                    theta[spec._tau_index[e.name]] = a.sigma_eps0[i, j]
    n_tau = spec.n_tau
    for k, e in enumerate(spec.nu_entries):
        a = assembled[e.sample_pos]
        if e.kind == "mu_zeta":
            theta[n_tau + k] = a.mu_zeta[e.i]
        elif e.kind == "sigma_zeta":
            theta[n_tau + k] = a.sigma_zeta[e.i, e.j]
        else:
            theta[n_tau + k] = a.sigma_eps[e.block - 1][e.i, e.j]
    return theta


@dataclass
class ImpliedMoments:
    means: list
    covariances: list
    gamma: np.ndarray


def _theta_values(spec, theta):
    if isinstance(theta, ParamVector):
        if theta.spec is not spec and theta.spec.param_names != spec.param_names:
            raise SpecError("parameter vector belongs to a different model")
        return np.ascontiguousarray(theta.values)
    return np.ascontiguousarray(theta, dtype=np.float64)


def implied_moments(spec, theta):
    """Per-sample implied (mean, covariance) and the stacked moment vector."""
    theta = _theta_values(spec, theta)
    compiled = spec.compiled()
    means, covs = [], []
    for pos in range(len(spec.samples)):
        mu, sigma = compiled.sample_moments(theta, pos)
        means.append(mu)
        covs.append(sigma)
    g = np.empty(spec.moment_count)
    for pos, cs in enumerate(compiled.samples):
        mslice, vslice = spec.moment_slices[pos]
        g[mslice] = means[pos]
        g[vslice] = covs[pos][cs.vech_rows, cs.vech_cols]
    return ImpliedMoments(means=means, covariances=covs, gamma=g)


def degrees_of_freedom(spec):
    """Moment count minus parameter count; negative values are an error."""
    q = spec.moment_count - spec.d_theta
    if q < 0:
        raise OverParameterizedError(
            f"model has {spec.d_theta} parameters for {spec.moment_count} moments (q={q})"
        )
    return q


def tau_jacobian(spec, theta, rel_step=1e-7, abs_step=1e-6):
    """Central finite-difference Jacobian of gamma with respect to tau only."""
    theta = _theta_values(spec, theta).copy()
    compiled = spec.compiled()
    cols = []
    for t in range(spec.n_tau):
        h = max(abs_step, rel_step * abs(theta[t]))
        up = theta.copy()
        up[t] += h
        dn = theta.copy()
        dn[t] -= h
        cols.append((compiled.gamma(up) - compiled.gamma(dn)) / (2 * h))
    if not cols:
        return np.zeros((spec.moment_count, 0))
    return np.column_stack(cols)


@dataclass
class ValidationReport:
    d_theta: int
    n_tau: int
    n_nu: int
    moment_count: int
    degrees_of_freedom: int
    tau_rank: int
    rank_deficient: bool
    deficient_names: list
    warnings: list

    @property
    def ok(self):
        return True  # structural failures raise; the report only carries warnings

    def to_dict(self):
        return {
            "d_theta": self.d_theta,
            "n_tau": self.n_tau,
            "n_nu": self.n_nu,
            "moment_count": self.moment_count,
            "degrees_of_freedom": self.degrees_of_freedom,
            "tau_rank": self.tau_rank,
            "rank_deficient": self.rank_deficient,
            "deficient_names": list(self.deficient_names),
            "warnings": list(self.warnings),
        }


def validate_spec(spec, start):
    """Check dimensional consistency and local identification at ``start``.

    Structural defects (bad dimensions, unresolved names) raise SpecError at
    construction time; here the tau-Jacobian column rank is probed
    numerically, and a deficiency is reported as a warning rather than an
    error since it may be specific to the start values.
    """
    theta = _theta_values(spec, start)
    if theta.shape != (spec.d_theta,):
        raise SpecError(f"start has length {theta.shape[0]}, model needs {spec.d_theta}")
    q = degrees_of_freedom(spec)
    warnings_list = []
    if not np.all(np.isfinite(theta)):
        raise SpecError("start values must be finite")
    jt = tau_jacobian(spec, theta)
    if spec.n_tau == 0:
        rank = 0
        deficient = []
    else:
        sv = np.linalg.svd(jt, compute_uv=False)
        tol = max(jt.shape) * np.finfo(float).eps * (sv[0] if sv.size else 0.0)
        rank = int(np.sum(sv > max(tol, 1e-9)))
        deficient = []
        if rank < spec.n_tau:
            _, _, vt = np.linalg.svd(jt)
            for row in vt[rank:]:
                for t in np.nonzero(np.abs(row) > 0.2 * np.abs(row).max())[0]:
                    name = spec.tau_names[t]
                    if name not in deficient:
                        deficient.append(name)
            warnings_list.append(
                "tau Jacobian is rank deficient at the start values "
                f"({rank} < {spec.n_tau}); involved parameters: {deficient}"
            )
    return ValidationReport(
        d_theta=spec.d_theta,
        n_tau=spec.n_tau,
        n_nu=spec.n_nu,
        moment_count=spec.moment_count,
        degrees_of_freedom=q,
        tau_rank=rank,
        rank_deficient=rank < spec.n_tau,
        deficient_names=deficient,
        warnings=warnings_list,
    )


def _sample_from_dict(d):
    sid = d.get("id")
    if not sid:
        raise SpecError("sample block needs an 'id'")
    variables = d.get("variables")
    if not variables:
        raise SpecError(f"sample {sid!r}: needs 'variables'")
    k_zeta = int(d.get("zeta_dim", 0))
    sigma_eps0 = d.get("sigma_eps0")
    if "recursive" in d:
        r = d["recursive"]
        for key in ("alpha", "gamma", "delta"):
            if key not in r:
                raise SpecError(f"sample {sid!r}: recursive block needs '{key}'")
        return SampleModel.recursive(
            sid,
            variables,
            k_zeta,
            r["alpha"],
            r["gamma"],
            r["delta"],
            r.get("normal_errors", []),
            sigma_eps0=sigma_eps0,
            error_blocks=r.get("error_blocks"),
        )
    for key in ("beta", "B"):
        if key not in d:
            raise SpecError(f"sample {sid!r}: direct form needs '{key}'")
    return SampleModel.direct(
        sid,
        variables,
        k_zeta,
        int(d.get("eps0_dim", 0)),
        list(d.get("eps_blocks", [])),
        d["beta"],
        d["B"],
        sigma_eps0=sigma_eps0,
    )


def model_from_dict(doc):
    """Build (ModelSpec, start name->value dict) from a parsed config mapping."""
    if not isinstance(doc, dict) or "samples" not in doc:
        raise SpecError("model document must be a mapping with a 'samples' list")
    samples = [_sample_from_dict(s) for s in doc["samples"]]
    spec = ModelSpec(
        samples,
        zeta_mode=doc.get("zeta_mode", "random"),
        tau_names=doc.get("tau_registry"),
    )
    start = doc.get("start") or {}
    if not isinstance(start, dict):
        raise SpecError("'start' must be a mapping of parameter name to value")
    for name, v in start.items():
        spec.param_index(name)  # raises on unknown names
        float(v)
    return spec, {k: float(v) for k, v in start.items()}


def load_model(path):
    """Load a model specification file (YAML mapping; see the CLI docs)."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise SpecError(f"cannot parse model file {path}: {exc}") from exc
    return model_from_dict(doc)
