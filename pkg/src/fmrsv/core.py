"""Shared domain types, model-variant flags, priors and validation.

Conventions used throughout the package:

* ``p`` assets, ``q`` factors, ``T`` time periods.
* Log-volatility matrix ``h`` is T x (p+q); columns 0..p-1 are the
  idiosyncratic series, columns p..p+q-1 belong to the latent factors.
* ``A`` is the q x q unit lower-triangular loading of the realized factors,
  ``B`` the p x q loading of returns on the latent factors.
* ``sigma_eta`` / ``sigma_nu`` hold standard deviations, not variances.
* Derived inverse-Wishart hyperparameters: ``s0 = delta + p + 3`` and
  ``k0 = delta + 2``, which make the realized covariance an unbiased
  measurement of B V2 B' + V1.

Variant semantics: FMSV drops the realized-covariance measurement entirely
(no W terms in any density; the limit delta -> 0 is not well defined so the
terms are removed, not sent to zero), FMRSV_NL forces all leverage
correlations to zero, FMRSV enables both.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Variant",
    "ModelConfig",
    "Parameters",
    "PriorSpec",
    "Dataset",
    "LatentState",
    "ValidationError",
    "validate",
    "save_params_config",
    "load_params_config",
    "save_priors_config",
    "load_priors_config",
    "default_priors",
    "load_dataset",
    "save_dataset",
]

# Relative eigenvalue floor for the positivity check of realized covariances:
# scale-relative so low-volatility days are not falsely rejected.
W_EIG_FLOOR = 1e-10


class ValidationError(ValueError):
    """Raised when a domain object violates one of its invariants."""


class Variant(enum.Enum):
    FMSV = "fmsv"
    FMRSV = "fmrsv"
    FMRSV_NL = "fmrsv-nl"

    @property
    def uses_rcov(self) -> bool:
        return self is not Variant.FMSV

    @property
    def uses_leverage(self) -> bool:
        return self is not Variant.FMRSV_NL

    @classmethod
    def parse(cls, text: str) -> "Variant":
        key = text.strip().lower().replace("_", "-")
        for member in cls:
            if member.value == key:
                return member
        raise ValidationError(f"unknown variant {text!r}; expected fmsv, fmrsv or fmrsv-nl")


@dataclass
class ModelConfig:
    p: int
    q: int
    T: int
    variant: Variant = Variant.FMRSV


@dataclass
class Parameters:
    """Static model parameters.

    ``alpha`` stores the full q x q realized-factor loading matrix (unit
    diagonal, zeros above); the free entries are its strictly lower triangle.
    """

    alpha: np.ndarray
    beta: np.ndarray
    mu: np.ndarray
    gamma: np.ndarray
    phi: np.ndarray
    psi: np.ndarray
    rho: np.ndarray
    sigma_eta: np.ndarray
    sigma_nu: np.ndarray
    delta: float

    def __post_init__(self):
        self.alpha = np.atleast_2d(np.asarray(self.alpha, dtype=float))
        self.beta = np.atleast_2d(np.asarray(self.beta, dtype=float))
        for name in ("mu", "gamma", "phi", "psi", "rho", "sigma_eta", "sigma_nu"):
            setattr(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        self.delta = float(self.delta)

    @property
    def p(self) -> int:
        return self.beta.shape[0]

    @property
    def q(self) -> int:
        return self.beta.shape[1]

    @property
    def s0(self) -> float:
        return self.delta + self.p + 3.0

    @property
    def k0(self) -> float:
        return self.delta + 2.0

    def copy(self) -> "Parameters":
        return Parameters(
            alpha=self.alpha.copy(),
            beta=self.beta.copy(),
            mu=self.mu.copy(),
            gamma=self.gamma.copy(),
            phi=self.phi.copy(),
            psi=self.psi.copy(),
            rho=self.rho.copy(),
            sigma_eta=self.sigma_eta.copy(),
            sigma_nu=self.sigma_nu.copy(),
            delta=self.delta,
        )


@dataclass
class PriorSpec:
    """Prior hyperparameters.

    Normal priors for mu, gamma, the rows of B and the free rows of A;
    Beta(a, b) priors on (1+phi)/2, (1+psi)/2, (1+rho)/2; inverse-gamma
    IG(n/2, d/2) on the variances sigma_eta^2 and sigma_nu^2. The precision
    parameter delta carries an improper uniform prior on (0, inf) and has no
    hyperparameters.
    """

    m_mu: np.ndarray
    S_mu: np.ndarray
    m_gamma: np.ndarray
    S_gamma: np.ndarray
    m_beta: np.ndarray  # (p, q) prior means, row i for beta_i
    S_beta: np.ndarray  # (p, q, q) prior covariances
    m_alpha: list[np.ndarray] = field(default_factory=list)  # entry j-2 for row j = 2..q
    S_alpha: list[np.ndarray] = field(default_factory=list)
    a_phi: float = 1.0
    b_phi: float = 1.0
    a_psi: float = 1.0
    b_psi: float = 1.0
    a_rho: float = 1.0
    b_rho: float = 1.0
    n_eta: float = 0.1
    d_eta: float = 0.1
    n_nu: float = 0.1
    d_nu: float = 0.1


def default_priors(p: int, q: int, *, normal_var: float = 10000.0) -> PriorSpec:
    """Diffuse priors: N(0, normal_var) normals, Beta(1,1), IG(0.05, 0.05)."""
    n = p + q
    return PriorSpec(
        m_mu=np.zeros(n),
        S_mu=np.eye(n) * normal_var,
        m_gamma=np.zeros(q),
        S_gamma=np.eye(q) * normal_var,
        m_beta=np.zeros((p, q)),
        S_beta=np.broadcast_to(np.eye(q) * normal_var, (p, q, q)).copy(),
        m_alpha=[np.zeros(j - 1) for j in range(2, q + 1)],
        S_alpha=[np.eye(j - 1) * normal_var for j in range(2, q + 1)],
    )


@dataclass
class Dataset:
    """Observed daily returns, realized factors and realized covariances."""

    y: np.ndarray
    x: np.ndarray
    W: np.ndarray | None = None

    def __post_init__(self):
        self.y = np.atleast_2d(np.asarray(self.y, dtype=float))
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        if self.W is not None:
            self.W = np.asarray(self.W, dtype=float)

    @property
    def T(self) -> int:
        return self.y.shape[0]


@dataclass
class LatentState:
    """Log-volatility paths h (T x (p+q)) and latent factor paths f (T x q)."""

    h: np.ndarray
    f: np.ndarray

    def __post_init__(self):
        self.h = np.atleast_2d(np.asarray(self.h, dtype=float))
        self.f = np.atleast_2d(np.asarray(self.f, dtype=float))

    def copy(self) -> "LatentState":
        return LatentState(h=self.h.copy(), f=self.f.copy())


def _check_spd(S: np.ndarray, name: str) -> None:
    if not np.allclose(S, S.T, atol=1e-8):
        raise ValidationError(f"{name} is not symmetric")
    vals = np.linalg.eigvalsh(0.5 * (S + S.T))
    if vals.min() <= 0:
        raise ValidationError(f"{name} is not positive definite (min eigenvalue {vals.min():.3e})")


def validate(
    config: ModelConfig,
    params: Parameters | None = None,
    priors: PriorSpec | None = None,
    data: Dataset | None = None,
) -> None:
    """Check every type invariant; raises ValidationError naming the first violation.

    Pure function of its inputs: identical inputs produce the identical
    outcome. Objects supplied as None are skipped.
    """
    p, q, T = config.p, config.q, config.T
    if p < 1:
        raise ValidationError("p must be >= 1")
    if q < 1:
        raise ValidationError("q must be >= 1")
    if q > p:
        raise ValidationError("q must not exceed p")
    if T < 2:
        raise ValidationError("T must be >= 2")

    if params is not None:
        _validate_params(config, params)
    if priors is not None:
        _validate_priors(config, priors)
    if data is not None:
        _validate_data(config, data)


def _validate_params(config: ModelConfig, params: Parameters) -> None:
    p, q = config.p, config.q
    if params.beta.shape != (p, q):
        raise ValidationError(f"beta must be {p}x{q}, got {params.beta.shape}")
    if params.alpha.shape != (q, q):
        raise ValidationError(f"alpha must be {q}x{q}, got {params.alpha.shape}")
    if not np.allclose(np.diag(params.alpha), 1.0):
        raise ValidationError("alpha must have unit diagonal")
    if np.any(np.triu(params.alpha, k=1) != 0.0):
        raise ValidationError("alpha must be lower triangular")
    shapes = {
        "mu": (params.mu, p + q),
        "gamma": (params.gamma, q),
        "phi": (params.phi, p + q),
        "psi": (params.psi, q),
        "rho": (params.rho, q),
        "sigma_eta": (params.sigma_eta, p + q),
        "sigma_nu": (params.sigma_nu, q),
    }
    for name, (arr, n) in shapes.items():
        if arr.shape != (n,):
            raise ValidationError(f"{name} must have length {n}, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError(f"{name} contains non-finite entries")
    if np.any(np.abs(params.phi) >= 1.0):
        raise ValidationError("phi out of (-1,1)")
    if np.any(np.abs(params.psi) >= 1.0):
        raise ValidationError("psi out of (-1,1)")
    if np.any(np.abs(params.rho) >= 1.0):
        raise ValidationError("rho out of (-1,1)")
    if np.any(params.sigma_eta <= 0.0):
        raise ValidationError("sigma_eta must be > 0")
    if np.any(params.sigma_nu <= 0.0):
        raise ValidationError("sigma_nu must be > 0")
    if not params.delta > 0.0:
        raise ValidationError("delta must be > 0")
    if not config.variant.uses_leverage and np.any(params.rho != 0.0):
        raise ValidationError("variant fmrsv-nl requires rho identically zero")


def _validate_priors(config: ModelConfig, priors: PriorSpec) -> None:
    p, q = config.p, config.q
    _check_spd(np.asarray(priors.S_mu), "S_mu")
    _check_spd(np.asarray(priors.S_gamma), "S_gamma")
    if np.asarray(priors.m_mu).shape != (p + q,):
        raise ValidationError("m_mu has wrong length")
    if np.asarray(priors.m_gamma).shape != (q,):
        raise ValidationError("m_gamma has wrong length")
    if np.asarray(priors.m_beta).shape != (p, q):
        raise ValidationError("m_beta must be p x q")
    S_beta = np.asarray(priors.S_beta)
    if S_beta.shape != (p, q, q):
        raise ValidationError("S_beta must be p x q x q")
    for i in range(p):
        _check_spd(S_beta[i], f"S_beta[{i}]")
    if len(priors.m_alpha) != max(q - 1, 0) or len(priors.S_alpha) != max(q - 1, 0):
        raise ValidationError("alpha priors must have one entry per row j = 2..q")
    for j, (m, S) in enumerate(zip(priors.m_alpha, priors.S_alpha), start=2):
        if np.asarray(m).shape != (j - 1,):
            raise ValidationError(f"m_alpha[{j}] has wrong length")
        _check_spd(np.asarray(S), f"S_alpha[{j}]")
    for name in ("a_phi", "b_phi", "a_psi", "b_psi", "a_rho", "b_rho", "n_eta", "d_eta", "n_nu", "d_nu"):
        if not getattr(priors, name) > 0:
            raise ValidationError(f"{name} must be > 0")


def _validate_data(config: ModelConfig, data: Dataset) -> None:
    p, q, T = config.p, config.q, config.T
    if data.y.shape != (T, p):
        raise ValidationError(f"y must be {T}x{p}, got {data.y.shape}")
    if data.x.shape != (T, q):
        raise ValidationError(f"x must be {T}x{q}, got {data.x.shape}")
    if not np.all(np.isfinite(data.y)) or not np.all(np.isfinite(data.x)):
        raise ValidationError("returns/factors contain non-finite entries (missing data is rejected)")
    if config.variant.uses_rcov:
        if data.W is None:
            raise ValidationError(f"variant {config.variant.value} requires realized covariances W")
        if data.W.shape != (T, p, p):
            raise ValidationError(f"W must be {T}x{p}x{p}, got {data.W.shape}")
        if not np.all(np.isfinite(data.W)):
            raise ValidationError("W contains non-finite entries")
        for t in range(T):
            Wt = data.W[t]
            if not np.allclose(Wt, Wt.T, atol=1e-8):
                raise ValidationError(f"W not symmetric at t={t + 1}")
            floor = W_EIG_FLOOR * np.trace(Wt) / p
            lam = np.linalg.eigvalsh(0.5 * (Wt + Wt.T)).min()
            if lam <= floor:
                raise ValidationError(f"W not PD at t={t + 1} (min eigenvalue {lam:.3e})")


# ---------------------------------------------------------------------------
# Flat key/value config serialization: one "name.index = value" per line.
# Indices are 1-based; '#' starts a comment.
# ---------------------------------------------------------------------------

def _format_value(x: float) -> str:
    return repr(float(x))


def _emit_vector(lines: list[str], name: str, arr: np.ndarray) -> None:
    for i, v in enumerate(arr, start=1):
        lines.append(f"{name}.{i} = {_format_value(v)}")


def save_params_config(params: Parameters, path: str | Path) -> None:
    lines = ["# model parameters"]
    q = params.q
    for j in range(2, q + 1):
        for k in range(1, j):
            lines.append(f"alpha.{j}.{k} = {_format_value(params.alpha[j - 1, k - 1])}")
    for i in range(1, params.p + 1):
        for j in range(1, q + 1):
            lines.append(f"beta.{i}.{j} = {_format_value(params.beta[i - 1, j - 1])}")
    _emit_vector(lines, "mu", params.mu)
    _emit_vector(lines, "gamma", params.gamma)
    _emit_vector(lines, "phi", params.phi)
    _emit_vector(lines, "psi", params.psi)
    _emit_vector(lines, "rho", params.rho)
    _emit_vector(lines, "sigma_eta", params.sigma_eta)
    _emit_vector(lines, "sigma_nu", params.sigma_nu)
    lines.append(f"delta = {_format_value(params.delta)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


_LINE_RE = re.compile(r"^\s*([A-Za-z_][\w.]*)\s*=\s*(\S+)\s*$")


def _parse_config_lines(path: str | Path) -> dict[str, float]:
    entries: dict[str, float] = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _LINE_RE.match(line)
        if m is None:
            raise ValidationError(f"malformed config line: {raw!r}")
        entries[m.group(1)] = float(m.group(2))
    return entries


def _collect_vector(entries: dict[str, float], name: str) -> np.ndarray:
    idx = []
    for key in entries:
        m = re.fullmatch(rf"{name}\.(\d+)", key)
        if m:
            idx.append(int(m.group(1)))
    if not idx:
        raise ValidationError(f"config missing entries for {name}")
    n = max(idx)
    if sorted(idx) != list(range(1, n + 1)):
        raise ValidationError(f"config entries for {name} have gaps")
    return np.array([entries[f"{name}.{i}"] for i in range(1, n + 1)])


def load_params_config(path: str | Path) -> Parameters:
    entries = _parse_config_lines(path)
    mu = _collect_vector(entries, "mu")
    gamma = _collect_vector(entries, "gamma")
    q = gamma.shape[0]
    p = mu.shape[0] - q
    beta = np.empty((p, q))
    for i in range(1, p + 1):
        for j in range(1, q + 1):
            key = f"beta.{i}.{j}"
            if key not in entries:
                raise ValidationError(f"config missing {key}")
            beta[i - 1, j - 1] = entries[key]
    alpha = np.eye(q)
    for j in range(2, q + 1):
        for k in range(1, j):
            alpha[j - 1, k - 1] = entries.get(f"alpha.{j}.{k}", 0.0)
    return Parameters(
        alpha=alpha,
        beta=beta,
        mu=mu,
        gamma=gamma,
        phi=_collect_vector(entries, "phi"),
        psi=_collect_vector(entries, "psi"),
        rho=_collect_vector(entries, "rho"),
        sigma_eta=_collect_vector(entries, "sigma_eta"),
        sigma_nu=_collect_vector(entries, "sigma_nu"),
        delta=entries["delta"],
    )


def save_priors_config(priors: PriorSpec, path: str | Path) -> None:
    lines = ["# prior hyperparameters"]
    _emit_vector(lines, "m_mu", np.asarray(priors.m_mu))
    n = np.asarray(priors.m_mu).shape[0]
    for i in range(1, n + 1):
        for j in range(1, n + 1):
            lines.append(f"S_mu.{i}.{j} = {_format_value(np.asarray(priors.S_mu)[i - 1, j - 1])}")
    _emit_vector(lines, "m_gamma", np.asarray(priors.m_gamma))
    q = np.asarray(priors.m_gamma).shape[0]
    for i in range(1, q + 1):
        for j in range(1, q + 1):
            lines.append(f"S_gamma.{i}.{j} = {_format_value(np.asarray(priors.S_gamma)[i - 1, j - 1])}")
    m_beta = np.asarray(priors.m_beta)
    S_beta = np.asarray(priors.S_beta)
    p = m_beta.shape[0]
    for i in range(1, p + 1):
        for j in range(1, q + 1):
            lines.append(f"m_beta.{i}.{j} = {_format_value(m_beta[i - 1, j - 1])}")
            for k in range(1, q + 1):
                lines.append(
                    f"S_beta.{i}.{j}.{k} = {_format_value(S_beta[i - 1, j - 1, k - 1])}"
                )
    for j, (m, S) in enumerate(zip(priors.m_alpha, priors.S_alpha), start=2):
        m = np.asarray(m)
        S = np.asarray(S)
        for k in range(1, j):
            lines.append(f"m_alpha.{j}.{k} = {_format_value(m[k - 1])}")
            for l in range(1, j):
                lines.append(f"S_alpha.{j}.{k}.{l} = {_format_value(S[k - 1, l - 1])}")
    for name in ("a_phi", "b_phi", "a_psi", "b_psi", "a_rho", "b_rho", "n_eta", "d_eta", "n_nu", "d_nu"):
        lines.append(f"{name} = {_format_value(getattr(priors, name))}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_priors_config(path: str | Path) -> PriorSpec:
    entries = _parse_config_lines(path)
    m_mu = _collect_vector(entries, "m_mu")
    n = m_mu.shape[0]
    m_gamma = _collect_vector(entries, "m_gamma")
    q = m_gamma.shape[0]
    p = n - q
    S_mu = np.array([[entries[f"S_mu.{i}.{j}"] for j in range(1, n + 1)] for i in range(1, n + 1)])
    S_gamma = np.array(
        [[entries[f"S_gamma.{i}.{j}"] for j in range(1, q + 1)] for i in range(1, q + 1)]
    )
    m_beta = np.array(
        [[entries[f"m_beta.{i}.{j}"] for j in range(1, q + 1)] for i in range(1, p + 1)]
    )
    S_beta = np.array(
        [
            [[entries[f"S_beta.{i}.{j}.{k}"] for k in range(1, q + 1)] for j in range(1, q + 1)]
            for i in range(1, p + 1)
        ]
    )
    m_alpha = []
    S_alpha = []
    for j in range(2, q + 1):
        m_alpha.append(np.array([entries[f"m_alpha.{j}.{k}"] for k in range(1, j)]))
        S_alpha.append(
            np.array([[entries[f"S_alpha.{j}.{k}.{l}"] for l in range(1, j)] for k in range(1, j)])
        )
    kwargs = {
        name: entries[name]
        for name in ("a_phi", "b_phi", "a_psi", "b_psi", "a_rho", "b_rho", "n_eta", "d_eta", "n_nu", "d_nu")
    }
    return PriorSpec(
        m_mu=m_mu,
        S_mu=S_mu,
        m_gamma=m_gamma,
        S_gamma=S_gamma,
        m_beta=m_beta,
        S_beta=S_beta,
        m_alpha=m_alpha,
        S_alpha=S_alpha,
        **kwargs,
    )


# ---------------------------------------------------------------------------
# Dataset CSV I/O. Returns and factors are plain T x p / T x q tables with a
# header row; realized covariances use long format "date,i,j,value" with
# i <= j (symmetric completion is applied on load).
# ---------------------------------------------------------------------------

FLOAT_FMT = "%.17g"


def _write_table(path: Path, header: list[str], rows: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in np.atleast_2d(rows):
            fh.write(",".join(FLOAT_FMT % v for v in row) + "\n")


def _read_table(path: Path) -> tuple[list[str], np.ndarray]:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    return header, data


def save_dataset(data: Dataset, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    p = data.y.shape[1]
    q = data.x.shape[1]
    _write_table(out / "returns.csv", [f"asset{i}" for i in range(1, p + 1)], data.y)
    _write_table(out / "factors.csv", [f"factor{j}" for j in range(1, q + 1)], data.x)
    if data.W is not None:
        with open(out / "rcov.csv", "w", encoding="utf-8") as fh:
            fh.write("date,i,j,value\n")
            for t in range(data.W.shape[0]):
                for i in range(p):
                    for j in range(i, p):
                        fh.write(f"{t + 1},{i + 1},{j + 1},{FLOAT_FMT % data.W[t, i, j]}\n")


def load_rcov_long(path: str | Path, T: int, p: int) -> np.ndarray:
    """Load long-format covariances (date,i,j,value; i <= j) into (T, p, p)."""
    raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    W = np.zeros((T, p, p))
    seen = np.zeros((T, p, p), dtype=bool)
    for date, i, j, value in raw:
        t, i, j = int(date) - 1, int(i) - 1, int(j) - 1
        if not (0 <= t < T and 0 <= i < p and 0 <= j < p):
            raise ValidationError(f"rcov entry out of range: date={date}, i={i + 1}, j={j + 1}")
        if i > j:
            raise ValidationError("rcov long format requires i <= j")
        W[t, i, j] = value
        W[t, j, i] = value
        seen[t, i, j] = True
    for t in range(T):
        if not seen[t][np.triu_indices(p)].all():
            raise ValidationError(f"rcov matrix at date {t + 1} is incomplete")
    return W


def load_dataset(data_dir: str | Path, *, require_rcov: bool = True) -> Dataset:
    d = Path(data_dir)
    _, y = _read_table(d / "returns.csv")
    _, x = _read_table(d / "factors.csv")
    if y.shape[0] != x.shape[0]:
        raise ValidationError("returns.csv and factors.csv disagree on T")
    W = None
    rcov = d / "rcov.csv"
    if rcov.exists():
        W = load_rcov_long(rcov, y.shape[0], y.shape[1])
    elif require_rcov:
        raise ValidationError(f"missing {rcov}")
    return Dataset(y=y, x=x, W=W)
