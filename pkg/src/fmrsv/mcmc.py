"""Chain orchestration: initialization, sweeps, storage, checkpoints.

A sweep executes the sampler steps in a fixed order (volatilities, factors,
loadings, means, AR coefficients, leverage, variances, precision), consuming
randomness from a single per-chain generator so that (seed, config, data)
fully determine the output. Multiple chains derive independent seed
sequences from the root seed by chain index, which keeps results identical
across worker counts.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import samplers as smp
from .core import (
    Dataset,
    LatentState,
    ModelConfig,
    Parameters,
    PriorSpec,
    Variant,
    validate,
)
from .samplers import BlockWorkspace, McmcTuning

__all__ = [
    "ChainConfig",
    "ChainStore",
    "initialize_state",
    "run_chain",
    "run_chains",
    "PARAM_GROUPS",
]

PARAM_GROUPS = ("alpha", "beta", "mu", "gamma", "phi", "psi", "rho", "sigma_eta", "sigma_nu", "delta")

VAR_FLOOR = 1e-8


@dataclass
class ChainConfig:
    n_burn: int
    n_keep: int
    thin: int = 10
    seed: int = 0
    n_chains: int = 1
    tuning: McmcTuning = field(default_factory=McmcTuning)
    checkpoint_every: int = 1000
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.n_burn < 0 or self.n_keep < 0 or self.n_chains < 1:
            raise ValueError("counts must be nonnegative and n_chains >= 1")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")


def param_labels(config: ModelConfig) -> dict[str, list[str]]:
    """Column labels per parameter group (1-based indices)."""
    p, q = config.p, config.q
    labels = {
        "alpha": [f"alpha.{j}.{k}" for j in range(2, q + 1) for k in range(1, j)],
        "beta": [f"beta.{i}.{j}" for i in range(1, p + 1) for j in range(1, q + 1)],
        "mu": [f"mu.{i}" for i in range(1, p + q + 1)],
        "gamma": [f"gamma.{j}" for j in range(1, q + 1)],
        "phi": [f"phi.{i}" for i in range(1, p + q + 1)],
        "psi": [f"psi.{j}" for j in range(1, q + 1)],
        "rho": [f"rho.{j}" for j in range(1, q + 1)],
        "sigma_eta": [f"sigma_eta.{i}" for i in range(1, p + q + 1)],
        "sigma_nu": [f"sigma_nu.{j}" for j in range(1, q + 1)],
        "delta": ["delta"],
    }
    return labels


def _flatten_group(params: Parameters, group: str) -> np.ndarray:
    if group == "alpha":
        q = params.q
        return np.array(
            [params.alpha[j - 1, k - 1] for j in range(2, q + 1) for k in range(1, j)]
        )
    if group == "beta":
        return params.beta.reshape(-1).copy()
    if group == "delta":
        return np.array([params.delta])
    return np.asarray(getattr(params, group)).copy()


@dataclass
class ChainStore:
    """Posterior draws plus provenance.

    draws: one (n_keep, dim) array per parameter group. h_last/f_last hold
    the terminal-time latent values for every kept sweep (used by the
    portfolio forecasts); latent_h/latent_f hold thinned full paths.
    """

    model: ModelConfig
    chain_config: ChainConfig
    seed: int
    labels: dict[str, list[str]]
    draws: dict[str, np.ndarray]
    h_last: np.ndarray
    f_last: np.ndarray
    latent_h: np.ndarray
    latent_f: np.ndarray
    latent_sweeps: np.ndarray
    acceptance: dict[str, float]
    flagged: list[str] = field(default_factory=list)

    def column(self, label: str) -> np.ndarray:
        for group, names in self.labels.items():
            if label in names:
                return self.draws[group][:, names.index(label)]
        raise KeyError(label)

    def all_labels(self) -> list[str]:
        out = []
        for group in PARAM_GROUPS:
            out.extend(self.labels[group])
        return out

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for group in PARAM_GROUPS:
            header = ",".join(self.labels[group])
            np.savetxt(
                out / f"{group}.csv", self.draws[group], delimiter=",",
                header=header, comments="", fmt="%.17g",
            )
        np.savetxt(out / "h_last.csv", self.h_last, delimiter=",", fmt="%.17g",
                   header=",".join(f"h.{i+1}" for i in range(self.h_last.shape[1])), comments="")
        np.savetxt(out / "f_last.csv", self.f_last, delimiter=",", fmt="%.17g",
                   header=",".join(f"f.{j+1}" for j in range(self.f_last.shape[1])), comments="")
        np.save(out / "latent_h.npy", self.latent_h)
        np.save(out / "latent_f.npy", self.latent_f)
        manifest = {
            "model": {
                "p": self.model.p,
                "q": self.model.q,
                "T": self.model.T,
                "variant": self.model.variant.value,
            },
            "chain_config": _config_dict(self.chain_config),
            "seed": self.seed,
            "acceptance": self.acceptance,
            "latent_sweeps": self.latent_sweeps.tolist(),
            "flagged": self.flagged,
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    @classmethod
    def load(cls, ch_dir: str | Path) -> "ChainStore":
        ch = Path(ch_dir)
        manifest = json.loads((ch / "manifest.json").read_text())
        model = ModelConfig(
            p=manifest["model"]["p"], q=manifest["model"]["q"], T=manifest["model"]["T"],
            variant=Variant.parse(manifest["model"]["variant"]),
        )
        cc = manifest["chain_config"]
        chain_config = ChainConfig(
            n_burn=cc["n_burn"], n_keep=cc["n_keep"], thin=cc["thin"], seed=cc["seed"],
            n_chains=cc["n_chains"], tuning=McmcTuning(**cc["tuning"]),
            checkpoint_every=cc["checkpoint_every"],
        )
        labels = param_labels(model)
        draws = {}
        for group in PARAM_GROUPS:
            arr = np.loadtxt(ch / f"{group}.csv", delimiter=",", skiprows=1, ndmin=2)
            draws[group] = arr.reshape(-1, max(len(labels[group]), 1))[:, : len(labels[group])]
        h_last = np.loadtxt(ch / "h_last.csv", delimiter=",", skiprows=1, ndmin=2)
        f_last = np.loadtxt(ch / "f_last.csv", delimiter=",", skiprows=1, ndmin=2)
        return cls(
            model=model,
            chain_config=chain_config,
            seed=manifest["seed"],
            labels=labels,
            draws=draws,
            h_last=h_last,
            f_last=f_last,
            latent_h=np.load(ch / "latent_h.npy"),
            latent_f=np.load(ch / "latent_f.npy"),
            latent_sweeps=np.array(manifest["latent_sweeps"], dtype=int),
            acceptance=manifest["acceptance"],
            flagged=manifest.get("flagged", []),
        )


def _config_dict(cc: ChainConfig) -> dict:
    out = asdict(cc)
    out["tuning"] = asdict(cc.tuning)
    return out


def initialize_state(
    config: ModelConfig,
    priors: PriorSpec,
    data: Dataset,
    rng: np.random.Generator,
) -> tuple[Parameters, LatentState, list[str]]:
    """Deterministic data-driven starting point.

    h starts at log realized variances (log sample variances without
    realized covariances); f at the leading principal-component scores of
    the returns, sign-aligned so asset 1 loads positively; parameters at
    prior means with phi = 0.9, psi = 0.1, rho = 0, delta = 10. Improper
    inverse-gamma prior means fall back to the prior mode.
    """
    p, q, T = config.p, config.q, config.T
    flagged: list[str] = []
    h = np.empty((T, p + q))
    if config.variant.uses_rcov:
        rv = np.clip(np.einsum("tii->ti", data.W), VAR_FLOOR, None)
        h[:, :p] = np.log(rv)
    else:
        h[:, :p] = np.log(np.clip(np.var(data.y, axis=0), VAR_FLOOR, None))
    h[:, p:] = np.log(np.clip(np.var(data.x, axis=0), VAR_FLOOR, None))

    yc = data.y - data.y.mean(axis=0)
    _, svals, vt = np.linalg.svd(yc, full_matrices=False)
    f = np.zeros((T, q))
    for k in range(q):
        if svals[k] < 1e-10:
            flagged.append(f"degenerate returns: factor {k + 1} initialized to zero")
            continue
        direction = vt[k] * (1.0 if vt[k, 0] >= 0 else -1.0)
        f[:, k] = yc @ direction

    def ig_center(n, d):
        return d / (n - 2.0) if n > 2.0 else d / (n + 2.0)

    # loading start: least squares of returns on the initial factor scores.
    # A prior-mean start (typically zero) sits in a region where the
    # log-determinant terms are convex and the Taylor proposal mismatches
    # the conditional so badly that the loading step stalls.
    ftf = f.T @ f + 1e-8 * np.eye(q)
    beta0 = np.linalg.solve(ftf, f.T @ yc).T
    if not np.all(np.isfinite(beta0)):
        beta0 = np.asarray(priors.m_beta, dtype=float).copy()

    alpha = np.eye(q)
    for j in range(2, q + 1):
        alpha[j - 1, : j - 1] = priors.m_alpha[j - 2]
    params = Parameters(
        alpha=alpha,
        beta=beta0,
        mu=np.asarray(priors.m_mu, dtype=float).copy(),
        gamma=np.asarray(priors.m_gamma, dtype=float).copy(),
        phi=np.full(p + q, 0.9),
        psi=np.full(q, 0.1),
        rho=np.zeros(q),
        sigma_eta=np.full(p + q, np.sqrt(ig_center(priors.n_eta, priors.d_eta))),
        sigma_nu=np.full(q, np.sqrt(ig_center(priors.n_nu, priors.d_nu))),
        delta=10.0,
    )
    state = LatentState(h=h, f=f)
    validate(config, params, priors, None)
    return params, state, flagged


@dataclass
class _Accumulator:
    h1: int = 0
    h1_total: int = 0
    h2: int = 0
    h2_total: int = 0
    beta: int = 0
    beta_total: int = 0
    phi: int = 0
    phi_total: int = 0
    psi: int = 0
    psi_total: int = 0
    rho: int = 0
    rho_total: int = 0
    sigma_eta: int = 0
    sigma_eta_total: int = 0
    delta: int = 0
    delta_total: int = 0

    def rates(self) -> dict[str, float]:
        out = {}
        for name in ("h1", "h2", "beta", "phi", "psi", "rho", "sigma_eta", "delta"):
            total = getattr(self, f"{name}_total")
            out[name] = getattr(self, name) / total if total else float("nan")
        return out


def _sweep(config, params, state, data, priors, rng, work, tuning, acc) -> None:
    if tuning.stochastic_knots:
        K = tuning.resolve_blocks(config.T)
        work.knots = smp.make_knots(config.T, K, rng, True)
    smp.refresh_sweep_cache(config, params, state, work)
    a, n = smp.sample_h1(config, params, state, data, priors, rng, work, tuning)
    acc.h1 += a
    acc.h1_total += n
    a, n = smp.sample_h2(config, params, state, data, priors, rng, work, tuning)
    acc.h2 += a
    acc.h2_total += n
    smp.sample_f(config, params, state, data, priors, rng, work)
    smp.sample_alpha(config, params, state, data, priors, rng, work)
    flags = smp.sample_beta(config, params, state, data, priors, rng, work, tuning)
    acc.beta += int(flags.sum())
    acc.beta_total += flags.shape[0]
    smp.sample_mu(config, params, state, data, priors, rng, work)
    smp.sample_gamma(config, params, state, data, priors, rng, work)
    flags = smp.sample_phi(config, params, state, data, priors, rng, work)
    acc.phi += int(flags.sum())
    acc.phi_total += flags.shape[0]
    flags = smp.sample_psi(config, params, state, data, priors, rng, work)
    acc.psi += int(flags.sum())
    acc.psi_total += flags.shape[0]
    if config.variant.uses_leverage:
        flags = smp.sample_rho(config, params, state, data, priors, rng, work)
        acc.rho += int(flags.sum())
        acc.rho_total += flags.shape[0]
    flags = smp.sample_sigma_eta(config, params, state, data, priors, rng, work)
    acc.sigma_eta += int(flags.sum())
    acc.sigma_eta_total += flags.shape[0]
    smp.sample_sigma_nu(config, params, state, data, priors, rng, work)
    if config.variant.uses_rcov:
        acc.delta += int(smp.sample_delta(config, params, state, data, priors, rng, work, tuning))
        acc.delta_total += 1


def run_chain(
    chain_config: ChainConfig,
    model: ModelConfig,
    priors: PriorSpec,
    data: Dataset,
    chain_index: int = 0,
    init: tuple[Parameters, LatentState] | None = None,
) -> ChainStore:
    """Run one chain; fully deterministic given (seed, configs, data)."""
    validate(model, None, priors, data)
    seed_seq = np.random.SeedSequence(entropy=chain_config.seed, spawn_key=(chain_index,))
    rng = np.random.default_rng(seed_seq)
    tuning = chain_config.tuning
    if init is None:
        params, state, flagged = initialize_state(model, priors, data, rng)
    else:
        params, state = init[0].copy(), init[1].copy()
        flagged = []
    work = smp.make_workspace(model, data, tuning, rng)

    labels = param_labels(model)
    n_keep = chain_config.n_keep
    draws = {g: np.empty((n_keep, len(labels[g]))) for g in PARAM_GROUPS}
    h_last = np.empty((n_keep, model.p + model.q))
    f_last = np.empty((n_keep, model.q))
    kept_latent_idx = [k for k in range(n_keep) if k % chain_config.thin == 0]
    latent_h = np.empty((len(kept_latent_idx), model.T, model.p + model.q))
    latent_f = np.empty((len(kept_latent_idx), model.T, model.q))
    latent_sweeps = np.array(kept_latent_idx, dtype=int)

    acc = _Accumulator()
    total = chain_config.n_burn + n_keep
    ckpt_dir = Path(chain_config.checkpoint_dir) if chain_config.checkpoint_dir else None
    lat_row = 0
    for sweep in range(total):
        try:
            _sweep(model, params, state, data, priors, rng, work, tuning, acc)
        except Exception as err:
            raise RuntimeError(f"sweep {sweep + 1} failed in MCMC step: {err}") from err
        k = sweep - chain_config.n_burn
        if k >= 0:
            for g in PARAM_GROUPS:
                draws[g][k] = _flatten_group(params, g)
            h_last[k] = state.h[-1]
            f_last[k] = state.f[-1]
            if k % chain_config.thin == 0:
                latent_h[lat_row] = state.h
                latent_f[lat_row] = state.f
                lat_row += 1
        if ckpt_dir is not None and (sweep + 1) % chain_config.checkpoint_every == 0:
            _write_checkpoint(ckpt_dir, chain_index, sweep + 1, params, state, rng)

    return ChainStore(
        model=model,
        chain_config=chain_config,
        seed=chain_config.seed,
        labels=labels,
        draws=draws,
        h_last=h_last,
        f_last=f_last,
        latent_h=latent_h,
        latent_f=latent_f,
        latent_sweeps=latent_sweeps,
        acceptance=acc.rates(),
        flagged=flagged + work.flagged,
    )


def _write_checkpoint(ckpt_dir: Path, chain_index: int, sweep: int,
                      params: Parameters, state: LatentState,
                      rng: np.random.Generator) -> None:
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    path = ckpt_dir / f"checkpoint_chain{chain_index}_{sweep}.npz"
    np.savez_compressed(
        path,
        sweep=sweep,
        alpha=params.alpha, beta=params.beta, mu=params.mu, gamma=params.gamma,
        phi=params.phi, psi=params.psi, rho=params.rho,
        sigma_eta=params.sigma_eta, sigma_nu=params.sigma_nu,
        delta=params.delta, h=state.h, f=state.f,
    )
    rng_state = rng.bit_generator.state
    (ckpt_dir / f"checkpoint_chain{chain_index}_{sweep}.rng.json").write_text(
        json.dumps(rng_state, default=str)
    )


def load_checkpoint(path: str | Path) -> tuple[int, Parameters, LatentState, dict]:
    """Restore (sweep, params, state, rng_state) from a checkpoint file."""
    path = Path(path)
    with np.load(path) as z:
        params = Parameters(
            alpha=z["alpha"], beta=z["beta"], mu=z["mu"], gamma=z["gamma"],
            phi=z["phi"], psi=z["psi"], rho=z["rho"],
            sigma_eta=z["sigma_eta"], sigma_nu=z["sigma_nu"], delta=float(z["delta"]),
        )
        state = LatentState(h=z["h"], f=z["f"])
        sweep = int(z["sweep"])
    rng_json = path.with_suffix("").with_suffix(".rng.json")
    rng_state = json.loads(rng_json.read_text())
    for key in ("state", "inc"):
        rng_state["state"][key] = int(rng_state["state"][key])
    return sweep, params, state, rng_state


def _run_chain_worker(args):
    chain_config, model, priors, data, index = args
    return run_chain(chain_config, model, priors, data, chain_index=index)


def run_chains(
    chain_config: ChainConfig,
    model: ModelConfig,
    priors: PriorSpec,
    data: Dataset,
    jobs: int = 1,
) -> list[ChainStore]:
    """Run n_chains independent chains, optionally in parallel processes."""
    tasks = [(chain_config, model, priors, data, c) for c in range(chain_config.n_chains)]
    if jobs <= 1 or chain_config.n_chains == 1:
        return [_run_chain_worker(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(jobs, chain_config.n_chains)) as pool:
        return list(pool.map(_run_chain_worker, tasks))
