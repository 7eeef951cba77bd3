"""Command-line driver: models in, CSV/JSON reports out.

Consumers are scripts and CI, so everything is non-interactive and
deterministic: all randomness flows from one seeded generator, every report
starts with a header carrying the version, seed, and a hash of the resolved
configuration, and re-running with the same inputs reproduces each file
byte for byte.

Exit codes are a stable contract: 0 ok, 2 input error, 3 impossible
observation, 4 invariant violation.
"""

from __future__ import annotations

import csv
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import click
import numpy as np

from . import __version__
from .adapted import prefix_string, prefixes, random_weight_process
from .attention import (
    MiscToggles,
    embed_sequence,
    layer_forward,
    layer_stack,
    positional_encoding,
    predictions,
    random_layer_params,
    simplified_form,
)
from .dual import bsde_residual_by_node, duality_report, estimator_path, solve_bsde, solve_optimal
from .fixedpoint import fixed_point_residual, iterate, kl_divergence_bar
from .hmm import HmmModel
from .oracle import (
    ImpossibleObservationError,
    filter_process,
    forward_filter,
    next_token_prob,
    path_probability,
    sample_path,
)
from .predictor import evaluate, represent_conditional

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_IMPOSSIBLE = 3
EXIT_INVARIANT = 4

DEFAULT_TOLERANCES = {
    "fixed_point": 1e-10,
    "duality": 1e-9,
    "representation": 1e-12,
    "eq8": 1e-12,
}


@dataclass
class ExperimentConfig:
    """Resolved run configuration; file values first, flags override."""

    model_path: str | None = None
    seed: int = 0
    T: int | None = None
    K: int = 10
    draws: int = 20
    enum_budget: int = 10**7
    zero_convention: bool = False
    output_dir: str = "out"
    tolerances: dict = field(default_factory=lambda: dict(DEFAULT_TOLERANCES))
    attn_d: int = 8
    attn_heads: int = 2
    attn_layers: int = 4
    attn_activation: str = "gelu"

    def validate(self) -> "ExperimentConfig":
        if self.enum_budget < 1:
            raise ValueError(f"enum_budget must be >= 1, got {self.enum_budget}")
        for key, val in self.tolerances.items():
            if not val > 0:
                raise ValueError(f"tolerance {key!r} must be positive, got {val}")
        return self

    def hash(self) -> str:
        # output_dir is where the report lands, not part of what it says
        payload = {k: v for k, v in self.__dict__.items() if k != "output_dir"}
        blob = json.dumps(payload, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def header(self) -> dict:
        return {"version": __version__, "seed": self.seed, "config_hash": self.hash()}

    def header_line(self) -> str:
        return f"# dualfilter {__version__} seed={self.seed} config={self.hash()}"


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def load_config(config_path: str | None, **overrides) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if config_path is not None:
        try:
            raw = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValueError(f"cannot read config {config_path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ValueError("config file must hold a JSON object with flat keys")
        for key, val in raw.items():
            if key == "tolerances":
                cfg.tolerances.update(val)
            elif hasattr(cfg, key):
                setattr(cfg, key, val)
            else:
                raise ValueError(f"unknown config key {key!r}")
    for key, val in overrides.items():
        if val is not None:
            setattr(cfg, key, val)
    return cfg.validate()


def _load_model(cfg: ExperimentConfig) -> HmmModel:
    if cfg.model_path is None:
        raise ValueError("no model given: pass --model or set model_path in the config")
    try:
        text = Path(cfg.model_path).read_text()
    except OSError as exc:
        raise ValueError(f"cannot read model file {cfg.model_path}: {exc}") from exc
    try:
        return HmmModel.from_json(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"model file {cfg.model_path} is not valid JSON: {exc}") from exc


def _parse_path(text: str | None, model: HmmModel, cfg: ExperimentConfig, rng) -> tuple[int, ...]:
    if text is None:
        return sample_path(model, rng, T=cfg.T)
    toks = tuple(int(t) for t in text.replace(",", ".").split(".") if t != "")
    for tok in toks:
        if not 0 <= tok <= model.m:
            raise ValueError(f"token {tok} outside alphabet 0..{model.m}")
    return toks


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path: Path, cfg: ExperimentConfig, columns, rows):
    with path.open("w", newline="") as fh:
        fh.write(cfg.header_line() + "\n")
        writer = csv.writer(fh)
        writer.writerow(columns)
        writer.writerows(rows)


def _write_json(path: Path, cfg: ExperimentConfig, payload: dict):
    doc = {"header": cfg.header(), **payload}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


pass_config_options = [
    click.option("--model", "model_path", type=str, default=None, help="HMM model JSON file."),
    click.option("--config", "config_path", type=str, default=None, help="Experiment config JSON."),
    click.option("--seed", type=int, default=None, help="Seed for the run's generator."),
    click.option("--out", "output_dir", type=str, default=None, help="Output directory."),
    click.option(
        "--zero-convention/--no-zero-convention",
        default=None,
        help="Use the 0/0 := 0 extension on impossible observation prefixes.",
    ),
]


def with_common_options(fn):
    for opt in reversed(pass_config_options):
        fn = opt(fn)
    return fn


@click.group()
@click.version_option(version=__version__)
def main():
    """Exact HMM filtering, its dual control system, and fixed-point inference checks."""


@main.command("oracle")
@with_common_options
@click.option("--path", "path_text", type=str, default=None, help="Observation path, tokens joined by '.' or ','.")
def cmd_oracle(model_path, config_path, seed, output_dir, zero_convention, path_text):
    """Write the exact filter trajectory and next-token probabilities for one path."""
    try:
        cfg = load_config(
            config_path,
            model_path=model_path,
            seed=seed,
            output_dir=output_dir,
            zero_convention=zero_convention,
        )
        model = _load_model(cfg)
        rng = np.random.default_rng(cfg.seed)
        z = _parse_path(path_text, model, cfg, rng)
    except ValueError as exc:
        _fail(EXIT_INPUT, str(exc))

    try:
        pis = forward_filter(model, z, zero_convention=cfg.zero_convention)
    except ImpossibleObservationError as exc:
        _fail(EXIT_IMPOSSIBLE, str(exc))

    out = _out_dir(cfg)
    _write_csv(
        out / "filter_trajectory.csv",
        cfg,
        ["t", "x", "pi"],
        [
            [t + 1, x + 1, repr(float(pis[t, x]))]
            for t in range(len(z))
            for x in range(model.d)
        ],
    )
    prob_rows = []
    for t in range(len(z)):
        if pis[t].sum() == 0.0:
            continue
        p = next_token_prob(model, pis[t])
        prob_rows.extend([t + 1, tok, repr(float(p[tok]))] for tok in range(model.m + 1))
    _write_csv(out / "next_token_probs.csv", cfg, ["t", "z", "prob"], prob_rows)
    click.echo(f"wrote filter trajectory for path {prefix_string(z)} to {out}")
    sys.exit(EXIT_OK)


@main.command("fixedpoint")
@with_common_options
@click.option("--path", "path_text", type=str, default=None, help="Observation path, tokens joined by '.' or ','.")
@click.option("--mode", type=click.Choice(["path", "adapted"]), default="path", show_default=True)
@click.option("--iterations", "K", type=int, default=None, help="Number of map applications for the trace.")
def cmd_fixedpoint(model_path, config_path, seed, output_dir, zero_convention, path_text, mode, K):
    """Check the filter is a fixed point of the inference map and run the iteration driver."""
    try:
        cfg = load_config(
            config_path,
            model_path=model_path,
            seed=seed,
            output_dir=output_dir,
            zero_convention=zero_convention,
            K=K,
        )
        if cfg.K < 1:
            raise ValueError(f"K must be >= 1, got {cfg.K}")
        model = _load_model(cfg)
        rng = np.random.default_rng(cfg.seed)
        z = _parse_path(path_text, model, cfg, rng)
    except ValueError as exc:
        _fail(EXIT_INPUT, str(exc))

    tol = float(cfg.tolerances["fixed_point"])
    out = _out_dir(cfg)
    try:
        if mode == "path":
            pis = forward_filter(model, z, zero_convention=cfg.zero_convention)
            residual = fixed_point_residual(model, pis, z, mode="path")
        else:
            pi_proc = filter_process(model, zero_convention=cfg.zero_convention)
            residual = fixed_point_residual(model, pi_proc, mode="adapted")
        trace = iterate(model, z, K=cfg.K, zero_convention=cfg.zero_convention)
    except ImpossibleObservationError as exc:
        _fail(EXIT_IMPOSSIBLE, str(exc))

    rows = []
    for k in range(cfg.K):
        for t in range(len(z)):
            rows.append(
                [
                    k + 1,
                    t + 1,
                    repr(float(trace.residuals[k])),
                    repr(float(trace.kl_per_iter[k])),
                    int(trace.in_domain[k, t]),
                ]
            )
    _write_csv(out / "iteration_trace.csv", cfg, ["iter", "t", "residual_tv", "kl_bar", "in_domain"], rows)

    ok = residual <= tol
    _write_json(
        out / "residual_report.json",
        cfg,
        {mode: {"residual": residual, "tolerance": tol, "pass": bool(ok), "path": prefix_string(z)}},
    )
    if not ok:
        _write_json(
            out / "findings.json",
            cfg,
            {
                "finding": "filter is not a fixed point at the stated tolerance",
                "mode": mode,
                "residual": residual,
                "tolerance": tol,
                "model": model.to_dict(),
                "path": prefix_string(z),
            },
        )
        _fail(EXIT_INVARIANT, f"fixed-point residual {residual:.3e} exceeds tolerance {tol:.1e}")
    click.echo(f"fixed-point residual {residual:.3e} (tolerance {tol:.1e}) -> pass")
    sys.exit(EXIT_OK)


@main.command("duality")
@with_common_options
@click.option("--draws", type=int, default=None, help="Number of random (U, F) draws.")
def cmd_duality(model_path, config_path, seed, output_dir, zero_convention, draws):
    """Cross-check the control cost against the estimator mean-squared error."""
    try:
        cfg = load_config(
            config_path,
            model_path=model_path,
            seed=seed,
            output_dir=output_dir,
            zero_convention=zero_convention,
            draws=draws,
        )
        if cfg.draws < 1:
            raise ValueError(f"draws must be >= 1, got {cfg.draws}")
        model = _load_model(cfg)
    except ValueError as exc:
        _fail(EXIT_INPUT, str(exc))

    rng = np.random.default_rng(cfg.seed)
    tol = float(cfg.tolerances["duality"])
    reports = []
    node_residuals: dict[tuple[int, tuple], float] = {}
    try:
        for _ in range(cfg.draws):
            U = random_weight_process(rng, model.m, model.T)
            F = rng.standard_normal(model.d)
            reports.append(duality_report(model, U, F, budget=cfg.enum_budget))
            traj = solve_bsde(model, U, F)
            for key, res in bsde_residual_by_node(model, traj).items():
                node_residuals[key] = max(node_residuals.get(key, 0.0), res)

        # estimator identity along the optimal feedback trajectory
        pi_proc = filter_process(model, zero_convention=cfg.zero_convention)
        F = rng.standard_normal(model.d)
        traj = solve_optimal(model, pi_proc, F)
        est_rows = []
        for t in range(model.T + 1):
            worst = 0.0
            for w in prefixes(model.m, t):
                if t > 0 and path_probability(model, w) <= 0.0:
                    continue
                pi_t = model.mu if t == 0 else forward_filter(model, w)[-1]
                lhs = float(pi_t @ np.asarray(traj.Y.at(w)))
                worst = max(worst, abs(lhs - estimator_path(model, traj, w, t)))
            est_rows.append(["estimator_identity", t, "", repr(worst)])
    except ImpossibleObservationError as exc:
        _fail(EXIT_IMPOSSIBLE, str(exc))

    out = _out_dir(cfg)
    gaps = [r["gap"] for r in reports]
    _write_json(
        out / "duality_report.json",
        cfg,
        {"draws": reports, "max_gap": max(gaps), "tolerance": tol, "pass": bool(max(gaps) <= tol)},
    )
    diag_rows = [
        ["bsde_residual", t, prefix_string(w), repr(res)]
        for (t, w), res in sorted(node_residuals.items())
    ] + est_rows
    _write_csv(out / "diagnostics.csv", cfg, ["check", "t", "prefix", "max_residual"], diag_rows)
    if max(gaps) > tol:
        _fail(EXIT_INVARIANT, f"duality gap {max(gaps):.3e} exceeds tolerance {tol:.1e}")
    click.echo(f"duality gap over {cfg.draws} draws: max {max(gaps):.3e} (tolerance {tol:.1e}) -> pass")
    sys.exit(EXIT_OK)


@main.command("represent")
@with_common_options
@click.option("--z-query", type=int, default=0, show_default=True, help="Token whose conditional probability is represented.")
def cmd_represent(model_path, config_path, seed, output_dir, zero_convention, z_query):
    """Build the predictor weights for a next-token conditional probability."""
    try:
        cfg = load_config(
            config_path,
            model_path=model_path,
            seed=seed,
            output_dir=output_dir,
            zero_convention=zero_convention,
        )
        model = _load_model(cfg)
        if not 0 <= z_query <= model.m:
            raise ValueError(f"z-query {z_query} outside alphabet 0..{model.m}")
    except ValueError as exc:
        _fail(EXIT_INPUT, str(exc))

    try:
        rep = represent_conditional(model, z_query, zero_convention=cfg.zero_convention)
    except ImpossibleObservationError as exc:
        _fail(EXIT_IMPOSSIBLE, str(exc))

    # reconstruction check against the oracle on every path
    tol = float(cfg.tolerances["representation"])
    worst = 0.0
    for path in prefixes(model.m, model.T):
        pis = forward_filter(model, path, zero_convention=cfg.zero_convention)
        if pis[-1].sum() == 0.0:
            continue
        target = float(next_token_prob(model, pis[-1])[z_query])
        worst = max(worst, abs(evaluate(rep, path) - target))

    out = _out_dir(cfg)
    payload = rep.to_dict()
    payload["z_query"] = z_query
    payload["reconstruction_error"] = worst
    _write_json(out / "representation.json", cfg, payload)
    if worst > tol:
        _fail(EXIT_INVARIANT, f"reconstruction error {worst:.3e} exceeds tolerance {tol:.1e}")
    click.echo(f"representation for z={z_query}: constant {rep.constant:.6f}, reconstruction error {worst:.3e}")
    sys.exit(EXIT_OK)


@main.command("attention-demo")
@with_common_options
@click.option("--path", "path_text", type=str, default=None, help="Prompt tokens joined by '.' or ','.")
def cmd_attention_demo(model_path, config_path, seed, output_dir, zero_convention, path_text):
    """Run a seeded toy attention stack and emit per-layer prediction tables."""
    try:
        cfg = load_config(
            config_path,
            model_path=model_path,
            seed=seed,
            output_dir=output_dir,
            zero_convention=zero_convention,
        )
        model = _load_model(cfg)
        rng = np.random.default_rng(cfg.seed)
        z = _parse_path(path_text, model, cfg, rng)
        d = int(cfg.attn_d)
        params = random_layer_params(
            rng, d, int(cfg.attn_heads), activation=cfg.attn_activation,
            misc=MiscToggles(residual=True, layernorm=True, ffn=True),
        )
    except ValueError as exc:
        _fail(EXIT_INPUT, str(exc))

    emb = rng.standard_normal((d, model.m + 1)) / np.sqrt(d)
    pe = positional_encoding(d, len(z))
    sig0 = embed_sequence(emb, pe, z)
    layers = layer_stack(params, sig0, int(cfg.attn_layers))
    tables = [predictions(emb, sig) for sig in layers]

    out = _out_dir(cfg)
    rows = []
    for ell, table in enumerate(tables):
        for t in range(len(z)):
            rows.extend([ell, t + 1, tok, repr(float(table[tok, t]))] for tok in range(model.m + 1))
    _write_csv(out / "layer_predictions.csv", cfg, ["layer", "t", "z", "prob"], rows)

    final = tables[-1]
    kl_rows = [
        [ell, repr(kl_divergence_bar(final, tables[ell]))] for ell in range(len(tables) - 1)
    ]
    _write_csv(out / "layer_divergence.csv", cfg, ["layer", "kl_bar"], kl_rows)

    # cross-path equality of the bilinear form against the plain layer, misc off
    bare = random_layer_params(rng, d, int(cfg.attn_heads), activation=cfg.attn_activation)
    sig = rng.standard_normal((d, len(z)))
    bare_out = layer_forward(bare, sig)
    tol = float(cfg.tolerances["eq8"])
    worst = 0.0
    for t in range(1, len(z) + 1):
        f = rng.standard_normal(d)
        worst = max(worst, abs(float(f @ bare_out[:, t - 1]) - simplified_form(bare, sig, t, f)))
    _write_json(
        out / "attention_report.json",
        cfg,
        {
            "prompt": prefix_string(z),
            "layers": int(cfg.attn_layers),
            "bilinear_equality_error": worst,
            "bilinear_equality_ok": bool(worst <= tol),
        },
    )
    if worst > tol:
        _fail(EXIT_INVARIANT, f"bilinear-form equality error {worst:.3e} exceeds tolerance {tol:.1e}")
    click.echo(f"attention demo wrote {int(cfg.attn_layers)} layer tables; bilinear equality error {worst:.3e}")
    sys.exit(EXIT_OK)


if __name__ == "__main__":
    main()
