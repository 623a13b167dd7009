"""Command-line entry point: verification suite, bound scans and the two converter experiments."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import Config, ConfigError, cuk_from_config, load_config
from .cuk import CukHierarchicalLoop, CukMrelationLink
from .engine import BoundConstants, asymptotic_error_bound, sample_cloud, scan_vartheta_bound, transient_error_bound
from .integrate import (
    IntegrationError,
    ReferenceController,
    ReferenceSchedule,
    SimConfig,
    ZeroPolicy,
    mrelation_input,
    simulate_hierarchical,
    simulate_mrelation,
)
from .suite import VerifySettings, run_verify
from .systems import GridSpec

log = logging.getLogger("ashc")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


# ---------------------------------------------------------------------------
# output plumbing


def _atomic(path: Path, writer) -> None:
    """Run writer(tmp_path) and rename the result into place."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    os.close(fd)
    try:
        writer(tmp)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_text_atomic(path: Path, text: str) -> None:
    def w(tmp):
        with open(tmp, "w") as fh:
            fh.write(text)

    _atomic(path, w)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config_source: str
    config_digest: str
    parameters: dict
    outcome: dict = field(default_factory=dict)
    files: list = field(default_factory=list)
    exit_status: int = EXIT_OK
    wall_time_s: float = 0.0

    def add_file(self, path: Path) -> None:
        self.files.append({"path": path.name, "sha256": sha256_file(path)})

    def write(self, out_dir: Path) -> Path:
        path = out_dir / f"{self.command}_manifest.json"
        write_text_atomic(path, json.dumps(asdict(self), indent=2, sort_keys=True, default=_jsonable) + "\n")
        return path


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


# ---------------------------------------------------------------------------
# commands


def _bound_constants(cfg: Config, d_bar: float | None = None) -> BoundConstants:
    try:
        return BoundConstants(
            c0=cfg.number("bound.c0"),
            lam=cfg.number("certificate.lambda"),
            epsilon=cfg.number("bound.epsilon"),
            d_bar=cfg.number("bound.d_bar") if d_bar is None else d_bar,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_verify(cfg: Config, args, man: RunManifest, out: Path) -> int:
    cuk = cuk_from_config(cfg, args.delta)
    settings = VerifySettings(
        grid_points=cfg.integer("verify.grid_points"),
        samples=cfg.integer("verify.samples"),
        seed=cfg.integer("verify.seed"),
        residual_tol=cfg.number("verify.residual_tol"),
        dissipation_tol=cfg.number("verify.dissipation_tol"),
        jacobian_samples=cfg.integer("verify.jacobian_samples"),
        jacobian_tol=cfg.number("verify.jacobian_tol"),
        lmi_tol=cfg.number("certificate.lmi_tol"),
        c0=cfg.number("bound.c0"),
        v_max=cfg.number("hierarchical.v_max"),
        scan_points=args.grid or cfg.integer("scan.grid_points"),
    )
    if settings.grid_points < 2 or settings.samples < 1 or settings.scan_points < 2:
        raise ConfigError("verify grids need at least 2 points and one sample")
    report = run_verify(cuk, settings)
    text = report.to_text()
    print(text, end="")
    path = out / "verify_report.txt"
    write_text_atomic(path, text)
    man.add_file(path)
    residual_names = [c.name for c in report.checks if not c.report_only and c.name not in ("lmi",)]
    man.outcome.update(
        lmi_ok=report.get("lmi").passed,
        residuals_ok=all(report.get(n).passed for n in residual_names),
        failures=report.failures,
        checks={c.name: {"passed": c.passed, "worst": c.worst, "tol": c.tol, "location": c.location,
                         "report_only": c.report_only} for c in report.checks},
        d_bar=report.get("d_bar_scan").worst,
    )
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_scan_bound(cfg: Config, args, man: RunManifest, out: Path) -> int:
    cuk = cuk_from_config(cfg, args.delta)
    n = args.grid or cfg.integer("scan.grid_points")
    if n < 2:
        raise ConfigError("--grid must be at least 2")
    policy = cfg.choice("scan.q_policy", ("zero", "least-squares"))
    lo, hi = float(cuk.maps.domain_V.lower[0]), float(cuk.maps.domain_V.upper[0])
    x_samples = None
    if policy == "least-squares":
        rng = np.random.default_rng(cfg.integer("verify.seed"))
        x_samples = [s[0] for s in sample_cloud(rng, [cuk.sample_box], 200)]
    scan = scan_vartheta_bound(cuk.maps, cuk.cert, cuk.plant.g, cuk.abstract.delta, policy,
                               GridSpec([lo], [hi], [n]), x_samples)
    path = out / f"scan_{cuk.delta_variant}.csv"
    _atomic(path, scan.to_csv)
    man.add_file(path)
    print(f"delta = {cuk.delta_variant}, q policy = {policy}, {n} grid points")
    print(f"d_bar = {scan.d_bar:.6f} at xi = {float(scan.argmax[0]):.6f}")
    man.outcome.update(d_bar=scan.d_bar, argmax=float(scan.argmax[0]), delta=cuk.delta_variant, grid=n)
    return EXIT_OK


def cmd_bound(cfg: Config, args, man: RunManifest, out: Path) -> int:
    v_inf = cfg.number("bound.v_inf") if args.vinf is None else args.vinf
    if v_inf < 0:
        raise ConfigError("--vinf must be nonnegative")
    bc = _bound_constants(cfg)
    if not bc.lam > bc.epsilon:
        raise ConfigError("bound needs lambda > epsilon")
    value = asymptotic_error_bound(bc, v_inf)
    print(f"asymptotic output-error bound: {value:.6f}  "
          f"(c0 = {bc.c0:g}, lambda = {bc.lam:g}, epsilon = {bc.epsilon:g}, d_bar = {bc.d_bar:g}, v_inf = {v_inf:g})")
    man.outcome.update(bound_value=value, v_inf=v_inf)
    if args.w0 is not None:
        if args.w0 < 0:
            raise ConfigError("--w0 must be nonnegative")
        times = args.times or [0.0, 0.5, 1.0, 2.0, 5.0, 10.0]
        curve = []
        print(f"{'t':>10}  {'transient bound':>18}")
        for t in times:
            if t < 0:
                raise ConfigError("--times must be nonnegative")
            b = transient_error_bound(bc, args.w0, t, v_inf)
            curve.append([t, b])
            print(f"{t:>10.4g}  {b:>18.6f}")
        man.outcome.update(w0=args.w0, transient=curve)
    return EXIT_OK


def _decimation(cfg: Config, args) -> int:
    if args.full_resolution:
        return 1
    d = cfg.integer("output.decimation")
    if d < 1:
        raise ConfigError("output.decimation must be >= 1")
    return d


def cmd_sim_hier(cfg: Config, args, man: RunManifest, out: Path) -> int:
    cuk = cuk_from_config(cfg, args.delta)
    decimation = _decimation(cfg, args)
    section = "hierarchical"
    xi0 = cfg.number(f"{section}.xi0")
    x0_raw = cfg.get(f"{section}.x0")
    if x0_raw == "manifold":
        x0 = None
    else:
        x0 = cfg.vector(f"{section}.x0", 4)
    policy_name = cfg.choice(f"{section}.policy", ("reference", "zero"))
    saturate = cfg.get(f"{section}.saturate")
    if not isinstance(saturate, bool):
        raise ConfigError(f"{section}.saturate must be true or false")
    try:
        sim = SimConfig(t_end=cfg.number(f"{section}.t_end"), step=cfg.number(f"{section}.step"),
                        xi0=(xi0,), x0=x0, policy=policy_name)
        if policy_name == "reference":
            sched = ReferenceSchedule(
                tuple(cfg.vector(f"{section}.targets")),
                dwell=cfg.number(f"{section}.dwell"),
                kp=cfg.number(f"{section}.kp"),
                v_max=cfg.number(f"{section}.v_max"),
                output_interval=(-cuk.params.y_extreme, 0.0),
            )
            policy = ReferenceController(sched, cuk.kappa_inverse, cuk.delta)
        else:
            policy = ZeroPolicy()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if not cuk.maps.domain_V.contains([xi0]):
        raise ConfigError(f"{section}.xi0 = {xi0} lies outside the abstraction domain")
    fast = cuk.p4_offset == 0.0 and cuk.m_root == "principal"
    loop = CukHierarchicalLoop(cuk, policy, saturate) if fast else None
    res = simulate_hierarchical(sim, cuk.plant, cuk.abstract, cuk.maps, cuk.cert, cuk.interface, policy,
                                saturate=saturate, loop=loop)

    v_bound = cfg.number(f"{section}.v_max") if policy_name == "reference" else 0.0
    bc = _bound_constants(cfg)
    W0 = float(res.W[0])
    bound = asymptotic_error_bound(bc, v_bound) + float(np.sqrt(W0 / bc.c0))
    path = out / "sim_hier.csv"
    _atomic(path, lambda p: res.to_csv(p, decimation))
    man.add_file(path)
    summary = res.summary()
    u_lo, u_hi = cuk.interface.saturation or (0.0, 1.0)
    u_ok = bool(summary["u_min"] >= u_lo and summary["u_max"] <= u_hi)
    within = res.max_abs_error <= bound
    man.outcome.update(
        summary, bound_value=bound, max_error=res.max_abs_error, within_bound=within, u_in_range=u_ok,
        margin=bound / res.max_abs_error if res.max_abs_error > 0 else None, W_min=float(res.W.min()),
        warnings=res.warnings,
    )
    print(f"max |e_y| = {res.max_abs_error:.6g}  bound = {bound:.6g}  "
          f"u in [{summary['u_min']:.4f}, {summary['u_max']:.4f}]  "
          f"saturations = {res.saturation_count}  clamps = {res.clamp_count}")
    ok = within and u_ok and res.certified
    return EXIT_OK if ok else EXIT_FAIL


def cmd_sim_mrel(cfg: Config, args, man: RunManifest, out: Path) -> int:
    cuk = cuk_from_config(cfg, args.delta)
    decimation = _decimation(cfg, args)
    section = "mrelation"
    x0 = cfg.vector(f"{section}.x0", 4)
    kind = cfg.choice(f"{section}.input", ("test-signal", "constant"))
    if kind == "test-signal":
        u_signal = mrelation_input
    else:
        u_const = cfg.number(f"{section}.u_const")
        u_signal = lambda t: u_const  # noqa: E731
    try:
        sim = SimConfig(t_end=cfg.number(f"{section}.t_end"), step=cfg.number(f"{section}.step"), x0=x0)
        xi0 = cuk.maps.m(np.asarray(x0))[0] + cfg.number(f"{section}.xi0_offset")
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    fast = cuk.p4_offset == 0.0 and cuk.m_root == "principal"
    link = CukMrelationLink(cuk, u_signal) if fast else None
    res = simulate_mrelation(sim, cuk.plant, cuk.abstract, cuk.maps, u_signal, xi0=[xi0], link=link)
    match_tol = cfg.number(f"{section}.match_tol")
    manifold_tol = cfg.number(f"{section}.manifold_tol")
    path = out / "sim_mrel.csv"
    _atomic(path, lambda p: res.to_csv(p, decimation))
    man.add_file(path)
    summary = res.summary()
    manifold = summary.get("max_manifold_error", float("nan"))
    matched = res.max_abs_error <= match_tol
    on_manifold = manifold <= manifold_tol
    man.outcome.update(summary, xi0=xi0, max_error=res.max_abs_error, outputs_match=matched,
                       on_manifold=on_manifold, match_tol=match_tol, manifold_tol=manifold_tol,
                       warnings=res.warnings)
    print(f"max |psi - y| = {res.max_abs_error:.3e} (tol {match_tol:g})  "
          f"max |xi - m(x)| = {manifold:.3e} (tol {manifold_tol:g})  region exits = {res.region_exits}")
    if not matched:
        print("outputs do NOT match: the pair is not on the manifold xi = m(x)")
    ok = matched and on_manifold and res.region_exits == 0
    return EXIT_OK if ok else EXIT_FAIL


COMMANDS = {
    "verify": cmd_verify,
    "scan-bound": cmd_scan_bound,
    "bound": cmd_bound,
    "sim-hier": cmd_sim_hier,
    "sim-mrel": cmd_sim_mrel,
}


def _float_list(text: str) -> list:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ashc", description="Abstraction-based hierarchical control toolkit.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="TOML config (defaults to the bundled converter config)")
    common.add_argument("--out", metavar="DIR", default="ashc-out", help="output directory (default: ashc-out)")
    common.add_argument("--delta", choices=("unit", "redesigned"), help="override abstraction.delta")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", parents=[common], help="run the certificate and identity checks")
    p.add_argument("--grid", type=int, metavar="N", help="points in the d_bar scan")

    p = sub.add_parser("scan-bound", parents=[common], help="scan ||vartheta|| over the domain")
    p.add_argument("--grid", type=int, metavar="N", help="grid points (>= 2)")

    p = sub.add_parser("bound", parents=[common], help="print the output-error bound")
    p.add_argument("--vinf", type=float, metavar="X", help="sup-norm of the abstract input")
    p.add_argument("--w0", type=float, metavar="W", help="initial simulation-function value for the transient curve")
    p.add_argument("--times", type=_float_list, metavar="T1,T2,...", help="times for the transient curve")

    for name, what in (("sim-hier", "hierarchical control experiment"), ("sim-mrel", "m-relation experiment")):
        p = sub.add_parser(name, parents=[common], help=what)
        p.add_argument("--full-resolution", action="store_true", help="write every integration step")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = Path(args.out)
    t0 = time.perf_counter()
    try:
        cfg = load_config(args.config)
        man = RunManifest(args.command, cfg.source, cfg.digest, cfg.data)
        status = COMMANDS[args.command](cfg, args, man, out)
    except ConfigError as exc:
        print(f"ashc {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IntegrationError as exc:
        print(f"ashc {args.command}: integration failed: {exc}", file=sys.stderr)
        man.outcome.update(error=str(exc), last_good_time=exc.t)
        status = EXIT_FAIL
    man.exit_status = status
    man.outcome["ok"] = status == EXIT_OK
    man.wall_time_s = time.perf_counter() - t0
    path = man.write(out)
    log.info("manifest written to %s", path)
    return status


if __name__ == "__main__":
    sys.exit(main())
