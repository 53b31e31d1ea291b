"""Command-line front end: campaign runner and two standalone calculators.

    qkdnet run --config PATH [--duration S] [--seed N] [--out DIR]
    qkdnet keylength --lver N --loss-db X --mu X --qber X --leak N
    qkdnet epsilon --nodes N

Exit codes: 0 ok, 2 configuration error, 3 link abort, 4 authentication
failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import os
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .authchan import Direction, flip_byte_tamper
from .keycore import SecurityParams, compose_epsilon
from .linksim import DEFAULT_WINDOW_S, PHASE_LINK, POLARIZATION_LINK, PRNG_ALGORITHM, LinkParams
from .netnode import Network, RelayPath
from .pipeline import LinkPipeline, LinkStats, LinkStatus
from .privacy import EstimateInvalidError, QberAbort, estimate_q1, estimate_y1, secret_key_length
from .linksim import transmittance_from_db

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ABORT = 3
EXIT_AUTH = 4

log = logging.getLogger("qkdnet")


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str = "<config>"):
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)
        self.line = line


@dataclass(frozen=True)
class LinkSpec:
    params: LinkParams
    endpoints: tuple[str, str]


@dataclass(frozen=True)
class TamperSpec:
    link: str
    direction: str = "a_to_b"
    frame_index: int = 0
    byte_offset: int = 0


DEFAULT_LINKS = (
    LinkSpec(replace(POLARIZATION_LINK, name="A"), ("node1", "node2")),
    LinkSpec(replace(PHASE_LINK, name="B"), ("node2", "node3")),
)


@dataclass(frozen=True)
class RunConfig:
    links: tuple = DEFAULT_LINKS
    security: SecurityParams = field(default_factory=SecurityParams)
    sim_duration_s: float = 21600.0
    master_seed: int = 1
    output_dir: str = "qkdnet-run"
    window_s: float = DEFAULT_WINDOW_S
    renewal_requests: int = 20
    renewal_key_bits: int = 256
    tamper: TamperSpec | None = None

    def __post_init__(self):
        if self.sim_duration_s < 0:
            raise ConfigError("duration_s must be non-negative")
        if self.window_s <= 0:
            raise ConfigError("window_s must be positive")
        if not 0 <= self.master_seed < 2 ** 64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.renewal_requests < 0 or self.renewal_key_bits < 1:
            raise ConfigError("renewal settings out of range")
        chain_nodes(self.links)
        names = [ln.params.name for ln in self.links]
        if len(set(names)) != len(names):
            raise ConfigError("link names must be unique")
        if self.tamper is not None and self.tamper.link not in names:
            raise ConfigError(f"adversary targets unknown link {self.tamper.link!r}")

    def to_text(self) -> str:
        out = ["[run]",
               f"duration_s = {self.sim_duration_s!r}",
               f"seed = {self.master_seed}",
               f"output_dir = {self.output_dir}",
               f"window_s = {self.window_s!r}",
               f"renewal_requests = {self.renewal_requests}",
               f"renewal_key_bits = {self.renewal_key_bits}",
               "",
               "[security]",
               f"eps_ver = {self.security.eps_ver!r}",
               f"eps_pa = {self.security.eps_pa!r}",
               f"l_auth = {self.security.l_auth}"]
        for ln in self.links:
            p = ln.params
            out += ["", f"[link {p.name}]", f"endpoints = {ln.endpoints[0]}, {ln.endpoints[1]}"]
            out += [f"{k} = {getattr(p, k)!r}" for k in _LINK_KEYS]
        if self.tamper is not None:
            out += ["", "[adversary]"] + [f"{f.name} = {getattr(self.tamper, f.name)}"
                                          for f in fields(TamperSpec)]
        return "\n".join(out) + "\n"

    def as_dict(self) -> dict:
        return {
            "sim_duration_s": self.sim_duration_s, "master_seed": self.master_seed,
            "output_dir": self.output_dir, "window_s": self.window_s,
            "renewal_requests": self.renewal_requests, "renewal_key_bits": self.renewal_key_bits,
            "security": {"eps_ver": self.security.eps_ver, "eps_pa": self.security.eps_pa,
                         "l_auth": self.security.l_auth},
            "links": [dict(ln.params.as_dict(), endpoints=list(ln.endpoints)) for ln in self.links],
            "adversary": asdict(self.tamper) if self.tamper else None,
        }


_LINK_KEYS = ("loss_db", "mu", "sifted_rate", "qber_mean", "qber_jitter", "distance_km")


def chain_nodes(links) -> list[str]:
    """Nodes of the chain formed by ``links`` in order from one end."""
    if not links:
        raise ConfigError("at least one link is required")
    adj: dict[str, list[str]] = {}
    for ln in links:
        a, b = ln.endpoints
        if a == b:
            raise ConfigError(f"link {ln.params.name} connects {a} to itself")
        adj.setdefault(a, []).append(b)
        adj.setdefault(b, []).append(a)
    if any(len(v) > 2 for v in adj.values()) or len(adj) != len(links) + 1:
        raise ConfigError("link endpoints do not form a chain")
    ends = sorted(n for n, v in adj.items() if len(v) == 1)
    order, prev = [ends[0]], None
    while len(order) < len(adj):
        nxt = [n for n in adj[order[-1]] if n != prev]
        if not nxt:
            break
        prev = order[-1]
        order.append(nxt[0])
    if len(order) != len(adj):
        raise ConfigError("link endpoints do not form a connected chain")
    return order


_LINK_SECTION = re.compile(r"^link\s+(\S+)$")


def _locate(text: str, section: str, key: str | None = None) -> int | None:
    current = None
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if key is None and current == section:
                return no
        elif key is not None and current == section and "=" in line:
            if line.split("=", 1)[0].strip().lower() == key:
                return no
    return None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse ``key = value`` lines grouped under ``[section]`` headers."""
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",),
                                   inline_comment_prefixes=("#",), strict=True,
                                   empty_lines_in_values=False)
    try:
        cp.read_string(text, source=source)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("setting outside any [section]", exc.lineno, source) from None
    except configparser.ParsingError as exc:
        lineno, line = exc.errors[0]
        raise ConfigError(f"expected key = value or [section], got {line}", lineno, source) from None
    except configparser.Error as exc:
        msg = exc.message.splitlines()[0].split("]: ", 1)[-1]
        raise ConfigError(msg, getattr(exc, "lineno", None), source) from None

    def conv(section, key, kind):
        raw = cp[section][key]
        try:
            return kind(raw)
        except ValueError:
            raise ConfigError(f"{key} = {raw!r} is not a valid {kind.__name__}",
                              _locate(text, section, key), source) from None

    def check_keys(section, allowed):
        for key in cp[section]:
            if key not in allowed:
                raise ConfigError(f"unknown key {key!r} in [{section}]",
                                  _locate(text, section, key), source)

    kw = {}
    links = []
    security = {}
    tamper = None
    for section in cp.sections():
        line = _locate(text, section)
        if section == "run":
            spec = {"duration_s": ("sim_duration_s", float), "seed": ("master_seed", int),
                    "output_dir": ("output_dir", str), "window_s": ("window_s", float),
                    "renewal_requests": ("renewal_requests", int),
                    "renewal_key_bits": ("renewal_key_bits", int)}
            check_keys(section, spec)
            for key, (name, kind) in spec.items():
                if key in cp[section]:
                    kw[name] = conv(section, key, kind)
        elif section == "security":
            spec = {"eps_ver": float, "eps_pa": float, "l_auth": int}
            check_keys(section, spec)
            security = {k: conv(section, k, t) for k, t in spec.items() if k in cp[section]}
        elif section == "adversary":
            spec = {"link": str, "direction": str, "frame_index": int, "byte_offset": int}
            check_keys(section, spec)
            tamper = TamperSpec(**{k: conv(section, k, t) for k, t in spec.items()
                                   if k in cp[section]}) if "link" in cp[section] else None
            if tamper is None:
                raise ConfigError("[adversary] needs a link", line, source)
            if tamper.direction not in {d.value for d in Direction}:
                raise ConfigError(f"unknown direction {tamper.direction!r}",
                                  _locate(text, section, "direction"), source)
        elif m := _LINK_SECTION.match(section):
            check_keys(section, set(_LINK_KEYS) | {"endpoints"})
            if "endpoints" not in cp[section]:
                raise ConfigError(f"[{section}] needs endpoints = NODE, NODE", line, source)
            ends = tuple(x.strip() for x in cp[section]["endpoints"].split(","))
            if len(ends) != 2 or not all(ends):
                raise ConfigError("endpoints must name two nodes",
                                  _locate(text, section, "endpoints"), source)
            values = {k: conv(section, k, float) for k in _LINK_KEYS if k in cp[section]}
            missing = {"loss_db", "mu", "sifted_rate", "qber_mean"} - values.keys()
            if missing:
                raise ConfigError(f"[{section}] lacks {', '.join(sorted(missing))}", line, source)
            try:
                links.append(LinkSpec(LinkParams(name=m.group(1), **values), ends))
            except ValueError as exc:
                raise ConfigError(str(exc), line, source) from None
        else:
            raise ConfigError(f"unknown section [{section}]", line, source)
    try:
        if security:
            kw["security"] = SecurityParams(**security)
        if links:
            kw["links"] = tuple(links)
        return RunConfig(tamper=tamper, **kw)
    except ConfigError as exc:
        raise ConfigError(str(exc).split(": ", 1)[-1], None, source) from None
    except ValueError as exc:
        raise ConfigError(str(exc), None, source) from None


def load_config(path: str | os.PathLike) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read config: {exc}", None, str(p)) from None
    return parse_config(text, str(p))


@dataclass
class CampaignResult:
    exit_code: int
    stats: list
    epsilon: dict
    waits: list
    output_dir: Path


def _run_one(args) -> LinkStats:
    spec, security, seed, duration, window_s, tamper = args
    hook = None
    if tamper is not None:
        hook = flip_byte_tamper(Direction(tamper.direction), tamper.frame_index,
                                tamper.byte_offset)
    return LinkPipeline(spec.params, security, seed=seed, window_s=window_s,
                        tamper=hook).run(duration)


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return f"{x:.10g}"
    return str(x)


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def run_campaign(config: RunConfig, jobs: int | None = None) -> CampaignResult:
    """Run every link's pipeline, then the renewal service, and write the artefacts."""
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(config.master_seed).spawn(len(config.links) + 1)
    work = [(ln, config.security, seeds[i], config.sim_duration_s, config.window_s,
             config.tamper if config.tamper and config.tamper.link == ln.params.name else None)
            for i, ln in enumerate(config.links)]
    jobs = min(len(work), os.cpu_count() or 1) if jobs is None else jobs
    if jobs > 1 and config.sim_duration_s > 0:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            stats = list(pool.map(_run_one, work))
    else:
        stats = [_run_one(w) for w in work]

    code = EXIT_OK
    for st in stats:
        if st.status is LinkStatus.AUTH_FAILED:
            log.error("link %s: %s", st.name, st.reason)
            code = EXIT_AUTH
        elif st.status is LinkStatus.ABORTED:
            log.error("link %s aborted: %s", st.name, st.reason)
            code = max(code, EXIT_ABORT) if code != EXIT_AUTH else code

    nodes = chain_nodes(config.links)
    path = RelayPath(tuple(nodes))
    report = compose_epsilon(config.security, len(path))
    epsilon = dict(report.as_dict(), eps_ver=config.security.eps_ver,
                   eps_pa=config.security.eps_pa, eps_auth=config.security.eps_auth,
                   l_auth=config.security.l_auth, path=nodes)

    # key renewal between the chain ends, each link supplying key at the
    # secret rate it achieved in this campaign
    waits = []
    net = Network(np.random.default_rng(seeds[-1]))
    for ln, st in zip(config.links, stats):
        net.add_link(*ln.endpoints, rate_bps=st.secret_rate if st.status is LinkStatus.OK else 0.0)
    if code == EXIT_OK and all(st.secret_rate > 0 for st in stats):
        for i in range(config.renewal_requests):
            _, wait = net.request_renewal_key((nodes[0], nodes[-1]), config.renewal_key_bits)
            waits.append((i, net.now, wait))

    _write_csv(out / "qber_timeseries.csv",
               ["link", "window", "start_s", "qber_process", "qber_realized", "qber_estimated",
                "sifted_bits"],
               [(st.name, w.index, w.start_s, w.qber_process, w.qber_realized, w.qber_estimated,
                 w.sifted_bits) for st in stats for w in st.windows])
    _write_csv(out / "rates.csv",
               ["link", "status", "duration_s", "sifted_bits", "verified_bits", "secret_bits",
                "sifted_rate_bps", "verified_rate_bps", "secret_rate_bps", "leak_ec",
                "frames", "failed_frames", "blocks", "discarded_blocks"],
               [(st.name, st.status.value, st.duration_s, st.sifted_bits, st.verified_bits,
                 st.secret_bits, st.rate(st.sifted_bits), st.rate(st.verified_bits),
                 st.secret_rate, st.leak_ec, st.frames, st.failed_frames, st.blocks,
                 st.discarded_blocks) for st in stats])
    _write_csv(out / "renewal.csv", ["request", "src", "dst", "time_s", "wait_s"],
               [(i, nodes[0], nodes[-1], t, w) for i, t, w in waits])
    (out / "epsilon.json").write_text(json.dumps(epsilon, indent=2) + "\n", encoding="utf-8")
    meta = {
        "version": __version__,
        "master_seed": config.master_seed,
        "prng": PRNG_ALGORITHM,
        "exit_code": code,
        "links": {st.name: {"status": st.status.value, "reason": st.reason} for st in stats},
        "config": config.as_dict(),
        "config_text": config.to_text(),
    }
    (out / "run_meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return CampaignResult(code, stats, epsilon, [w for _, _, w in waits], out)


def _cmd_run(args) -> int:
    try:
        config = load_config(args.config)
        overrides = {}
        if args.duration is not None:
            overrides["sim_duration_s"] = args.duration
        if args.seed is not None:
            overrides["master_seed"] = args.seed
        if args.out is not None:
            overrides["output_dir"] = args.out
        config = replace(config, **overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    result = run_campaign(config, jobs=args.jobs)
    for st in result.stats:
        print(f"{st.name}: {st.status.value} sifted={st.sifted_bits} verified={st.verified_bits} "
              f"secret={st.secret_bits} R_sec={st.secret_rate:.2f} bit/s")
    if result.waits:
        print(f"renewal: mean wait {np.mean(result.waits):.2f} s over {len(result.waits)} requests")
    print(f"eps_qkdnet={result.epsilon['eps_qkdnet']:.4g}  outputs in {result.output_dir}")
    return result.exit_code


def _cmd_keylength(args) -> int:
    try:
        est = estimate_y1(transmittance_from_db(args.loss_db), args.mu)
        q1 = estimate_q1(args.qber, est.y1_hat)
    except QberAbort as exc:
        print(f"abort: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except EstimateInvalidError as exc:
        print(f"abort: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(secret_key_length(args.lver, est.y1_hat, q1, args.leak, args.eps_pa))
    return EXIT_OK


def _cmd_epsilon(args) -> int:
    try:
        params = SecurityParams(eps_ver=args.eps_ver, eps_pa=args.eps_pa, l_auth=args.l_auth)
        report = compose_epsilon(params, args.nodes)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps(dict(report.as_dict(), eps_auth=params.eps_auth), indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qkdnet", description="QKD post-processing and trusted-node network simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a simulated campaign")
    run.add_argument("--config", required=True)
    run.add_argument("--duration", type=float)
    run.add_argument("--seed", type=int)
    run.add_argument("--out")
    run.add_argument("--jobs", type=int, help="link pipelines run in parallel (default: one per link)")
    run.set_defaults(func=_cmd_run)

    kl = sub.add_parser("keylength", help="secret key length of one verified block")
    kl.add_argument("--lver", type=int, required=True)
    kl.add_argument("--loss-db", type=float, required=True)
    kl.add_argument("--mu", type=float, required=True)
    kl.add_argument("--qber", type=float, required=True)
    kl.add_argument("--leak", type=int, required=True)
    kl.add_argument("--eps-pa", type=float, default=1e-12)
    kl.set_defaults(func=_cmd_keylength)

    ep = sub.add_parser("epsilon", help="composite failure probability of an N-node chain")
    ep.add_argument("--nodes", type=int, required=True)
    ep.add_argument("--eps-ver", type=float, default=2e-11)
    ep.add_argument("--eps-pa", type=float, default=1e-12)
    ep.add_argument("--l-auth", type=int, default=40)
    ep.set_defaults(func=_cmd_epsilon)
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
