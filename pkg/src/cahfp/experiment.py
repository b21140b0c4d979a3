"""Build simulations from configs, run them, and write run artifacts."""

from __future__ import annotations

import csv
import io
import json
import logging
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, analysis
from .data import client_weights, dirichlet_partition, load_idx, synth_dataset, train_test_split
from .errors import NumericFault
from .federation import ClientState, ServerState, run_round, stream
from .nn import Architecture, Conv2d, Dense, Flatten, backward, fd_diag_hessian, init_params, mlp, sgd_step
from .pruning import CurvatureEstimate, assign_ranks, build_group_map

log = logging.getLogger(__name__)


@dataclass
class Simulation:
    config: object
    arch: Architecture
    server: ServerState
    clients: list
    test: tuple
    partition: object
    records: list = field(default_factory=list)
    noise: list = field(default_factory=list)
    keep_noise: bool = False

    def step(self):
        self.server, rec, noise = run_round(self.server, self.clients, self.arch, self.config, self.test)
        self.records.append(rec)
        if self.keep_noise:
            self.noise.append(noise)
        return rec

    def run(self, rounds=None):
        for _ in range(self.config.rounds if rounds is None else rounds):
            self.step()
        return self.records


def load_dataset(config):
    spec = config.dataset
    if spec["kind"] == "idx":
        ds = load_idx(spec["images"], spec["labels"], spec.get("num_classes"))
        if spec.get("limit"):
            ds = ds.subset(np.arange(min(int(spec["limit"]), len(ds))))
        return ds
    seed = int(stream(config.seed, "data").integers(2**63))
    return synth_dataset(spec["num_classes"], spec["dim"], spec["per_class"], spec["class_sep"], seed)


def default_architecture(ds):
    shape = ds.x.shape[1:]
    if len(shape) == 1:
        return mlp(shape[0], [32], ds.num_classes)
    c, h, w = shape
    ho, wo = (h - 5) // 2 + 1, (w - 5) // 2 + 1
    return Architecture(shape, (Conv2d(c, 4, 5, 5, 2, "relu"), Flatten(), Dense(4 * ho * wo, ds.num_classes)))


def build_simulation(config, keep_noise=False):
    ds = load_dataset(config)
    holdout_seed = int(stream(config.seed, "holdout").integers(2**63))
    train, test = train_test_split(ds, config.dataset["holdout"], holdout_seed)
    arch = Architecture.from_dict(config.architecture) if config.architecture else default_architecture(ds)
    part_seed = int(stream(config.seed, "partition").integers(2**63))
    part = dirichlet_partition(train.y, config.K, config.alpha, config.effective_min_shard, part_seed)
    p = client_weights(part)
    ratios = assign_ranks(config.K, config.ratios if config.ratios is not None else config.rank)
    clients = [ClientState(k, train.x[s], train.y[s], float(p[k]), float(ratios[k]))
               for k, s in enumerate(part.shards)]
    w0 = init_params(arch, stream(config.seed, "init"))
    server = ServerState(w0, 0, build_group_map(arch),
                         CurvatureEstimate.zeros(arch.num_params, config.curvature_beta), config.seed)
    return Simulation(config, arch, server, clients, (test.x, test.y), part, keep_noise=keep_noise)


def versions():
    import scipy

    return {"cahfp": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def save_model(path_stem, arch, w):
    stem = Path(path_stem)
    desc = {"architecture": arch.to_dict(), "num_params": arch.num_params, "dtype": "<f8",
            "values": stem.name + ".bin"}
    stem.with_suffix(".json").write_text(json.dumps(desc, indent=2))
    stem.with_suffix(".bin").write_bytes(np.asarray(w, dtype="<f8").tobytes())


def load_model(json_path):
    json_path = Path(json_path)
    desc = json.loads(json_path.read_text())
    arch = Architecture.from_dict(desc["architecture"])
    w = np.frombuffer((json_path.parent / desc["values"]).read_bytes(), dtype="<f8").astype(np.float64)
    if len(w) != arch.num_params:
        raise ValueError(f"{json_path}: {len(w)} values for {arch.num_params} parameters")
    return arch, w


@dataclass
class RunResult:
    out_dir: Path
    status: str
    records: list
    failure_round: int | None = None
    message: str = ""

    @property
    def ok(self):
        return self.status == "ok"


def run_experiment(config, out_dir=None):
    """Run one config to completion (or numeric fault) and write its artifacts."""
    out = Path(out_dir or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    sim = build_simulation(config)
    status, failure_round, message = "ok", None, ""
    try:
        for _ in range(config.rounds):
            sim.step()
    except NumericFault as exc:
        status, failure_round, message = "numeric_fault", exc.round_index, str(exc)
        log.error("run diverged: %s", exc)
    analysis.emit_metrics(sim.records, out / "metrics.csv")
    save_model(out / "model", sim.arch, sim.server.w)
    manifest = {
        "config": config.to_dict(),
        "seed": config.seed,
        "versions": versions(),
        "status": status,
        "failure_round": failure_round,
        "message": message,
        "rounds_completed": len(sim.records),
        "final_test_acc": sim.records[-1].test_acc if sim.records else None,
        "timestamps": {"started": started, "finished": time.time()},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return RunResult(out, status, sim.records, failure_round, message)


def _fmt_acc(v):
    return "False" if v == "False" else ("--" if v is None else f"{100 * v:.2f}")


def summarize(run_dirs):
    """Final accuracy table: rows (criterion, reconstruction), columns alpha.

    Cells average the runs that land in them; any diverged run marks the cell
    ``False``. Returns ``(text, csv_text)``.
    """
    cells = {}
    alphas = set()
    for d in map(Path, run_dirs):
        try:
            manifest = json.loads((d / "manifest.json").read_text())
            rows = analysis.read_metrics(d / "metrics.csv")
            cfg = manifest["config"]
            key = (cfg["criterion"], cfg["reconstruction"])
            alpha = float(cfg["alpha"])
        except (OSError, ValueError, KeyError) as exc:
            log.warning("skipping %s: %s", d, exc)
            continue
        alphas.add(alpha)
        cell = cells.setdefault(key, {}).setdefault(alpha, [])
        if manifest.get("status") != "ok" or not rows:
            cell.append("False")
        else:
            cell.append(rows[-1]["test_acc"])
    cols = sorted(alphas)
    table = []
    for key in sorted(cells):
        row = []
        for a in cols:
            vals = cells[key].get(a)
            if vals is None:
                row.append(None)
            elif "False" in vals:
                row.append("False")
            else:
                row.append(float(np.mean(vals)))
        table.append((key, row))
    header = ["criterion", "reconstruction"] + [f"alpha={a:g}" for a in cols]
    widths = [max(len(h), 12) for h in header]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    for (crit, recon), row in table:
        cells_txt = [crit, recon] + [_fmt_acc(v) for v in row]
        lines.append("  ".join(c.ljust(w) for c, w in zip(cells_txt, widths)))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for (crit, recon), row in table:
        writer.writerow([crit, recon] + ["False" if v == "False" else ("" if v is None else format(v, ".17g"))
                                         for v in row])
    return "\n".join(lines) + "\n", buf.getvalue()


ORACLE_MAX_GROUPS = 12


def oracle_architecture(ds, config):
    if config.architecture:
        arch = Architecture.from_dict(config.architecture)
        if 0 < len(build_group_map(arch)) <= ORACLE_MAX_GROUPS:
            return arch
    if ds.x.ndim == 2:
        return mlp(ds.x.shape[1], [8], ds.num_classes)
    c, h, w = ds.x.shape[1:]
    ho, wo = (h - 5) // 2 + 1, (w - 5) // 2 + 1
    return Architecture(ds.x.shape[1:], (Conv2d(c, 6, 5, 5, 2, "relu"), Flatten(), Dense(6 * ho * wo, ds.num_classes)))


def train_centralized(arch, w, x, y, steps, lr, momentum, batch_size, rng):
    v = None
    for _ in range(steps):
        b = rng.choice(len(y), size=min(batch_size, len(y)), replace=False)
        _, g = backward(arch, w, x[b], y[b])
        w, v = sgd_step(w, g, lr, momentum, v)
    return w


@dataclass
class OracleReport:
    ranking: list
    ranking_mean: float
    remainder_ratios: np.ndarray
    ranking_threshold: float = 0.8
    ratio_band: tuple = (4.0, 16.0)

    @property
    def ranking_ok(self):
        return self.ranking_mean >= self.ranking_threshold

    @property
    def remainder_ok(self):
        lo, hi = self.ratio_band
        return bool(np.all((self.remainder_ratios >= lo) & (self.remainder_ratios <= hi)))

    @property
    def ok(self):
        return self.ranking_ok and self.remainder_ok


def ranking_oracle_seeds(arch, x, y, seeds, train_steps=0, lr=0.05, momentum=0.9, batch_size=64):
    """Criterion-ranking Spearman correlation per seed (weights drawn per seed)."""
    gm = build_group_map(arch)
    out = []
    for s in seeds:
        rng = np.random.default_rng([s, 17])
        w = init_params(arch, rng)
        if train_steps:
            w = train_centralized(arch, w, x, y, train_steps, lr, momentum, batch_size, rng)
        out.append(analysis.criterion_ranking_oracle(arch, w, x, y, gm).spearman)
    return out


def remainder_check(arch, x, y, seed=0, train_steps=300, lr=0.1, momentum=0.9, batch_size=64, q_value=0.5):
    """Median remainder-shrink ratios over one-coordinate output-layer perturbations of a trained net.

    The output layer is where the loss is smooth in a ReLU net; single
    coordinates keep the diagonal curvature exact, so the remainder is third
    order. The median guards against directions whose cubic term cancels.
    """
    rng = np.random.default_rng([seed, 29])
    w = train_centralized(arch, init_params(arch, rng), x, y, train_steps, lr, momentum, batch_size, rng)
    hdiag = fd_diag_hessian(arch, w, x, y)
    last = arch.param_layers[-1]
    ratios = []
    for i in range(last.weight.start, last.weight.stop):
        q = np.zeros_like(w)
        q[i] = q_value
        ratios.append(analysis.remainder_scaling(arch, w, x, y, q * w, q, hdiag=hdiag).ratios)
    return np.median(ratios, axis=0)


def run_oracle(config, seeds=range(10), max_samples=600):
    ds = load_dataset(config)
    if len(ds) > max_samples:
        idx = np.sort(np.random.default_rng(config.seed).choice(len(ds), max_samples, replace=False))
        ds = ds.subset(idx)
    arch = oracle_architecture(ds, config)
    ranking = ranking_oracle_seeds(arch, ds.x, ds.y, seeds)
    ratios = remainder_check(arch, ds.x, ds.y, seed=config.seed)
    return OracleReport(ranking, float(np.mean(ranking)), ratios)
