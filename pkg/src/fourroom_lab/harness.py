"""Experiment orchestration: named recipes, multi-seed sweeps, aggregation.

An experiment is a recipe (which training configurations to run) at a scale
(``desk`` fits on a workstation in hours; ``paper`` is the full-size setup)
over a list of seeds. Task sets are constructed once per recipe from a
pinned seed and shared by every configuration and seed; every run writes
into its own directory and is skipped on re-execution when its recorded
config hash matches (idempotent resume). Runs execute in parallel worker
processes with single-threaded BLAS pinned for bit-reproducibility.

Probe recipes consume the decay-sweep checkpoints of the same output root
and run their dependency first if it is missing.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from multiprocessing import get_context
from pathlib import Path

import numpy as np

RECIPES = ("decay_sweep", "sa_uniform", "probe", "small_net", "single_task_sanity")
SCALES = ("desk", "paper")

# taskset construction seeds, pinned per recipe for reproducibility
TASKSET_SEEDS = {
    "decay_sweep": 20240,
    "sa_uniform": 20241,
    "small_net": 20242,
    "single_task_sanity": 20243,
}

AGGREGATE_HEADER = "config_id,env_step,metric,mean,ci_lo,ci_hi,n_seeds"
AGGREGATE_METRICS = (
    "epsilon",
    "train_return",
    "test100_return",
    "test0_return",
    "optimality_fraction",
    "loss",
)


@dataclass(frozen=True)
class ExperimentSpec:
    recipe: str
    scale: str = "desk"
    seeds: tuple[int, ...] = tuple(range(10))
    out_dir: str = "experiments"
    jobs: int = 2
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.recipe not in RECIPES:
            raise ValueError(f"unknown recipe {self.recipe!r}; choose from {RECIPES}")
        if self.scale not in SCALES:
            raise ValueError(f"scale must be desk or paper, got {self.scale!r}")
        if not self.seeds:
            raise ValueError("need at least one seed")

    @property
    def recipe_dir(self) -> Path:
        return Path(self.out_dir) / self.recipe


@dataclass(frozen=True)
class RunDef:
    """One unit of work: a training run or a probe fine-tune."""

    kind: str  # "train" | "probe"
    config_id: str
    seed: int
    train_overrides: dict = field(default_factory=dict)
    # probe runs only:
    probe_variant: str = ""
    source_config_id: str = ""

    def run_dir(self, recipe_dir: Path) -> Path:
        return recipe_dir / "runs" / self.config_id / f"seed{self.seed}"


def _decay_durations(scale: str) -> list[int]:
    return [20_000, 200_000] if scale == "desk" else [50_000, 100_000, 200_000, 300_000, 500_000]


def _base_train_overrides(spec: ExperimentSpec) -> dict:
    if spec.scale == "desk":
        base = dict(total_steps=200_000, buffer_capacity=200_000, variant="small")
    else:
        base = dict(total_steps=500_000, buffer_capacity=500_000, variant="large")
    base.update(spec.overrides)
    return base


def recipe_runs(spec: ExperimentSpec) -> tuple[int, int, list[RunDef]]:
    """(taskset seed, train-set size, run definitions) for a spec."""
    base = _base_train_overrides(spec)
    runs: list[RunDef] = []
    n_tasks = 40

    if spec.recipe in ("decay_sweep", "small_net"):
        # The paper-scale decay sweep uses the large network; small_net is
        # the same sweep on the small one. At desk scale both use the small
        # network, so the recipes coincide apart from their output roots.
        if spec.recipe == "small_net":
            base["variant"] = "small"
        for d in _decay_durations(spec.scale):
            o = dict(base, eps_decay_steps=min(d, base["total_steps"]), config_id=f"decay{d}")
            runs.extend(RunDef("train", o["config_id"], s, o) for s in spec.seeds)
    elif spec.recipe == "sa_uniform":
        if spec.scale == "desk":
            base.update(total_steps=400_000, buffer_capacity=200_000, eps_decay_steps=200_000)
        else:
            base.update(total_steps=1_000_000, buffer_capacity=500_000, eps_decay_steps=500_000)
        base.update(spec.overrides)
        for sampler in ("buffer_uniform", "sa_uniform"):
            o = dict(base, sampler=sampler, config_id=sampler)
            runs.extend(RunDef("train", o["config_id"], s, o) for s in spec.seeds)
    elif spec.recipe == "single_task_sanity":
        n_tasks = 1
        base = dict(
            total_steps=100_000, buffer_capacity=100_000, variant="small",
            eps_decay_steps=20_000, config_id="single_task",
        )
        base.update(spec.overrides)
        runs.extend(RunDef("train", "single_task", s, base) for s in spec.seeds)
    elif spec.recipe == "probe":
        sources = [20_000, 200_000] if spec.scale == "desk" else [50_000, 500_000]
        for d in sources:
            for variant in ("probe_a", "probe_b"):
                cid = f"{variant}_src{d}"
                runs.extend(
                    RunDef("probe", cid, s, dict(spec.overrides), probe_variant=variant,
                           source_config_id=f"decay{d}")
                    for s in spec.seeds
                )

    taskset_seed = TASKSET_SEEDS.get(spec.recipe, TASKSET_SEEDS["decay_sweep"])
    return taskset_seed, n_tasks, runs


def _config_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _file_sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


def ensure_task_files(recipe_dir: Path, taskset_seed: int, n_tasks: int) -> dict[str, Path]:
    from . import tasksets
    from .gridworld import save_tasks

    task_dir = recipe_dir / "tasks"
    task_dir.mkdir(parents=True, exist_ok=True)
    paths = {label: task_dir / f"{label}.tasks" for label in ("train", "test100", "test0")}
    if not all(p.exists() for p in paths.values()):
        train, t100, t0 = tasksets.build_task_sets(seed=taskset_seed, n=n_tasks)
        save_tasks(paths["train"], train)
        save_tasks(paths["test100"], t100)
        save_tasks(paths["test0"], t0)
    return paths


def _worker(payload: dict) -> dict:
    """Executes one run in a spawned process; returns a status record."""
    os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
    os.environ.setdefault("OMP_NUM_THREADS", "1")
    from . import probe as probe_mod
    from . import qnet
    from .gridworld import load_tasks
    from .trainer import TrainConfig, train_run

    run_dir = Path(payload["run_dir"])
    try:
        train_tasks = load_tasks(payload["tasks"]["train"])
        test100 = load_tasks(payload["tasks"]["test100"])
        test0 = load_tasks(payload["tasks"]["test0"])
        if payload["kind"] == "train":
            config = TrainConfig(seed=payload["seed"], **payload["train_overrides"])
            summary = train_run(config, train_tasks, test100, test0, out_dir=run_dir)
        else:
            checkpoint = qnet.load_checkpoint(payload["source_checkpoint"])
            rng = np.random.default_rng(np.random.SeedSequence([payload["seed"], 9341]))
            dataset = probe_mod.collect_rollouts(checkpoint, train_tasks, n=4_000, rng=rng)
            probe_net = probe_mod.build_probe(
                checkpoint, payload["probe_variant"],
                np.random.default_rng(np.random.SeedSequence([payload["seed"], 4177])),
            )
            ft = probe_mod.FinetuneConfig(
                seed=payload["seed"], variant=payload["probe_variant"],
                config_id=payload["config_id"],
            )
            summary = probe_mod.finetune(
                probe_net, dataset, ft, train_tasks, test100, test0, out_dir=run_dir,
            )
        done = {
            "config_hash": payload["config_hash"],
            "final": summary["final"],
            "gradient_steps": summary["gradient_steps"],
        }
        (run_dir / "done.json").write_text(json.dumps(done, indent=2, sort_keys=True) + "\n")
        return {"run": payload["name"], "status": "done", "config_hash": payload["config_hash"]}
    except Exception:
        return {
            "run": payload["name"],
            "status": "failed",
            "config_hash": payload["config_hash"],
            "error": traceback.format_exc(),
        }


def run_experiment(spec: ExperimentSpec, echo=print) -> dict:
    """Execute a recipe; idempotent per run. Returns the manifest dict."""
    recipe_dir = spec.recipe_dir
    recipe_dir.mkdir(parents=True, exist_ok=True)

    if spec.recipe == "probe":
        dep = ExperimentSpec(
            recipe="decay_sweep", scale=spec.scale, seeds=spec.seeds,
            out_dir=spec.out_dir, jobs=spec.jobs,
        )
        dep_manifest = run_experiment(dep, echo=echo)
        if any(r["status"] != "done" for r in dep_manifest["runs"].values()):
            raise RuntimeError("decay_sweep dependency has failed runs; cannot fine-tune probes")
        task_paths = {
            label: Path(spec.out_dir) / "decay_sweep" / "tasks" / f"{label}.tasks"
            for label in ("train", "test100", "test0")
        }
    else:
        taskset_seed, n_tasks, _ = recipe_runs(spec)
        task_paths = ensure_task_files(recipe_dir, taskset_seed, n_tasks)

    _, _, runs = recipe_runs(spec)
    task_shas = {label: _file_sha(p) for label, p in task_paths.items()}

    payloads = []
    statuses: dict[str, dict] = {}
    for rd in runs:
        run_dir = rd.run_dir(recipe_dir)
        payload = {
            "name": f"{rd.config_id}/seed{rd.seed}",
            "kind": rd.kind,
            "seed": rd.seed,
            "config_id": rd.config_id,
            "train_overrides": dict(rd.train_overrides, config_id=rd.config_id)
            if rd.kind == "train"
            else {},
            "probe_variant": rd.probe_variant,
            "run_dir": str(run_dir),
            "tasks": {k: str(v) for k, v in task_paths.items()},
        }
        if rd.kind == "probe":
            payload["source_checkpoint"] = str(
                recipe_dir.parent / "decay_sweep" / "runs" / rd.source_config_id
                / f"seed{rd.seed}" / "checkpoint.bin"
            )
        payload["config_hash"] = _config_hash(
            {k: payload[k] for k in ("kind", "seed", "config_id", "train_overrides", "probe_variant")}
            | {"tasks": task_shas}
        )
        done_file = run_dir / "done.json"
        if done_file.exists():
            done = json.loads(done_file.read_text())
            if done.get("config_hash") == payload["config_hash"]:
                statuses[payload["name"]] = {
                    "run": payload["name"], "status": "done",
                    "config_hash": payload["config_hash"], "cached": True,
                }
                continue
        run_dir.mkdir(parents=True, exist_ok=True)
        payloads.append(payload)

    if payloads:
        echo(f"[{spec.recipe}] running {len(payloads)} of {len(runs)} runs "
             f"({len(statuses)} cached) with {spec.jobs} workers")
        os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
        os.environ.setdefault("OMP_NUM_THREADS", "1")
        if spec.jobs == 1:
            results = [_worker(p) for p in payloads]
        else:
            ctx = get_context("spawn")
            with ProcessPoolExecutor(max_workers=spec.jobs, mp_context=ctx) as pool:
                results = []
                for res in pool.map(_worker, payloads):
                    echo(f"[{spec.recipe}] {res['run']}: {res['status']}")
                    results.append(res)
        for res in results:
            statuses[res["run"]] = res

    manifest = {
        "spec": asdict(spec),
        "taskset_files": {k: str(v) for k, v in task_paths.items()},
        "taskset_sha": task_shas,
        "runs": {name: statuses[name] for name in sorted(statuses)},
    }
    (recipe_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    failed = [n for n, r in manifest["runs"].items() if r["status"] != "done"]
    if failed:
        for name in failed:
            echo(f"[{spec.recipe}] FAILED: {name}\n{manifest['runs'][name].get('error', '')}")
    return manifest


def read_metrics_csv(path: Path) -> dict[str, np.ndarray]:
    rows = path.read_text().splitlines()
    header = rows[0].split(",")
    cols: dict[str, list] = {h: [] for h in header}
    for line in rows[1:]:
        for h, v in zip(header, line.split(",")):
            cols[h].append(v)
    out: dict[str, np.ndarray] = {}
    for h, vals in cols.items():
        if h == "config_id":
            out[h] = np.array(vals)
        else:
            out[h] = np.array([float(v) for v in vals])
    return out


def aggregate(recipe_dir: str | Path, echo=print) -> Path:
    """Per-config mean and 95% CI per metric per eval step -> aggregate.csv.

    Normal-approximation interval (mean +/- 1.96 * sem). Single-seed groups
    emit empty CI cells with a warning. NaN losses (the pre-training row)
    are excluded from the loss aggregation.
    """
    recipe_dir = Path(recipe_dir)
    run_files = sorted(recipe_dir.glob("runs/*/seed*/metrics.csv"))
    if not run_files:
        raise FileNotFoundError(f"no metrics.csv files under {recipe_dir}/runs")
    by_config: dict[str, list[dict[str, np.ndarray]]] = {}
    for path in run_files:
        data = read_metrics_csv(path)
        by_config.setdefault(path.parent.parent.name, []).append(data)

    lines = [AGGREGATE_HEADER]
    for config_id in sorted(by_config):
        seeds = by_config[config_id]
        if len(seeds) < 2:
            echo(f"warning: config {config_id} has {len(seeds)} seed(s); CI columns left empty")
        steps = seeds[0]["env_step"]
        for data in seeds[1:]:
            if not np.array_equal(data["env_step"], steps):
                raise ValueError(f"config {config_id}: seeds disagree on eval steps")
        for metric in AGGREGATE_METRICS:
            stacked = np.stack([data[metric] for data in seeds])  # (n_seeds, n_steps)
            for j, step in enumerate(steps):
                col = stacked[:, j]
                col = col[~np.isnan(col)] if metric == "loss" else col
                if len(col) == 0:
                    continue
                mean = float(np.mean(col))
                if len(col) >= 2:
                    sem = float(np.std(col, ddof=1) / math.sqrt(len(col)))
                    lo, hi = mean - 1.96 * sem, mean + 1.96 * sem
                    ci_lo, ci_hi = repr(lo), repr(hi)
                else:
                    ci_lo = ci_hi = ""
                lines.append(
                    f"{config_id},{int(step)},{metric},{mean!r},{ci_lo},{ci_hi},{len(col)}"
                )
    out_path = recipe_dir / "aggregate.csv"
    out_path.write_text("\n".join(lines) + "\n")
    return out_path


def aggregate_lookup(path: Path) -> dict[tuple[str, int, str], dict[str, float]]:
    """aggregate.csv -> {(config_id, env_step, metric): {mean, ci_lo, ci_hi, n}}."""
    out = {}
    lines = Path(path).read_text().splitlines()
    for line in lines[1:]:
        config_id, step, metric, mean, lo, hi, n = line.split(",")
        out[(config_id, int(step), metric)] = {
            "mean": float(mean),
            "ci_lo": float(lo) if lo else math.nan,
            "ci_hi": float(hi) if hi else math.nan,
            "n": int(n),
        }
    return out


def oracle_check(n_pairs: int = 20, seed: int = 0, echo=print) -> bool:
    """Exactness checks for the brute-force oracles; True when all pass."""
    from . import gridworld, tasksets
    from .reachability import (
        greedy_return,
        optimal_values,
        oracle_qfunction,
        reachable_set,
    )
    from .tables import pair_table

    rng = np.random.default_rng(seed)
    ok = True

    worst = 0.0
    for _ in range(n_pairs):
        tid = int(rng.integers(81))
        cells = gridworld.free_cells(tid)
        goal = cells[rng.integers(len(cells))]
        vt = optimal_values(tid, goal)  # raises if |v - gamma^(d-1)| >= 1e-10
        t = vt.table
        worst = max(worst, float(np.abs(
            vt.v[t.nonterminal] - 0.99 ** (t.dist[t.nonterminal] - 1.0)
        ).max()))
        qfun = oracle_qfunction([vt])
        for i in t.nonterminal:
            cell, d = t.poses[i]
            ret, steps = greedy_return(qfun, gridworld.Task(tid, goal, cell, d))
            if ret != 1 or steps != t.dist[i]:
                echo(f"FAIL greedy rollout at pair ({tid}, {goal}) pose {t.poses[i]}")
                ok = False
    echo(f"{'PASS' if ok else 'FAIL'} value iteration vs BFS distances on {n_pairs} pairs "
         f"(max |v - g^(d-1)| = {worst:.2e}); optimal rollouts reach in d(s) steps")

    sizes_ok = True
    for _ in range(n_pairs):
        tasks = tasksets.sample_train_set(np.random.default_rng(rng.integers(2**31)), 40)
        pairs = {(t.topology_id, t.goal) for t in tasks}
        rs = reachable_set(list(tasks))
        if len(rs) != 156 * len(pairs):
            echo(f"FAIL reachable set size {len(rs)} != 156 * {len(pairs)}")
            sizes_ok = False
    echo(f"{'PASS' if sizes_ok else 'FAIL'} reachable-set size equals 156 x distinct pairs "
         f"on {n_pairs} random 40-task sets")
    return ok and sizes_ok


def grad_check(n_seeds: int = 5, coords_per_tensor: int = 24, echo=print) -> bool:
    """Finite-difference check of the full small-network loss gradient (float64).

    Central differences with h = 1e-5 on sampled coordinates of every
    parameter tensor. A coordinate whose perturbation flips any ReLU
    activation sign is skipped: the loss is not differentiable across a
    kink, so two-sided differences are not a gradient oracle there (a few
    per mille of coordinates at this scale). Everything else must agree to
    a relative error below 1e-4, per coordinate and in joint norm.
    """
    from . import autodiff, qnet, tasksets
    from .qnet import NetworkConfig
    from .tables import pair_table, to_channel_last

    h = 1e-5
    tol = 1e-4
    overall_ok = True
    for seed in range(n_seeds):
        rng = np.random.default_rng(seed)
        pset = qnet.build_network(NetworkConfig("small", dtype="float64"), rng)
        train, _, _ = tasksets.build_task_sets(seed=seed + 100, n=2)
        table = pair_table(train[0].topology_id, train[0].goal)
        poses = rng.choice(table.nonterminal, size=8, replace=False)
        x = to_channel_last(table.obs_u8[poses], np.float64)
        actions = rng.integers(0, 3, size=8)
        targets = rng.random(8)

        def loss_and_signs() -> tuple[float, np.ndarray]:
            q = qnet.q_forward_train(pset, autodiff.Tensor(x))
            pred = autodiff.gather_actions(q, np.arange(8), actions)
            loss = float(autodiff.mse_loss(pred, targets).data)
            signs = np.concatenate(
                [(a.data > 0).ravel() for a in _relu_activations(pset, x)]
            )
            return loss, signs

        def _relu_activations(pset, x):
            h_t = autodiff.Tensor(x)
            acts = []
            names = pset.config.layer_names
            for name in names:
                w, b = pset.layer(name)
                if name.startswith("conv"):
                    h_t = autodiff.conv2d_circular_cl(h_t, w, b, relu=True)
                    acts.append(h_t)
                else:
                    if h_t.data.ndim == 3:
                        h_t = autodiff.flatten(h_t)
                    h_t = autodiff.affine(h_t, w, b)
                    if name != names[-1]:
                        h_t = autodiff.relu(h_t)
                        acts.append(h_t)
            return acts

        pset.zero_grads()
        q = qnet.q_forward_train(pset, autodiff.Tensor(x))
        pred = autodiff.gather_actions(q, np.arange(8), actions)
        loss = autodiff.mse_loss(pred, targets)
        autodiff.backward(loss)

        diffs, fds = [], []
        skipped = 0
        worst_coord = 0.0
        for name in sorted(pset.params):
            t = pset.params[name]
            flat = t.data.reshape(-1)
            gflat = t.grad.reshape(-1) if t.grad is not None else np.zeros_like(flat)
            idx = rng.choice(flat.size, size=min(coords_per_tensor, flat.size), replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                lp, sp = loss_and_signs()
                flat[i] = orig - h
                lm, sm = loss_and_signs()
                flat[i] = orig
                if not np.array_equal(sp, sm):
                    skipped += 1
                    continue
                fd = (lp - lm) / (2 * h)
                a = gflat[i]
                diffs.append(a - fd)
                fds.append(fd)
                worst_coord = max(worst_coord, abs(a - fd) / max(abs(a), abs(fd), 1e-8))
        diffs = np.array(diffs)
        fds = np.array(fds)
        rel = float(np.linalg.norm(diffs) / max(np.linalg.norm(fds), 1e-12))
        ok = rel < tol and worst_coord < tol
        overall_ok &= ok
        echo(
            f"{'PASS' if ok else 'FAIL'} seed {seed}: relative gradient error {rel:.3e} "
            f"(worst coordinate {worst_coord:.3e}) over {len(fds)} coordinates, "
            f"{skipped} skipped at ReLU kinks (tolerance {tol:.0e})"
        )
    return overall_ok
