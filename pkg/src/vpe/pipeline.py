"""Pipeline stages with run manifests.

Each stage reads upstream artifacts from the run directory, writes its own
outputs, then records a manifest (``manifests/<stage>.json``) listing every
input and output with a git-style blob hash. A stage whose manifest matches
the current config and inputs is skipped.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from pathlib import Path

import numpy as np

from . import adapt as A
from . import embed as E
from . import env
from . import policy as P
from . import teacher as TC
from . import tensor as T
from .config import config_hash, stage_rng, stage_seed

log = logging.getLogger(__name__)

STAGES = ("sample-family", "train-teachers", "collect", "train-q", "train-policy", "adapt", "eval", "report")

UPSTREAM = {
    "sample-family": (),
    "train-teachers": ("sample-family",),
    "collect": ("train-teachers",),
    "train-q": ("collect",),
    "train-policy": ("train-q",),
    "adapt": ("train-policy",),
    "eval": ("adapt",),
    "report": ("eval",),
}

# config sections that feed each stage (the root seed always does)
SECTIONS = {
    "sample-family": ("family",),
    "train-teachers": ("teacher",),
    "collect": ("dataset", "teacher"),
    "train-q": ("qtrain",),
    "train-policy": ("policytrain",),
    "adapt": ("adapt", "qtrain"),
    "eval": ("eval", "teacher"),
    "report": (),
}


class StageError(RuntimeError):
    pass


def git_blob_hash(path):
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def manifest_path(run_dir, stage):
    return Path(run_dir) / "manifests" / f"{stage}.json"


def read_manifest(run_dir, stage):
    p = manifest_path(run_dir, stage)
    if not p.exists():
        return None
    return json.loads(p.read_text())


def _rel(run_dir, path):
    return Path(path).relative_to(run_dir).as_posix()


def _stage_hash(cfg, stage):
    return config_hash({"seed": cfg["seed"], **{k: cfg[k] for k in SECTIONS[stage]}})


def check_upstream(run_dir, stage):
    """Upstream manifests must exist and their outputs must be unchanged on disk."""
    inputs = {}
    for up in _ancestors(stage):
        man = read_manifest(run_dir, up)
        if man is None:
            raise StageError(f"stage {stage!r} needs the outputs of {up!r}; run `vpe {up}` first")
        for rel, digest in man["outputs"].items():
            p = Path(run_dir) / rel
            if not p.exists():
                raise StageError(f"{rel} (from stage {up!r}) is missing; rerun `vpe {up}`")
            if git_blob_hash(p) != digest:
                raise StageError(f"hash mismatch: {rel} differs from the manifest of stage {up!r}; "
                                 f"rerun `vpe {up} --force`")
            inputs[rel] = digest
    return inputs


def _ancestors(stage):
    out, todo = [], list(UPSTREAM[stage])
    while todo:
        s = todo.pop(0)
        if s not in out:
            out.append(s)
            todo.extend(UPSTREAM[s])
    return sorted(out, key=STAGES.index)


def run_stage(stage, cfg, run_dir, force=False):
    """Run one stage unless an up-to-date manifest exists. Returns the manifest."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    inputs = check_upstream(run_dir, stage)
    chash = _stage_hash(cfg, stage)
    old = read_manifest(run_dir, stage)
    if old is not None and not force and old["config_hash"] == chash and old["inputs"] == inputs:
        bad = [rel for rel, digest in old["outputs"].items()
               if not (run_dir / rel).exists() or git_blob_hash(run_dir / rel) != digest]
        if bad:
            raise StageError(f"hash mismatch on resume of {stage!r}: {', '.join(bad)} changed since the "
                             f"stage ran; rerun with --force")
        log.info("%s: up to date", stage)
        return old
    t0 = time.perf_counter()
    outputs = STAGE_FUNCS[stage](cfg, run_dir)
    duration = time.perf_counter() - t0
    man = {
        "stage": stage,
        "config_hash": chash,
        "seed": cfg["seed"],
        "inputs": inputs,
        "outputs": {_rel(run_dir, p): git_blob_hash(p) for p in sorted(outputs)},
        "duration_s": round(duration, 3),
    }
    mp = manifest_path(run_dir, stage)
    mp.parent.mkdir(exist_ok=True)
    mp.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    log.info("%s: done in %.1f s", stage, duration)
    return man


def run_all(cfg, run_dir, force=False, until=None):
    for stage in STAGES:
        run_stage(stage, cfg, run_dir, force)
        if stage == until:
            break


# ---------------------------------------------------------------------------
# helpers

def _write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _write_json(path, obj):
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _disc(cfg):
    t = cfg["teacher"]
    if len(t["psi_bins"]) != len(t["psi_dot_bins"]):
        raise StageError("teacher.psi_bins and teacher.psi_dot_bins must have the same length")
    return TC.Discretization(tuple(t["psi_bins"]), tuple(t["psi_dot_bins"]), t["action_bins"])


def _teacher_paths(run_dir, split, n):
    return [Path(run_dir) / "teachers" / f"{split}_{i:03d}.vpev" for i in range(n)]


def load_teachers(cfg, run_dir, split):
    family = env.load_family(Path(run_dir) / ("family.json" if split == "train" else "test_family.json"))
    noise = cfg["teacher"]["noise_std"]
    return [TC.TeacherPolicy(TC.load_value_fn(p), params, noise)
            for p, params in zip(_teacher_paths(run_dir, split, len(family)), family)]


def load_models(run_dir):
    qf, posterior = E.load_qf_checkpoint(T.load_checkpoint(Path(run_dir) / "qf.vpec"))
    master = P.MasterPolicy.from_arrays(T.load_checkpoint(Path(run_dir) / "policy.vpec"))
    return qf, posterior, master


def selected_dims(cfg, posterior):
    a = cfg["adapt"]
    if a["dims"] is not None:
        dims = np.array(sorted(set(int(x) for x in a["dims"])))
        if dims.min() < 0 or dims.max() >= posterior.d:
            raise StageError(f"adapt.dims {a['dims']} out of range for latent dim {posterior.d}")
        return dims
    return A.snr(posterior, a["top_k"], a["snr_threshold"]).selected


def final_abs_psi(policy, params, psi0, psid0, horizon, tail=20):
    """Per-rollout mean |psi| over the last ``tail`` steps."""
    psi, _ = env.rollout_states(policy, params, horizon, psi0, psid0)
    return np.abs(psi[-tail:]).mean(axis=0)


def linear_map_correlation(X, Y):
    """|corr| between each column of ``Y`` and its least-squares fit from ``X`` (with intercept)."""
    X = np.column_stack([np.asarray(X, dtype=float), np.ones(len(X))])
    Y = np.asarray(Y, dtype=float)
    coef, *_ = np.linalg.lstsq(X, Y, rcond=None)
    pred = X @ coef
    out = []
    for k in range(Y.shape[1]):
        if np.std(pred[:, k]) == 0 or np.std(Y[:, k]) == 0:
            out.append(0.0)
        else:
            out.append(float(abs(np.corrcoef(pred[:, k], Y[:, k])[0, 1])))
    return np.array(out)


# ---------------------------------------------------------------------------
# stages

def stage_sample_family(cfg, run_dir):
    f = cfg["family"]
    train = env.sample_family(f["teachers"], stage_seed(cfg["seed"], "family", 0))
    test = env.sample_family(f["test"], stage_seed(cfg["seed"], "family", 1))
    p1, p2 = Path(run_dir) / "family.json", Path(run_dir) / "test_family.json"
    env.save_family(p1, train)
    env.save_family(p2, test)
    return [p1, p2]


def stage_train_teachers(cfg, run_dir):
    t = cfg["teacher"]
    disc = _disc(cfg)
    out = []
    for split, name in (("train", "family.json"), ("test", "test_family.json")):
        family = env.load_family(Path(run_dir) / name)
        paths = _teacher_paths(run_dir, split, len(family))
        paths[0].parent.mkdir(exist_ok=True)
        for params, path in zip(family, paths):
            vf = TC.value_iteration(params, disc, t["gamma"], t["sweeps"], t["tolerance"])
            TC.save_value_fn(path, vf)
            out.append(path)
        log.info("trained %d %s teachers", len(family), split)
    return out


def stage_collect(cfg, run_dir):
    d = cfg["dataset"]
    teachers = load_teachers(cfg, run_dir, "train")
    ds = TC.collect_dataset(teachers, d["epsilon"], d["total"], d["horizon"],
                            stage_seed(cfg["seed"], "collect"), d["val_fraction"])
    p1, p2 = Path(run_dir) / "dataset_train.vped", Path(run_dir) / "dataset_val.vped"
    TC.save_dataset(p1, p2, ds)
    return [p1, p2]


def stage_train_q(cfg, run_dir):
    ds = TC.load_dataset(Path(run_dir) / "dataset_train.vped", Path(run_dir) / "dataset_val.vped")
    config = E.TrainConfig(**cfg["qtrain"], seed=stage_seed(cfg["seed"], "train-q"))
    res = E.train_qf(ds, config)
    p1 = Path(run_dir) / "qf.vpec"
    T.save_checkpoint(p1, E.checkpoint_arrays(res.qf, res.posterior))
    d = config.latent_dim
    rows = [[r["step"], r["train_loss"], r["mse"], r["kl"], r["val_elbo"], r["val_mse"], *r["sigma"]]
            for r in res.log]
    p2 = _write_csv(Path(run_dir) / "qtrain_log.csv",
                    ["step", "train_loss", "mse", "kl", "val_elbo", "val_mse"] + [f"sigma_{k}" for k in range(d)],
                    rows)
    p3 = _write_json(Path(run_dir) / "qtrain_summary.json",
                     {"best_step": res.best_step, "initial_val_mse": res.initial_val_mse,
                      "best_val_mse": res.best_val_mse})
    return [p1, p2, p3]


def stage_train_policy(cfg, run_dir):
    ds = TC.load_dataset(Path(run_dir) / "dataset_train.vped", Path(run_dir) / "dataset_val.vped")
    qf, posterior = E.load_qf_checkpoint(T.load_checkpoint(Path(run_dir) / "qf.vpec"))
    family = env.load_family(Path(run_dir) / "family.json")
    config = P.PolicyConfig(**cfg["policytrain"], seed=stage_seed(cfg["seed"], "train-policy"))
    res = P.train_policy(ds, qf, posterior, family, config)
    p1 = Path(run_dir) / "policy.vpec"
    T.save_checkpoint(p1, res.policy.to_arrays())
    p2 = _write_csv(Path(run_dir) / "policy_eval_log.csv", ["step", "mean_return"],
                    [[r["step"], r["mean_return"]] for r in res.log])
    return [p1, p2]


def stage_adapt(cfg, run_dir):
    a = cfg["adapt"]
    qf, posterior, master = load_models(run_dir)
    test = env.load_family(Path(run_dir) / "test_family.json")
    dims = selected_dims(cfg, posterior)
    fill = posterior.mu.data.mean(axis=0) if a["pin"] == "mean" else None
    bo_cfg = A.BoConfig(**a["bo"])
    sgd_cfg = A.SgdConfig(**a["sgd"])
    objective = E.TrainConfig(**cfg["qtrain"])
    d = posterior.d
    hist_dir = Path(run_dir) / "adapt"
    hist_dir.mkdir(exist_ok=True)
    for stale in hist_dir.glob("*.csv"):  # histories from an earlier run with other options
        stale.unlink()
    outputs, records = [], []
    for j, params in enumerate(test):
        rec = {"index": j, "mass": params.mass, "kappa": params.kappa}
        if a["method"] in ("bo", "both"):
            counter = env.InteractionCounter()
            z, res = A.adapt_bo(params, master, dims, posterior, bo_cfg, stage_rng(cfg["seed"], "adapt.bo", j),
                                counter, fill)
            rec["bo"] = {"z": z.tolist(), "best_value": res.best_value, "interactions": counter.steps}
            rows = [[k, *A.embed_latent(x, dims, d, fill), v, inc] for k, x, v, inc in res.history]
            outputs.append(_write_csv(hist_dir / f"bo_history_{j:02d}.csv",
                                      ["round"] + [f"z_{k}" for k in range(d)] + ["mean_return", "incumbent"],
                                      rows))
        if a["method"] in ("sgd", "both"):
            counter = env.InteractionCounter()
            res = A.adapt_sgd(params, master, qf, posterior, sgd_cfg, stage_rng(cfg["seed"], "adapt.sgd", j),
                              counter, objective=objective)
            rec["sgd"] = {"mu": res.mu.tolist(), "interactions": counter.steps, "diverged": res.diverged}
            outputs.append(_write_csv(hist_dir / f"sgd_losses_{j:02d}.csv", ["step", "loss"],
                                      list(enumerate(res.losses, start=1))))
        log.info("adapted test MDP %d (mass %.3f, kappa %.3f)", j, params.mass, params.kappa)
        records.append(rec)
    outputs.append(_write_json(Path(run_dir) / "adapt_results.json",
                               {"dims": dims.tolist(), "pin": a["pin"], "method": a["method"], "mdps": records}))
    return outputs


def stage_eval(cfg, run_dir):
    e = cfg["eval"]
    n, horizon = e["n_rollouts"], e["horizon"]
    _, posterior, master = load_models(run_dir)
    test_teachers = load_teachers(cfg, run_dir, "test")
    results = json.loads((Path(run_dir) / "adapt_results.json").read_text())
    rows = []
    for j, (teacher, rec) in enumerate(zip(test_teachers, results["mdps"])):
        params = teacher.params
        seed = stage_seed(cfg["seed"], "eval", j)
        policies = {
            "average": A.prior_policy(master, stage_rng(cfg["seed"], "eval.prior", j), n),
            "teacher": TC.as_policy(teacher, stage_rng(cfg["seed"], "eval.teacher", j)),
        }
        if "sgd" in rec:
            policies["sgd"] = master.as_policy(np.array(rec["sgd"]["mu"]))
        if "bo" in rec:
            policies["bo"] = master.as_policy(np.array(rec["bo"]["z"]))
        for name, pol in policies.items():
            est = A.evaluate_return(params, pol, n, horizon, seed=seed)
            rows.append([j, params.mass, params.kappa, name, est.mean, est.stderr, est.n])
    outputs = [_write_csv(Path(run_dir) / "returns.csv",
                          ["mdp", "mass", "kappa", "method", "mean", "stderr", "n"], rows)]

    # master policy at each teacher MDP's posterior mean against doing nothing
    family = env.load_family(Path(run_dir) / "family.json")
    rows = []
    for i, params in enumerate(family):
        seed = stage_seed(cfg["seed"], "eval.train", i)
        mp = A.evaluate_return(params, master.as_policy(posterior.mu.data[i]), n, horizon, seed=seed)
        zp = A.evaluate_return(params, env.zero_policy, n, horizon, seed=seed)
        rows.append([i, params.mass, params.kappa, mp.mean, mp.stderr, zp.mean, zp.stderr])
    outputs.append(_write_csv(Path(run_dir) / "policy_vs_zero.csv",
                              ["mdp", "mass", "kappa", "master_mean", "master_stderr", "zero_mean", "zero_stderr"],
                              rows))

    # teacher i driven in MDP j; the diagonal is each teacher's own quality
    t = cfg["teacher"]
    teachers = load_teachers(cfg, run_dir, "train")
    starts = [env.sample_initial_states(stage_rng(cfg["seed"], "eval.teacher_quality", j), t["quality_rollouts"])
              for j in range(len(family))]
    span = np.array([env.MASS_RANGE[1] - env.MASS_RANGE[0], env.KAPPA_RANGE[1] - env.KAPPA_RANGE[0]])
    rows = []
    for i, teacher in enumerate(teachers):
        pol = TC.as_policy(teacher, stage_rng(cfg["seed"], "eval.transfer", i))
        for j, params in enumerate(family):
            err = final_abs_psi(pol, params, *starts[j], t["horizon"])
            dist = float(np.linalg.norm((np.array([teacher.params.mass - params.mass,
                                                   teacher.params.kappa - params.kappa])) / span))
            rows.append([i, j, teacher.params.mass, teacher.params.kappa, params.mass, params.kappa, dist,
                         float(err.mean()), float(err.max())])
    outputs.append(_write_csv(Path(run_dir) / "teacher_transfer.csv",
                              ["teacher", "mdp", "teacher_mass", "teacher_kappa", "mass", "kappa", "distance",
                               "mean_final_abs_psi", "max_final_abs_psi"], rows))
    return outputs


UPRIGHT_TOLERANCE = 0.25


def stage_report(cfg, run_dir):
    run_dir = Path(run_dir)
    _, posterior, _ = load_models(run_dir)
    family = env.load_family(run_dir / "family.json")
    adapt_res = json.loads((run_dir / "adapt_results.json").read_text())
    dims = np.array(adapt_res["dims"])
    rep = A.snr(posterior, cfg["adapt"]["top_k"], cfg["adapt"]["snr_threshold"])
    outputs = [_write_csv(run_dir / "snr.csv", ["dim", "snr", "sigma", "selected"],
                          [[k, rep.values[k], posterior.sigma[k], int(k in dims)] for k in range(posterior.d)])]
    mu = posterior.mu.data
    outputs.append(_write_csv(run_dir / "latent_scatter.csv",
                              ["mdp", "mass", "kappa"] + [f"mu_{k}" for k in range(posterior.d)],
                              [[i, p.mass, p.kappa, *mu[i]] for i, p in enumerate(family)]))

    returns = read_csv(run_dir / "returns.csv")
    methods = ["average", "teacher", "sgd", "bo"]
    table = {}
    for r in returns:
        table.setdefault(int(r["mdp"]), {"mass": float(r["mass"]), "kappa": float(r["kappa"])})[r["method"]] = \
            (float(r["mean"]), float(r["stderr"]))
    rows = []
    for j in sorted(table):
        t = table[j]
        cells = []
        for m in methods:
            mean, se = t.get(m, (float("nan"), float("nan")))
            cells += [mean, se]
        rows.append([j, t["mass"], t["kappa"], *cells])
    outputs.append(_write_csv(run_dir / "table1.csv",
                              ["mdp", "mass", "kappa"] + [f"{m}_{s}" for m in methods for s in ("mean", "stderr")],
                              rows))

    # plain-text summary
    strong = int(np.sum(rep.values >= 0.5 * rep.values.max()))
    truth = np.array([[p.mass, p.kappa] for p in family])
    corr = linear_map_correlation(mu[:, dims], truth)
    have = [j for j in table if "bo" in table[j]]
    bo_gt_avg = sum(table[j]["bo"][0] > table[j]["average"][0] for j in have)
    bo_ge_teacher = sum(table[j]["bo"][0] >= table[j]["teacher"][0] for j in have)
    transfer = read_csv(run_dir / "teacher_transfer.csv")
    diag = [float(r["mean_final_abs_psi"]) for r in transfer if r["teacher"] == r["mdp"]]
    off_fail = [r for r in transfer if r["teacher"] != r["mdp"]
                and float(r["mean_final_abs_psi"]) >= UPRIGHT_TOLERANCE]
    pvz = read_csv(run_dir / "policy_vs_zero.csv")
    beats_zero = sum(float(r["master_mean"]) > float(r["zero_mean"]) for r in pvz)
    interactions = [(m, rec[m]["interactions"]) for rec in adapt_res["mdps"] for m in ("bo", "sgd") if m in rec]

    lines = [
        f"teachers upright (mean |psi| < {UPRIGHT_TOLERANCE} over last 20 steps): "
        f"{sum(v < UPRIGHT_TOLERANCE for v in diag)}/{len(diag)}",
        f"cross-MDP teacher transfers failing: {len(off_fail)}/{len(transfer) - len(diag)}",
        f"master policy beats zero torque on {beats_zero}/{len(pvz)} teacher MDPs",
        "SNR per latent dim: " + " ".join(f"{v:.3g}" for v in rep.values),
        f"dims with SNR >= 0.5 max: {strong}; adaptation dims: {dims.tolist()}",
        f"linear fit |corr| from selected mu: mass {corr[0]:.3f}, kappa {corr[1]:.3f}",
        "",
        "returns on held-out MDPs (mean +- stderr)",
        f"{'mdp':>3} {'mass':>6} {'kappa':>6} " + " ".join(f"{m:>18}" for m in methods),
    ]
    for j in sorted(table):
        t = table[j]
        cells = " ".join(f"{t[m][0]:>9.1f} +-{t[m][1]:>6.1f}" if m in t else f"{'-':>18}" for m in methods)
        lines.append(f"{j:>3} {t['mass']:>6.3f} {t['kappa']:>6.3f} {cells}")
    lines += [
        "",
        f"BO > average on {bo_gt_avg}/{len(have)}; BO >= teacher on {bo_ge_teacher}/{len(have)}",
        "interactions: " + ", ".join(f"{m}={c}" for m, c in interactions),
    ]
    p = run_dir / "summary.txt"
    p.write_text("\n".join(lines) + "\n")
    outputs.append(p)
    return outputs


STAGE_FUNCS = {
    "sample-family": stage_sample_family,
    "train-teachers": stage_train_teachers,
    "collect": stage_collect,
    "train-q": stage_train_q,
    "train-policy": stage_train_policy,
    "adapt": stage_adapt,
    "eval": stage_eval,
    "report": stage_report,
}


def output_hashes(run_dir):
    """``{relative path: blob hash}`` of every file in a run directory except the manifests."""
    run_dir = Path(run_dir)
    return {p.relative_to(run_dir).as_posix(): git_blob_hash(p)
            for p in sorted(run_dir.rglob("*")) if p.is_file() and "manifests" not in p.parts}


def thread_limit():
    value = os.environ.get("VPE_THREADS")
    if value is None:
        return None
    try:
        n = int(value)
    except ValueError:
        raise StageError(f"VPE_THREADS must be a positive integer, got {value!r}") from None
    if n < 1:
        raise StageError(f"VPE_THREADS must be a positive integer, got {value!r}")
    return n
