"""Command-line pipeline: pilot, allocate, embed, verify, certify, attack.

Every subcommand writes its outputs plus a manifest.json (effective
configuration, seeds, input/output digests) into --out, under an exclusive
lock.  Options resolve as: command-line flag, then the config file's
[subcommand] section, then its [common] section, then the built-in default.
Config files are INI (key = value under a section header).

Exit codes: 0 success; 1 a verification came back negative and
--fail-on-negative was set; 2 usage or configuration error; 3 numeric or
training failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, checkpoint, rng
from .attack import (
    AttackResult,
    adversarial_direction,
    compress,
    finetune_drift,
    landscape_sweep,
    make_sign_test_metric,
    make_vsr_metric,
    pgd_attack,
    random_direction,
)
from .certify import certify
from .embed import EmbedConfig, embed
from .errors import (
    AttackFailureError,
    CertmarkError,
    CheckpointFormatError,
    DegenerateAuditError,
    DegenerateTrajectoryError,
    InfeasibleThresholdError,
    InsufficientSamplesError,
    InvalidArgumentError,
    InvalidConfigurationError,
    NumericDomainError,
    SingularGeometryError,
    TrainingFailureError,
    UsageError,
)
from .manifest import read_json, run_lock, write_json, write_manifest
from .params import (
    NoiseSpec,
    allocate,
    lfs,
    mahalanobis_norm,
    rank_dispersion_and_stability,
)
from .toymodel import (
    ClassifierArch,
    EnergyClassifier,
    GeneratorArch,
    ToyGenerator,
    build_private_classifier,
    init_generator,
)
from .verify import verify_models

_USAGE_ERRORS = (
    UsageError,
    InvalidConfigurationError,
    InvalidArgumentError,
    InsufficientSamplesError,
    CheckpointFormatError,
    FileNotFoundError,
)
_NUMERIC_ERRORS = (
    NumericDomainError,
    TrainingFailureError,
    DegenerateTrajectoryError,
    SingularGeometryError,
    InfeasibleThresholdError,
    DegenerateAuditError,
    AttackFailureError,
)


# ---------------------------------------------------------------------------
# option plumbing


@dataclass(frozen=True)
class Opt:
    name: str
    typ: str  # int | float | str | bool | floats | strs
    default: object = None
    help: str = ""
    required: bool = False


def _convert(typ: str, raw):
    if typ == "int":
        return int(raw)
    if typ == "float":
        return float(raw)
    if typ == "str":
        return str(raw)
    if typ == "floats":
        return tuple(float(v) for v in str(raw).split(",") if v.strip())
    if typ == "strs":
        return tuple(v.strip() for v in str(raw).split(",") if v.strip())
    raise ValueError(f"unknown option type {typ}")


def _parse_bool(raw: str) -> bool:
    lowered = str(raw).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"cannot parse boolean value {raw!r}")


def _add_options(parser: argparse.ArgumentParser, opts: list[Opt]) -> None:
    for o in opts:
        flag = "--" + o.name.replace("_", "-")
        if o.typ == "bool":
            parser.add_argument(flag, dest=o.name, action="store_const", const=True,
                                default=None, help=o.help)
        else:
            parser.add_argument(flag, dest=o.name, default=None, help=o.help,
                                type=lambda raw, t=o.typ: _convert(t, raw))


def _effective_options(args, subcommand: str, opts: list[Opt]) -> dict:
    cp = None
    if args.config is not None:
        cp = configparser.ConfigParser()
        if not cp.read(args.config):
            raise UsageError(f"config file {args.config} not found or unreadable")
    eff = {}
    for o in opts:
        value = getattr(args, o.name)
        if value is None and cp is not None:
            for section in (subcommand, "common"):
                if cp.has_section(section) and cp.has_option(section, o.name):
                    raw = cp.get(section, o.name)
                    value = _parse_bool(raw) if o.typ == "bool" else _convert(o.typ, raw)
                    break
        if value is None:
            value = o.default
        if value is None and o.required:
            raise UsageError(
                f"{subcommand}: missing required option --{o.name.replace('_', '-')}"
            )
        eff[o.name] = value
    return eff


def _ensure_seed(eff: dict) -> dict:
    """Fill a missing seed with fresh entropy; the manifest records which."""
    generated = eff.get("seed") is None
    if generated:
        eff["seed"] = int.from_bytes(os.urandom(4), "little")
    return {"seed": int(eff["seed"]), "generated": generated}


def _config_snapshot(eff: dict) -> dict:
    out = {}
    for k, v in eff.items():
        if isinstance(v, tuple):
            out[k] = list(v)
        elif isinstance(v, Path):
            out[k] = str(v)
        else:
            out[k] = v
    return out


# ---------------------------------------------------------------------------
# model and noise-spec file helpers


def _load_generator(path) -> ToyGenerator:
    params, arch = checkpoint.load_model(path, "generator")
    return ToyGenerator(GeneratorArch.from_dict(arch), params)


def _save_generator(path, gen: ToyGenerator) -> None:
    checkpoint.save_model(path, "generator", gen.params, gen.arch.to_dict())


def _load_classifier(path) -> EnergyClassifier:
    params, arch = checkpoint.load_model(path, "classifier")
    return EnergyClassifier(ClassifierArch.from_dict(arch), params)


def _save_classifier(path, clf: EnergyClassifier) -> None:
    checkpoint.save_model(path, "classifier", clf.params, clf.arch.to_dict())


def _load_noise(path) -> NoiseSpec:
    d = read_json(path)
    return NoiseSpec(
        sigma=tuple(float(s) for s in d["sigma"]),
        dims=tuple(int(x) for x in d["dims"]),
        scale=float(d.get("scale", 1.0)),
        budget_sigma_u=d.get("budget_sigma_u"),
    )


def _save_noise(path, spec: NoiseSpec) -> None:
    write_json(
        path,
        {
            "sigma": list(spec.sigma),
            "dims": list(spec.dims),
            "scale": spec.scale,
            "budget_sigma_u": spec.budget_sigma_u,
        },
    )


def _posterior_metric(clf: EnergyClassifier, prompt: int, seed: int, n_images: int = 8):
    latent_seeds = [rng.mix_seed(seed, "metric-lat", i) for i in range(n_images)]
    clf_seeds = [rng.mix_seed(seed, "metric-clf", i) for i in range(n_images)]

    def metric(gen: ToyGenerator) -> float:
        images = gen.generate_batch(prompt, latent_seeds)
        post = clf.posterior_batch(images, clf_seeds)
        return float(np.mean(post[:, prompt]))

    return metric


# ---------------------------------------------------------------------------
# subcommands


_PILOT_OPTS = [
    Opt("out", "str", required=True, help="run directory"),
    Opt("seed", "int", help="base seed (generated and recorded if omitted)"),
    Opt("gen", "str", help="generator checkpoint; a fresh one is initialized if omitted"),
    Opt("tasks", "strs", ("ellipses", "gradients", "stripes", "blobs"),
        help="comma-separated surrogate task names"),
    Opt("steps", "int", 30, help="fine-tuning steps per task"),
    Opt("learning_rate", "float", 0.05, help="fine-tuning learning rate"),
    Opt("snapshot_every", "int", 10, help="snapshot stride"),
]


def cmd_pilot(args) -> int:
    eff = _effective_options(args, "pilot", _PILOT_OPTS)
    seeds = _ensure_seed(eff)
    if len(eff["tasks"]) < 1:
        raise UsageError("pilot needs at least one task")
    started = time.perf_counter()
    with run_lock(eff["out"]) as out:
        inputs = {}
        outputs = {}
        if eff["gen"]:
            gen = _load_generator(eff["gen"])
            inputs["gen"] = eff["gen"]
        else:
            gen = init_generator(GeneratorArch(), rng.mix_seed(eff["seed"], "ref-gen"))
            ref_path = out / "gen_reference.ckpt"
            _save_generator(ref_path, gen)
            outputs["gen_reference"] = ref_path
        trajectories = []
        lfs_by_task = {}
        for task in eff["tasks"]:
            _, traj, _ = finetune_drift(
                gen,
                task,
                seed=rng.mix_seed(eff["seed"], "pilot", task),
                steps=eff["steps"],
                learning_rate=eff["learning_rate"],
                snapshot_every=eff["snapshot_every"],
            )
            traj_path = out / f"traj_{task}.ckpt"
            checkpoint.save_trajectory(traj_path, traj)
            outputs[f"traj_{task}"] = traj_path
            trajectories.append(traj)
            lfs_by_task[task] = list(lfs(traj))
        report = rank_dispersion_and_stability(trajectories)
        payload = {
            "tasks": list(eff["tasks"]),
            "dims": list(gen.params.dims),
            "lfs": lfs_by_task,
            "lfs_mean": list(np.mean(list(lfs_by_task.values()), axis=0)),
            "rank_dispersion": list(report.rank_dispersion),
            "stability": list(report.stability),
            "ecdf_rank_dispersion": [list(p) for p in report.ecdf_rank_dispersion],
            "ecdf_stability": [list(p) for p in report.ecdf_stability],
            "majority_stable": report.majority_stable(),
        }
        pilot_path = out / "pilot.json"
        write_json(pilot_path, payload)
        outputs["pilot"] = pilot_path
        write_manifest(out, "pilot", _config_snapshot(eff), seeds, inputs, outputs,
                       time.perf_counter() - started)
    stable = "stable" if payload["majority_stable"] else "UNSTABLE"
    print(f"pilot: {len(eff['tasks'])} tasks, layer ranking {stable}; wrote {pilot_path}")
    if not payload["majority_stable"]:
        print("pilot: warning: layer sensitivity ranking varies across tasks; "
              "allocation from these pilots may be unreliable")
    return 0


_ALLOCATE_OPTS = [
    Opt("out", "str", required=True),
    Opt("pilot", "str", required=True, help="pilot.json from the pilot subcommand"),
    Opt("sigma_u", "float", 0.02, help="layer-uniform noise budget"),
]


def cmd_allocate(args) -> int:
    eff = _effective_options(args, "allocate", _ALLOCATE_OPTS)
    started = time.perf_counter()
    with run_lock(eff["out"]) as out:
        pilot = read_json(eff["pilot"])
        spec = allocate(pilot["lfs_mean"], pilot["dims"], eff["sigma_u"])
        noise_path = out / "noise.json"
        _save_noise(noise_path, spec)
        write_manifest(out, "allocate", _config_snapshot(eff), {},
                       {"pilot": eff["pilot"]}, {"noise": noise_path},
                       time.perf_counter() - started)
    print(f"allocate: sigma = {[round(s, 6) for s in spec.sigma]}; wrote {noise_path}")
    return 0


_EMBED_OPTS = [
    Opt("out", "str", required=True),
    Opt("seed", "int"),
    Opt("gen", "str", required=True, help="reference generator checkpoint"),
    Opt("noise", "str", required=True, help="noise.json from allocate"),
    Opt("clf", "str", help="classifier checkpoint; trained fresh if omitted"),
    Opt("target_prompt", "int", 1),
    Opt("lam", "float", 0.55, help="target posterior mass on the flipped label"),
    Opt("omega0", "float", 5e-5, help="initial perceptual weight"),
    Opt("t_g", "float", 30.0, help="doubling period of the warmup schedule"),
    Opt("m_max", "int", 16, help="cap on noise draws per step"),
    Opt("steps", "int", 240),
    Opt("learning_rate", "float", 1e-3),
    Opt("batch_size", "int", 8),
    Opt("schedule", "str", "exponential", help="exponential or fixed"),
    Opt("clf_steps", "int", 350, help="training steps when building the classifier"),
]


def cmd_embed(args) -> int:
    eff = _effective_options(args, "embed", _EMBED_OPTS)
    seeds = _ensure_seed(eff)
    started = time.perf_counter()
    with run_lock(eff["out"]) as out:
        inputs = {"gen": eff["gen"], "noise": eff["noise"]}
        outputs = {}
        gen = _load_generator(eff["gen"])
        noise = _load_noise(eff["noise"])
        if eff["clf"]:
            clf = _load_classifier(eff["clf"])
            inputs["clf"] = eff["clf"]
        else:
            clf = build_private_classifier(
                gen,
                rng.mix_seed(eff["seed"], "private-clf"),
                arch=ClassifierArch(image_hw=gen.arch.image_hw),
                steps=eff["clf_steps"],
            )
            clf_path = out / "clf.ckpt"
            _save_classifier(clf_path, clf)
            outputs["clf"] = clf_path
        config = EmbedConfig(
            noise=noise,
            target_prompt=eff["target_prompt"],
            lam=eff["lam"],
            omega0=eff["omega0"],
            t_g=eff["t_g"],
            m_max=eff["m_max"],
            steps=eff["steps"],
            learning_rate=eff["learning_rate"],
            batch_size=eff["batch_size"],
            schedule_kind=eff["schedule"],
        )
        gen_w, records = embed(gen, clf, config, eff["seed"])
        gen_path = out / "gen_watermarked.ckpt"
        _save_generator(gen_path, gen_w)
        outputs["gen_watermarked"] = gen_path
        log_path = out / "train_log.jsonl"
        with open(log_path, "w", encoding="utf-8") as f:
            for rec in records:
                f.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
        outputs["train_log"] = log_path
        write_manifest(out, "embed", _config_snapshot(eff), seeds, inputs, outputs,
                       time.perf_counter() - started)
    last = records[-1]
    print(f"embed: {len(records)} steps, final kl {last.kl:.4f}, "
          f"ssim loss {last.ssim:.4f}; wrote {gen_path}")
    return 0


_VERIFY_OPTS = [
    Opt("out", "str", required=True),
    Opt("seed", "int"),
    Opt("suspect", "str", required=True),
    Opt("reference", "str", required=True),
    Opt("clf", "str", required=True),
    Opt("noise", "str", required=True),
    Opt("prompt", "int", 1),
    Opt("m_draws", "int", 40),
    Opt("n_samples", "int", 16),
    Opt("alpha", "float", 0.05),
    Opt("zeta", "float", help="fixed reference-rate bound; estimated if omitted"),
    Opt("fail_on_negative", "bool", False,
        help="exit 1 when the decision is not 'watermarked'"),
]


def cmd_verify(args) -> int:
    eff = _effective_options(args, "verify", _VERIFY_OPTS)
    seeds = _ensure_seed(eff)
    started = time.perf_counter()
    with run_lock(eff["out"]) as out:
        report = verify_models(
            _load_generator(eff["suspect"]),
            _load_generator(eff["reference"]),
            _load_classifier(eff["clf"]),
            _load_noise(eff["noise"]),
            eff["prompt"],
            eff["m_draws"],
            eff["n_samples"],
            eff["seed"],
            alpha=eff["alpha"],
            zeta=eff["zeta"],
        )
        report_path = out / "report.json"
        write_json(report_path, report.to_dict())
        inputs = {k: eff[k] for k in ("suspect", "reference", "clf", "noise")}
        write_manifest(out, "verify", _config_snapshot(eff), seeds, inputs,
                       {"report": report_path}, time.perf_counter() - started)
    print(f"verify: {report.decision} (wr {report.wr:.4f}, rp {report.rp:.4f}, "
          f"threshold {report.threshold:.4f}, routes_agree {report.routes_agree})")
    if eff["fail_on_negative"] and report.decision != "watermarked":
        return 1
    return 0


_CERTIFY_OPTS = [
    Opt("out", "str", required=True),
    Opt("seed", "int"),
    Opt("suspect", "str", required=True),
    Opt("reference", "str", required=True),
    Opt("clf", "str", required=True),
    Opt("noise", "str", required=True),
    Opt("prompt", "int", 1),
    Opt("m_trials", "int", 120),
    Opt("n_per_trial", "int", 16),
    Opt("m_grid", "int", help="thresholds in the certificate grid (default: min(100, m_trials))"),
    Opt("alpha", "float", 0.05),
    Opt("delta", "float", 0.05),
    Opt("k", "float", 1.0, help="noise scale multiplier"),
]


def cmd_certify(args) -> int:
    eff = _effective_options(args, "certify", _CERTIFY_OPTS)
    seeds = _ensure_seed(eff)
    m_grid = eff["m_grid"] if eff["m_grid"] is not None else min(100, eff["m_trials"])
    started = time.perf_counter()
    with run_lock(eff["out"]) as out:
        cert = certify(
            _load_generator(eff["suspect"]),
            _load_classifier(eff["clf"]),
            _load_generator(eff["reference"]),
            _load_noise(eff["noise"]),
            eff["prompt"],
            eff["m_trials"],
            eff["n_per_trial"],
            eff["seed"],
            m_grid=m_grid,
            alpha=eff["alpha"],
            delta=eff["delta"],
            k=eff["k"],
        )
        cert_path = out / "certificate.json"
        write_json(cert_path, cert.to_dict())
        inputs = {k: eff[k] for k in ("suspect", "reference", "clf", "noise")}
        write_manifest(out, "certify", _config_snapshot(eff), seeds, inputs,
                       {"certificate": cert_path}, time.perf_counter() - started)
    if cert.certified:
        print(f"certify: certified radius {cert.r_star:.6f} "
              f"(tau {cert.tau:.4f}, confidence {cert.confidence:.3f})")
    else:
        print(f"certify: no certificate (tau {cert.tau:.4f}"
              f"{', infeasible threshold' if cert.infeasible_threshold else ''})")
    return 0


_ATTACK_OPTS = [
    Opt("out", "str", required=True),
    Opt("seed", "int"),
    Opt("gen", "str", required=True, help="generator under attack"),
    Opt("kind", "str", required=True,
        help="pgd, pgd-mahalanobis, finetune, quantize, prune, or sweep"),
    Opt("clf", "str"),
    Opt("reference", "str"),
    Opt("noise", "str"),
    Opt("prompt", "int", 1),
    Opt("metric", "str", "posterior", help="posterior, vsr, or sign"),
    Opt("budgets", "floats", (0.05, 0.1, 0.2), help="norm-ball radii for pgd"),
    Opt("steps", "int", 15),
    Opt("step_size", "float", 0.02),
    Opt("task", "str", "stripes", help="surrogate task for finetune"),
    Opt("learning_rate", "float", 0.05),
    Opt("snapshot_every", "int", 10),
    Opt("bits", "int", 8),
    Opt("fraction", "float", 0.3),
    Opt("eps_random", "floats", (0.0, 0.05, 0.1)),
    Opt("eps_adv", "floats", (0.0, 0.05, 0.1)),
    Opt("m_draws", "int", 20, help="verification draws inside the vsr metric"),
    Opt("n_samples", "int", 8),
    Opt("n_trials", "int", 3),
]


def _build_metric(eff, clf, noise):
    if clf is None:
        raise UsageError("this attack needs --clf to evaluate its metric")
    name = eff["metric"]
    seed = rng.mix_seed(eff["seed"], "attack-metric")
    if name == "posterior":
        return _posterior_metric(clf, eff["prompt"], seed)
    if name == "vsr":
        if eff["reference"] is None or noise is None:
            raise UsageError("the vsr metric needs --reference and --noise")
        return make_vsr_metric(
            clf, _load_generator(eff["reference"]), noise, eff["prompt"],
            eff["m_draws"], eff["n_samples"], seed, n_trials=eff["n_trials"],
        )
    if name == "sign":
        if eff["reference"] is None:
            raise UsageError("the sign metric needs --reference")
        return make_sign_test_metric(
            clf, _load_generator(eff["reference"]), eff["prompt"], seed,
        )
    raise UsageError(f"unknown metric {name!r}")


def cmd_attack(args) -> int:
    eff = _effective_options(args, "attack", _ATTACK_OPTS)
    seeds = _ensure_seed(eff)
    kind = eff["kind"]
    started = time.perf_counter()
    with run_lock(eff["out"]) as out:
        inputs = {"gen": eff["gen"]}
        outputs = {}
        gen = _load_generator(eff["gen"])
        clf = None
        if eff["clf"]:
            clf = _load_classifier(eff["clf"])
            inputs["clf"] = eff["clf"]
        noise = None
        if eff["noise"]:
            noise = _load_noise(eff["noise"])
            inputs["noise"] = eff["noise"]
        if eff["reference"]:
            inputs["reference"] = eff["reference"]
        extra = {}

        if kind in ("pgd", "pgd-mahalanobis"):
            geometry = "l2" if kind == "pgd" else "mahalanobis"
            metric_fn = _build_metric(eff, clf, noise)
            result, attacked = pgd_attack(
                gen, clf, eff["prompt"], eff["budgets"], eff["seed"],
                steps=eff["steps"], step_size=eff["step_size"],
                metric_fn=metric_fn, geometry=geometry, noise=noise,
            )
        elif kind == "finetune":
            result, traj, attacked = finetune_drift(
                gen, eff["task"], eff["seed"], steps=eff["steps"],
                learning_rate=eff["learning_rate"],
                snapshot_every=eff["snapshot_every"], noise=noise,
            )
            traj_path = out / "traj_finetune.ckpt"
            checkpoint.save_trajectory(traj_path, traj)
            outputs["trajectory"] = traj_path
            if clf is not None:
                extra["final_metric"] = float(_build_metric(eff, clf, noise)(attacked))
        elif kind in ("quantize", "prune"):
            attacked = compress(gen, kind, bits=eff["bits"], fraction=eff["fraction"])
            delta = attacked.params - gen.params
            metric_fn = _build_metric(eff, clf, noise)
            result = AttackResult(
                kind=kind,
                budgets=(float(eff["bits"]) if kind == "quantize" else eff["fraction"],),
                metrics=(float(metric_fn(attacked)),),
                l2_norms=(delta.l2_norm(),),
                mahalanobis_norms=(
                    mahalanobis_norm(delta, noise) if noise is not None else float("nan"),
                ),
            )
        elif kind == "sweep":
            metric_fn = _build_metric(eff, clf, noise)
            dir_rand = random_direction(
                gen.params.dims, rng.mix_seed(eff["seed"], "sweep-rand")
            )
            adv = adversarial_direction(
                gen, clf, eff["prompt"], rng.mix_seed(eff["seed"], "sweep-adv"),
                steps=eff["steps"],
            )
            surface = landscape_sweep(
                gen, dir_rand, adv.direction, eff["eps_random"], eff["eps_adv"], metric_fn
            )
            sweep_path = out / "sweep.csv"
            with open(sweep_path, "w", encoding="utf-8") as f:
                f.write("eps_random,eps_adv,metric\n")
                for i, ea in enumerate(eff["eps_random"]):
                    for j, eb in enumerate(eff["eps_adv"]):
                        f.write(f"{ea},{eb},{surface[i, j]}\n")
            outputs["sweep"] = sweep_path
            extra["adversarial_fallback"] = adv.used_fallback
            write_manifest(out, "attack", _config_snapshot(eff), seeds, inputs,
                           outputs, time.perf_counter() - started, extra=extra)
            print(f"attack: sweep over {surface.shape} grid; wrote {sweep_path}")
            return 0
        else:
            raise UsageError(f"unknown attack kind {kind!r}")

        attacked_path = out / "attacked.ckpt"
        _save_generator(attacked_path, attacked)
        outputs["attacked"] = attacked_path
        attack_path = out / "attack.json"
        write_json(attack_path, result.to_dict())
        outputs["attack"] = attack_path
        write_manifest(out, "attack", _config_snapshot(eff), seeds, inputs, outputs,
                       time.perf_counter() - started, extra=extra)
    print(f"attack: {kind}, final metric {result.metrics[-1]:.4f}; wrote {attack_path}")
    return 0


_PLOTDATA_OPTS = [
    Opt("out", "str", required=True),
    Opt("input", "str", required=True, help="train_log.jsonl or sweep.csv"),
]


def cmd_plotdata(args) -> int:
    eff = _effective_options(args, "plotdata", _PLOTDATA_OPTS)
    started = time.perf_counter()
    src = Path(eff["input"])
    rows = []
    if src.suffix == ".jsonl":
        with open(src, encoding="utf-8") as f:
            for line in f:
                rec = json.loads(line)
                for series in ("kl", "ssim", "grad_norm", "m_t", "omega_t"):
                    rows.append((series, rec["t"], "", rec[series]))
    elif src.suffix == ".csv":
        with open(src, encoding="utf-8") as f:
            header = f.readline().strip().split(",")
            if len(header) != 3:
                raise UsageError("expected a 3-column csv (x, y, value)")
            for line in f:
                x, y, value = line.strip().split(",")
                rows.append(("sweep", x, y, value))
    else:
        raise UsageError("plotdata reads .jsonl training logs or .csv sweeps")
    with run_lock(eff["out"]) as out:
        plot_path = out / "plot_data.csv"
        with open(plot_path, "w", encoding="utf-8") as f:
            f.write("series,x,y,value\n")
            for series, x, y, value in rows:
                f.write(f"{series},{x},{y},{value}\n")
        write_manifest(out, "plotdata", _config_snapshot(eff), {},
                       {"input": src}, {"plot_data": plot_path},
                       time.perf_counter() - started)
    print(f"plotdata: {len(rows)} rows; wrote {plot_path}")
    return 0


# ---------------------------------------------------------------------------
# entry point


_SUBCOMMANDS = {
    "pilot": (cmd_pilot, _PILOT_OPTS, "probe layer sensitivity on surrogate tasks"),
    "allocate": (cmd_allocate, _ALLOCATE_OPTS, "turn pilot sensitivities into noise levels"),
    "embed": (cmd_embed, _EMBED_OPTS, "embed the watermark into a generator"),
    "verify": (cmd_verify, _VERIFY_OPTS, "decide whether a suspect model is watermarked"),
    "certify": (cmd_certify, _CERTIFY_OPTS, "compute a certified robustness radius"),
    "attack": (cmd_attack, _ATTACK_OPTS, "run removal attacks and robustness probes"),
    "plotdata": (cmd_plotdata, _PLOTDATA_OPTS, "flatten logs into plot-ready csv"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="certmark",
        description="layer-adaptive parameter-space watermarking with certified radii",
    )
    parser.add_argument("--version", action="version", version=f"certmark {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name, (_, opts, help_text) in _SUBCOMMANDS.items():
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", default=None, help="INI config file")
        _add_options(sp, opts)
    return parser


def main(argv=None) -> int:
    workers = os.environ.get("CERTMARK_WORKERS", "1")
    try:
        n_workers = max(1, int(workers))
    except ValueError:
        print(f"certmark: invalid CERTMARK_WORKERS value {workers!r}", file=sys.stderr)
        return 2
    import torch

    torch.set_num_threads(n_workers)
    parser = build_parser()
    args = parser.parse_args(argv)
    command = _SUBCOMMANDS[args.subcommand][0]
    try:
        return command(args)
    except _NUMERIC_ERRORS as exc:
        # Checked before the usage classes: a couple of numeric failures
        # (degenerate trajectories, singular geometry) inherit from the
        # argument-validation base and would otherwise exit 2.
        print(f"certmark: numeric failure: {exc}", file=sys.stderr)
        return 3
    except _USAGE_ERRORS as exc:
        print(f"certmark: error: {exc}", file=sys.stderr)
        return 2
    except CertmarkError as exc:
        print(f"certmark: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
