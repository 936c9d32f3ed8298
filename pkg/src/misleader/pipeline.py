"""End-to-end experiment: data, target, defended ensemble, attacks, evaluation, theory.

Every random choice is derived from the config's global seed through fixed
sub-seed slots, so a run is a pure function of its (normalized) config apart
from the ``wall_clock`` block. Expensive models are cached under
``output_dir/checkpoints`` keyed by a hash of the config blocks that produced
them; a rerun with matching hashes loads instead of retraining.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__, losses
from .attacks import (
    AttackConfig,
    evaluate_attack,
    make_oracle,
    randp_wrapper,
    run_dbme,
    run_dfme,
)
from .augmentation import AugmentationPolicy
from .checkpoint import load_checkpoint, load_ensemble, save_checkpoint, save_ensemble
from .config import config_hash
from .data import Dataset, SplitSpec, gen_gaussian_mixture, gen_two_moons, load_idx, split
from .defense import DefenseConfig
from .ensemble import Ensemble, predict, train_ensemble
from .errors import MisleaderError, StageError
from .models import (
    ArchitectureSpec,
    Model,
    build,
    clip_grad_norm,
    forward,
    init_optimizer,
    sgd_step,
    value_and_gradients,
)
from .results import write_results
from .theory import df_gap_check, minimax_gap_check

log = logging.getLogger(__name__)

# fixed sub-seed slots; changing one never shifts another
SLOT_DATA, SLOT_TARGET_INIT, SLOT_TARGET_ORDER, SLOT_DEFENSE, SLOT_THEORY, SLOT_RANDP_EVAL = 0, 1, 2, 3, 4, 5
SLOT_ATTACK, SLOT_RANDP = 100, 200


def sub_seed(seed: int, slot: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(slot)]).generate_state(1, dtype=np.uint32)[0])


# -- data -----------------------------------------------------------------------


@dataclass
class DataBundle:
    train: Dataset
    test: Dataset
    surrogate: Dataset


def _synthetic(kind: str, params: dict, seed: int, noise_scale: float = 1.0, n: int | None = None,
               name: str | None = None) -> Dataset:
    n = n or params["n"]
    if kind == "gaussian_mixture":
        return gen_gaussian_mixture(seed, n, params["num_classes"], params["dim"],
                                    params["class_separation"], params["noise_std"] * noise_scale,
                                    name or "gaussian_mixture")
    return gen_two_moons(seed, n, params["noise_std"] * noise_scale, name or "two_moons")


def load_data(cfg: dict) -> DataBundle:
    block, seed = cfg["dataset"], cfg["seed"]
    sur = block["surrogate"]
    if block["kind"] == "idx":
        full = load_idx(block["images"], block["labels"], block["num_classes"])
        if "test_images" in block and "test_labels" in block:
            train = full
            test = load_idx(block["test_images"], block["test_labels"], block["num_classes"], "idx/test")
        else:
            train, test = split(full, SplitSpec(block["train_fraction"], seed))
        # no second real distribution to draw from: the attacker reuses in-distribution training inputs
        surrogate = train
    else:
        data_seed = sub_seed(seed, SLOT_DATA)
        full = _synthetic(block["kind"], block["params"], data_seed)
        train, test = split(full, SplitSpec(block["train_fraction"], seed))
        surrogate = _synthetic(block["kind"], block["params"], data_seed + sur["seed_offset"],
                               sur["noise_scale"], sur["n"], f"{full.name}/surrogate")
    return DataBundle(train, test, surrogate)


def arch_spec(block: dict, input_shape, num_classes: int) -> ArchitectureSpec:
    if block["kind"] == "cnn_small":
        return ArchitectureSpec.cnn_small(input_shape, num_classes, block.get("activation", "relu"))
    return ArchitectureSpec.mlp(input_shape, block.get("hidden", [64, 64]), num_classes,
                                block.get("activation", "relu"))


# -- target -----------------------------------------------------------------------


def train_target(train: Dataset, spec: ArchitectureSpec, epochs: int, lr: float, momentum: float,
                 batch: int, init_seed: int, order_seed: int) -> Model:
    """Cross-entropy SGD with momentum and a cosine schedule."""
    model = build(spec, init_seed)
    n = len(train)
    steps = epochs * math.ceil(n / batch)
    if steps == 0:
        return model
    opt = init_optimizer(model, lr, steps, momentum)
    rng = np.random.default_rng(order_seed)
    x = torch.tensor(np.array(train.inputs)).to(model.dtype)
    y = torch.tensor(np.array(train.labels))
    for _ in range(epochs):
        perm = torch.as_tensor(rng.permutation(n))
        for start in range(0, n, batch):
            idx = perm[start:start + batch]
            _, grads = value_and_gradients(model, lambda m: losses.cross_entropy(forward(m, x[idx]), y[idx]))
            model, opt = sgd_step(model, clip_grad_norm(grads, 5.0), opt)
    return model


def held_out_accuracy(model_or_ensemble, data: Dataset) -> float:
    with torch.no_grad():
        return losses.accuracy(predict(model_or_ensemble, np.array(data.inputs)), data.labels)


# -- run state -----------------------------------------------------------------------


@dataclass
class RunState:
    cfg: dict
    out: Path
    data: DataBundle | None = None
    target: Model | None = None
    ensemble: Ensemble | None = None
    attackers: list[Model] = field(default_factory=list)
    attacks: list[dict] = field(default_factory=list)
    attack_models: dict = field(default_factory=dict)
    wall_clock: dict = field(default_factory=dict)
    null_reasons: dict = field(default_factory=dict)
    reuse: bool = True


def _stage(state: RunState, name: str, fn):
    t0 = time.perf_counter()
    try:
        result = fn()
    except StageError:
        raise
    except (MisleaderError, ValueError, RuntimeError, OSError, KeyError) as e:
        raise StageError(f"stage '{name}' failed: {type(e).__name__}: {e}") from e
    state.wall_clock[name] = state.wall_clock.get(name, 0.0) + time.perf_counter() - t0
    return result


def _target_hash(cfg: dict) -> str:
    return config_hash(cfg["seed"], cfg["dataset"], cfg["target"])


def _ensemble_hash(cfg: dict) -> str:
    return config_hash(cfg["seed"], cfg["dataset"], cfg["target"], cfg["defense"])


def stage_data(state: RunState) -> None:
    state.data = _stage(state, "data", lambda: load_data(state.cfg))


def stage_target(state: RunState) -> None:
    if state.data is None:
        stage_data(state)
    cfg, tr = state.cfg, state.data.train
    path = state.out / "checkpoints" / f"target-{_target_hash(cfg)}.msld"

    def run():
        if state.reuse and path.exists():
            log.info("target: reusing %s", path)
            return load_checkpoint(path)
        t = cfg["target"]
        spec = arch_spec(t["arch"], tr.input_shape, tr.num_classes)
        model = train_target(tr, spec, t["epochs"], t["lr"], t["momentum"], t["batch"],
                             sub_seed(cfg["seed"], SLOT_TARGET_INIT), sub_seed(cfg["seed"], SLOT_TARGET_ORDER))
        save_checkpoint(model, path)
        return model

    state.target = _stage(state, "target", run)
    log.info("target test accuracy %.4f", held_out_accuracy(state.target, state.data.test))


def defense_config(block: dict, seed: int, image_mode: bool) -> DefenseConfig:
    aug = dict(block["augmentation"])
    if aug.get("mode", "auto") == "auto":
        aug["mode"] = "image" if image_mode else "vector"
    return DefenseConfig(
        lam=block["lambda"], alpha=block["alpha"], temperature=block["temperature"],
        eta_d=block["eta_d"], eta_s=block["eta_s"], epochs=block["epochs"], batch=block["batch"],
        a_iter=block["a_iter"], momentum=block["momentum"], seed=seed,
        augmentation=AugmentationPolicy.from_dict(aug), refresh_augmentation=block["refresh_augmentation"],
        aug_copies=block["aug_copies"], grad_clip=block["grad_clip"],
    )


_OVERRIDE_NAMES = {"lambda": "lam"}


def stage_defense(state: RunState) -> None:
    if state.target is None:
        stage_target(state)
    cfg, tr = state.cfg, state.data.train
    directory = state.out / "checkpoints" / f"ensemble-{_ensemble_hash(cfg)}"

    def run():
        if state.reuse and (directory / "manifest.json").exists():
            log.info("ensemble: reusing %s", directory)
            manifest = json.loads((directory / "manifest.json").read_text())
            return load_ensemble(directory), [load_checkpoint(directory / f) for f in manifest["attackers"]]
        block = cfg["defense"]
        base = defense_config(block, sub_seed(cfg["seed"], SLOT_DEFENSE), tr.image_mode)
        specs, overrides = [], []
        for member in block["members"]:
            d_spec = arch_spec(member["arch"], tr.input_shape, tr.num_classes)
            a_spec = arch_spec(member["attacker"], tr.input_shape, tr.num_classes) if member["attacker"] else d_spec
            specs.append((d_spec, a_spec))
            overrides.append({_OVERRIDE_NAMES.get(k, k): v for k, v in member["overrides"].items()})
        ens, logs = train_ensemble(tr, state.target, specs, base, overrides, workers=block["workers"])
        attackers = [lg.attacker for lg in logs]
        names = [f"attacker_{i}.msld" for i in range(len(attackers))]
        for name, a in zip(names, attackers):
            save_checkpoint(a, directory / name)
        history = [[vars(e) for e in lg.epochs] for lg in logs]
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "training_log.json").write_text(json.dumps(history, indent=1))
        save_ensemble(ens, directory, {"attackers": names})
        return ens, attackers

    state.ensemble, state.attackers = _stage(state, "defense", run)


def attack_configs(block: dict, index: int, seed: int, data: Dataset) -> list[AttackConfig]:
    """One AttackConfig per budget listed in the block."""
    clone = arch_spec(block["clone"], data.input_shape, data.num_classes)
    gen = None
    if block["kind"] == "dfme":
        rng = (0.0, 1.0) if data.image_mode else (float(data.inputs.min()), float(data.inputs.max()))
        gen = ArchitectureSpec.generator_mlp(block["latent_dim"], data.input_shape,
                                             tuple(block["generator_hidden"]), rng)
    attack_seed = block["seed"] if block["seed"] is not None else sub_seed(seed, SLOT_ATTACK + index)
    budgets = block["budgets"] or [block["budget"]]
    return [
        AttackConfig(kind=block["kind"], clone_spec=clone, budget=b, lr=block["lr"], epochs=block["epochs"],
                     batch=block["batch"], momentum=block["momentum"], seed=attack_seed, generator_spec=gen,
                     latent_dim=block["latent_dim"], generator_lr=block["generator_lr"],
                     gen_steps=block["gen_steps"], student_steps=block["student_steps"])
        for b in budgets
    ]


def _oracle_targets(state: RunState, names: list[str]) -> list[tuple[str, object, bool, str]]:
    """(oracle label, model, use randp, defense arch label)."""
    out = []
    for name in names:
        if name == "undefended":
            out.append(("undefended", state.target, False, state.target.spec.short_name))
        elif name == "randp":
            out.append(("randp", state.target, True, state.target.spec.short_name))
        elif name == "misleader":
            out.append(("misleader", state.ensemble, False, "ensemble"))
        elif name == "members":
            for i, m in enumerate(state.ensemble.members):
                out.append((f"member:{i}", m, False, m.spec.short_name))
    return out


def stage_attacks(state: RunState) -> None:
    if state.ensemble is None:
        stage_defense(state)
    cfg, data = state.cfg, state.data

    def run():
        records = []
        for ai, block in enumerate(cfg["attacks"]):
            for acfg in attack_configs(block, ai, cfg["seed"], data.train):
                for label, model, use_randp, darch in _oracle_targets(state, block["oracles"]):
                    wrapper = randp_wrapper(cfg["randp_budget"], sub_seed(cfg["seed"], SLOT_RANDP + ai)) \
                        if use_randp else None
                    oracle = make_oracle(model, block["mode"], acfg.budget, wrapper)
                    if acfg.kind == "dbme":
                        res = run_dbme(oracle, data.surrogate, acfg)
                    else:
                        res = run_dfme(oracle, acfg)
                    metrics = evaluate_attack(res, state.target, data.test)
                    tag = f"attack{ai}-{label.replace(':', '')}-b{acfg.budget}"
                    ckpt = Path("checkpoints") / "clones" / f"{tag}.msld"
                    save_checkpoint(res.clone, state.out / ckpt)
                    state.attack_models[(ai, label, acfg.budget)] = res
                    records.append({
                        "attack_index": ai, "kind": acfg.kind, "mode": block["mode"], "budget": acfg.budget,
                        "oracle": label, "defense_arch": darch, "clone_arch": acfg.clone_spec.short_name,
                        "seed": acfg.seed, "clone_accuracy": metrics["clone_accuracy"],
                        "agreement": metrics["agreement"], "queries_used": metrics["queries_used"],
                        "truncated": res.truncated, "clone_checkpoint": str(ckpt),
                    })
                    log.info("%s %s vs %s (budget %d): clone accuracy %.4f", acfg.kind, block["mode"], label,
                             acfg.budget, metrics["clone_accuracy"])
        return records

    state.attacks = _stage(state, "attacks", run)


def evaluate_defense(state: RunState) -> dict:
    data, f_t = state.data, state.target
    x = np.array(data.test.inputs)
    with torch.no_grad():
        p_t = predict(f_t, x)
        members = []
        for i, m in enumerate(state.ensemble.members):
            p = predict(m, x)
            members.append({"index": i, "arch": m.spec.short_name,
                            "test_accuracy": losses.accuracy(p, data.test.labels),
                            "agreement": losses.agreement_utility(p, p_t)})
        p_e = predict(state.ensemble, x)
        wrapper = randp_wrapper(state.cfg["randp_budget"], sub_seed(state.cfg["seed"], SLOT_RANDP_EVAL))
        p_r = torch.as_tensor(wrapper(p_t.double().numpy()))
    return {
        "members": members,
        "ensemble": {"test_accuracy": losses.accuracy(p_e, data.test.labels),
                     "agreement": losses.agreement_utility(p_e, p_t)},
        "randp": {"budget_l1": float(state.cfg["randp_budget"]),
                  "test_accuracy": losses.accuracy(p_r, data.test.labels),
                  "agreement": losses.agreement_utility(p_r, p_t)},
    }


def stage_theory(state: RunState) -> dict | None:
    block = state.cfg["theory"]
    if not block["enabled"]:
        state.null_reasons["theory"] = "theory checks disabled in config"
        return None
    if state.ensemble is None:
        stage_defense(state)
    cfg, data = state.cfg, state.data

    def run():
        seed = sub_seed(cfg["seed"], SLOT_THEORY)
        lam = block["lambda"] if block["lambda"] is not None else cfg["defense"]["lambda"]
        grid = block["grid"]
        defenses = list(state.ensemble.members[:grid])
        attackers = list(state.attackers[:grid])
        n = min(block["n"], len(data.train))
        report = {"minimax_gap": minimax_gap_check(
            defenses, attackers, state.target, np.array(data.train.inputs[:n]), np.array(data.test.inputs),
            lam, "js", block["B"], block["delta"], block["draws"], seed,
        ).to_dict(), "df_gap": None}
        if not block["df_gap"]:
            state.null_reasons["theory.df_gap"] = "df_gap check disabled in config"
        elif not state.attack_models:
            state.null_reasons["theory.df_gap"] = "no attack results to take a clone and query sample from"
        else:
            (ai, label, budget), res = next(iter(state.attack_models.items()))
            m = min(block["n"], len(data.test), len(data.surrogate))
            P = np.array(data.test.inputs[:m])
            if res.generator is not None:
                z = np.random.default_rng(seed).standard_normal((m, res.generator.spec.input_shape[0]))
                with torch.no_grad():
                    Pg = forward(res.generator, z).double().numpy()
            else:
                Pg = np.array(data.surrogate.inputs[:m])
            rep = df_gap_check(state.target, res.clone, P, Pg, power_iters=block["power_iters"])
            d = rep.to_dict()
            d["clone_source"] = {"attack_index": ai, "oracle": label, "budget": budget}
            report["df_gap"] = d
        return report

    return _stage(state, "theory", run)


def _dataset_summary(data: DataBundle) -> dict:
    return {"name": data.train.name.rsplit("/", 1)[0], "n_train": len(data.train), "n_test": len(data.test),
            "input_shape": list(data.train.input_shape), "num_classes": data.train.num_classes,
            "surrogate": data.surrogate.name}


def build_record(state: RunState, defense: dict, theory: dict | None) -> dict:
    for i, att in enumerate(state.attacks):
        for key in ("clone_accuracy", "agreement"):
            if att[key] is None:
                state.null_reasons[f"attacks.{i}.{key}"] = "no queries were answered within budget"
    return {
        "artifact_version": __version__,
        "config": state.cfg,
        "config_hash": config_hash(state.cfg),
        "dataset": _dataset_summary(state.data),
        "target": {"arch": state.target.spec.short_name,
                   "test_accuracy": held_out_accuracy(state.target, state.data.test)},
        "defense": defense,
        "attacks": state.attacks,
        "theory": theory,
        "null_reasons": dict(sorted(state.null_reasons.items())),
        "wall_clock": dict(state.wall_clock),
    }


def new_state(cfg: dict, reuse: bool = True) -> RunState:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return RunState(cfg, out, reuse=reuse)


def run_experiment(cfg: dict, reuse: bool = True, with_theory: bool = True) -> dict:
    """Full pipeline; writes ``results.json`` under the output dir and returns the record."""
    t0 = time.perf_counter()
    state = new_state(cfg, reuse)
    stage_data(state)
    stage_target(state)
    stage_defense(state)
    stage_attacks(state)
    defense = _stage(state, "evaluate", lambda: evaluate_defense(state))
    if with_theory:
        theory = stage_theory(state)
    else:
        theory = None
        state.null_reasons["theory"] = "theory stage not run by this command"
    state.wall_clock["total"] = time.perf_counter() - t0
    record = build_record(state, defense, theory)
    write_results(record, state.out / "results.json")
    return record
