"""Command-line entry point: reproducible dataset generation, training,
evaluation and rollout experiments.

Every command accepts ``--config FILE`` (JSON) with flags overriding file
values; the fully resolved configuration is copied into the output directory
so a run can be reproduced from that file alone. Exit codes: 0 success,
1 runtime/numerical failure, 2 usage or configuration error.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import evaluation, kinetics, losses, massmap, operator, training
from .errors import ConfigError, StiffonetError

USAGE_EXIT = 2
RUNTIME_EXIT = 1


def _load_config(path):
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _resolve(args, parser, config: dict) -> dict:
    """Merge config-file values with CLI flags; flags win when given."""
    resolved = dict(config)
    for key, value in vars(args).items():
        if key in ("command", "config", "func"):
            continue
        if value is not None or key not in resolved:
            resolved[key] = value
    return resolved


def _write_resolved(out_dir: Path, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    clean = {k: v for k, v in resolved.items() if not callable(v)}
    (out_dir / "config.json").write_text(json.dumps(clean, indent=2, sort_keys=True) + "\n")


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        nu, nv = text.lower().split("x")
        grid = (int(nu), int(nv))
    except ValueError as exc:
        raise ConfigError(f"grid must look like '11x11', got {text!r}") from exc
    if grid[0] < 1 or grid[1] < 1:
        raise ConfigError(f"grid must be at least 1x1, got {text!r}")
    return grid


# -- gen -------------------------------------------------------------------


def cmd_gen(resolved: dict) -> int:
    out_dir = Path(resolved["out"])
    mech = kinetics.make_mechanism(resolved["mechanism"],
                                   resolved.get("mechanism_config") or None)
    grid = _parse_grid(resolved["grid"])
    seg_len = resolved["segment"] + 1
    steps = resolved["steps"]
    if steps % resolved["segment"] != 0:
        raise ConfigError(
            f"steps ({steps}) must be a multiple of the segment length "
            f"({resolved['segment']}); nearest is {(steps // resolved['segment']) * resolved['segment']}"
        )
    raw = kinetics.generate_trajectories(mech, grid, resolved["dt"], steps,
                                         tol=resolved["tol"])
    train, test, tri, tei = kinetics.split_dataset(raw, resolved["dt"], mech.schema,
                                                   seed=resolved["seed"],
                                                   train_frac=resolved["train_frac"])
    kinetics.save_dataset(out_dir, train, test, mech, tri, tei, seg_len)
    _write_resolved(out_dir, resolved)
    print(f"wrote {raw.shape[0]} trajectories ({len(tri)} train / {len(tei)} test), "
          f"{steps} steps of dt={resolved['dt']} to {out_dir}")
    return 0


# -- train -----------------------------------------------------------------


def _validate_train(resolved: dict) -> None:
    if resolved["paradigm"] not in ("one-step", "two-step"):
        raise ConfigError(f"unknown paradigm {resolved['paradigm']!r}")
    for key in ("loss", "trunk_loss", "branch_loss"):
        if resolved.get(key) and resolved[key] not in losses.LOSS_KINDS:
            raise ConfigError(f"unknown loss kind {resolved[key]!r}")
    if resolved["paradigm"] == "two-step":
        if resolved["pou"]:
            raise ConfigError("two-step training excludes the partition-of-unity trunk")
        if resolved["com"]:
            raise ConfigError("two-step training excludes the mass-conservation loss")


def _train_config(resolved: dict, kind: str, seed: int) -> training.TrainConfig:
    return training.TrainConfig(
        epochs=resolved["epochs"],
        loss=losses.LossConfig(kind, com_enabled=resolved["com"],
                               com_multiplier=resolved["com_multiplier"]),
        optimizer=training.OptimizerConfig(base_lr=resolved["lr"],
                                           halve_every=resolved["halve_every"]),
        minibatches_before=resolved["minibatches"],
        minibatches_after=resolved["minibatches_after"],
        switch_epoch=resolved["switch_epoch"],
        seed=seed,
        eval_every=resolved["eval_every"],
        weight_first_epoch=resolved["weight_first_epoch"],
        weight_every=resolved["weight_every"],
    )


def _prepare_segments(resolved: dict):
    data = kinetics.load_dataset(resolved["data"])
    seg_len = resolved.get("segment_len") or data["segment_len"]
    schema = data["schema"]
    collapsed_from = None
    splits = {}
    if resolved["massmap"]:
        if not schema.mass_group:
            raise ConfigError("mass-map training needs a schema with a mass group")
        collapsed_from = schema
        collapsed = {}
        for split in ("train", "test"):
            arr, new_schema = massmap.batch_transform(data[split].raw, schema,
                                                      massmap.COLLAPSE)
            collapsed[split] = arr
        schema = new_schema
        norm = operator.compute_norm_params(collapsed["train"], schema)
        for split in ("train", "test"):
            splits[split] = kinetics.TrajectoryDataset(collapsed[split], data["dt"],
                                                       schema, norm, split)
    else:
        splits = {"train": data["train"], "test": data["test"]}
    seg_train = kinetics.time_decompose(splits["train"], seg_len)
    seg_test = kinetics.time_decompose(splits["test"], seg_len)
    return data, seg_train, seg_test, collapsed_from


def _build_model(resolved: dict, seg, seed: int, mode: str, q_star=None,
                 collapsed_from=None) -> operator.DeepONetModel:
    j, p = seg.schema.j, resolved["p"]
    branch_cfg, branch_params = training.build_networks(
        resolved["branch"], j, j * p, resolved["branch_width"],
        resolved["branch_layers"], seed, "branch_init")
    trunk_cfg, trunk_params = training.build_networks(
        resolved["trunk"], 1, j * p, resolved["trunk_width"],
        resolved["trunk_layers"], seed, "trunk_init",
        order=resolved["kan_order"], alpha=resolved["kan_alpha"],
        beta=resolved["kan_beta"])
    one_step = mode == operator.ONE_STEP
    return operator.DeepONetModel(
        schema=seg.schema, norm=seg.norm,
        branch_cfg=branch_cfg, branch_params=branch_params,
        trunk_cfg=trunk_cfg, trunk_params=trunk_params,
        p=p, t_norm=operator.time_grid(seg.seg_len), mode=mode,
        pou=resolved["pou"] if one_step else False,
        bound_factor=resolved["bound"] if one_step else 0.0,
        q_star=q_star, collapsed_from=collapsed_from,
    )


def cmd_train(resolved: dict) -> int:
    _validate_train(resolved)
    out_dir = Path(resolved["out"])
    data, seg_train, seg_test, collapsed_from = _prepare_segments(resolved)
    _write_resolved(out_dir, resolved)
    for run in range(resolved["runs"]):
        seed = resolved["seed"] + run
        run_dir = out_dir / f"run-{run}"
        run_dir.mkdir(parents=True, exist_ok=True)
        weight_csv = (run_dir / "weights.csv") if resolved["log_weights"] else None
        if resolved["paradigm"] == "one-step":
            kind = resolved.get("loss") or losses.NON_ADAPTIVE
            model = _build_model(resolved, seg_train, seed, operator.ONE_STEP,
                                 collapsed_from=collapsed_from)
            cfg = _train_config(resolved, kind, seed)
            history = training.train_one_step(model, seg_train, seg_test, cfg,
                                              weight_csv=weight_csv)
            training.write_history_csv(run_dir / "history.csv", history)
            operator.save_model(model, run_dir / "checkpoint")
            print(f"run {run}: final train {history.final_train_error():.6f} "
                  f"test {history.final_test_error():.6f}")
        else:
            trunk_kind = resolved.get("trunk_loss") or resolved.get("loss") or losses.NON_ADAPTIVE
            branch_kind = resolved.get("branch_loss") or resolved.get("loss") or losses.NON_ADAPTIVE
            model = _build_model(resolved, seg_train, seed, operator.TWO_STEP,
                                 collapsed_from=collapsed_from)
            trunk_cfg_t = _train_config(resolved, trunk_kind, seed)
            a_val, trunk_hist = training.train_trunk(model.trunk_cfg, model.trunk_params,
                                                     seg_train, trunk_cfg_t,
                                                     weight_csv=weight_csv)
            training.write_history_csv(run_dir / "history-trunk.csv", trunk_hist)
            artifacts = training.factorize_trunk(
                model.trunk_cfg, model.trunk_params, seg_train,
                a_opt=a_val if resolved["use_optimized_a"] else None)
            branch_cfg_t = _train_config(resolved, branch_kind, seed)
            branch_hist = training.train_branch(model.branch_cfg, model.branch_params,
                                                artifacts, seg_train, seg_test,
                                                branch_cfg_t)
            training.write_history_csv(run_dir / "history-branch.csv", branch_hist)
            model.q_star = artifacts.q_star
            operator.save_model(model, run_dir / "checkpoint")
            print(f"run {run}: trunk {trunk_hist.final_train_error():.6f}, "
                  f"branch train {branch_hist.final_train_error():.6f} "
                  f"test {branch_hist.final_test_error():.6f}")
    return 0


# -- eval ------------------------------------------------------------------


def _predict_segments(model, seg, original_schema):
    """Teacher-forced physical-space predictions for every segment."""
    if model.collapsed_from is not None:
        ics, _ = massmap.batch_transform(seg.branch_inputs, original_schema,
                                         massmap.COLLAPSE)
    else:
        ics = seg.branch_inputs
    y0n = operator.normalize(ics, model.schema, model.norm)
    pred_norm = operator.forward(model, y0n).value
    pred = operator.denormalize(pred_norm, model.schema, model.norm)
    if model.collapsed_from is not None:
        pred, _ = massmap.batch_transform(pred, original_schema, massmap.EXPAND)
    return pred


def cmd_eval(resolved: dict) -> int:
    out_dir = Path(resolved["out"])
    model = operator.load_model(resolved["checkpoint"])
    data = kinetics.load_dataset(resolved["data"])
    split = resolved["split"]
    ds = data[split]
    expected = model.collapsed_from if model.collapsed_from is not None else model.schema
    if ds.schema != expected:
        raise ConfigError(
            "checkpoint/dataset schema mismatch:\n"
            f"  checkpoint expects: {expected.to_dict()}\n"
            f"  dataset provides:   {ds.schema.to_dict()}"
        )
    seg = kinetics.time_decompose(ds, model.n_t1)
    _write_resolved(out_dir, resolved)
    pred = _predict_segments(model, seg, ds.schema)
    for mode in (evaluation.SEGMENTED, evaluation.RECONSTRUCTED):
        rep = evaluation.report(seg.segments, pred, ds.schema, mode=mode,
                                n_originals=seg.n_originals)
        evaluation.write_summary_csv(out_dir / f"report_{mode}_summary.csv", rep)
        evaluation.write_sample_errors_csv(out_dir / f"report_{mode}_samples.csv", rep)
        print(f"{split} {mode}: global mean relative L2 = {rep.global_mean:.6f}")
    if resolved["recursive"]:
        n_seg = seg.n_seg if resolved["recursive"] < 0 else resolved["recursive"]
        if n_seg > seg.n_seg:
            raise ConfigError(f"--recursive {n_seg} exceeds the {seg.n_seg} segments available")
        n_t = model.n_t1 - 1
        truth = ds.raw[:, : n_seg * n_t + 1, :]
        expand = None
        if model.collapsed_from is not None:
            expand = lambda arr: massmap.batch_transform(arr, ds.schema, massmap.EXPAND)[0]
            collapse = lambda arr: massmap.batch_transform(arr, ds.schema, massmap.COLLAPSE)[0]
        else:
            collapse = None
        curves = evaluation.error_accumulation(model, truth, n_seg,
                                               collapse=collapse, expand=expand)
        evaluation.write_accumulation_csv(out_dir / "accumulation.csv", curves,
                                          ds.schema.names)
        rollout_errors = evaluation.relative_l2_per_sample_state(truth, curves["rollout"])
        rep = evaluation.build_report(rollout_errors, ds.schema.names)
        evaluation.write_summary_csv(out_dir / "report_rollout_summary.csv", rep)
        evaluation.write_sample_errors_csv(out_dir / "report_rollout_samples.csv", rep)
        print(f"{split} rollout over {n_seg} segments: global mean relative L2 = "
              f"{rep.global_mean:.6f}, worst q90 = {rep.q90.max():.6f}")
    return 0


# -- massmap-check ------------------------------------------------------------


def cmd_massmap_check(resolved: dict) -> int:
    ns = [int(x) for x in str(resolved["species"]).split(",")]
    samples = resolved["samples"]
    rng = np.random.default_rng(resolved["seed"])
    failed = False
    for n in ns:
        ys = rng.dirichlet(np.ones(n), size=samples)
        worst_rt, worst_sum = 0.0, 0.0
        for y in ys:
            z = massmap.forward_map(y)
            back = massmap.inverse_map(z)
            worst_rt = max(worst_rt, float(np.abs(back - y).max()))
            worst_sum = max(worst_sum, abs(float(back.sum()) - 1.0))
        ok = worst_rt < 1e-10 and worst_sum < 1e-12
        failed |= not ok
        print(f"n={n}: round-trip max {worst_rt:.3e}, sum deviation max "
              f"{worst_sum:.3e} [{'PASS' if ok else 'FAIL'}]")
    return RUNTIME_EXIT if failed else 0


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stiffonet",
        description="Operator-network surrogates for stiff reaction kinetics.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a trajectory dataset")
    gen.add_argument("--config", help="JSON config file; flags override")
    gen.add_argument("--out", required=True)
    gen.add_argument("--mechanism", choices=["rober", "toy-combustion"])
    gen.add_argument("--grid", help="IC grid, e.g. 11x11")
    gen.add_argument("--steps", type=int, help="total time steps (multiple of --segment)")
    gen.add_argument("--dt", type=float)
    gen.add_argument("--segment", type=int, help="steps per segment (n_t)")
    gen.add_argument("--seed", type=int)
    gen.add_argument("--train-frac", dest="train_frac", type=float)
    gen.add_argument("--tol", type=float, help="integrator local error tolerance")
    gen.set_defaults(func=cmd_gen, defaults={
        "mechanism": "rober", "grid": "11x11", "steps": 990, "dt": 1e-3,
        "segment": 99, "seed": 7, "train_frac": 0.8, "tol": 1e-10,
        "mechanism_config": None,
    })

    train = sub.add_parser("train", help="train a surrogate on a dataset")
    train.add_argument("--config")
    train.add_argument("--data", required=True, help="dataset directory from gen")
    train.add_argument("--out", required=True)
    train.add_argument("--paradigm", choices=["one-step", "two-step"])
    train.add_argument("--loss", choices=list(losses.LOSS_KINDS))
    train.add_argument("--trunk-loss", dest="trunk_loss", choices=list(losses.LOSS_KINDS))
    train.add_argument("--branch-loss", dest="branch_loss", choices=list(losses.LOSS_KINDS))
    train.add_argument("--branch", choices=["resnet", "kan"])
    train.add_argument("--branch-width", dest="branch_width", type=int)
    train.add_argument("--branch-layers", dest="branch_layers", type=int)
    train.add_argument("--trunk", choices=["resnet", "kan"])
    train.add_argument("--trunk-width", dest="trunk_width", type=int)
    train.add_argument("--trunk-layers", dest="trunk_layers", type=int)
    train.add_argument("--kan-order", dest="kan_order", type=int)
    train.add_argument("--kan-alpha", dest="kan_alpha", type=float)
    train.add_argument("--kan-beta", dest="kan_beta", type=float)
    train.add_argument("--p", type=int, help="basis functions per state variable")
    train.add_argument("--epochs", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--halve-every", dest="halve_every", type=int)
    train.add_argument("--minibatches", type=int)
    train.add_argument("--minibatches-after", dest="minibatches_after", type=int)
    train.add_argument("--switch-epoch", dest="switch_epoch", type=int)
    train.add_argument("--eval-every", dest="eval_every", type=int)
    train.add_argument("--weight-first", dest="weight_first_epoch", type=int)
    train.add_argument("--weight-every", dest="weight_every", type=int)
    train.add_argument("--segment-len", dest="segment_len", type=int,
                       help="override the dataset's segment length (points)")
    train.add_argument("--pou", action="store_true", default=None)
    train.add_argument("--no-pou", dest="pou", action="store_false", default=None)
    train.add_argument("--bound", type=float)
    train.add_argument("--com", action="store_true", default=None)
    train.add_argument("--no-com", dest="com", action="store_false", default=None)
    train.add_argument("--com-multiplier", dest="com_multiplier", type=float)
    train.add_argument("--massmap", action="store_true", default=None)
    train.add_argument("--use-optimized-a", dest="use_optimized_a",
                       action="store_true", default=None)
    train.add_argument("--log-weights", dest="log_weights", action="store_true",
                       default=None)
    train.add_argument("--seed", type=int)
    train.add_argument("--runs", type=int)
    train.set_defaults(func=cmd_train, defaults={
        "paradigm": "one-step", "loss": "ad-b", "trunk_loss": None,
        "branch_loss": None, "branch": "resnet", "branch_width": 48,
        "branch_layers": 2, "trunk": "kan", "trunk_width": 16, "trunk_layers": 2,
        "kan_order": 3, "kan_alpha": 1.0, "kan_beta": 1.0, "p": 16,
        "epochs": 3000, "lr": 2e-3, "halve_every": 1000, "minibatches": 8,
        "minibatches_after": 16, "switch_epoch": 1500, "eval_every": 50,
        "weight_first_epoch": 100, "weight_every": 50, "segment_len": None,
        "pou": True, "bound": 1.05, "com": True, "com_multiplier": 0.1,
        "massmap": False, "use_optimized_a": False, "log_weights": False,
        "seed": 0, "runs": 1,
    })

    ev = sub.add_parser("eval", help="evaluate a checkpoint against a dataset")
    ev.add_argument("--config")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--split", choices=["train", "test"])
    ev.add_argument("--recursive", type=int,
                    help="autoregressive rollout over N segments (-1 = full horizon)")
    ev.set_defaults(func=cmd_eval, defaults={"split": "test", "recursive": 0})

    rec = sub.add_parser("recurse", help="eval with a full-horizon recursive rollout")
    rec.add_argument("--config")
    rec.add_argument("--checkpoint", required=True)
    rec.add_argument("--data", required=True)
    rec.add_argument("--out", required=True)
    rec.add_argument("--split", choices=["train", "test"])
    rec.add_argument("--recursive", type=int)
    rec.set_defaults(func=cmd_eval, defaults={"split": "test", "recursive": -1})

    mm = sub.add_parser("massmap-check", help="simplex-map round-trip self-test")
    mm.add_argument("--config")
    mm.add_argument("--species", help="comma list of species counts, e.g. 2,3,5,11")
    mm.add_argument("--samples", type=int)
    mm.add_argument("--seed", type=int)
    mm.set_defaults(func=cmd_massmap_check, defaults={
        "species": "2,3,5,11", "samples": 100000, "seed": 0,
    })
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _load_config(getattr(args, "config", None))
        defaults = args.defaults
        resolved = dict(defaults)
        resolved.update({k: v for k, v in config.items() if k in defaults or k in vars(args)})
        for key, value in vars(args).items():
            if key in ("command", "config", "func", "defaults"):
                continue
            if value is not None:
                resolved[key] = value
            elif key not in resolved:
                resolved[key] = None
        return args.func(resolved)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except StiffonetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_EXIT


if __name__ == "__main__":
    sys.exit(main())
