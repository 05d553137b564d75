"""Command-line entry point: train, gradcheck, match and selftest.

Exit codes are a stable contract: 0 success, 1 usage or configuration error,
2 runtime abort (non-finite loss).  Every subcommand is deterministic under
``--seed``.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import assignment, setloss
from .gradbridge import certify_gradient, direct_parameter_head, sample_gradcheck_instance
from .seeding import substream
from .setloss import GroundTruthSet, LossConfig, random_boxes
from .toytask import SceneConfig
from .trainer import NonFiniteLossError, TrainConfig, train, write_metrics_csv

__all__ = ["main"]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_ABORT = 2

_TRAIN_KEYS = {
    "steps": int,
    "batch_size": int,
    "learning_rate": float,
    "optimizer": str,
    "loss_mode": str,
    "seed": int,
    "eval_every": int,
    "hidden_width": int,
    "clip_norm": lambda v: None if v.lower() == "none" else float(v),
}
_LOSS_KEYS = {"lambda_class": float, "lambda_l1": float, "lambda_giou": float}
_SCENE_KEYS = {
    "max_objects": int,
    "num_slots": int,
    "num_classes": int,
    "feature_dim": int,
    "size_min": float,
    "size_max": float,
}


def _parse_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values


def _build_train_config(raw: dict[str, str]) -> TrainConfig:
    train_kw: dict = {}
    loss_kw: dict = {}
    scene_kw: dict = {}
    for key, value in raw.items():
        if key in _TRAIN_KEYS:
            train_kw[key] = _TRAIN_KEYS[key](value) if isinstance(value, str) else value
        elif key in _LOSS_KEYS:
            loss_kw[key] = _LOSS_KEYS[key](value) if isinstance(value, str) else value
        elif key in _SCENE_KEYS:
            scene_kw[key] = _SCENE_KEYS[key](value) if isinstance(value, str) else value
        else:
            raise ValueError(f"unknown configuration key: {key}")
    size_min = scene_kw.pop("size_min", None)
    size_max = scene_kw.pop("size_max", None)
    if size_min is not None or size_max is not None:
        base = SceneConfig()
        scene_kw["size_range"] = (
            size_min if size_min is not None else base.size_range[0],
            size_max if size_max is not None else base.size_range[1],
        )
    return TrainConfig(loss=LossConfig(**loss_kw), scene=SceneConfig(**scene_kw), **train_kw)


def _cmd_train(args: argparse.Namespace) -> int:
    raw: dict = {}
    try:
        if args.config:
            raw.update(_parse_config_file(args.config))
        for key in _TRAIN_KEYS:
            flag = getattr(args, key, None)
            if flag is not None:
                raw[key] = flag
        cfg = _build_train_config(raw)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    try:
        _, rows = train(cfg)
    except NonFiniteLossError as exc:
        print(f"abort: {exc}", file=sys.stderr)
        for record in exc.records:
            print(f"scene: {record}", file=sys.stderr)
        return EXIT_ABORT

    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            write_metrics_csv(rows, fh)
    else:
        write_metrics_csv(rows, sys.stdout)
    return EXIT_OK


def _cmd_gradcheck(args: argparse.Namespace) -> int:
    if args.seeds < 1:
        print("error: --seeds must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        n, m, k = (int(v) for v in args.size.split(","))
    except ValueError:
        print("error: --size expects N,M,K", file=sys.stderr)
        return EXIT_USAGE
    if not (n >= m >= 1 and k >= 2):
        print("error: --size needs N >= M >= 1 and K >= 2", file=sys.stderr)
        return EXIT_USAGE

    builder, count = direct_parameter_head(n, k)
    failures = 0
    for i in range(args.seeds):
        rng = substream(args.seed + i, "gradcheck")
        if args.degenerate_probe:
            # duplicate slot 1 onto slot 0 so two cost rows tie exactly
            params = rng.normal(0.0, 1.0, size=count)
            gts = GroundTruthSet(rng.integers(0, k, size=m), random_boxes(rng, m))
            k1 = k + 1
            params[k1 : 2 * k1] = params[:k1]
            base = n * k1
            params[base + 4 : base + 8] = params[base : base + 4]
        else:
            params, gts = sample_gradcheck_instance(rng, n, m, k)
        report = certify_gradient(builder, gts, LossConfig(), params, step=args.step)
        if not report.ok:
            failures += 1
        print(
            f"seed={args.seed + i} max_rel_err={report.max_relative_error:.3e} "
            f"max_abs_err={report.max_absolute_error:.3e} "
            f"degenerate={str(report.degenerate_flag).lower()} "
            f"stable={str(report.stability_flag).lower()}"
        )
    return EXIT_OK if failures == 0 else EXIT_USAGE


def _cmd_match(args: argparse.Namespace) -> int:
    try:
        cost = assignment.read_cost_matrix(args.file)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(assignment.format_solution(assignment.solve_rectangular(cost)))
    return EXIT_OK


# ---------------------------------------------------------------------------
# selftest suites (reduced-count versions of the property checks)
# ---------------------------------------------------------------------------


def _suite_solver_oracle(seed: int) -> tuple[bool, str]:
    rng = substream(seed, "selftest-solver")
    cases = 200
    for _ in range(cases):
        n = int(rng.integers(1, 8))
        m = int(rng.integers(0, n + 1))
        c = rng.uniform(-1, 1, size=(n, m))
        fast = assignment.solve_rectangular(c)
        slow = assignment.brute_force_assignment(c)
        if fast.total_cost != slow.total_cost:
            return False, f"cost mismatch on {n}x{m}"
        if not assignment.is_degenerate(c).degenerate and fast.mapping != slow.mapping:
            return False, f"mapping mismatch on {n}x{m}"
    return True, f"{cases} cases"


def _random_instance(rng: np.random.Generator, n: int, m: int, k: int):
    logits = rng.uniform(-3.0, 3.0, size=(n, k + 1))
    preds = setloss.make_predictions(logits, random_boxes(rng, n))
    gts = GroundTruthSet(rng.integers(0, k, size=m), random_boxes(rng, m))
    return preds, gts


def _suite_decomposition(seed: int) -> tuple[bool, str]:
    rng = substream(seed, "selftest-decomposition")
    cfg = LossConfig()
    cases = 200
    for _ in range(cases):
        n = int(rng.integers(1, 9))
        m = int(rng.integers(0, min(n, 5) + 1))
        k = int(rng.integers(2, 6))
        preds, gts = _random_instance(rng, n, m, k)
        sol, bd = setloss.hungarian_loss_decomposed(preds, gts, cfg)
        direct = float(setloss.hungarian_loss_direct(preds, gts, sol, cfg).total)
        if abs(direct - float(bd.total)) > 1e-12 * max(1.0, abs(direct)):
            return False, "identity violated"
    return True, f"{cases} cases"


def _suite_alignment(seed: int) -> tuple[bool, str]:
    rng = substream(seed, "selftest-alignment")
    cfg = LossConfig()
    cases = 50
    checked = 0
    for _ in range(cases):
        n = int(rng.integers(2, 6))
        m = int(rng.integers(1, min(n, 3) + 1))
        preds, gts = _random_instance(rng, n, m, 3)
        cost = setloss.build_cost_matrix(preds, gts, cfg).values
        if assignment.is_degenerate(cost).degenerate:
            continue
        sol, _ = setloss.hungarian_loss_decomposed(preds, gts, cfg)
        best_map, _ = setloss.enumerate_loss_argmin(preds, gts, cfg)
        if sol.mapping != best_map:
            return False, "matcher missed the loss argmin"
        checked += 1
    return True, f"{checked} non-degenerate cases"


def _suite_padding(seed: int) -> tuple[bool, str]:
    rng = substream(seed, "selftest-padding")
    cases = 50
    done = 0
    while done < cases:
        n = int(rng.integers(2, 8))
        m = int(rng.integers(1, n))
        c = rng.uniform(-1, 1, size=(n, m))
        best = assignment.brute_force_assignment(c)
        gap = _optimality_gap(c, best)
        if gap < 1e-6:
            continue
        padded = assignment.pad_square(c, 1e-9, seed=int(rng.integers(0, 2**31)))
        square = assignment.solve_rectangular(padded)
        restricted = square.mapping[:m]
        if restricted != best.mapping:
            return False, f"padding changed the mapping on {n}x{m}"
        if abs(assignment.mapping_cost(c, restricted) - best.total_cost) > 2e-9:
            return False, "padding changed the cost"
        done += 1
    return True, f"{cases} cases"


def _optimality_gap(cost: np.ndarray, best) -> float:
    second = np.inf
    for mapping in setloss.iter_mappings(cost.shape[0], cost.shape[1]):
        if mapping == best.mapping:
            continue
        second = min(second, assignment.mapping_cost(cost, mapping))
    return second - best.total_cost


def _cmd_selftest(args: argparse.Namespace) -> int:
    suites = [
        ("solver-oracle", _suite_solver_oracle),
        ("decomposition-identity", _suite_decomposition),
        ("alignment", _suite_alignment),
        ("padding-conformance", _suite_padding),
    ]
    ok = True
    for name, fn in suites:
        passed, detail = fn(args.seed)
        print(f"{name}: {'ok' if passed else 'FAIL'} ({detail})")
        ok = ok and passed
    return EXIT_OK if ok else EXIT_USAGE


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="setmatch")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train the toy model and write metrics CSV")
    p_train.add_argument("--config", help="flat key = value config file")
    p_train.add_argument("--out", help="metrics CSV path (default: stdout)")
    p_train.add_argument("--steps", type=int)
    p_train.add_argument("--batch-size", type=int, dest="batch_size")
    p_train.add_argument("--learning-rate", "--lr", type=float, dest="learning_rate")
    p_train.add_argument("--optimizer", choices=["sgd", "adam"])
    p_train.add_argument("--loss-mode", choices=["aligned", "baseline"], dest="loss_mode")
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--eval-every", type=int, dest="eval_every")
    p_train.add_argument("--hidden-width", type=int, dest="hidden_width")
    p_train.set_defaults(func=_cmd_train)

    p_grad = sub.add_parser("gradcheck", help="certify solver gradients against finite differences")
    p_grad.add_argument("--seeds", type=int, default=20, help="number of instances")
    p_grad.add_argument("--seed", type=int, default=0, help="base seed")
    p_grad.add_argument("--size", default="5,3,3", help="instance size as N,M,K")
    p_grad.add_argument("--step", type=float, default=1e-4)
    p_grad.add_argument("--degenerate-probe", action="store_true", help="duplicate a slot to force ties")
    p_grad.set_defaults(func=_cmd_gradcheck)

    p_match = sub.add_parser("match", help="solve one cost matrix from a text file")
    p_match.add_argument("file")
    p_match.set_defaults(func=_cmd_match)

    p_self = sub.add_parser("selftest", help="run reduced property suites")
    p_self.add_argument("--seed", type=int, default=0)
    p_self.set_defaults(func=_cmd_selftest)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
