"""Operator surface: generate data, train, rank, evaluate, and run oracle suites.

Configuration is TOML (flat key/value); command-line flags override config
values, and repeated `--set key=value` handles anything without a dedicated
flag.  Exit codes are stable: 0 ok, 2 usage/validation, 3 reward transport,
4 numeric failure, 5 checkpoint/shape mismatch.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

import numpy as np

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - version dependent
    import tomli as tomllib

from . import environment, evalkit, policy, reward, scorer, trainer
from .autodiff import ShapeError, Tape, finite_diff_check
from .core import DatasetError, ProfileError, load_dataset
from .policy import PLDistribution
from .scorer import CheckpointError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_REWARD = 3
EXIT_NUMERIC = 4
EXIT_SHAPE = 5


class UsageError(ValueError):
    pass


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _apply_overrides(config: dict, pairs: list[str] | None) -> dict:
    config = dict(config)
    for pair in pairs or []:
        if "=" not in pair:
            raise UsageError(f"--set needs key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        config[key.strip()] = value
    return config


def _pick(config: dict, cls, **flag_values) -> dict:
    """Fields of `cls` taken from config, overridden by non-None flags."""
    names = {f.name for f in dataclasses.fields(cls)}
    out = {k: v for k, v in config.items() if k in names}
    out.update({k: v for k, v in flag_values.items() if v is not None and k in names})
    return out


def _echo(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def _attach_embeddings(examples, embeddings_path, width, table_seed):
    if embeddings_path:
        provider = environment.EmbeddingProvider(mode="file", width=width, path=embeddings_path)
    else:
        provider = environment.EmbeddingProvider(mode="hash", width=width, table_seed=table_seed)
    return provider.attach(examples)


def cmd_gen_data(args) -> int:
    config = _apply_overrides(_load_config(args.spec), args.set)
    if args.users < 1:
        raise UsageError("--users must be >= 1")
    spec = environment.WorldSpec(**_pick(config, environment.WorldSpec, seed=args.seed))
    examples, worlds = environment.generate_dataset(spec, args.users)
    from .core import save_dataset

    save_dataset(args.out, examples, header=environment.dataset_header(spec, args.users))
    worlds_out = args.worlds_out or str(args.out) + ".worlds.jsonl"
    environment.save_worlds(worlds_out, worlds)
    if args.embeddings_out:
        environment.save_embeddings(args.embeddings_out, examples, spec.embed_width)
    _echo(
        {
            "command": "gen-data",
            "seed": spec.seed,
            "users": args.users,
            "out": str(args.out),
            "worlds_out": worlds_out,
            "embeddings_out": args.embeddings_out,
        }
    )
    return EXIT_OK


def cmd_train(args) -> int:
    config = _apply_overrides(_load_config(args.config), args.set)
    train_config = trainer.TrainConfig(
        **_pick(config, trainer.TrainConfig, seed=args.seed, epochs=args.epochs, k=args.k)
    )
    d_model = int(config.get("d_model", 32))
    heads = int(config.get("heads", 2))
    layers = int(config.get("layers", 2))
    embed_width = int(config.get("embed_width", d_model))
    table_seed = int(config.get("table_seed", 0))
    if embed_width != d_model:
        raise ShapeError(f"embed_width={embed_width} must equal d_model={d_model}")

    examples = load_dataset(args.data)
    examples = _attach_embeddings(examples, args.embeddings, embed_width, table_seed)

    if args.reward == "synthetic":
        worlds_path = args.worlds or str(args.data) + ".worlds.jsonl"
        oracle = reward.SyntheticOracle(environment.load_worlds(worlds_path))
    else:
        oracle = reward.HttpRewardOracle(args.endpoint or config.get("endpoint"))

    params = scorer.init_params(train_config.seed, d_model=d_model, heads=heads, layers=layers)
    result = trainer.train(examples, train_config, oracle, params, args.out)
    _echo(
        {
            "command": "train",
            "seed": train_config.seed,
            "best_checkpoint": result.best_checkpoint,
            "best_val_reward": result.best_val_reward,
            "log": result.log_path,
            "epochs": len(result.history),
            "samples_per_example": train_config.samples_per_example,
            "batch_size": train_config.batch_size,
        }
    )
    return EXIT_OK


def cmd_rank(args) -> int:
    params = scorer.load_checkpoint(args.checkpoint)
    examples = load_dataset(args.data)
    examples = _attach_embeddings(examples, args.embeddings, params.d_model, args.table_seed)
    for ex in examples:
        if args.k > ex.context.n:
            raise UsageError(f"--k {args.k} exceeds the {ex.context.n} records of {ex.user_id!r}")
        scores = scorer.encode_records(ex.context, params)
        profile = policy.top_k_profile(PLDistribution(scores.scores, args.k))
        print(
            json.dumps(
                {
                    "user_id": ex.user_id,
                    "profile": [ex.context.records[i].id for i in profile],
                    "seed": args.seed,
                },
                sort_keys=True,
            )
        )
    return EXIT_OK


def _read_lines(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh]


def cmd_eval(args) -> int:
    preds = _read_lines(args.predictions)
    refs = _read_lines(args.references)
    if len(preds) != len(refs):
        raise UsageError(f"{len(preds)} predictions vs {len(refs)} references")
    report: dict[str, float] = {}
    if args.metric_set == "classification":
        report.update(evalkit.classification_metrics(preds, refs))
    elif args.metric_set == "regression":
        try:
            report.update(
                evalkit.regression_metrics([float(p) for p in preds], [float(r) for r in refs])
            )
        except ValueError as exc:
            raise UsageError(f"regression metrics need numeric lines: {exc}") from None
    else:
        report["rouge1"] = float(np.mean([evalkit.rouge1(p, r) for p, r in zip(preds, refs)]))
        report["rougeL"] = float(np.mean([evalkit.rougeL(p, r) for p, r in zip(preds, refs)]))
    payload = {"command": "eval", "metric_set": args.metric_set, "seed": args.seed, **report}
    if args.format == "tsv":
        print("\t".join(payload))
        print("\t".join(str(payload[k]) for k in payload))
    else:
        _echo(payload)
    return EXIT_OK


def _oracle_pl(seed: int) -> dict:
    rng = np.random.default_rng(seed)
    worst = 0.0
    cases = 0
    for n in range(1, 7):
        for k in range(1, min(n, 3) + 1):
            profiles = policy.enumerate_profiles(n, k)
            for _ in range(100):
                dist = PLDistribution(rng.uniform(0.05, 1.0, size=n), k)
                total = float(policy.profile_probs(dist, profiles).sum())
                worst = max(worst, abs(total - 1.0))
                cases += 1
    return {"suite": "pl", "cases": cases, "max_normalization_error": worst, "ok": worst < 1e-9}


def _oracle_gradient(seed: int) -> dict:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for trial in range(5):
        n = int(rng.integers(2, 5))
        k = int(rng.integers(1, min(n, 2) + 1))
        d_model = 4
        params = scorer.init_params(int(rng.integers(1 << 30)), d_model=d_model, heads=1, layers=1)
        example = _random_embedded_example(rng, n, d_model)
        profile = tuple(rng.permutation(n)[:k].tolist())

        def objective(tensors):
            ps = scorer.ScorerParams(
                d_model, 1, 1, type(params.tensors)(zip(params.tensors.keys(), tensors))
            )
            tape = Tape()
            node, leaves = scorer.propensity_node(tape, example.context, ps)
            lp = policy.logprob_node(tape, node, profile)
            tape.backward(lp)
            grads = [
                leaves[name].grad if leaves[name].grad is not None else np.zeros_like(t)
                for name, t in ps.tensors.items()
            ]
            return float(lp.value[0, 0]), grads

        err = finite_diff_check(objective, list(params.tensors.values()), h=1e-5)
        worst = max(worst, err)
    return {"suite": "gradient", "trials": 5, "max_rel_error": worst, "ok": worst < 1e-5}


def _random_embedded_example(rng, n, d_model):
    from .core import Context, DatasetExample, Record

    records = tuple(
        Record(f"r{i}", f"in {i}", f"out {i}", rng.standard_normal((int(rng.integers(1, 4)), d_model)))
        for i in range(n)
    )
    context = Context(
        "query", records, "ref", rng.standard_normal((int(rng.integers(1, 4)), d_model))
    )
    return DatasetExample("u", context)


def _oracle_elbo(seed: int) -> dict:
    rng = np.random.default_rng(seed)
    failures = 0
    for _ in range(100):
        n = int(rng.integers(2, 6))
        k = int(rng.integers(1, min(n, 3) + 1))
        dist = PLDistribution(rng.uniform(0.05, 1.0, size=n), k)
        likelihoods = rng.uniform(0.05, 1.0, size=policy.perm_count(n, k))
        lhs, rhs, holds = evalkit.elbo_check(
            dist, lambda p, arr=likelihoods: float(arr[_profile_rank(p, n, k)])
        )
        if not holds:
            failures += 1
    return {"suite": "elbo", "instances": 100, "violations": failures, "ok": failures == 0}


def _profile_rank(profile, n: int, k: int) -> int:
    """Lexicographic rank of a profile among enumerate_profiles(n, k)."""
    rank = 0
    used = []
    for j, idx in enumerate(profile):
        smaller = sum(1 for v in range(idx) if v not in used)
        rank += smaller * policy.perm_count(n - j - 1, k - j - 1)
        used.append(idx)
    return rank


def _oracle_regret(args) -> dict:
    examples = load_dataset(args.data)
    worlds_path = args.worlds or str(args.data) + ".worlds.jsonl"
    worlds = environment.load_worlds(worlds_path)
    if args.checkpoint:
        params = scorer.load_checkpoint(args.checkpoint)
    else:
        params = scorer.init_params(args.seed)
    examples = _attach_embeddings(examples, args.embeddings, params.d_model, args.table_seed)
    reports = []
    violations = 0
    for ex in examples:
        report = evalkit.regret_report(worlds[ex.user_id], ex.context, params, args.k)
        ratios = report.ratios()
        slack = 1e-9
        if (
            report.policy_utility > report.optimal_utility + slack
            or report.cosine_utility > report.optimal_utility + slack
            or report.bm25_utility > report.optimal_utility + slack
        ):
            violations += 1
        reports.append({"user_id": ex.user_id, **ratios})
    mean = {
        key: float(np.mean([r[key] for r in reports])) for key in ("policy", "cosine", "bm25")
    }
    return {
        "suite": "regret",
        "examples": len(reports),
        "mean_ratios": mean,
        "per_example": reports,
        "violations": violations,
        "ok": violations == 0,
    }


def cmd_oracle(args) -> int:
    if args.suite == "pl":
        result = _oracle_pl(args.seed)
    elif args.suite == "gradient":
        result = _oracle_gradient(args.seed)
    elif args.suite == "elbo":
        result = _oracle_elbo(args.seed)
    else:
        if not args.data:
            raise UsageError("oracle regret needs --data")
        result = _oracle_regret(args)
    result["seed"] = args.seed
    if args.format == "tsv":
        keys = [k for k in result if k != "per_example"]
        print("\t".join(keys))
        print("\t".join(json.dumps(result[k]) if isinstance(result[k], dict) else str(result[k]) for k in keys))
    else:
        _echo(result)
    return EXIT_OK if result["ok"] else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="purple", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset with ground-truth worlds")
    p.add_argument("--spec", help="TOML world-spec file")
    p.add_argument("--users", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--embeddings-out")
    p.add_argument("--worlds-out")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the scorer with REINFORCE")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="TOML training config")
    p.add_argument("--reward", choices=("synthetic", "http"), default="synthetic")
    p.add_argument("--out", required=True)
    p.add_argument("--worlds", help="worlds JSONL for the synthetic reward")
    p.add_argument("--embeddings", help="embedding sidecar (hash embeddings when omitted)")
    p.add_argument("--endpoint", help="reward service address for --reward http")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rank", help="emit the top-K profile per example")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--embeddings")
    p.add_argument("--table-seed", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("eval", help="score prediction files against references")
    p.add_argument("--metric-set", choices=("classification", "regression", "generation"), required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--format", choices=("json", "tsv"), default="json")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("oracle", help="run a brute-force verification suite")
    p.add_argument("--suite", choices=("pl", "gradient", "elbo", "regret"), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data")
    p.add_argument("--worlds")
    p.add_argument("--embeddings")
    p.add_argument("--checkpoint")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--table-seed", type=int, default=0)
    p.add_argument("--format", choices=("json", "tsv"), default="json")
    p.set_defaults(func=cmd_oracle)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except reward.RewardTransportError as exc:
        print(f"reward transport failure: {exc}", file=sys.stderr)
        return EXIT_REWARD
    except (trainer.NonFiniteGradientError, FloatingPointError, policy.DegeneracyError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, ShapeError, scorer.EmbeddingsMissingError) as exc:
        print(f"shape/checkpoint mismatch: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except (UsageError, DatasetError, ProfileError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
