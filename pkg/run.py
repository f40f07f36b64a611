"""
RUN - command-line entry point for the proximal off-policy evaluation toolkit

Subcommands:
- run:    replication grid, writes raw/summary/timings CSVs and a manifest
- verify: identification certificates (exit code 1 when any fails)
- truth:  exact policy values by enumeration
- sample: JSON-lines trajectories from the logging policy
"""

import argparse
import json
import sys
import traceback
from pathlib import Path

import experiment_runner
from config import SCENARIO_POLICIES, ExperimentConfig, configure_logging, load_config_dict
from errors import ProximalOpeError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="run.py", description="Proximal off-policy evaluation experiments")
    parser.add_argument("--log-level", default=None, help="overrides PRL_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="experiment config JSON document")
        p.add_argument("--seed", type=int, help="base seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--scenario", choices=["noisyobs", "sticky_shift"])
        p.add_argument("--eps", type=float, dest="eps_noise", help="observation noise")
        p.add_argument("--policy", help="target policy name")
        p.add_argument("--gamma", type=float)
        p.add_argument("--horizon", type=int)
        p.add_argument("--scheme", help='reduction scheme, e.g. "prev_obs" or "k_prev_obs:2"')

    p_run = sub.add_parser("run", help="run the replication grid")
    common(p_run)
    p_run.add_argument("--methods", help="comma-separated subset of dr,is,reg,mdp,mean_r,tis")
    p_run.add_argument("--reps", type=int, help="replications per sample size")
    p_run.add_argument("--n-grid", help="comma-separated ascending sample sizes")
    p_run.add_argument("--k-folds", type=int)
    p_run.add_argument("--jobs", type=int, help="worker count (defaults to PRL_THREADS)")

    p_verify = sub.add_parser("verify", help="population identification certificates")
    common(p_verify)
    p_verify.add_argument("--corrupt-q", type=float, default=0.0, help="shift added to every oracle q value")
    p_verify.add_argument("--directions", type=int, default=20, help="random directions for the orthogonality check")

    p_truth = sub.add_parser("truth", help="exact policy values")
    common(p_truth)
    p_truth.add_argument("--all", action="store_true", help="every policy of the scenario")

    p_sample = sub.add_parser("sample", help="write logged trajectories as JSON lines")
    common(p_sample)
    p_sample.add_argument("-n", type=int, required=True, help="number of trajectories")
    p_sample.add_argument("--path", help="output file (default <out>/trajectories.jsonl)")
    p_sample.add_argument("--hidden", action="store_true", help="include hidden states")
    return parser


def _csv_list(text, cast=str):
    if text is None:
        return None
    return [cast(part.strip()) for part in text.split(",") if part.strip()]


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    """JSON document (or defaults) with CLI flags applied on top"""
    base = ExperimentConfig.from_json_file(args.config) if args.config else load_config_dict({})
    overrides = {
        "base_seed": args.seed,
        "output_dir": args.out,
        "scenario": args.scenario,
        "eps_noise": args.eps_noise,
        "gamma": args.gamma,
        "horizon": args.horizon,
        "scheme": args.scheme,
        "policy": args.policy,
    }
    # a scenario switch without a policy picks that scenario's first policy
    if args.scenario and not args.policy and args.scenario != base.scenario:
        overrides["policy"] = SCENARIO_POLICIES[args.scenario][0]
    if args.command == "run":
        overrides.update({
            "methods": _csv_list(args.methods),
            "replications": args.reps,
            "n_grid": _csv_list(args.n_grid, int),
            "k_folds": args.k_folds,
        })
    return base.with_overrides(**overrides)


def cmd_run(args, config: ExperimentConfig) -> int:
    print(f"Scenario: {config.scenario} (eps={config.eps_noise}) | policy: {config.policy} | gamma: {config.gamma}")
    print(f"Methods: {', '.join(config.methods)} | n: {config.n_grid} | reps: {config.replications}")
    summary = experiment_runner.run(config, n_jobs=args.jobs)

    print(f"\nTruth: {summary.truth:.10f}\n")
    print(f"{'method':<8} {'n':>7} {'valid':>6} {'mean':>12} {'bias':>11} {'mse':>11} {'coverage':>9}")
    print("-" * 80)
    for _, row in summary.table.iterrows():
        print(f"{row['method']:<8} {row['n']:>7} {row['n_valid']:>6} {row['mean']:>12.5f} "
              f"{row['bias']:>11.5f} {row['mse']:>11.5f} {row['coverage']:>9.3f}")
    for method, count in summary.excluded.items():
        if count:
            print(f"❌ {method}: {count} failed replications excluded")
    print(f"\n✓ Results written to {config.output_dir}")
    return 0


def cmd_verify(args, config: ExperimentConfig) -> int:
    report = experiment_runner.verify(config, corrupt_q=args.corrupt_q, directions=args.directions)
    print(f"Scenario: {report['scenario']} (eps={report['eps_noise']}) | scheme: {report['scheme']}"
          f" | corrupt_q: {report['corrupt_q']}")
    print("-" * 80)
    for name, result in report["policies"].items():
        print(f"{'✓' if result['passed'] else '❌'} {name}  (truth {result['truth']:.10f})")
        for check, outcome in result["checks"].items():
            if check == "identification":
                for kind, entry in outcome.items():
                    mark = "✓" if entry["passed"] else "❌"
                    print(f"     {mark} identification[{kind}]  error {entry['error']:.3e}")
                continue
            detail = outcome.get("error") if not outcome["passed"] else ""
            print(f"     {'✓' if outcome['passed'] else '❌'} {check} {detail or ''}")
    print("-" * 80)
    print(f"{'✓ ALL CERTIFICATES PASSED' if report['passed'] else '❌ CERTIFICATE FAILURE'}")
    print(f"Report: {Path(config.output_dir) / 'certificates.json'}")
    return 0 if report["passed"] else 1


def cmd_truth(args, config: ExperimentConfig) -> int:
    values = experiment_runner.truth(config, None if args.all else config.policy)
    for name, value in values.items():
        print(f" {name:<8} {value:.17g}")
    return 0


def cmd_sample(args, config: ExperimentConfig) -> int:
    path = args.path or str(Path(config.output_dir) / "trajectories.jsonl")
    count = experiment_runner.sample(config, args.n, config.base_seed, path, with_hidden=args.hidden)
    print(f"✓ {count} trajectories written to {path}")
    return 0


COMMANDS = {"run": cmd_run, "verify": cmd_verify, "truth": cmd_truth, "sample": cmd_sample}


def main(argv=None) -> int:
    """Main entry point"""
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)

    print("\n" + "=" * 80)
    print(f"PROXIMAL OFF-POLICY EVALUATION - {args.command.upper()}")
    print("=" * 80)

    try:
        config = load_config(args)
        code = COMMANDS[args.command](args, config)
    except ProximalOpeError as e:
        print(f"\n❌ {e}\n")
        return 2
    except (OSError, json.JSONDecodeError) as e:
        print(f"\n❌ Cannot read input: {e}\n")
        return 2
    except KeyboardInterrupt:
        print("\n\nInterrupted\n")
        return 130
    except Exception as e:
        print(f"\nError: {e}\n")
        traceback.print_exc()
        return 1
    print("=" * 80 + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
