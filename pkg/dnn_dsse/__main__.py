import os
import sys
import argparse
import logging
import yaml
import numpy as np
from dnn_dsse.config import Config
from dnn_dsse.feeder import FeederParser
from dnn_dsse.network import NetworkBuilder
from dnn_dsse.powerflow import solve_power_flow, nominal_injections
from dnn_dsse.dataset import Dataset
from dnn_dsse.core import ExperimentPipeline
from dnn_dsse.result import MetricsReport
from dnn_dsse.placement import PlacementSelector
from dnn_dsse.realtime import ScenarioRunner

DEFAULT_CONFIG = os.path.join('config', 'config.yml')
EXIT_INVALID = 1
EXIT_ERROR = 2


def feeder_validate(args, config):
    model = FeederParser.load(args.file)
    catalog = NetworkBuilder.enumerate_feasible_topologies(model) if model.switch_ids else None
    print(f"feeder={model.name} buses={len(model.buses)} branches={len(model.branches)} loads={len(model.loads)} "
          f"capacitors={len(model.capacitors)} dgs={len(model.dgs)} switches={len(model.switch_ids)}"
          + (f" feasible_topologies={len(catalog)}" if catalog is not None else ''))
    print(f"fingerprint={model.fingerprint()}")
    normal = model.normal_config()
    if NetworkBuilder.check_connectivity(model, normal):
        solution = solve_power_flow(model, normal, nominal_injections(model))
        magnitudes = np.abs(solution.voltages)
        print(f"nominal_pf converged={solution.converged} iterations={solution.iterations} "
              f"v_min={magnitudes.min():.4f} v_max={magnitudes.max():.4f}")
    else:
        logging.warning(f"Normal switch configuration {normal.label()} leaves loads unserved")


def topo_enumerate(args, config):
    pipeline = ExperimentPipeline(config, args.workers)
    catalog = pipeline.catalog
    for index, label in catalog.label_map().items():
        print(f"{index}\t{label}")
    print(pipeline.store.write_json('topologies', catalog.to_dict(), pipeline.config_hash, pipeline.seed))


def loads_command(args, config):
    pipeline = ExperimentPipeline(config, args.workers)
    if args.action == 'fit':
        print(pipeline.fit_loads())
    elif args.action == 'sample':
        print(pipeline.sample_loads(args.rows))
    else:
        frame = pipeline.screen_loads()
        print(frame.drop(columns='config_hash').to_string(index=False))
        print(pipeline.store.write_text('load-screening', frame.to_csv(index=False), pipeline.config_hash, 'csv'))


def dataset_generate(args, config):
    pipeline = ExperimentPipeline(config, args.workers)
    print(pipeline.generate_dataset(args.kind, args.plan))


def train_command(args, config):
    pipeline = ExperimentPipeline(config, args.workers)
    dataset = Dataset.load(args.dataset) if args.dataset else None
    outcome, path = pipeline.train(args.kind, dataset)
    if outcome.report is not None:
        print(MetricsReport.table([outcome.report]))
    print(path)


def place_integrated(args, config):
    pipeline = ExperimentPipeline(config, args.workers)
    plan, path = pipeline.place()
    for loc in plan.locations:
        print(f"{loc.id}\t{plan.purposes[loc.id]}\tpoi={PlacementSelector.poi(pipeline.model, loc)}")
    print(f"target_reached={plan.target_reached}")
    print(path)


def eval_command(args, config):
    pipeline = ExperimentPipeline(config, args.workers)
    extra = {}
    gmm_table = None
    if args.target == 'dsse':
        reports = pipeline.evaluate_dsse(args.plan, args.baseline, args.mode)
        error_cfg = pipeline.error_model(args.mode)
        if error_cfg.mode == 'two_level':
            gmm_table = error_cfg.gmm.table()
    elif args.target == 'ti':
        reports = [pipeline.evaluate_ti()]
    elif args.target == 'lse':
        reports = [pipeline.evaluate_lse()]
    else:
        reports, dominance = pipeline.evaluate_placement()
        extra['cross_cluster_dominance'] = dominance
    print(MetricsReport.table(reports))
    for report in reports:
        for note in report.notes:
            print(f"# {report.method}: {note}")
    for key, value in extra.items():
        print(f"{key}={value}")
    if gmm_table:
        print("# measurement error mixtures")
        print(gmm_table)
        extra['gmm_table'] = gmm_table
    print(pipeline.write_report(args.target, reports, extra))


def scenario_run(args, config):
    pipeline = ExperimentPipeline(config, args.workers)
    steps = pipeline.run_scenario(args.name)
    print(ScenarioRunner.table(steps))
    logging.info(f"Scenario {args.name}: {sum(s.fine_tuned for s in steps)} fine-tune events")


def build_parser():
    parser = argparse.ArgumentParser(prog='dnn-dsse',
                                     description="Topology identification and state estimation with neural networks "
                                                 "on unbalanced distribution feeders.")
    parser.add_argument("-c", "--config", "--config_file", dest='config', default=DEFAULT_CONFIG,
                        help="Path to the experiment configuration file (YAML or JSON)")
    parser.add_argument("--seed", type=int, help="Master seed, overriding the config")
    parser.add_argument("--out", help="Output directory for artifacts, overriding the config")
    parser.add_argument("--workers", type=int, help="Parallel workers for data generation and placement")
    parser.add_argument("-v", "--verbosity", choices=['DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'],
                        help="Set the logging verbosity (default: INFO)")
    commands = parser.add_subparsers(dest='command', required=True)

    feeder = commands.add_parser('feeder', help="Feeder document checks")
    feeder_actions = feeder.add_subparsers(dest='action', required=True)
    validate = feeder_actions.add_parser('validate', help="Validate a feeder document")
    validate.add_argument('file')
    validate.set_defaults(func=feeder_validate)

    topo = commands.add_parser('topo', help="Switch configurations")
    topo_actions = topo.add_subparsers(dest='action', required=True)
    topo_actions.add_parser('enumerate', help="Enumerate feasible topologies").set_defaults(func=topo_enumerate)

    loads = commands.add_parser('loads', help="Load distributions")
    loads.add_argument('action', choices=['fit', 'sample', 'screen'])
    loads.add_argument('-n', '--rows', type=int, default=100, help="Operating points for 'sample'")
    loads.set_defaults(func=loads_command)

    dataset = commands.add_parser('dataset', help="Synthetic datasets")
    dataset_actions = dataset.add_subparsers(dest='action', required=True)
    generate = dataset_actions.add_parser('generate', help="Generate a dataset")
    generate.add_argument('--kind', choices=['dsse', 'ti'], required=True)
    generate.add_argument('--plan', help="Named placement case instead of the configured plan")
    generate.set_defaults(func=dataset_generate)

    train = commands.add_parser('train', help="Train a network")
    train.add_argument('kind', choices=['dsse', 'ti'])
    train.add_argument('--dataset', help="Dataset CSV to train on instead of generating one")
    train.set_defaults(func=train_command)

    place = commands.add_parser('place', help="SMD placement")
    place.add_argument('method', choices=['integrated'])
    place.set_defaults(func=place_integrated)

    evaluate = commands.add_parser('eval', help="Train and evaluate estimators")
    evaluate.add_argument('target', choices=['dsse', 'ti', 'lse', 'placement'])
    evaluate.add_argument('--plan', help="Named placement case")
    evaluate.add_argument('--baseline', action='store_true', help="Also run the linear WLS baseline")
    evaluate.add_argument('--mode', choices=['none', 'gaussian_tve_only', 'two_level'],
                          help="Measurement error mode, overriding the config")
    evaluate.set_defaults(func=eval_command)

    scenario = commands.add_parser('scenario', help="Topology-change scenarios")
    scenario_actions = scenario.add_subparsers(dest='action', required=True)
    run_parser = scenario_actions.add_parser('run', help="Replay a scenario script from the config")
    run_parser.add_argument('name')
    run_parser.set_defaults(func=scenario_run)
    return parser


def load_config(args):
    config = Config()
    if os.path.exists(args.config):
        config.load_config(args.config)
    elif args.command == 'feeder':
        config = Config.from_dict({})
    else:
        raise FileNotFoundError(f"Config file not found: {args.config}")
    updates = {}
    if args.seed is not None:
        updates['seed'] = args.seed
    if args.out is not None:
        updates['output_dir'] = args.out
    return config.local_clone(updates)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args)
        config.setup_logging(args.verbosity)
        args.func(args, config)
    except (ValueError, RuntimeError, OSError, yaml.YAMLError) as e:
        print(f"error={type(e).__name__} detail={e}", file=sys.stderr)
        return EXIT_INVALID if args.command == 'feeder' else EXIT_ERROR
    return 0


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
