"""
Command-line entry point.

    python main.py synth --seed 7 --out data/
    python main.py match --data data/ --grid 4x4x4 --matcher st-match --out run/
    python main.py eval --data data/ --predictions run/predictions.json --k 1,3,5 --out run/

Every subcommand reads an optional JSON config (--config) whose keys mirror
RunConfig; explicit flags win. Failures print one line
`error: <code>: <message>` to stderr and exit 1; usage errors exit 2.
"""
import os
import sys
import json
import time
import logging
import argparse
from dataclasses import fields

import numpy as np

from config import RunConfig
from services.ants import (
    AntsConfig,
    GtCorrespondence,
    TrainingPair,
    ants_init,
    gradcheck,
    load_params,
    plant_gts,
    save_params,
    train,
)
from services.benchmark import (
    PairList,
    build_pairs,
    get_setup,
    ground_truth_for_pairs,
    load_annotations,
    load_freeform_pairs,
    load_gt,
    load_pairs,
    save_gt,
    save_pairs,
)
from services.evaluation import (
    EvalConfig,
    PairPredictions,
    evaluate,
    load_predictions,
    restrict_setup,
    save_predictions,
    summarize_runs,
    write_report_csv,
    write_report_json,
)
from services.feature_pipeline import (
    FeaturePyramid,
    load_manifest,
    load_pyramid,
    resolve_layer_ids,
    stack_correlations,
)
from services.matchers import MatchOptions, get_matcher
from services.sequential import write_alignment
from services.stmatch import VideoDims, write_flow
from services.synth import SynthConfig, synth_dataset, write_synth_dataset
from services.tensor_core import GridShape
from utils.errors import ConfigError, GradientCheckError, StCorrError
from utils.logger import attach_run_log, log_pair_result, setup_logger
from utils.monitoring import performance_log
from utils.validators import parse_ints, parse_ks, validate_run_config
from utils.worker_pool import run_parallel

logger = setup_logger('cli')

RUN_FIELDS = {f.name for f in fields(RunConfig)}


# ---------------------------------------------------------------------------
# argument parsing


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=None)
    common.add_argument('--config', help='JSON file with RunConfig fields')
    common.add_argument('--seed', type=int)
    common.add_argument('--seeds', type=parse_ints, help='comma-separated seeds for repeated runs')
    common.add_argument('--grid', help='TxHxW')
    common.add_argument('--matcher')
    common.add_argument('--temperature', type=float)
    common.add_argument('--alpha', type=float)
    common.add_argument('--k', dest='ks', type=parse_ks, help='comma-separated, e.g. 1,3,5')
    common.add_argument('--min-shared', dest='min_shared', type=int)
    common.add_argument('--jobs', type=int)
    common.add_argument('--out')
    common.add_argument('--setup')
    common.add_argument('--data', dest='data_dir', help='directory written by synth')
    common.add_argument('--annotations')
    common.add_argument('--manifest')
    common.add_argument('--pairs')
    common.add_argument('--gt')
    common.add_argument('--predictions')
    common.add_argument('--params')
    common.add_argument('--layer-ids', dest='layer_ids', type=parse_ints)
    common.add_argument('--hyperpixel')
    common.add_argument('--interpolation', choices=['trilinear', 'nearest'])
    common.add_argument('--layers', dest='n_layers', type=int)
    common.add_argument('--hidden', dest='hidden_channels', type=int)
    common.add_argument('--lr', type=float)
    common.add_argument('--steps', type=int)
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(prog='stcorr', description='Space-time semantic correspondence toolkit')
    sub = parser.add_subparsers(dest='command', required=True)

    synth = sub.add_parser('synth', parents=[common], help='generate a synthetic dataset with planted ground truth')
    synth.add_argument('--n-videos', dest='n_videos', type=int, default=4)
    synth.add_argument('--n-actions', dest='n_actions', type=int, default=2)
    synth.add_argument('--key-moments', dest='n_key_moments', type=int, default=2)
    synth.add_argument('--channels', type=parse_ints, default=[8, 16])
    synth.add_argument('--dims', default='16x64x64', help='pixel size TxHxW')
    synth.add_argument('--noise', type=float, default=0.0)
    synth.add_argument('--drop-prob', dest='drop_prob', type=float, default=0.0)
    synth.add_argument('--val-fraction', dest='val_fraction', type=float, default=0.0)

    sub.add_parser('build-pairs', parents=[common], help='build ordered pairs and their ground truth')

    match = sub.add_parser('match', parents=[common], help='predict target keypoints for every pair')
    match.add_argument('--flow-out', dest='flow_out', help='directory for per-pair STT1 flows')
    match.add_argument('--align-out', dest='align_out', help='directory for per-pair time alignments')
    match.add_argument('--freeform', help='free-form pair file used instead of pairs/gt')

    sub.add_parser('train-ants', parents=[common], help='train the aggregation network')

    ev = sub.add_parser('eval', parents=[common], help='score predictions with T@k-PCK')
    ev.add_argument('--runs', type=lambda s: [p for p in s.split(',') if p],
                    help='comma-separated prediction files to summarize (mean and std)')
    ev.add_argument('--freeform', help='free-form pair file used instead of gt/annotations')

    gc = sub.add_parser('gradcheck', parents=[common], help='finite-difference check of the ANTs gradient')
    gc.add_argument('--tolerance', type=float, default=1e-4)
    gc.add_argument('--channels', type=int, default=2, help='feature channels per side')
    return parser


def load_run_config(args: argparse.Namespace) -> RunConfig:
    run = RunConfig.from_file(args.config) if args.config else RunConfig()
    flags = {k: v for k, v in vars(args).items() if k in RUN_FIELDS}
    run = run.override(**flags)
    ok, error = validate_run_config(run)
    if not ok:
        raise ConfigError(error)
    return run


def _data_path(run: RunConfig, attr: str, default_name: str) -> str:
    path = getattr(run, attr)
    if path:
        return path
    if run.data_dir:
        return os.path.join(run.data_dir, default_name)
    raise ConfigError(f"no {attr} file: pass --{attr} or --data")


def _out_dir(run: RunConfig) -> str:
    if not run.out:
        raise ConfigError("--out is required")
    os.makedirs(run.out, exist_ok=True)
    return run.out


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args, run: RunConfig) -> int:
    out = _out_dir(run)
    config = SynthConfig(
        n_videos=args.n_videos,
        n_actions=args.n_actions,
        n_key_moments=args.n_key_moments,
        grid=GridShape.parse(run.grid) if run.grid else SynthConfig().grid,
        dims=VideoDims(*GridShape.parse(args.dims).as_tuple()),
        layer_channels=tuple(args.channels),
        noise=args.noise,
        drop_prob=args.drop_prob,
        val_fraction=args.val_fraction,
        setup=run.setup,
        min_shared=run.min_shared,
    )
    ds = synth_dataset(config, run.seed, jobs=run.jobs)
    write_synth_dataset(ds, out)
    print(f"synthesized {len(ds.videos)} videos and {len(ds.pairs)} pairs into {out}")
    return 0


def cmd_build_pairs(args, run: RunConfig) -> int:
    out = _out_dir(run)
    annotations = load_annotations(_data_path(run, 'annotations', 'annotations.json'))
    setup = get_setup(run.setup)
    pairs = build_pairs(annotations, setup, run.min_shared)
    save_pairs(os.path.join(out, 'pairs.json'), PairList(pairs, setup.name, run.min_shared))
    save_gt(os.path.join(out, 'gt.json'), ground_truth_for_pairs(annotations, pairs, setup))
    print(f"{len(pairs)} ordered pairs (setup {setup.name}, min_shared {run.min_shared})")
    return 0


def _load_pyramids(run: RunConfig, grid: GridShape, video_ids) -> dict:
    manifest = load_manifest(_data_path(run, 'manifest', 'manifest.json'))
    layer_ids = resolve_layer_ids(run.layer_ids, run.hyperpixel)
    return {vid: load_pyramid(manifest, vid, grid, normalize=run.normalize, layer_ids=layer_ids)
            for vid in sorted(set(video_ids))}


def _ground_truth(run: RunConfig, freeform=None):
    """GT correspondences, video dims by id and the action map of free-form pairs"""
    if freeform:
        gt, actions = load_freeform_pairs(freeform)
        return gt, {}, actions, []
    annotations = load_annotations(_data_path(run, 'annotations', 'annotations.json'))
    gt = load_gt(_data_path(run, 'gt', 'gt.json'))
    if run.pairs or run.data_dir:
        wanted = {(p.src, p.tgt) for p in load_pairs(_data_path(run, 'pairs', 'pairs.json')).pairs}
        gt = [p for p in gt if (p.src, p.tgt) in wanted]
    dims = {v.video_id: v.dims for v in annotations}
    return gt, dims, {}, annotations


def cmd_match(args, run: RunConfig) -> int:
    out = _out_dir(run)
    matcher = get_matcher(run.matcher)
    gt, dims, _, _ = _ground_truth(run, args.freeform)

    options = MatchOptions(temperature=run.temperature, interpolation=run.interpolation)
    grid = GridShape.parse(run.resolved_grid())
    if run.matcher == 'ants':
        if not run.params:
            raise ConfigError("the ants matcher needs --params")
        options.params, ants_config, _ = load_params(run.params)
        grid = ants_config.grid

    pyramids = _load_pyramids(run, grid, [p.src for p in gt] + [p.tgt for p in gt])
    if args.freeform:
        dims = {vid: _dims_from_matches(vid, gt) for vid in pyramids}

    def match_pair(pair):
        start = time.time()
        kps = [s for s, _ in pair.matches]
        try:
            result = matcher(pyramids[pair.src], pyramids[pair.tgt], kps, dims[pair.src], dims[pair.tgt], options)
        except StCorrError as e:
            log_pair_result(run.matcher, pair.src, pair.tgt, len(kps), (time.time() - start) * 1000, error=e)
            raise
        log_pair_result(run.matcher, pair.src, pair.tgt, len(kps), (time.time() - start) * 1000)
        return pair, result

    with performance_log(f"match {run.matcher}") as stats:
        results = run_parallel(match_pair, gt, jobs=run.jobs)
        stats['pairs'] = len(results)

    predictions = [PairPredictions(pair.src, pair.tgt, list(zip([s for s, _ in pair.matches], result.keypoints)))
                   for pair, result in results]
    save_predictions(os.path.join(out, 'predictions.json'), run.matcher, predictions)

    for pair, result in results:
        name = f"{pair.src}__{pair.tgt}"
        if args.flow_out and result.flow is not None:
            os.makedirs(args.flow_out, exist_ok=True)
            write_flow(os.path.join(args.flow_out, f"{name}.stt"), result.flow)
        if args.align_out and result.alignment is not None:
            os.makedirs(args.align_out, exist_ok=True)
            write_alignment(os.path.join(args.align_out, f"{name}.json"), result.alignment, result.total_cost)

    print(f"matched {len(results)} pairs with {run.matcher}")
    return 0


def _dims_from_matches(video_id, gt) -> VideoDims:
    """Free-form pairs carry no dims; bound them by the annotated keypoints"""
    kps = [s for p in gt if p.src == video_id for s, _ in p.matches]
    kps += [t for p in gt if p.tgt == video_id for _, t in p.matches]
    if not kps:
        raise ConfigError(f"no keypoints for video {video_id}")
    return VideoDims(int(max(kp.t for kp in kps)) + 1, int(np.ceil(max(kp.y for kp in kps))) + 1,
                     int(np.ceil(max(kp.x for kp in kps))) + 1)


def cmd_train_ants(args, run: RunConfig) -> int:
    out = _out_dir(run)
    annotations = load_annotations(_data_path(run, 'annotations', 'annotations.json'))
    by_id = {v.video_id: v for v in annotations}
    gt = [p for p in load_gt(_data_path(run, 'gt', 'gt.json')) if by_id[p.src].split == 'train']
    if not gt:
        raise ConfigError("no training pairs (split 'train') with ground truth")

    grid = GridShape.parse(run.resolved_grid('ants'))
    pyramids = _load_pyramids(run, grid, [p.src for p in gt] + [p.tgt for p in gt])
    pairs = []
    for p in gt:
        pyr_s, pyr_t = pyramids[p.src], pyramids[p.tgt]
        gts = plant_gts(p.matches, by_id[p.src].dims, by_id[p.tgt].dims, grid)
        pairs.append(TrainingPair(stack_correlations(pyr_s, pyr_t), pyr_s, pyr_t, gts))

    config = AntsConfig.for_pyramids(pairs[0].pyr_s, pairs[0].pyr_t, run.n_layers, run.hidden_channels)
    with performance_log("train-ants") as stats:
        result = train(pairs, config, lr=run.lr, steps=run.steps, seed=run.seed, temperature=run.temperature)
        stats['steps'] = run.steps

    params_dir = run.params or os.path.join(out, 'params')
    save_params(params_dir, result.params, config, run.seed)
    with open(os.path.join(out, 'losses.json'), 'w', encoding='utf-8') as fh:
        json.dump({'losses': result.losses}, fh)
    if result.losses:
        print(f"trained {run.steps} steps: loss {result.losses[0]:.6f} -> {result.losses[-1]:.6f}")
    return 0


def cmd_eval(args, run: RunConfig) -> int:
    out = _out_dir(run)
    gt, _, actions, annotations = _ground_truth(run, args.freeform)
    setup = get_setup(run.setup)
    if not args.freeform:
        gt = restrict_setup(gt, setup)
        config = EvalConfig.for_setup(setup, alpha=run.alpha, ks=run.ks)
    else:
        config = EvalConfig(alpha=run.alpha, ks=run.ks)

    if args.runs:
        reports = [evaluate(load_predictions(path)[1], gt, annotations, config, actions) for path in args.runs]
        summary = summarize_runs(reports, setup.name)
        summary.to_csv(os.path.join(out, 'summary.csv'), index=False)
        print(summary.to_string(index=False))
        return 0

    if not run.predictions:
        raise ConfigError("eval needs --predictions or --runs")
    matcher, predictions = load_predictions(run.predictions)
    report = evaluate(predictions, gt, annotations, config, actions)
    write_report_json(os.path.join(out, 'report.json'), report, setup.name, matcher)
    write_report_csv(os.path.join(out, 'report.csv'), report, setup.name)
    print(' '.join(f"T@{k}-PCK@{config.alpha}={report.overall[k]:.1f}" for k in report.ks))
    return 0


def cmd_gradcheck(args, run: RunConfig) -> int:
    if args.channels < 1:
        raise ConfigError(f"--channels must be >= 1, got {args.channels}")
    grid = GridShape.parse(run.grid) if run.grid else GridShape(2, 2, 2)
    rng = np.random.default_rng(run.seed)
    layers_s = [rng.standard_normal((args.channels,) + grid.as_tuple())]
    layers_t = [rng.standard_normal((args.channels,) + grid.as_tuple())]
    pyr_s = FeaturePyramid(grid, layers_s, [0])
    pyr_t = FeaturePyramid(grid, layers_t, [0])
    corr = stack_correlations(pyr_s, pyr_t)

    config = AntsConfig.for_pyramids(pyr_s, pyr_t, run.n_layers, run.hidden_channels)
    n_gts = min(grid.cells, 4)
    positions = rng.uniform(0, np.array(grid.as_tuple()) - 1, size=(n_gts, 3))
    displacements = rng.uniform(-1, 1, size=(n_gts, 3))
    gts = [GtCorrespondence(tuple(p), tuple(d)) for p, d in zip(positions, displacements)]

    worst = 0.0
    for seed in run.seeds or [run.seed]:
        params = ants_init(config, seed, dtype=np.float64)
        worst = max(worst, gradcheck(corr, pyr_s, pyr_t, params, gts, temperature=run.temperature))
    print(f"max relative error {worst:.3e} (tolerance {args.tolerance:g})")
    if worst > args.tolerance:
        raise GradientCheckError(f"gradient check failed: max relative error {worst:.3e} > {args.tolerance:g}")
    return 0


COMMANDS = {
    'synth': cmd_synth,
    'build-pairs': cmd_build_pairs,
    'match': cmd_match,
    'train-ants': cmd_train_ants,
    'eval': cmd_eval,
    'gradcheck': cmd_gradcheck,
}


def dispatch(argv=None) -> int:
    """Run one subcommand; returns the process exit code"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    handler = None
    try:
        run = load_run_config(args)
        if run.out and args.command != 'gradcheck':
            handler = attach_run_log(run.out)
        return COMMANDS[args.command](args, run)
    except StCorrError as e:
        logger.error(f"{args.command} failed: {e.message}")
        print(f"error: {e.one_line()}", file=sys.stderr)
        return 1
    except (OSError, KeyError, json.JSONDecodeError) as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: io: {' '.join(str(e).split())}", file=sys.stderr)
        return 1
    except (ValueError, ArithmeticError) as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: value: {' '.join(str(e).split())}", file=sys.stderr)
        return 1
    finally:
        if handler is not None:
            handler.close()
            logging.getLogger().removeHandler(handler)


def main() -> int:
    return dispatch(sys.argv[1:])
