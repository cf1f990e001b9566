#!/usr/bin/env python3

# Copyright (c) 2024 The semshot developers
# Distributed under the MIT software license, see the accompanying
# file COPYING or http://www.opensource.org/licenses/mit-license.php.

"""
Few-shot SEM defect inspection, from synthetic data generation to metrics.

Subcommands:
  - gen:       sample an N-way K-shot episode and write it to --data-dir
  - init:      seeded backbone + text encoder, V-V surgery, saved checkpoint
  - surgery:   (re)apply the QKV -> VVV weight copy to an existing checkpoint
  - finetune:  train the transformation layer and the classification head
  - segment:   defect maps for the query images (or a single --image)
  - classify:  classification CSV for the query images
  - evaluate:  segmentation and classification metrics on the query images
  - sweep:     generate/init/finetune/evaluate for several shot counts
  - ablations: the default model against every ablation switch

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""


import sys
from argparse import ArgumentParser, Namespace
from concurrent.futures import ThreadPoolExecutor
from logging import (
    DEBUG,
    INFO,
    basicConfig as loggingBasicConfig,
    getLogger
)
from os import makedirs, path as os_path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from evaluation.metrics import MetricsReport
from evaluation.report import write_metrics_table
from experiments.config import ABLATIONS, RunConfig, apply_overrides, config_from_section, read_config_file
from experiments.pipeline import (
    SemShotPipeline,
    check_classes,
    configs_from_metadata,
    initialize_model,
    metadata_classes
)
from inference.export import write_heatmap_pgm, write_raw_map
from model.checkpoint import Checkpoint, load_checkpoint, save_checkpoint, surgery_copy_qkv_to_vvv
from numerics.errors import ConfigError, DataError, NumericError
from synth.dataset import read_classes, read_episode, read_pgm, read_split, write_episode
from synth.episodes import sample_episode

EXIT_CONFIG_ERROR = 2
EXIT_DATA_ERROR = 3
EXIT_NUMERIC_ERROR = 4

FINETUNED_NAME = 'finetuned.ckpt'

logger = getLogger('semshot.cli')


def _ensure_parent(path: str):
    parent = os_path.dirname(os_path.abspath(path))
    makedirs(parent, exist_ok=True)


def load_model(cfg: RunConfig) -> Tuple[RunConfig, Checkpoint]:
    tensors, metadata = load_checkpoint(cfg.checkpoint)
    return configs_from_metadata(cfg, metadata), Checkpoint(tensors=tensors, metadata=metadata)


def trained_pipeline(cfg: RunConfig, executor: ThreadPoolExecutor) -> SemShotPipeline:
    cfg, ckpt = load_model(cfg)
    classes = metadata_classes(ckpt.metadata)
    check_classes(classes, read_classes(cfg.data_dir), cfg.data_dir)
    pipeline = SemShotPipeline(config=cfg, params=ckpt.tensors, classes=classes, executor=executor)
    pipeline.load_trained(ckpt.tensors, ckpt.metadata)
    return pipeline


def cmd_gen(cfg: RunConfig, args: Namespace, executor: ThreadPoolExecutor):
    episode = sample_episode(cfg.n_way, cfg.k_shot, cfg.m_query, cfg.seed, banner=cfg.banner)
    write_episode(episode, cfg.data_dir, seed=cfg.seed, banner=cfg.banner)


def cmd_init(cfg: RunConfig, args: Namespace, executor: ThreadPoolExecutor):
    ckpt, report = initialize_model(cfg)
    if report.checksum_before != report.checksum_after:
        raise DataError('surgery modified tensors outside the V-V branch')
    _ensure_parent(cfg.checkpoint)
    save_checkpoint(ckpt.tensors, ckpt.metadata, cfg.checkpoint)


def cmd_surgery(cfg: RunConfig, args: Namespace, executor: ThreadPoolExecutor):
    tensors, metadata = load_checkpoint(cfg.checkpoint)
    ckpt, report = surgery_copy_qkv_to_vvv(Checkpoint(tensors=tensors, metadata=metadata))
    if report.checksum_before != report.checksum_after:
        raise DataError('surgery modified tensors outside the V-V branch')
    output = args.output or cfg.checkpoint
    _ensure_parent(output)
    save_checkpoint(ckpt.tensors, ckpt.metadata, output)


def cmd_finetune(cfg: RunConfig, args: Namespace, executor: ThreadPoolExecutor):
    cfg, ckpt = load_model(cfg)
    classes = metadata_classes(ckpt.metadata)
    episode = read_episode(cfg.data_dir)

    pipeline = SemShotPipeline(config=cfg, params=ckpt.tensors, classes=classes, executor=executor)
    pipeline.finetune(episode, cfg.out_dir)

    tensors = {name: tensor for name, tensor in ckpt.tensors.items() if not name.startswith(('seg.', 'cls.'))}
    tensors.update(pipeline.trained_params())
    metadata = dict(ckpt.metadata)
    metadata.update(pipeline.trained_metadata())

    output = args.output or os_path.join(cfg.out_dir, FINETUNED_NAME)
    _ensure_parent(output)
    save_checkpoint(tensors, metadata, output)


def cmd_segment(cfg: RunConfig, args: Namespace, executor: ThreadPoolExecutor):
    pipeline = trained_pipeline(cfg, executor)
    if args.image is not None:
        defect_map, _ = pipeline.analyze(read_pgm(args.image))
        prefix = args.out_map or os_path.join(cfg.out_dir, os_path.splitext(os_path.basename(args.image))[0])
        _ensure_parent(prefix)
        write_raw_map(defect_map.fused_pixels, f'{prefix}.f32')
        write_heatmap_pgm(defect_map.fused_pixels, f'{prefix}.pgm')
        return

    samples = read_split(os_path.join(cfg.data_dir, 'query'), pipeline.classes)
    pipeline.write_maps(pipeline.infer(samples), args.out_map or os_path.join(cfg.out_dir, 'maps'))


def cmd_classify(cfg: RunConfig, args: Namespace, executor: ThreadPoolExecutor):
    pipeline = trained_pipeline(cfg, executor)
    samples = read_split(os_path.join(cfg.data_dir, 'query'), pipeline.classes)
    pipeline.write_classifications(pipeline.infer(samples), cfg.out_dir)


def cmd_evaluate(cfg: RunConfig, args: Namespace, executor: ThreadPoolExecutor):
    pipeline = trained_pipeline(cfg, executor)
    samples = read_split(os_path.join(cfg.data_dir, 'query'), pipeline.classes)
    pipeline.evaluate(samples, cfg.out_dir)


def run_in_memory(cfg: RunConfig, executor: ThreadPoolExecutor, out_dir: str) -> MetricsReport:
    """Generate, initialize, fine-tune and evaluate without touching the disk (results aside)"""
    episode = sample_episode(cfg.n_way, cfg.k_shot, cfg.m_query, cfg.seed, banner=cfg.banner)
    ckpt, _ = initialize_model(cfg)
    pipeline = SemShotPipeline(config=cfg, params=ckpt.tensors, classes=episode.classes, executor=executor)
    pipeline.finetune(episode, out_dir)
    return pipeline.evaluate(episode.query, out_dir)


def _parse_shots(text: str) -> List[int]:
    try:
        shots = [int(value) for value in text.split(',') if value.strip() != '']
    except ValueError as e:
        raise ConfigError(f'invalid shot list {text!r}') from e
    if len(shots) == 0 or min(shots) < 1:
        raise ConfigError(f'invalid shot list {text!r}')
    return shots


def cmd_sweep(cfg: RunConfig, args: Namespace, executor: ThreadPoolExecutor):
    entries: List[Tuple[int, MetricsReport]] = []
    for k_shot in _parse_shots(args.shots):
        shot_cfg = cfg._replace(k_shot=k_shot, m_query=max(cfg.m_query, 10 * k_shot)).validate()
        logger.info('Shot sweep: K=%d', k_shot)
        entries.append((k_shot, run_in_memory(shot_cfg, executor, os_path.join(cfg.out_dir, f'k{k_shot}'))))
    write_metrics_table(os_path.join(cfg.out_dir, 'sweep.csv'), 'k_shot', entries)


def cmd_ablations(cfg: RunConfig, args: Namespace, executor: ThreadPoolExecutor):
    variants: List[Tuple[str, Tuple[str, ...]]] = [('default', ())]
    variants += [(flag, (flag,)) for flag in ABLATIONS]

    entries: List[Tuple[str, MetricsReport]] = []
    for name, flags in variants:
        logger.info('Ablation variant: %s', name)
        variant_cfg = cfg._replace(ablations=flags).validate()
        entries.append((name, run_in_memory(variant_cfg, executor, os_path.join(cfg.out_dir, name))))
    write_metrics_table(os_path.join(cfg.out_dir, 'ablations.csv'), 'variant', entries)


Command = Callable[[RunConfig, Namespace, ThreadPoolExecutor], None]

COMMANDS: Dict[str, Tuple[Command, str]] = {
    'gen': (cmd_gen, 'Generate a synthetic N-way K-shot episode'),
    'init': (cmd_init, 'Initialize a checkpoint and apply the weight surgery'),
    'surgery': (cmd_surgery, 'Copy QKV value/output projections into the V-V branch'),
    'finetune': (cmd_finetune, 'Fine-tune the transformation layer and the classification head'),
    'segment': (cmd_segment, 'Write pixel-level defect maps'),
    'classify': (cmd_classify, 'Write the image-level classification CSV'),
    'evaluate': (cmd_evaluate, 'Compute segmentation and classification metrics'),
    'sweep': (cmd_sweep, 'Evaluate several shot counts end to end'),
    'ablations': (cmd_ablations, 'Evaluate every ablation switch end to end'),
}


def build_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument('-c', '--config', help='Flat key = value configuration file')
    common.add_argument('--checkpoint', help='Model checkpoint to read (or to write, for init)')
    common.add_argument('--prompts', help='JSON prompt library')
    common.add_argument('--data-dir', help='Episode directory')
    common.add_argument('--out-dir', help='Where to write results')
    common.add_argument('--seed', type=int)
    common.add_argument('--n-way', type=int)
    common.add_argument('--k-shot', type=int)
    common.add_argument('--m-query', type=int)
    common.add_argument('--alpha', type=float, help='Weight of the head probability')
    common.add_argument('--tau', type=float, help='Softmax temperature of the similarity logits')
    common.add_argument('--ps-source', choices=('patches', 'cls'))
    common.add_argument('--lr', type=float)
    common.add_argument('--epochs', type=int)
    common.add_argument(
        '--ablate', action='append', default=[], choices=ABLATIONS + tuple(a.replace('_', '-') for a in ABLATIONS),
        help='Ablation switch, may be repeated'
    )
    common.add_argument('--threads', type=int, help='Worker pool size (default: logical cores)')
    common.add_argument('-v', '--verbose', action='store_true')

    parser = ArgumentParser(description='Few-shot SEM defect inspection')
    subparsers = parser.add_subparsers(dest='command', required=True)
    subcommands = {
        name: subparsers.add_parser(name, parents=[common], help=description)
        for name, (_, description) in COMMANDS.items()
    }
    subcommands['gen'].add_argument('--banner', action='store_true', default=None, help='Add text-like banners')
    subcommands['surgery'].add_argument('-o', '--output', help='Output checkpoint (default: in place)')
    subcommands['finetune'].add_argument('-o', '--output', help='Output checkpoint')
    subcommands['segment'].add_argument('--image', help='Segment a single PGM image')
    subcommands['segment'].add_argument('--out-map', help='Output path prefix (single image) or directory')
    subcommands['sweep'].add_argument('--shots', default='1,2,5,10', help='Comma-separated shot counts')
    return parser


def resolve_config(args: Namespace) -> RunConfig:
    cfg = RunConfig()
    if args.config is not None:
        cfg = config_from_section(read_config_file(args.config))
    overrides = {
        'checkpoint': args.checkpoint,
        'prompts': args.prompts,
        'data_dir': args.data_dir,
        'out_dir': args.out_dir,
        'seed': args.seed,
        'n_way': args.n_way,
        'k_shot': args.k_shot,
        'm_query': args.m_query,
        'alpha': args.alpha,
        'tau': args.tau,
        'ps_source': args.ps_source,
        'threads': args.threads,
        'banner': getattr(args, 'banner', None),
        'lr': args.lr,
        'epochs': args.epochs,
    }
    return apply_overrides(cfg, overrides, args.ablate).validate()


def run(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        getLogger().setLevel(DEBUG)

    try:
        cfg = resolve_config(args)
        command, _ = COMMANDS[args.command]
        with ThreadPoolExecutor(max_workers=cfg.worker_count) as executor:
            command(cfg, args, executor)
    except ConfigError as e:
        logger.error('Configuration error: %s', e)  # noqa: G200
        return EXIT_CONFIG_ERROR
    except (DataError, OSError) as e:
        logger.error('Data error: %s', e)  # noqa: G200
        return EXIT_DATA_ERROR
    except NumericError as e:
        logger.error('Numeric failure: %s', e)  # noqa: G200
        return EXIT_NUMERIC_ERROR
    return 0


def main():
    loggingBasicConfig(
        stream=sys.stdout,
        level=INFO,
        format='%(asctime)s - %(levelname)s - %(name)s - %(message)s'
    )
    sys.exit(run(sys.argv[1:]))


if __name__ == '__main__':
    main()
