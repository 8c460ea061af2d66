"""
Declarative experiment runs.

An experiment file is INI text with one section per module. Parsing fills in
every default, so parse(serialize(config)) == config. `run_experiment` executes
one experiment kind for every configured seed and leaves metrics, checkpoints,
tables, plots and a run record under the run directory.
"""
import configparser
import io
import logging
import os
import re
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch

from config.contrast import ABLATION_GRID, CONTRAST_DEFAULTS, CONTRAST_PRESETS
from config.augmentations import AUGMENTATION_DEFAULTS, AUGMENTATION_STAGES, CROP_SCALE_MIN
from config.similarity import DIAGNOSIS_THRESHOLDS
from src.augmentations import AugmentationPipeline, pipeline_stage
from src.datasets import Image, LabeledImageSet, load_dataset, make_synthetic_dataset, read_image, save_image
from src.detection_diagnosis import (ap_table, default_similarity_map, distribution_table, read_detections,
                                     read_ground_truth, read_similarity_map, top_fp_distribution)
from src.encoders import ConvEncoder, extract_features
from src.evaluation import ProbeConfig, confidence_interval, linear_probe
from src.exceptions import ConfigError
from src.few_shot import FewShotConfig, cross_validate_learning_rate, few_shot_eval, with_learning_rate
from src.inversion import InversionConfig, image_ids, psnr, reconstruction_report
from src.landmarks import (LandmarkConfig, LandmarkSet, evaluate_landmarks, load_landmark_file,
                           make_synthetic_landmark_set, train_landmark_head)
from src.reconstructor import FULL_DEPTH
from src.reporting import ReportGenerator
from src.storage import load_json, resolve_output_root, save_json, save_report, save_table
from src.trainer import VARIANTS, ContrastConfig, build_train_state, load_train_state, save_train_state, train

KINDS = ('pretrain', 'linear_probe', 'few_shot', 'landmark', 'invert', 'diagnose',
         'ablate_augmentations', 'ablate_tau_k')
METRICS_COLUMNS = ['epoch', 'step', 'metric', 'value']
METRIC_SEED_OFFSET = 1000
MIN_LANDMARK_TEST = 2

# section -> key -> (type, default); a None default marks an optional key.
SCHEMA: Dict[str, Dict[str, Tuple[str, Any]]] = {
    'experiment': {
        'kind': ('str', 'pretrain'),
        'name': ('str', ''),
        'seeds': ('int_list', [0]),
        'output_dir': ('str', 'runs'),
        'checkpoint': ('str', ''),
        'progress': ('bool', False),
    },
    'dataset': {
        'source': ('str', 'synthetic'),
        'path': ('str', ''),
        'n_classes': ('int', 10),
        'per_class': ('int', 50),
        'image_size': ('int', AUGMENTATION_DEFAULTS['output_size']),
        'train_fraction': ('float', 0.8),
        'seed': ('int', 0),
    },
    'contrast': {
        'preset': ('str', ''),
        'variant': ('str', 'exemplar'),
        'tau': ('float', CONTRAST_DEFAULTS['tau']),
        'queue_capacity': ('int', CONTRAST_DEFAULTS['queue_capacity']),
        'momentum': ('float', CONTRAST_DEFAULTS['momentum']),
        'epochs': ('int', CONTRAST_DEFAULTS['epochs']),
        'batch_size': ('int', CONTRAST_DEFAULTS['batch_size']),
        'lr': ('float', CONTRAST_DEFAULTS['lr']),
        'sgd_momentum': ('float', CONTRAST_DEFAULTS['sgd_momentum']),
        'weight_decay': ('float', CONTRAST_DEFAULTS['weight_decay']),
        'cosine': ('bool', CONTRAST_DEFAULTS['cosine']),
        'embedding_dim': ('int', CONTRAST_DEFAULTS['embedding_dim']),
        'backbone_channels': ('int_list', list(CONTRAST_DEFAULTS['backbone_channels'])),
        'dtype': ('str', 'float32'),
        'loader_workers': ('int', 0),
    },
    'augmentation': {
        'stage': ('int', len(AUGMENTATION_STAGES)),
        'mode': ('str', 'unsupervised'),
        'output_size': ('int', AUGMENTATION_DEFAULTS['output_size']),
        'crop_scale_min': ('float', None),
        'flip_p': ('float', None),
        'jitter_p': ('float', None),
        'grayscale_p': ('float', None),
        'blur_p': ('float', None),
    },
    'probe': {
        'epochs': ('int', 100),
        'lr': ('float', 0.1),
        'momentum': ('float', 0.9),
        'weight_decay': ('float', 0.0),
        'batch_size': ('int', 256),
    },
    'few_shot': {
        'n_way': ('int', 5),
        'k_shot': ('int', 1),
        'n_query': ('int', 15),
        'rounds': ('int', 100),
        'lr_grid': ('float_list', [0.01, 0.1, 1.0]),
        'episodes': ('int', 200),
        'validation_episodes': ('int', 20),
        'class_fractions': ('float_list', [0.6, 0.2, 0.2]),
        'workers': ('int', 0),
    },
    'landmark': {
        'source': ('str', 'synthetic'),
        'path': ('str', ''),
        'n_train': ('int', 200),
        'n_test': ('int', 100),
        'image_size': ('int', 32),
        'epochs': ('int', 50),
        'lr': ('float', 0.001),
        'batch_size': ('int', 32),
        'finetune_backbone': ('bool', False),
    },
    'inversion': {
        'n_images': ('int', 2),
        'iterations': ('int', 3000),
        'lr': ('float', 0.001),
        'noise_low': ('float', 0.0),
        'noise_high': ('float', 0.1),
        'depth': ('int', 5),
        'dtype': ('str', 'float32'),
        'encoders': ('str_list', ['exemplar', 'cross_entropy']),
        'metric_variant': ('str', 'exemplar'),
    },
    'diagnose': {
        'detections': ('str_list', []),
        'ground_truth': ('str', ''),
        'similarity': ('str', ''),
        'weak_iou': ('float', DIAGNOSIS_THRESHOLDS['weak_iou']),
        'correct_iou': ('float', DIAGNOSIS_THRESHOLDS['correct_iou']),
        'ap_thresholds': ('float_list', [0.5, 0.75]),
        'use_07_metric': ('bool', False),
    },
    'ablation': {
        'stages': ('int_list', list(range(1, len(AUGMENTATION_STAGES) + 1))),
        'modes': ('str_list', ['supervised', 'unsupervised']),
        'taus': ('float_list', []),
        'grid': ('str_list', []),
    },
}

_SECTION_LINE = re.compile(r'^\s*\[([^\]]+)\]')
_KEY_LINE = re.compile(r'^\s*([^=:#;\[\s][^=:]*?)\s*[=:]')


@dataclass
class ExperimentConfig:
    sections: Dict[str, Dict[str, Any]]
    source: Optional[Path] = field(default=None, compare=False)
    lines: Dict[Tuple[str, Optional[str]], int] = field(default_factory=dict, compare=False, repr=False)

    def __getitem__(self, section: str) -> Dict[str, Any]:
        return self.sections[section]

    @property
    def kind(self) -> str:
        return self.sections['experiment']['kind']

    @property
    def seeds(self) -> List[int]:
        return list(self.sections['experiment']['seeds'])

    @property
    def name(self) -> str:
        name = self.sections['experiment']['name']
        if name:
            return name
        return self.source.stem if self.source is not None else self.kind

    @property
    def progress(self) -> bool:
        return self.sections['experiment']['progress']

    def line_of(self, section: str, key: Optional[str] = None) -> Optional[int]:
        return self.lines.get((section, key)) or self.lines.get((section, None))

    def resolve_path(self, value: str) -> Path:
        """Paths resolve against the working directory, then the config file's directory."""
        path = Path(value)
        if path.is_absolute() or path.exists() or self.source is None:
            return path
        candidate = self.source.parent / path
        return candidate if candidate.exists() else path

    def contrast_config(self, **overrides) -> ContrastConfig:
        values = dict(self.sections['contrast'])
        preset = overrides.pop('preset', values.pop('preset'))
        if preset:
            values.update(CONTRAST_PRESETS[preset])
        values.update(overrides)
        return ContrastConfig(progress=self.progress, **values)

    def pipeline(self, stage: Optional[int] = None, mode: Optional[str] = None) -> AugmentationPipeline:
        section = self.sections['augmentation']
        overrides = {k: v for k, v in section.items() if k not in ('stage', 'mode') and v is not None}
        return pipeline_stage(stage or section['stage'], mode or section['mode'], **overrides)

    def probe_config(self, seed: int) -> ProbeConfig:
        return ProbeConfig(seed=seed, **self.sections['probe'])

    def few_shot_config(self, seed: int) -> FewShotConfig:
        section = self.sections['few_shot']
        return FewShotConfig(n_way=section['n_way'], k_shot=section['k_shot'], n_query=section['n_query'],
                             rounds=section['rounds'], lr_grid=tuple(section['lr_grid']), seed=seed,
                             workers=section['workers'], image_size=self.sections['augmentation']['output_size'],
                             progress=self.progress)

    def landmark_config(self, seed: int) -> LandmarkConfig:
        section = self.sections['landmark']
        return LandmarkConfig(epochs=section['epochs'], lr=section['lr'], batch_size=section['batch_size'],
                              finetune_backbone=section['finetune_backbone'],
                              image_size=self.sections['augmentation']['output_size'], seed=seed,
                              progress=self.progress)

    def inversion_config(self, seed: int) -> InversionConfig:
        section = self.sections['inversion']
        return InversionConfig(iterations=section['iterations'], lr=section['lr'], noise_low=section['noise_low'],
                               noise_high=section['noise_high'], seed=seed, depth=section['depth'],
                               dtype=section['dtype'], progress=self.progress)

    def tau_k_grid(self) -> List[Tuple[str, int, float]]:
        """(variant, queue capacity, tau) entries of the ablation, in run order."""
        section = self.sections['ablation']
        if section['taus']:
            contrast = self.sections['contrast']
            return [(contrast['variant'], contrast['queue_capacity'], tau) for tau in section['taus']]
        if section['grid']:
            return [_parse_grid_entry(entry) for entry in section['grid']]
        return list(ABLATION_GRID)


def _parse_grid_entry(entry: str) -> Tuple[str, int, float]:
    parts = entry.split(':')
    if len(parts) != 3:
        raise ValueError(f"grid entry '{entry}' must be variant:queue_capacity:tau")
    return parts[0].strip(), int(parts[1]), float(parts[2])


def _convert(kind: str, raw: str) -> Any:
    raw = raw.strip()
    if kind == 'str':
        return raw
    if kind == 'int':
        return int(raw)
    if kind == 'float':
        return float(raw)
    if kind == 'bool':
        lowered = raw.lower()
        if lowered not in configparser.ConfigParser.BOOLEAN_STATES:
            raise ValueError(f"expected a boolean, got '{raw}'")
        return configparser.ConfigParser.BOOLEAN_STATES[lowered]
    items = [item.strip() for item in raw.split(',') if item.strip()]
    element = kind[:-len('_list')]
    return [_convert(element, item) for item in items]


def _format(kind: str, value: Any) -> str:
    if kind == 'bool':
        return 'true' if value else 'false'
    if kind == 'float':
        return repr(float(value))
    if kind.endswith('_list'):
        element = kind[:-len('_list')]
        return ', '.join(_format(element, item) for item in value)
    return str(value)


def _scan_lines(text: str) -> Dict[Tuple[str, Optional[str]], int]:
    lines, section = {}, None
    for number, line in enumerate(text.splitlines(), start=1):
        header = _SECTION_LINE.match(line)
        if header:
            section = header.group(1).strip()
            lines.setdefault((section, None), number)
            continue
        key = _KEY_LINE.match(line)
        if key and section is not None:
            lines.setdefault((section, key.group(1).strip().lower()), number)
    return lines


def _diagnostic(line: Optional[int], section: str, key: Optional[str], message: str) -> str:
    where = f"[{section}]" + (f" {key}" if key else '')
    return f"line {line}: {where}: {message}" if line else f"{where}: {message}"


def parse_config(text: str, source: Optional[Path] = None) -> ExperimentConfig:
    """
    Parses experiment INI text into typed sections, filling every default.

    Raises:
        ConfigError: with one line-level diagnostic per problem.
    """
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=('#', ';'))
    try:
        parser.read_string(text, source=str(source or '<config>'))
    except configparser.MissingSectionHeaderError as e:
        raise ConfigError(f"Cannot parse {source or 'config'}",
                          [f"line {e.lineno}: expected a [section] header before {e.line.strip()!r}"]) from None
    except configparser.ParsingError as e:
        raise ConfigError(f"Cannot parse {source or 'config'}",
                          [f"line {n}: cannot parse {line.strip()!r}" for n, line in e.errors]) from None
    except configparser.Error as e:
        line = getattr(e, 'lineno', None)
        raise ConfigError(f"Cannot parse {source or 'config'}",
                          [f"line {line}: {e.message}" if line else e.message]) from None

    lines = _scan_lines(text)
    diagnostics, sections = [], {}
    for section in parser.sections():
        if section not in SCHEMA:
            diagnostics.append(_diagnostic(lines.get((section, None)), section, None,
                                           f"unknown section; expected one of {list(SCHEMA)}"))
            continue
        for key in parser[section]:
            if key not in SCHEMA[section]:
                diagnostics.append(_diagnostic(lines.get((section, key)), section, key, "unknown key"))

    for section, keys in SCHEMA.items():
        values = {}
        for key, (kind, default) in keys.items():
            if parser.has_option(section, key):
                try:
                    values[key] = _convert(kind, parser.get(section, key))
                except ValueError as e:
                    diagnostics.append(_diagnostic(lines.get((section, key)), section, key,
                                                   f"expected {kind}: {e}"))
            else:
                values[key] = list(default) if isinstance(default, list) else default
        sections[section] = values

    if not parser.has_option('experiment', 'kind'):
        diagnostics.append(_diagnostic(lines.get(('experiment', None)), 'experiment', 'kind', "missing required key"))
    if diagnostics:
        raise ConfigError(f"Invalid experiment config {source or ''}".rstrip(), diagnostics)
    return ExperimentConfig(sections=sections, source=Path(source) if source else None, lines=lines)


def serialize_config(config: ExperimentConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    for section, keys in SCHEMA.items():
        parser.add_section(section)
        for key, (kind, _) in keys.items():
            value = config.sections[section].get(key)
            if value is not None:
                parser.set(section, key, _format(kind, value))
    buffer = io.StringIO()
    parser.write(buffer)
    return buffer.getvalue()


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    return parse_config(path.read_text(encoding='utf-8'), source=path)


def _class_group_sizes(n_classes: int, fractions: Sequence[float]) -> List[int]:
    bounds = np.round(np.cumsum(fractions) / float(sum(fractions)) * n_classes).astype(int)
    return list(np.diff(np.concatenate(([0], bounds))))


def validate_config(config: ExperimentConfig) -> ExperimentConfig:
    """
    Checks values, cross-section constraints and that referenced files exist.

    Raises:
        ConfigError: with one line-level diagnostic per problem.
    """
    diagnostics = []

    def report(section, key, message):
        diagnostics.append(_diagnostic(config.line_of(section, key), section, key, message))

    def check_file(section, key, value, manifest=False):
        path = config.resolve_path(value)
        target = path / 'manifest.json' if manifest else path
        if not target.exists():
            report(section, key, f"file not found: {target}")

    experiment = config['experiment']
    if experiment['kind'] not in KINDS:
        report('experiment', 'kind', f"unknown kind '{experiment['kind']}'; expected one of {list(KINDS)}")
    if not experiment['seeds']:
        report('experiment', 'seeds', "seed list must not be empty")
    if experiment['checkpoint']:
        check_file('experiment', 'checkpoint', experiment['checkpoint'], manifest=True)

    dataset = config['dataset']
    if dataset['source'] == 'synthetic':
        if dataset['n_classes'] < 2 or dataset['per_class'] < 2:
            report('dataset', 'n_classes', "synthetic data needs at least 2 classes of at least 2 images")
    elif dataset['source'] in ('directory', 'manifest'):
        if not dataset['path']:
            report('dataset', 'path', f"required for source '{dataset['source']}'")
        else:
            check_file('dataset', 'path', dataset['path'])
    else:
        report('dataset', 'source', f"unknown source '{dataset['source']}'; expected synthetic, directory or manifest")
    if not 0.0 < dataset['train_fraction'] < 1.0:
        report('dataset', 'train_fraction', "must be in (0, 1)")

    preset = config['contrast']['preset']
    if preset and preset not in CONTRAST_PRESETS:
        report('contrast', 'preset', f"unknown preset '{preset}'; expected one of {sorted(CONTRAST_PRESETS)}")
    else:
        try:
            config.contrast_config()
        except ValueError as e:
            report('contrast', None, str(e))
    try:
        config.pipeline()
    except ValueError as e:
        report('augmentation', None, str(e))
    try:
        config.probe_config(seed=0)
    except ValueError as e:
        report('probe', None, str(e))

    kind = experiment['kind']
    if kind == 'few_shot':
        few_shot = config['few_shot']
        if len(few_shot['class_fractions']) != 3:
            report('few_shot', 'class_fractions', "expected base, validation and novel fractions")
        elif dataset['source'] == 'synthetic':
            sizes = _class_group_sizes(dataset['n_classes'], few_shot['class_fractions'])
            if min(sizes[1:]) < few_shot['n_way']:
                report('few_shot', 'class_fractions',
                       f"validation/novel groups get {sizes[1:]} of {dataset['n_classes']} classes; "
                       f"{few_shot['n_way']}-way episodes need at least {few_shot['n_way']}")
            if dataset['per_class'] < few_shot['k_shot'] + few_shot['n_query']:
                report('few_shot', 'n_query', f"classes have {dataset['per_class']} images, "
                                              f"episodes need {few_shot['k_shot'] + few_shot['n_query']}")
        if not few_shot['lr_grid']:
            report('few_shot', 'lr_grid', "must not be empty")
        if few_shot['episodes'] < 2:
            report('few_shot', 'episodes', "must be >= 2 to report an interval")
    elif kind == 'landmark':
        landmark = config['landmark']
        if landmark['n_train'] < 1:
            report('landmark', 'n_train', "must be >= 1")
        if landmark['source'] == 'file':
            if not landmark['path']:
                report('landmark', 'path', "required for source 'file'")
            elif config.resolve_path(landmark['path']).exists():
                try:
                    n_images = len(load_landmark_file(config.resolve_path(landmark['path'])))
                except ValueError as e:
                    report('landmark', 'path', str(e))
                else:
                    if n_images - landmark['n_train'] < MIN_LANDMARK_TEST:
                        report('landmark', 'n_train', f"file has {n_images} entries; {landmark['n_train']} training "
                                                      f"images leave fewer than {MIN_LANDMARK_TEST} for testing")
            else:
                check_file('landmark', 'path', landmark['path'])
        elif landmark['source'] == 'synthetic':
            if landmark['n_test'] < MIN_LANDMARK_TEST:
                report('landmark', 'n_test', f"must be >= {MIN_LANDMARK_TEST} to report an interval")
        else:
            report('landmark', 'source', f"unknown source '{landmark['source']}'; expected synthetic or file")
        try:
            config.landmark_config(seed=0)
        except ValueError as e:
            report('landmark', None, str(e))
    elif kind == 'invert':
        inversion = config['inversion']
        try:
            config.inversion_config(seed=0)
        except ValueError as e:
            report('inversion', None, str(e))
        if not 1 <= inversion['depth'] <= FULL_DEPTH:
            report('inversion', 'depth', f"must be in [1, {FULL_DEPTH}]")
        elif dataset['source'] == 'synthetic' and dataset['image_size'] % 2 ** inversion['depth']:
            report('inversion', 'depth', f"image_size {dataset['image_size']} is not divisible by "
                                         f"{2 ** inversion['depth']}")
        if not inversion['encoders']:
            report('inversion', 'encoders', "must name at least one encoder")
        for name in inversion['encoders'] + [inversion['metric_variant']]:
            if name not in VARIANTS and name not in CONTRAST_PRESETS:
                report('inversion', 'encoders', f"'{name}' is neither a variant nor a preset")
    elif kind == 'diagnose':
        diagnose = config['diagnose']
        if not diagnose['detections']:
            report('diagnose', 'detections', "must list at least one detection file")
        for entry in diagnose['detections']:
            check_file('diagnose', 'detections', entry.split('=', 1)[-1].strip())
        if not diagnose['ground_truth']:
            report('diagnose', 'ground_truth', "required")
        else:
            check_file('diagnose', 'ground_truth', diagnose['ground_truth'])
        if diagnose['similarity']:
            check_file('diagnose', 'similarity', diagnose['similarity'])
        if not 0.0 <= diagnose['weak_iou'] < diagnose['correct_iou'] < 1.0:
            report('diagnose', 'weak_iou', "thresholds must satisfy 0 <= weak_iou < correct_iou < 1")
    elif kind == 'ablate_augmentations':
        ablation = config['ablation']
        for stage in ablation['stages']:
            if not 1 <= stage <= len(AUGMENTATION_STAGES):
                report('ablation', 'stages', f"stage {stage} outside 1..{len(AUGMENTATION_STAGES)}")
        for mode in ablation['modes']:
            if mode not in CROP_SCALE_MIN:
                report('ablation', 'modes', f"unknown mode '{mode}'")
        try:
            config.contrast_config(preset='', variant='moco')
        except ValueError as e:
            report('contrast', None, str(e))
    elif kind == 'ablate_tau_k':
        try:
            for variant, capacity, tau in config.tau_k_grid():
                config.contrast_config(variant=variant, queue_capacity=capacity, tau=tau)
        except ValueError as e:
            report('ablation', 'grid', str(e))

    if diagnostics:
        raise ConfigError(f"Invalid experiment config {config.source or ''}".rstrip(), diagnostics)
    return config


def configure_threads() -> int:
    """Torch intra-op threads from CONTRAST_NUM_THREADS (default 1, for bit-exact runs)."""
    threads = int(os.getenv('CONTRAST_NUM_THREADS') or 1)
    torch.set_num_threads(threads)
    return threads


def _check_finite(row: Dict[str, Any]) -> None:
    for key, value in row.items():
        if isinstance(value, (bool, np.bool_)) or not isinstance(value, (int, float, np.integer, np.floating)):
            continue
        if not np.isfinite(value):
            raise ValueError(f"Metric '{key}' is not finite: {value}")


def _plain(row: Dict[str, Any]) -> Dict[str, Any]:
    return {k: (v.item() if isinstance(v, np.generic) else v) for k, v in row.items()}


@dataclass
class RunRecord:
    """Append-only log of one run. Every recorded number is finite."""
    name: str
    kind: str
    config: Dict[str, Dict[str, Any]]
    run_dir: str
    epoch_metrics: List[Dict[str, Any]] = field(default_factory=list)
    results: List[Dict[str, Any]] = field(default_factory=list)
    summary: List[Dict[str, Any]] = field(default_factory=list)
    artifacts: List[str] = field(default_factory=list)
    wall_clock: float = 0.0

    def add_epoch_metrics(self, row: Dict[str, Any]) -> None:
        _check_finite(row)
        self.epoch_metrics.append(_plain(row))

    def add_result(self, row: Dict[str, Any]) -> None:
        _check_finite(row)
        self.results.append(_plain(row))

    def add_summary(self, row: Dict[str, Any]) -> None:
        _check_finite(row)
        self.summary.append(_plain(row))

    def add_artifact(self, path: Union[str, Path]) -> None:
        self.artifacts.append(str(path))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RunRecord':
        return cls(**data)

    @classmethod
    def load(cls, run_dir: Union[str, Path]) -> 'RunRecord':
        return cls.from_dict(load_json(Path(run_dir) / 'run_record.json'))


class ExperimentRunner:
    """Executes one experiment kind for every seed of a validated config."""

    def __init__(self, config: ExperimentConfig, run_dir: Path):
        self.config = config
        self.run_dir = Path(run_dir)
        self.record = RunRecord(name=config.name, kind=config.kind, config=config.sections, run_dir=str(run_dir))
        self._dataset: Optional[LabeledImageSet] = None

    @property
    def dataset(self) -> LabeledImageSet:
        if self._dataset is None:
            section = self.config['dataset']
            if section['source'] == 'synthetic':
                self._dataset = make_synthetic_dataset(section['n_classes'], section['per_class'],
                                                       section['image_size'], section['seed'])
            else:
                self._dataset = load_dataset(self.config.resolve_path(section['path']), format=section['source'])
            logging.info(f"Dataset: {len(self._dataset)} images, {self._dataset.num_classes} classes "
                         f"({section['source']})")
        return self._dataset

    def run(self) -> RunRecord:
        started = time.perf_counter()
        logging.info(f"--- Experiment '{self.config.name}': {self.config.kind}, seeds {self.config.seeds} ---")
        getattr(self, f"run_{self.config.kind}")()
        self.record.wall_clock = time.perf_counter() - started
        self.finish()
        return self.record

    def finish(self) -> None:
        """Writes results.csv, plots, the markdown summary and run_record.json."""
        if self.record.results:
            self.record.add_artifact(save_table(pd.DataFrame(self.record.results), self.run_dir / 'results.csv'))
        reporter = ReportGenerator([self.record], self.run_dir / 'plots')
        for path in reporter.emit_plots():
            self.record.add_artifact(path)
        self.record.add_artifact(save_report(reporter.compile_summary(self.record), self.run_dir / 'summary.md'))
        record_path = self.run_dir / 'run_record.json'
        self.record.add_artifact(record_path)
        save_json(self.record.to_dict(), record_path)
        logging.info(f"Run '{self.record.name}' finished in {self.record.wall_clock:.1f}s; outputs in {self.run_dir}")

    # shared steps

    def pretrain(self, dataset: LabeledImageSet, contrast: ContrastConfig, pipeline: AugmentationPipeline,
                 seed: int, directory: Path, tag: str = '') -> ConvEncoder:
        state = build_train_state(contrast, dataset.num_classes, in_channels=dataset.images[0].shape[2], seed=seed)
        metrics = train(state, dataset, pipeline, contrast)

        rows = [{'epoch': m['epoch'], 'step': m['step'], 'metric': 'loss', 'value': m['loss']} for m in metrics]
        self.record.add_artifact(save_table(pd.DataFrame(rows, columns=METRICS_COLUMNS), directory / 'metrics.csv'))
        checkpoint = directory / 'checkpoint'
        save_train_state(state, contrast, checkpoint)
        self.record.add_artifact(checkpoint / 'manifest.json')
        for m in metrics:
            self.record.add_epoch_metrics({'tag': tag or contrast.variant, 'seed': seed, 'epoch': m['epoch'],
                                           'step': m['step'], 'loss': m['loss'], 'lr': m['lr'],
                                           'throughput': m['throughput']})
        return state.encoder

    def encoder_for(self, dataset: LabeledImageSet, seed: int, directory: Path,
                    contrast: Optional[ContrastConfig] = None, pipeline: Optional[AugmentationPipeline] = None,
                    tag: str = '') -> ConvEncoder:
        """The configured checkpoint's query encoder, or a freshly pretrained one."""
        checkpoint = self.config['experiment']['checkpoint']
        if checkpoint:
            state, _ = load_train_state(self.config.resolve_path(checkpoint))
            return state.encoder
        return self.pretrain(dataset, contrast or self.config.contrast_config(), pipeline or self.config.pipeline(),
                             seed, directory, tag)

    def probe_accuracy(self, encoder: ConvEncoder, seed: int) -> float:
        train_set, test_set = self.dataset.split(self.config['dataset']['train_fraction'], seed)
        size = self.config['augmentation']['output_size']
        return linear_probe(extract_features(encoder, train_set.images, size=size), train_set.labels,
                            extract_features(encoder, test_set.images, size=size), test_set.labels,
                            self.config.probe_config(seed))

    def seed_dir(self, seed: int, *parts: str) -> Path:
        return self.run_dir.joinpath(*parts, f'seed_{seed}')

    # experiment kinds

    def run_pretrain(self) -> None:
        contrast = self.config.contrast_config()
        for seed in self.config.seeds:
            self.pretrain(self.dataset, contrast, self.config.pipeline(), seed, self.seed_dir(seed))
            final = self.record.epoch_metrics[-1]
            self.record.add_result({'seed': seed, 'variant': contrast.variant, 'epochs': final['epoch'],
                                    'final_loss': final['loss']})

    def run_linear_probe(self) -> None:
        for seed in self.config.seeds:
            encoder = self.encoder_for(self.dataset, seed, self.seed_dir(seed))
            accuracy = self.probe_accuracy(encoder, seed)
            self.record.add_result({'seed': seed, 'variant': self.config.contrast_config().variant,
                                    'accuracy': accuracy})

    def run_few_shot(self) -> None:
        section = self.config['few_shot']
        base, validation, novel = self.dataset.class_split(section['class_fractions'],
                                                           seed=self.config['dataset']['seed'])
        for seed in self.config.seeds:
            encoder = self.encoder_for(base, seed, self.seed_dir(seed))
            few_shot = self.config.few_shot_config(seed)
            lr = cross_validate_learning_rate(encoder, validation, few_shot, section['validation_episodes'])
            result = few_shot_eval(encoder, novel, section['episodes'], with_learning_rate(few_shot, lr))
            self.record.add_result({'seed': seed, 'variant': self.config.contrast_config().variant,
                                    'n_way': few_shot.n_way, 'k_shot': few_shot.k_shot, 'lr': lr,
                                    'accuracy': result.mean, 'half_width': result.half_width,
                                    'episodes': result.n})

    def _landmark_data(self, seed: int) -> Tuple[List[Image], List[LandmarkSet], List[Image], List[LandmarkSet]]:
        section = self.config['landmark']
        if section['source'] == 'file':
            entries = load_landmark_file(self.config.resolve_path(section['path']))
            images = [read_image(path) for path, _ in entries]
            landmarks = [lm for _, lm in entries]
        else:
            images, landmarks = make_synthetic_landmark_set(section['n_train'] + section['n_test'],
                                                            section['image_size'], seed)
        n_train = section['n_train']
        if not 0 < n_train <= len(images) - MIN_LANDMARK_TEST:
            raise ValueError(f"Landmark data has {len(images)} images; cannot hold out a test split "
                             f"after {n_train} training images")
        return images[:n_train], landmarks[:n_train], images[n_train:], landmarks[n_train:]

    def run_landmark(self) -> None:
        for seed in self.config.seeds:
            train_images, train_landmarks, test_images, test_landmarks = self._landmark_data(seed)
            encoder = self.encoder_for(self.dataset, seed, self.seed_dir(seed))
            landmark_config = self.config.landmark_config(seed)
            head = train_landmark_head(encoder, train_images, train_landmarks, landmark_config)
            result = evaluate_landmarks(encoder, head, test_images, test_landmarks, landmark_config.image_size)
            self.record.add_result({'seed': seed, 'variant': self.config.contrast_config().variant,
                                    'finetune_backbone': landmark_config.finetune_backbone,
                                    'error': result.mean, 'half_width': result.half_width, 'n_test': result.n})

    def _inversion_targets(self) -> List[Image]:
        """The first image of each of the first n_images classes."""
        members = self.dataset.class_indices()
        chosen = [int(indices[0]) for _, indices in sorted(members.items())][:self.config['inversion']['n_images']]
        return [Image(self.dataset.images[i].pixels, source=f'class{int(self.dataset.labels[i])}_{i}')
                for i in chosen]

    def _named_contrast(self, name: str) -> ContrastConfig:
        if name in CONTRAST_PRESETS:
            return self.config.contrast_config(preset=name)
        return self.config.contrast_config(variant=name)

    def run_invert(self) -> None:
        section = self.config['inversion']
        targets = self._inversion_targets()
        for seed in self.config.seeds:
            inversion = self.config.inversion_config(seed)
            encoders = {}
            for name in section['encoders']:
                encoder = self.pretrain(self.dataset, self._named_contrast(name), self.config.pipeline(), seed,
                                        self.seed_dir(seed, 'encoders', name), tag=name)
                encoders[name] = encoder.to(inversion.torch_dtype)
            metric = self.pretrain(self.dataset, self._named_contrast(section['metric_variant']),
                                   self.config.pipeline(), seed + METRIC_SEED_OFFSET,
                                   self.seed_dir(seed, 'metric_encoder'), tag='metric')

            report = reconstruction_report(targets, encoders, metric, inversion)
            seed_dir = self.seed_dir(seed)
            self.record.add_artifact(save_table(report.table, seed_dir / 'reconstruction.csv'))
            for image in targets:
                self.record.add_artifact(save_image(image, seed_dir / 'reconstructions' / f'{image.source}_target.png'))
            for (image_id, name), result in report.reconstructions.items():
                path = save_image(result.image, seed_dir / 'reconstructions' / f'{image_id}_{name}.png')
                self.record.add_artifact(path)
            self.record.add_artifact(save_json({'inversion': asdict(inversion), 'encoders': section['encoders'],
                                                'metric_variant': section['metric_variant'],
                                                'images': image_ids(targets)},
                                               seed_dir / 'reconstructions' / 'manifest.json'))

            for row, ((image_id, name), result) in zip(report.table.to_dict('records'), report.reconstructions.items()):
                target = next(t for t in targets if t.source == image_id)
                self.record.add_result({'seed': seed, **row, 'psnr': min(psnr(result.image, target), 100.0),
                                        'final_objective': result.final_objective})
            for name, mean in report.means.items():
                self.record.add_summary({'seed': seed, 'encoder': name, 'mean_distance': float(mean)})

    def run_diagnose(self) -> None:
        section = self.config['diagnose']
        gts = read_ground_truth(self.config.resolve_path(section['ground_truth']))
        similarity = (read_similarity_map(self.config.resolve_path(section['similarity']))
                      if section['similarity'] else default_similarity_map())

        distributions, aps = [], []
        for entry in section['detections']:
            name, _, path = entry.rpartition('=')
            path = self.config.resolve_path(path.strip())
            name = name.strip() or path.stem
            logging.info(f"--- Diagnosing false positives: {name} ---")
            dets = read_detections(path)
            dists = top_fp_distribution(dets, gts, similarity, section['weak_iou'], section['correct_iou'])
            distributions.append(distribution_table(dists, method=name))
            table = ap_table(dets, gts, section['ap_thresholds'], section['use_07_metric'])
            table.insert(0, 'method', name)
            aps.append(table)

        distribution = pd.concat(distributions, ignore_index=True)
        self.record.add_artifact(save_table(distribution, self.run_dir / 'fp_distribution.csv'))
        self.record.add_artifact(save_table(pd.concat(aps, ignore_index=True), self.run_dir / 'ap.csv'))
        for row in distribution.to_dict('records'):
            self.record.add_result(row)
        for row in pd.concat(aps, ignore_index=True).to_dict('records'):
            self.record.add_summary(row)

    def run_ablate_augmentations(self) -> None:
        section = self.config['ablation']
        for mode in section['modes']:
            variant = 'cross_entropy' if mode == 'supervised' else 'moco'
            contrast = self.config.contrast_config(preset='', variant=variant)
            for stage in section['stages']:
                pipeline = self.config.pipeline(stage=stage, mode=mode)
                for seed in self.config.seeds:
                    encoder = self.pretrain(self.dataset, contrast, pipeline, seed,
                                            self.seed_dir(seed, f'{mode}_stage{stage}'), tag=f'{mode} stage {stage}')
                    self.record.add_result({'mode': mode, 'stage': stage, 'transform': AUGMENTATION_STAGES[stage - 1],
                                            'variant': variant, 'seed': seed,
                                            'accuracy': self.probe_accuracy(encoder, seed)})

    def run_ablate_tau_k(self) -> None:
        for variant, capacity, tau in self.config.tau_k_grid():
            contrast = self.config.contrast_config(preset='', variant=variant, queue_capacity=capacity, tau=tau)
            for seed in self.config.seeds:
                tag = f'{variant}_K{capacity}_tau{tau:g}'
                encoder = self.pretrain(self.dataset, contrast, self.config.pipeline(), seed,
                                        self.seed_dir(seed, tag), tag=tag)
                self.record.add_result({'variant': variant, 'queue_capacity': capacity, 'tau': tau, 'seed': seed,
                                        'accuracy': self.probe_accuracy(encoder, seed)})


def _run_dir(config: ExperimentConfig, output_dir: Optional[Path] = None) -> Path:
    root = Path(output_dir) if output_dir else resolve_output_root(config['experiment']['output_dir'])
    return root / config.name


def run_experiment(config_path: Union[str, Path, ExperimentConfig], output_dir: Optional[Path] = None) -> RunRecord:
    """
    Loads, validates and executes one experiment file.

    Raises:
        ConfigError: the config does not parse or validate.
        NumericAbortError: a loss or objective became non-finite.
    """
    config = config_path if isinstance(config_path, ExperimentConfig) else load_config(config_path)
    validate_config(config)
    configure_threads()
    return ExperimentRunner(config, _run_dir(config, output_dir)).run()


BUDGET_KEYS = {
    'dataset': None,
    'augmentation': None,
    'probe': None,
    'contrast': ('epochs', 'batch_size', 'backbone_channels', 'embedding_dim'),
}


def _budget_mismatches(reference: ExperimentConfig, other: ExperimentConfig) -> List[str]:
    problems = []
    for section, keys in BUDGET_KEYS.items():
        for key in keys or SCHEMA[section]:
            if reference[section][key] != other[section][key]:
                problems.append(_diagnostic(other.line_of(section, key), section, key,
                                            f"'{other.name}' has {other[section][key]!r}, "
                                            f"'{reference.name}' has {reference[section][key]!r}"))
    return problems


def compare_variants(configs: Sequence[Union[str, Path, ExperimentConfig]], seeds: Sequence[int],
                     output_dir: Optional[Path] = None) -> Tuple[pd.DataFrame, RunRecord]:
    """
    Pretrains every config's variant for every seed, probes it linearly and
    ranks the variants by mean accuracy (95% half-width across seeds).

    Raises:
        ConfigError: configs differ in dataset or training budget, or a config is invalid.
    """
    configs = [c if isinstance(c, ExperimentConfig) else load_config(c) for c in configs]
    if not configs or not seeds:
        raise ConfigError("compare needs at least one config and one seed")
    for config in configs:
        validate_config(config)
    names = [c.name for c in configs]
    if len(set(names)) != len(names):
        raise ConfigError(f"Variant names must be unique, got {names}")
    problems = [p for other in configs[1:] for p in _budget_mismatches(configs[0], other)]
    if problems:
        raise ConfigError("Variants do not share dataset and budget", problems)

    configure_threads()
    root = Path(output_dir) if output_dir else resolve_output_root(configs[0]['experiment']['output_dir'])
    run_dir = root / ('compare_' + '_'.join(names))
    record = RunRecord(name=run_dir.name, kind='compare', config={n: c.sections for n, c in zip(names, configs)},
                       run_dir=str(run_dir))
    started = time.perf_counter()

    for config in configs:
        runner = ExperimentRunner(config, run_dir / config.name)
        runner.record = record
        contrast = config.contrast_config()
        logging.info(f"--- Variant '{config.name}' ({contrast.variant}, tau={contrast.tau}) ---")
        for seed in seeds:
            encoder = runner.pretrain(runner.dataset, contrast, config.pipeline(), seed,
                                      runner.seed_dir(seed), tag=config.name)
            record.add_result({'variant': config.name, 'seed': seed, 'accuracy': runner.probe_accuracy(encoder, seed)})

    results = pd.DataFrame(record.results)
    rows = []
    for name in names:
        accuracies = results.loc[results['variant'] == name, 'accuracy'].to_numpy()
        if len(accuracies) >= 2:
            interval = confidence_interval(accuracies)
            rows.append({'variant': name, 'mean': interval.mean, 'half_width': interval.half_width, 'n': interval.n})
        else:
            logging.warning(f"Single seed for '{name}': no confidence interval")
            rows.append({'variant': name, 'mean': float(accuracies[0]), 'half_width': 0.0, 'n': 1})
    table = pd.DataFrame(rows).sort_values('mean', ascending=False, kind='mergesort').reset_index(drop=True)
    table.insert(0, 'rank', np.arange(1, len(table) + 1))
    for row in table.to_dict('records'):
        record.add_summary(row)

    record.wall_clock = time.perf_counter() - started
    runner = ExperimentRunner(configs[0], run_dir)
    runner.record = record
    record.add_artifact(save_table(table, run_dir / 'comparison.csv'))
    runner.finish()
    logging.info("Ranking: " + ', '.join(f"{r['variant']} {r['mean']:.4f}" for r in table.to_dict('records')))
    return table, record

