"""
Figures and markdown summaries for experiment runs.
"""
import logging
import re
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Sequence

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import pandas as pd

from config.contrast import FULL_SCALE_REFERENCE

FP_LABELS = ['Loc', 'Sim', 'Oth', 'BG']
FP_COLORS = ['#4c72b0', '#dd8452', '#55a868', '#8c8c8c']


def _slug(text: Any) -> str:
    return re.sub(r'[^A-Za-z0-9._-]+', '-', str(text)).strip('-') or 'x'


class ReportGenerator:
    def __init__(self, records: Sequence[Any], output_dir: Path):
        """
        Args:
            records: RunRecords to render.
            output_dir: Directory the figures are written to.
        """
        self.records = list(records)
        self.output_dir = Path(output_dir)

    def emit_plots(self) -> List[Path]:
        """
        Renders one file per figure kind present in the records: training
        curves, one FP pie per (method, category), a perceptual-distance
        scatter, ablation curves and variant comparison bars. Categories whose
        top-N holds no false positive (`empty` rows) get no pie. File names
        depend only on record contents.
        """
        if not self.records:
            raise ValueError("emit_plots needs at least one run record")

        paths = []
        for record in self.records:
            directory = self.output_dir if len(self.records) == 1 else self.output_dir / _slug(record.name)
            if record.epoch_metrics:
                paths.append(self.plot_training_curves(record, directory))
            if record.kind == 'diagnose':
                paths.extend(self.plot_fp_pies(record, directory))
            elif record.kind == 'invert' and record.results:
                paths.append(self.plot_distance_scatter(record, directory))
            elif record.kind in ('ablate_augmentations', 'ablate_tau_k') and record.results:
                paths.append(self.plot_ablation(record, directory))
            elif record.kind == 'compare' and record.summary:
                paths.append(self.plot_comparison(record, directory))
        logging.info(f"Wrote {len(paths)} figures to {self.output_dir}")
        return paths

    def _save(self, fig, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.tight_layout()
        fig.savefig(path, dpi=100)
        plt.close(fig)
        return path

    def plot_training_curves(self, record, directory: Path) -> Path:
        frame = pd.DataFrame(record.epoch_metrics)
        fig, ax = plt.subplots(figsize=(6, 4))
        for (tag, seed), group in frame.groupby(['tag', 'seed'], sort=True):
            ax.plot(group['epoch'], group['loss'], marker='o', markersize=3, label=f"{tag} (seed {seed})")
        ax.set_xlabel('epoch')
        ax.set_ylabel('training loss')
        ax.set_title(f"{record.name}: training loss")
        if frame.groupby(['tag', 'seed']).ngroups <= 12:
            ax.legend(fontsize=7)
        return self._save(fig, directory / 'training_curves.png')

    def plot_fp_pies(self, record, directory: Path) -> List[Path]:
        paths = []
        for row in record.results:
            if row.get('empty'):
                continue
            fractions = [row[label] for label in FP_LABELS]
            fig, ax = plt.subplots(figsize=(4, 4))
            shown = [(f, l, c) for f, l, c in zip(fractions, FP_LABELS, FP_COLORS) if f > 0]
            ax.pie([s[0] for s in shown], labels=[s[1] for s in shown], colors=[s[2] for s in shown],
                   autopct='%1.0f%%', startangle=90, counterclock=False)
            ax.set_title(f"{row.get('method', '')} {row['category']}: top-{row['n_top']} FPs".strip())
            name = f"fp_pie_{_slug(row.get('method', record.name))}_{_slug(row['category'])}.png"
            paths.append(self._save(fig, directory / name))
        return paths

    def plot_distance_scatter(self, record, directory: Path) -> Path:
        frame = pd.DataFrame(record.results)
        wide = frame.groupby(['seed', 'image', 'encoder'], sort=False)['distance'].mean().unstack('encoder')
        encoders = list(dict.fromkeys(frame['encoder']))
        fig, ax = plt.subplots(figsize=(5, 5))
        if len(encoders) == 2:
            x, y = wide[encoders[0]], wide[encoders[1]]
            ax.scatter(x, y, s=18)
            low, high = float(min(x.min(), y.min())), float(max(x.max(), y.max()))
            ax.plot([low, high], [low, high], color='gray', linestyle='--', linewidth=1)
            ax.set_xlabel(f"{encoders[0]} distance")
            ax.set_ylabel(f"{encoders[1]} distance")
        else:
            for i, name in enumerate(encoders):
                ax.scatter([i] * len(wide), wide[name], s=18, label=name)
            ax.set_xticks(range(len(encoders)))
            ax.set_xticklabels(encoders)
            ax.set_ylabel('perceptual distance')
        ax.set_title('Reconstruction perceptual distance')
        return self._save(fig, directory / 'distance_scatter.png')

    def plot_ablation(self, record, directory: Path) -> Path:
        frame = pd.DataFrame(record.results)
        fig, ax = plt.subplots(figsize=(6, 4))
        if record.kind == 'ablate_augmentations':
            means = frame.groupby(['mode', 'stage'])['accuracy'].mean().reset_index()
            for mode, group in means.groupby('mode'):
                ax.plot(group['stage'], group['accuracy'], marker='o', label=mode)
            ax.set_xlabel('augmentation stage')
            ax.legend()
        else:
            means = frame.groupby(['variant', 'queue_capacity', 'tau'], sort=False)['accuracy'].mean().reset_index()
            labels = [f"{r.variant}\nK={r.queue_capacity}\nτ={r.tau:g}" for r in means.itertuples()]
            ax.bar(range(len(means)), means['accuracy'])
            ax.set_xticks(range(len(means)))
            ax.set_xticklabels(labels, fontsize=7)
        ax.set_ylabel('linear probe accuracy')
        ax.set_title(record.name)
        return self._save(fig, directory / f'{record.kind}.png')

    def plot_comparison(self, record, directory: Path) -> Path:
        frame = pd.DataFrame(record.summary)
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.bar(frame['variant'], frame['mean'], yerr=frame['half_width'], capsize=4)
        ax.set_ylabel('linear probe accuracy')
        ax.set_title('Variant comparison (mean ± 95% CI)')
        return self._save(fig, directory / 'comparison.png')

    def _markdown_table(self, rows: List[Dict[str, Any]]) -> str:
        if not rows:
            return '_no rows_\n'
        columns = list(dict.fromkeys(key for row in rows for key in row))

        def cell(value):
            if isinstance(value, float):
                return f"{value:.4f}"
            return str(value)

        lines = ['| ' + ' | '.join(columns) + ' |', '|' + '---|' * len(columns)]
        lines += ['| ' + ' | '.join(cell(row.get(c, '')) for c in columns) + ' |' for row in rows]
        return '\n'.join(lines) + '\n'

    def compile_summary(self, record) -> str:
        """Markdown summary of one run: results, aggregates and artifacts."""
        report = f"# {record.name} ({record.kind})\n\n"
        report += f"*Generated {datetime.now().strftime('%Y-%m-%d %H:%M')}, wall clock {record.wall_clock:.1f}s*\n\n"

        report += "## Results\n\n"
        report += self._markdown_table(record.results)
        if record.summary:
            report += "\n## Summary\n\n"
            report += self._markdown_table(record.summary)
        if record.kind == 'compare':
            reference = ', '.join(f"{name} {value}%" for name, value in FULL_SCALE_REFERENCE.items())
            report += (f"\n*Full-scale ImageNet linear-probe reference, not an expectation at this scale: "
                       f"{reference}.*\n")
        if record.epoch_metrics:
            final = pd.DataFrame(record.epoch_metrics).groupby(['tag', 'seed']).last().reset_index()
            report += "\n## Final training loss\n\n"
            report += self._markdown_table(final[['tag', 'seed', 'epoch', 'loss']].to_dict('records'))
        return report
