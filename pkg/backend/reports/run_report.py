"""
Run Report Generator Module
Loss and learning-rate curves, mixing density and an HTML summary for one run
"""

import json
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Union

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from jinja2 import Template  # noqa: E402
from loguru import logger  # noqa: E402
from scipy import stats  # noqa: E402

from backend.reports.report_templates import ReportTemplates  # noqa: E402
from backend.utils.file_handlers import FileHandler  # noqa: E402
from backend.utils.validators import MixupConfig  # noqa: E402

LOSS_COLUMNS = ('total', 'l_vs', 'l_vw', 'l_sw')


class RunReportGenerator:
    """Generates the report of a pretraining run directory"""

    def __init__(self, run_dir: Union[str, Path], mixup_cfg: Optional[MixupConfig] = None):
        """
        Initialize report generator

        Args:
            run_dir: Directory with loss_log.jsonl, checkpoints and metrics files
            mixup_cfg: Mixing settings whose Beta density is plotted
        """
        self.handler = FileHandler(run_dir)
        self.run_dir = self.handler.base_directory
        self.mixup_cfg = mixup_cfg or MixupConfig()

    def load_loss_log(self) -> pd.DataFrame:
        return self.handler.load_jsonl('loss_log').sort_values('step').reset_index(drop=True)

    def load_metrics(self) -> List[Dict]:
        """All metrics_<head>.json files of the run"""
        rows = []
        for path in sorted(self.run_dir.glob('metrics_*.json')):
            rows.append(json.loads(path.read_text(encoding='utf-8')))
        return rows

    def plot_losses(self, log: pd.DataFrame) -> str:
        fig, ax = plt.subplots(figsize=(8, 4))
        for column in LOSS_COLUMNS:
            if column in log.columns and log[column].notna().any():
                ax.plot(log['step'], log[column], label=column)
        ax.set_xlabel('step')
        ax.set_ylabel('loss')
        ax.set_title('Contrastive losses')
        ax.legend()
        return self._save(fig, 'losses.png')

    def plot_learning_rate(self, log: pd.DataFrame) -> str:
        fig, ax = plt.subplots(figsize=(8, 3))
        ax.plot(log['step'], log['lr'])
        ax.set_xlabel('step')
        ax.set_ylabel('learning rate')
        ax.set_title('Learning-rate schedule')
        return self._save(fig, 'learning_rate.png')

    def plot_mixing_density(self) -> str:
        a, b = self.mixup_cfg.beta_a, self.mixup_cfg.beta_b
        alphas = np.linspace(0.0, 1.0, 201)
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(alphas, stats.beta(a, b).pdf(alphas))
        ax.set_xlabel('mixing ratio')
        ax.set_title(f'Beta({a:g}, {b:g})')
        return self._save(fig, 'mixing_density.png')

    def _save(self, fig, filename: str) -> str:
        path = self.run_dir / filename
        fig.tight_layout()
        fig.savefig(path, dpi=100)
        plt.close(fig)
        return filename

    def generate(self, output_name: str = 'report.html') -> str:
        """
        Write figures and the HTML summary into the run directory

        Returns:
            str: Path to the HTML report
        """
        try:
            log = self.load_loss_log()
            figures = [self.plot_losses(log), self.plot_learning_rate(log), self.plot_mixing_density()]
            final = log.iloc[-1].to_dict()
            overview = {
                'logged steps': len(log),
                'last step': int(final['step']),
                'checkpoints': len(self.handler.list_checkpoints()),
            }
            overview.update(ReportTemplates.summarize_losses(final))

            html = Template(ReportTemplates.get_run_template()).render(
                run_name=self.run_dir.name,
                generation_time=datetime.now().strftime('%Y-%m-%d %H:%M:%S'),
                overview=overview,
                figures=figures,
                metrics=self.load_metrics(),
                format_float=ReportTemplates.format_float,
            )
            output_path = self.run_dir / output_name
            output_path.write_text(html, encoding='utf-8')
            logger.info(f"Run report generated: {output_path}")
            return str(output_path)
        except Exception as e:
            logger.error(f"Error generating run report: {str(e)}")
            raise
