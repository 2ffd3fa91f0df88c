"""
Ablation grids: every grid point pre-trains (where the grid touches pre-training),
fine-tunes the ablation task, and reports the task's primary metric per seed
"""
import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from checkpoint_io import Checkpoint
from config_settings import RunConfig
from evaluation import HIGHER_IS_BETTER, PRIMARY_METRIC
from exceptions import ConfigError
from metrics_log import MetricsLog, format_value
from pipeline import RunResult, finetune, pretrain

ablation_logger = logging.getLogger('glid.ablation')

ABLATIONS = ('mask-strategy', 'mask-ratio', 'load-policy', 'decoder-depth', 'pretrain-steps', 'data-frac',
             'convergence')


@dataclass
class AblationRow:
    setting: Dict[str, object]
    values: List[float] = field(default_factory=list)
    extra: Dict[str, List[float]] = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(self.values)) if self.values else float('nan')


@dataclass
class AblationSummary:
    what: str
    task: str
    metric: str
    seeds: Tuple[int, ...]
    rows: List[AblationRow] = field(default_factory=list)
    files: List[Path] = field(default_factory=list)

    def header(self) -> List[str]:
        setting_keys = list(self.rows[0].setting) if self.rows else []
        extra_keys = sorted({k for row in self.rows for k in row.extra})
        return (setting_keys + [f"{self.metric} mean"] + [f"seed{s}" for s in self.seeds]
                + [f"{k} mean" for k in extra_keys])

    def table(self) -> List[List[str]]:
        extra_keys = sorted({k for row in self.rows for k in row.extra})
        lines = []
        for row in self.rows:
            cells = [str(v) for v in row.setting.values()]
            cells.append(format_value(row.mean))
            cells.extend(format_value(v) for v in row.values)
            cells.extend(format_value(float(np.mean(row.extra[k]))) if row.extra.get(k) else '' for k in extra_keys)
            lines.append(cells)
        return lines

    def write_csv(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8', newline='') as fh:
            writer = csv.writer(fh, lineterminator='\n')
            writer.writerow(self.header())
            writer.writerows(self.table())
        self.files.append(path)
        return path


class AblationRunner:
    """Runs one grid sequentially; every run writes its own metrics CSV into ``out_dir``"""

    def __init__(self, cfg: RunConfig, out_dir: Path):
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self.task = cfg.ablation.task
        self.metric = PRIMARY_METRIC[self.task]

    def _metrics(self, tag: str) -> MetricsLog:
        return MetricsLog(self.out_dir / f"{tag}.metrics.csv")

    def pretrained(self, cfg: RunConfig, tag: str) -> Tuple[Checkpoint, RunResult]:
        result = pretrain(cfg, self._metrics(f"{tag}_pretrain"))
        return result.checkpoint, result

    def finetuned(self, cfg: RunConfig, init: Optional[Checkpoint], policy: str, tag: str,
                  **overrides) -> RunResult:
        ft = replace(cfg.finetune, task=self.task, tasks=(), load_policy=policy, **overrides)
        return finetune(replace(cfg, finetune=ft), init, self._metrics(f"{tag}_finetune"))

    def _pretrain_grid(self, what: str, values, apply: Callable[[RunConfig, object], RunConfig],
                       key: str) -> AblationSummary:
        summary = AblationSummary(what, self.task, self.metric, self.cfg.ablation.seeds)
        for value in values:
            row = AblationRow({key: value}, extra={'recon-MSE': []})
            for seed in self.cfg.ablation.seeds:
                cfg = apply(self.cfg.with_seed(seed), value)
                tag = f"{what}_{value}_seed{seed}"
                checkpoint, pre = self.pretrained(cfg, tag)
                row.extra['recon-MSE'].extend(r.value for r in pre.final)
                result = self.finetuned(cfg, checkpoint, 'full', tag)
                row.values.append(result.primary(self.task))
                ablation_logger.info(f"{what}={value} seed={seed} {self.metric}={row.values[-1]:.4f}",
                                     extra={'ablation': what, 'value': value, 'seed': seed})
            summary.rows.append(row)
        return summary

    def mask_strategy(self) -> AblationSummary:
        return self._pretrain_grid('mask-strategy', self.cfg.ablation.mask_strategies,
                                   lambda c, v: replace(c, pretrain=replace(c.pretrain, mask_strategy=v)), 'strategy')

    def mask_ratio(self) -> AblationSummary:
        return self._pretrain_grid('mask-ratio', self.cfg.ablation.mask_ratios,
                                   lambda c, v: replace(c, pretrain=replace(c.pretrain, mask_ratio=v)), 'ratio')

    def decoder_depth(self) -> AblationSummary:
        return self._pretrain_grid('decoder-depth', self.cfg.ablation.decoder_depths,
                                   lambda c, v: c.with_decoder_layers(v), 'layers')

    def pretrain_steps(self) -> AblationSummary:
        base = self.cfg.pretrain.steps
        scaled = [int(round(base * s)) for s in self.cfg.ablation.pretrain_step_scales]
        return self._pretrain_grid('pretrain-steps', scaled,
                                   lambda c, v: replace(c, pretrain=replace(c.pretrain, steps=v)), 'steps')

    def load_policy(self) -> AblationSummary:
        summary = AblationSummary('load-policy', self.task, self.metric, self.cfg.ablation.seeds)
        rows = {p: AblationRow({'policy': p}) for p in self.cfg.ablation.load_policies}
        for seed in self.cfg.ablation.seeds:
            cfg = self.cfg.with_seed(seed)
            checkpoint, _ = self.pretrained(cfg, f"load-policy_seed{seed}")
            for policy, row in rows.items():
                result = self.finetuned(cfg, checkpoint, policy, f"load-policy_{policy}_seed{seed}")
                row.values.append(result.primary(self.task))
        summary.rows.extend(rows.values())
        return summary

    def data_frac(self) -> AblationSummary:
        summary = AblationSummary('data-frac', self.task, self.metric, self.cfg.ablation.seeds)
        rows = {(f, p): AblationRow({'data_frac': f, 'policy': p})
                for f in self.cfg.ablation.data_fracs for p in ('full', 'none')}
        for seed in self.cfg.ablation.seeds:
            cfg = self.cfg.with_seed(seed)
            checkpoint, _ = self.pretrained(cfg, f"data-frac_seed{seed}")
            for (frac, policy), row in rows.items():
                result = self.finetuned(cfg, checkpoint, policy, f"data-frac_{frac}_{policy}_seed{seed}",
                                        data_frac=frac)
                row.values.append(result.primary(self.task))
        summary.rows.extend(rows.values())
        return summary

    def convergence(self) -> AblationSummary:
        """
        Full vs backbone-only loading with periodic evaluation

        ``steps_to_match`` is the fraction of the budget the full arm needs to
        reach the backbone arm's final value (1.0 when it never does).
        """
        summary = AblationSummary('convergence', self.task, self.metric, self.cfg.ablation.seeds)
        steps = self.cfg.finetune.steps
        eval_every = self.cfg.finetune.eval_every or max(1, steps // 10)
        higher = HIGHER_IS_BETTER[self.metric]
        rows = {p: AblationRow({'policy': p}, extra={'steps_to_match': []}) for p in ('full', 'backbone')}
        curve_rows = []
        for seed in self.cfg.ablation.seeds:
            cfg = self.cfg.with_seed(seed)
            checkpoint, _ = self.pretrained(cfg, f"convergence_seed{seed}")
            curves = {}
            for policy, row in rows.items():
                result = self.finetuned(cfg, checkpoint, policy, f"convergence_{policy}_seed{seed}",
                                        eval_every=eval_every)
                curves[policy] = result.curve.get(self.task, [])
                row.values.append(result.primary(self.task))
                curve_rows.extend([policy, seed, step, value] for step, value in curves[policy])
            target = rows['backbone'].values[-1]
            for policy, row in rows.items():
                reached = [step for step, value in curves[policy]
                           if (value >= target if higher else value <= target)]
                row.extra['steps_to_match'].append(reached[0] / steps if reached and steps else 1.0)
        summary.rows.extend(rows.values())
        path = self.out_dir / 'convergence_curves.csv'
        with open(path, 'w', encoding='utf-8', newline='') as fh:
            writer = csv.writer(fh, lineterminator='\n')
            writer.writerow(['policy', 'seed', 'step', self.metric])
            writer.writerows([p, s, st, format_value(v)] for p, s, st, v in curve_rows)
        summary.files.append(path)
        return summary


def run_ablation(what: str, cfg: RunConfig, out_dir) -> AblationSummary:
    """Run the grid named ``what`` and write ``<out_dir>/summary.csv``"""
    if what not in ABLATIONS:
        raise ConfigError(f"Unknown ablation: {what}", 'what', [f"choose one of {', '.join(ABLATIONS)}"])
    runner = AblationRunner(cfg, Path(out_dir))
    summary = getattr(runner, what.replace('-', '_'))()
    summary.write_csv(Path(out_dir) / 'summary.csv')
    return summary
