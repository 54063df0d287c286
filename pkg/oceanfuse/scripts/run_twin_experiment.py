#!/usr/bin/env python3
"""Run the whole twin experiment and summarize the headline checks.

world-gen -> obs-sim -> train (full, thinned) -> assimilate (full, thinned,
interp) -> eval -> forecast-verify, then one summary CSV under reports/.
"""
import argparse
import logging
import sys
from pathlib import Path

import pandas as pd

# Add parent directory to path for imports
sys.path.append(str(Path(__file__).resolve().parents[2]))

from oceanfuse.cli.main import main as cli_main  # noqa: E402
from oceanfuse.config import ExperimentConfig  # noqa: E402

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

STEPS = [
    ['world-gen'],
    ['obs-sim'],
    ['train', '--mode', 'full'],
    ['train', '--mode', 'thinned'],
    ['assimilate', '--mode', 'full'],
    ['assimilate', '--mode', 'thinned'],
    ['assimilate', '--mode', 'interp'],
    ['eval', '--mode', 'full'],
    ['eval', '--mode', 'thinned'],
    ['forecast-verify', '--mode', 'full'],
]


def report_path(config: ExperimentConfig, name: str) -> Path:
    return (Path(config.run.out) / 'reports'
            / f'{config.run.experiment_id}_{name}_{config.config_hash()[:12]}.csv')


def summarize(config: ExperimentConfig) -> pd.DataFrame:
    """Direction-of-effect checks read back from the written reports"""
    rows = []
    full = pd.read_csv(report_path(config, 'ratios_full')).set_index('variable')
    thinned = pd.read_csv(report_path(config, 'ratios_thinned')).set_index('variable')
    for var in ('T', 'SSH'):
        rows.append({'check': f'rmse_reduction_{var}', 'value': full.loc[var, 'rmse_reduction'],
                     'passed': full.loc[var, 'rmse_reduction'] >= 0.05})
    wins = int((full['rmse_reduction'] >= thinned['rmse_reduction']).loc[['T', 'S', 'U', 'V', 'SSH']].sum())
    rows.append({'check': 'full_beats_thinned', 'value': wins, 'passed': wins >= 3})

    fidelity_path = report_path(config, 'fidelity_full')
    if fidelity_path.exists():
        fidelity = pd.read_csv(fidelity_path).set_index(['variable', 'field'])['log_power_error']
        for var in ('SSH', 'SPEED'):
            a, b = fidelity.loc[(var, 'analysis')], fidelity.loc[(var, 'interp_analysis')]
            rows.append({'check': f'spectral_fidelity_{var}', 'value': a - b, 'passed': a < b})

    forecast = pd.read_csv(report_path(config, 'forecast_full'))
    early = forecast[(forecast['lead'] >= 1) & (forecast['lead'] <= 5)]
    mean_ratio = early.groupby('lead')['ratio'].mean()
    rows.append({'check': 'forecast_gain_leads_1_5', 'value': float(mean_ratio.max()),
                 'passed': bool((mean_ratio < 0).all())})
    return pd.DataFrame(rows)


def main():
    parser = argparse.ArgumentParser(description='Run the twin experiment end to end')
    parser.add_argument('--config', type=Path)
    parser.add_argument('--out', type=str)
    parser.add_argument('--threads', type=int, default=8)
    parser.add_argument('--sequential', action='store_true')
    args = parser.parse_args()

    common = ['--threads', str(args.threads)]
    if args.config:
        common += ['--config', str(args.config)]
    if args.out:
        common += ['--out', args.out]
    if args.sequential:
        common.append('--sequential')

    for step in STEPS:
        logger.info(f"Running {' '.join(step)}")
        code = cli_main(step + common)
        if code != 0:
            logger.error(f"{step[0]} failed with exit code {code}")
            return code

    run = {'threads': str(args.threads)}
    if args.out:
        run['out'] = args.out
    if args.sequential:
        run['sequential'] = 'True'
    config = ExperimentConfig.from_file(args.config, {'run': run})
    summary = summarize(config)
    path = report_path(config, 'acceptance')
    summary.to_csv(path, index=False)
    logger.info(f"Twin experiment summary written to {path}")
    for row in summary.itertuples():
        logger.info(f"{row.check}: {row.value:.4g} {'ok' if row.passed else 'FAILED'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
