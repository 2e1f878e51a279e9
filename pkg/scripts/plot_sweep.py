"""
Plot nRMSE against the number of Euler sampler steps from the sweep.csv written by `pdet eval --sweep`.

    python scripts/plot_sweep.py runs/default/report/sweep.csv -o sweep.png
"""
import argparse
import csv
from collections import defaultdict

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402


def read_sweep(path):
    curves = defaultdict(list)
    with open(path, 'r', encoding='utf-8', newline='') as handle:
        for row in csv.DictReader(handle):
            key = (row['dataset'], int(row['horizon']))
            curves[key].append((int(row['sampler_steps']), float(row['nrmse'])))
    return {key: sorted(points) for key, points in curves.items()}


def plot(curves, out, log_scale=True):
    fig, ax = plt.subplots(figsize=(5, 4), dpi=120)
    for (dataset, horizon), points in sorted(curves.items()):
        steps, scores = zip(*points)
        ax.plot(steps, scores, marker='o', label=f'{dataset} @ {horizon}')
    ax.set_xlabel('sampler steps')
    ax.set_ylabel('nRMSE')
    if log_scale:
        ax.set_xscale('log')
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)
    return out


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[1])
    parser.add_argument('sweep', help='sweep.csv from the eval report directory')
    parser.add_argument('-o', '--out', default='sweep.png')
    parser.add_argument('--linear', action='store_true', help='linear x axis')
    args = parser.parse_args(argv)
    plot(read_sweep(args.sweep), args.out, log_scale=not args.linear)
    return 0


if __name__ == '__main__':
    raise SystemExit(main())
