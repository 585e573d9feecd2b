"""Experiment harnesses: the first-kernel sweep and the 8-row toggle grid.

Every cell trains a fresh model from the same seed on the same split, so
the only varying factor is the toggled component. Rows are plain dicts;
the format_* helpers render the documented CSV schemas.
"""

from dataclasses import replace

from .model import LogoNetConfig, default_modes, init_model
from .retrieval import evaluate
from .training import TrainConfig, train

# (ca, sa, large_kernel) toggle order of the reference ablation table
ABLATION_GRID = ((0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1),
                 (1, 1, 0), (1, 0, 1), (0, 1, 1), (1, 1, 1))


def _run_cell(config: LogoNetConfig, manifest, train_cfg: TrainConfig):
    model = init_model(config, train_cfg.seed)
    train(model, manifest, train_cfg)
    report = evaluate(model, manifest)
    return {k: report.overall_acc(k) for k in (1, 5, 10)}


def ablation_config(base_config: LogoNetConfig, ca: int, sa: int,
                    large_kernel: int, *, large: int = 6,
                    small: int = 3) -> LogoNetConfig:
    """Config for one toggle row; attention placement by what is enabled.

    Both attentions on means the default placement; a single one applies at
    every stage; neither disables attention entirely. Large-kernel off pins
    the first conv at the small kernel.
    """
    n = len(base_config.stage_channels)
    if ca and sa:
        modes = default_modes(n)
    elif ca:
        modes = ("ca_only",) * n
    elif sa:
        modes = ("sa_only",) * n
    else:
        modes = ("none",) * n
    return replace(base_config, attention_modes=modes,
                   first_kernel=large if large_kernel else small)


def kernel_sweep(base_config: LogoNetConfig, kernel_list, manifest,
                 train_cfg: TrainConfig):
    """One row per first-conv kernel size, everything else held fixed."""
    rows = []
    for kernel in kernel_list:
        if not 1 <= kernel <= 9:
            raise ValueError(f"kernel {kernel} outside 1..9")
        config = replace(base_config, first_kernel=kernel)
        try:
            accs = _run_cell(config, manifest, train_cfg)
        except Exception as exc:
            raise RuntimeError(f"kernel {kernel} run failed: {exc}") from exc
        rows.append({"kernel": kernel, "acc1": accs[1], "acc5": accs[5],
                     "acc10": accs[10]})
    return rows


def ablate(base_config: LogoNetConfig, manifest, train_cfg: TrainConfig, *,
           large: int = 6, small: int = 3):
    """The 8-row grid over channel attention, spatial attention, and the
    large first kernel. The baseline column marks the always-present
    backbone, mirroring the reference table, so it is 1 on every row."""
    rows = []
    for ca, sa, lk in ABLATION_GRID:
        config = ablation_config(base_config, ca, sa, lk,
                                 large=large, small=small)
        try:
            accs = _run_cell(config, manifest, train_cfg)
        except Exception as exc:
            raise RuntimeError(
                f"ablation row ca={ca} sa={sa} large_kernel={lk} failed: "
                f"{exc}") from exc
        rows.append({"baseline": 1, "ca": ca, "sa": sa, "large_kernel": lk,
                     "acc1": accs[1], "acc5": accs[5], "acc10": accs[10]})
    return rows


def format_sweep_csv(rows) -> str:
    lines = ["kernel,acc1,acc5,acc10"]
    lines += [f"{r['kernel']},{r['acc1']:.4f},{r['acc5']:.4f},{r['acc10']:.4f}"
              for r in rows]
    return "\n".join(lines) + "\n"


def format_ablate_csv(rows) -> str:
    lines = ["baseline,ca,sa,large_kernel,acc1,acc5,acc10"]
    lines += [f"{r['baseline']},{r['ca']},{r['sa']},{r['large_kernel']},"
              f"{r['acc1']:.4f},{r['acc5']:.4f},{r['acc10']:.4f}"
              for r in rows]
    return "\n".join(lines) + "\n"
