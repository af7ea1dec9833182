"""
CSV datasets, truth files, and the plain-text MDP table
"""
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from loguru import logger

from dfiv.exceptions import InvalidSpecError, MissingDataError
from dfiv.models.iv import EvaluationGrid, IvDataset, SyntheticData
from dfiv.models.mdp import MdpSpec, TransitionDataset
from dfiv.storage.results import atomic_write

PathLike = Union[str, Path]


def _sibling(path: PathLike, suffix: str) -> Path:
    path = Path(path)
    return path.with_name(f"{path.stem}.{suffix}.csv")


def _unique(names: List[str]) -> List[str]:
    return list(dict.fromkeys(names))


def dataset_frame(data: SyntheticData) -> pd.DataFrame:
    """
    One row per observation with a ``stage`` column. Shared columns (for
    example t and s, which are both treatment and instrument in the demand
    design) appear once.
    """
    dataset, columns = data.dataset, data.columns
    if not dataset.has_joint:
        raise MissingDataError("only fully observed datasets can be written")
    names = _unique(columns["x"] + columns["z"] + columns.get("o", []))
    frames = []
    for stage, x, z, o, y in (
        (1, dataset.stage1_x, dataset.stage1_z, dataset.stage1_o, dataset.stage1_y),
        (2, dataset.stage2_x, dataset.stage2_z, dataset.stage2_o, dataset.stage2_y),
    ):
        frame = pd.DataFrame({"stage": np.full(len(y), stage, dtype=np.int64), "y": y})
        for block, block_names in ((x, columns["x"]), (z, columns["z"]), (o, columns.get("o", []))):
            if block is None:
                continue
            for index, name in enumerate(block_names):
                frame[name] = block[:, index]
        frames.append(frame[["stage", "y", *names]])
    return pd.concat(frames, ignore_index=True)


def _write_frame(frame: pd.DataFrame, path: PathLike) -> Path:
    with atomic_write(path) as handle:
        frame.to_csv(handle, index=False, float_format="%.17g")
    return Path(path)


def write_dataset(data: SyntheticData, path: PathLike) -> Dict[str, Path]:
    """Writes the observed data, the hidden truth (``*.truth.csv``) and the evaluation grid (``*.grid.csv``)."""
    written = {"data": _write_frame(dataset_frame(data), path)}
    if data.hidden:
        written["truth"] = _write_frame(pd.DataFrame(data.hidden), _sibling(path, "truth"))
    grid = data.test_grid
    grid_names = grid.columns or [f"x{i}" for i in range(grid.x.shape[1])]
    grid_block = grid.x if grid.o is None else np.hstack([grid.x, grid.o])
    grid_frame = pd.DataFrame(grid_block, columns=grid_names)
    grid_frame["truth"] = grid.truth
    written["grid"] = _write_frame(grid_frame, _sibling(path, "grid"))
    logger.info(f"💾 Dataset written to {path}")
    return written


def read_dataset(
    path: PathLike,
    x_columns: List[str],
    z_columns: List[str],
    o_columns: Optional[List[str]] = None,
) -> IvDataset:
    frame = pd.read_csv(path)
    missing = {"stage", "y", *x_columns, *z_columns, *(o_columns or [])} - set(frame.columns)
    if missing:
        raise InvalidSpecError(f"{path} lacks columns {sorted(missing)}")
    first, second = frame[frame["stage"] == 1], frame[frame["stage"] == 2]

    def block(part: pd.DataFrame, names: Optional[List[str]]):
        return None if not names else part[names].to_numpy(dtype=np.float64)

    return IvDataset(
        stage1_x=block(first, x_columns),
        stage1_z=block(first, z_columns),
        stage2_y=second["y"].to_numpy(dtype=np.float64),
        stage2_z=block(second, z_columns),
        stage1_o=block(first, o_columns),
        stage2_o=block(second, o_columns),
        stage1_y=first["y"].to_numpy(dtype=np.float64),
        stage2_x=block(second, x_columns),
    )


def read_grid(path: PathLike, x_columns: List[str], o_columns: Optional[List[str]] = None) -> EvaluationGrid:
    frame = pd.read_csv(path)
    return EvaluationGrid(
        x=frame[x_columns].to_numpy(dtype=np.float64),
        truth=frame["truth"].to_numpy(dtype=np.float64),
        o=frame[o_columns].to_numpy(dtype=np.float64) if o_columns else None,
        columns=list(x_columns) + list(o_columns or []),
    )


# MDPs ----------------------------------------------------------------------


def write_mdp(mdp: MdpSpec, path: PathLike) -> Path:
    """Header lines ``# key=value`` then one ``s a s' prob mean_reward`` row per entry."""
    lines = [
        f"# n_states={mdp.n_states}",
        f"# n_actions={mdp.n_actions}",
        f"# gamma={mdp.gamma!r}",
        f"# reward_noise_sd={mdp.reward_noise_sd!r}",
        f"# action_noise={mdp.action_noise!r}",
        "# initial=" + ",".join(repr(float(v)) for v in mdp.initial),
        "s a s_next prob mean_reward",
    ]
    for s in range(mdp.n_states):
        for a in range(mdp.n_actions):
            for s_next in range(mdp.n_states):
                prob = float(mdp.transitions[s, a, s_next])
                reward = float(mdp.reward_means[s, a, s_next])
                lines.append(f"{s} {a} {s_next} {prob!r} {reward!r}")
    with atomic_write(path) as handle:
        handle.write("\n".join(lines) + "\n")
    return Path(path)


def read_mdp(path: PathLike) -> MdpSpec:
    header: Dict[str, str] = {}
    rows: List[Tuple[int, int, int, float, float]] = []
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            header[key.strip()] = value.strip()
            continue
        if line.startswith("s "):
            continue
        s, a, s_next, prob, reward = line.split()
        rows.append((int(s), int(a), int(s_next), float(prob), float(reward)))
    try:
        S, A = int(header["n_states"]), int(header["n_actions"])
    except KeyError as e:
        raise InvalidSpecError(f"{path} lacks header {e}") from e
    transitions = np.zeros((S, A, S))
    rewards = np.zeros((S, A, S))
    for s, a, s_next, prob, reward in rows:
        transitions[s, a, s_next] = prob
        rewards[s, a, s_next] = reward
    return MdpSpec(
        transitions=transitions,
        reward_means=rewards,
        initial=np.asarray([float(v) for v in header["initial"].split(",")]),
        gamma=float(header["gamma"]),
        reward_noise_sd=float(header.get("reward_noise_sd", 0.0)),
        action_noise=float(header.get("action_noise", 0.0)),
    )


def write_transitions(data: TransitionDataset, path: PathLike) -> Path:
    frame = pd.DataFrame(
        {"s": data.states, "a": data.actions, "r": data.rewards, "s_next": data.next_states}
    )
    return _write_frame(frame, path)


def read_transitions(path: PathLike, n_states: int, n_actions: int, gamma: float) -> TransitionDataset:
    frame = pd.read_csv(path)
    return TransitionDataset(
        states=frame["s"].to_numpy(),
        actions=frame["a"].to_numpy(),
        rewards=frame["r"].to_numpy(dtype=np.float64),
        next_states=frame["s_next"].to_numpy(),
        n_states=n_states,
        n_actions=n_actions,
        gamma=gamma,
    )
