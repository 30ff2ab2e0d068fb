"""Random network instance generation: node placement, task/machine assignment, fading."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ScenarioConfig

# Stream labels: each kind of randomness gets its own generator derived from
# (seed, label) so that, e.g., sweeping the number of AVs never perturbs the
# fading draws of the nodes that are present in both instances.
_STREAMS = {
    "sbs_positions": 1,
    "av_positions": 2,
    "tasks": 3,
    "machines": 4,
    "fading_dl": 5,
    "fading_ul": 6,
    "execution": 7,
}


def stream(seed: int, label: str, *extra: int) -> np.random.Generator:
    """Named RNG stream: deterministic function of (seed, label, extra indices)."""
    code = _STREAMS[label]
    return np.random.default_rng(np.random.SeedSequence(entropy=[int(seed), code, *extra]))


@dataclass(frozen=True)
class Topology:
    """One frozen network instance.

    Fading gains are linear Rayleigh power gains, drawn once per instance and
    held constant for every packet of the run. fading_dl is indexed
    [av, sbs, subchannel]; fading_ul is [av, sbs] on the shared uplink subchannel.
    Immutable after generation; safe to share across parallel workers.
    """

    sbs_positions: np.ndarray  # (N, 2) meters
    av_positions: np.ndarray  # (M, 2) meters
    av_task: np.ndarray  # (M,) task ids
    sbs_machine: np.ndarray  # (N,) machine ids
    fading_dl: np.ndarray  # (M, N, K) linear
    fading_ul: np.ndarray  # (M, N) linear

    @property
    def n_sbs(self) -> int:
        return self.sbs_positions.shape[0]

    @property
    def n_av(self) -> int:
        return self.av_positions.shape[0]

    def distance(self, m: int, n: int) -> float:
        return float(np.hypot(*(self.av_positions[m] - self.sbs_positions[n])))

    def distances(self) -> np.ndarray:
        """(M, N) matrix of AV-to-SBS distances."""
        d = self.av_positions[:, None, :] - self.sbs_positions[None, :, :]
        return np.hypot(d[..., 0], d[..., 1])


def path_loss(d: float, config: ScenarioConfig) -> float:
    """Log-distance path loss as a linear power gain; distance is clamped below 1 m."""
    d_eff = max(float(d), 1.0)
    loss_db = config.pathloss_ref_db + 10.0 * config.pathloss_exponent * np.log10(d_eff)
    return float(10.0 ** (-loss_db / 10.0))


def path_gains(topology: Topology, config: ScenarioConfig) -> np.ndarray:
    """(M, N) matrix of linear path gains."""
    d = np.maximum(topology.distances(), 1.0)
    loss_db = config.pathloss_ref_db + 10.0 * config.pathloss_exponent * np.log10(d)
    return 10.0 ** (-loss_db / 10.0)


def generate_topology(config: ScenarioConfig) -> Topology:
    """Draw a network instance from the config; deterministic given (config, seed)."""
    config.validate()
    n, m, k = config.n_sbs, config.n_av, config.n_subchannels
    seed = config.seed

    sbs_pos = stream(seed, "sbs_positions").uniform(0.0, config.area_side, size=(n, 2))
    av_pos = stream(seed, "av_positions").uniform(0.0, config.area_side, size=(m, 2))

    task_ids = np.array([t.id for t in config.task_catalog])
    av_task = task_ids[stream(seed, "tasks").integers(0, len(task_ids), size=m)]

    machine_ids = np.array([mc.id for mc in config.machine_catalog])
    sbs_machine = machine_ids[stream(seed, "machines").integers(0, len(machine_ids), size=n)]

    # Unit-mean exponential = Rayleigh power gain.
    fading_dl = stream(seed, "fading_dl").exponential(1.0, size=(m, n, k))
    fading_ul = stream(seed, "fading_ul").exponential(1.0, size=(m, n))

    return Topology(
        sbs_positions=sbs_pos,
        av_positions=av_pos,
        av_task=av_task,
        sbs_machine=sbs_machine,
        fading_dl=fading_dl,
        fading_ul=fading_ul,
    )
